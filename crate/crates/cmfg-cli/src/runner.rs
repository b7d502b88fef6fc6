//! Run-kind dispatch: executes the requested pipeline and renders the
//! artifact set for the bundle.

use std::fmt::Write as _;

use cmfg::diagnostics::DiagnosticReport;
use cmfg::fokker_planck::{self, MassHistory};
use cmfg::linearized;
use cmfg::master_field::{self, MasterOptions};
use cmfg::mfg_solver::{self, MfgSolution};
use cmfg::Result;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Problem, RunSpec, ScenarioConfig};
use crate::output::{self, Artifact};

#[derive(Serialize)]
struct SolutionReport<'a> {
    iterations: usize,
    fixed_point_gap: f64,
    clearing_residual: f64,
    residual_history: &'a [f64],
    value_bound: f64,
    gradient_bound: f64,
    aggregate_bound: f64,
    gradient_clamp_defect: f64,
    mass_clamp_defect: f64,
    assumptions: &'a DiagnosticReport,
    bounds: &'a DiagnosticReport,
}

fn solution_artifacts(sol: &MfgSolution) -> Result<Vec<Artifact>> {
    let report = SolutionReport {
        iterations: sol.iterations,
        fixed_point_gap: sol.fixed_point_gap,
        clearing_residual: sol.clearing_residual,
        residual_history: &sol.residual_history,
        value_bound: sol.value_bound()?,
        gradient_bound: sol.gradient_bound()?,
        aggregate_bound: sol.aggregate_bound()?,
        gradient_clamp_defect: sol.u.grad_clamp_defect,
        mass_clamp_defect: sol.mass.clamp_defect,
        assumptions: &sol.assumptions,
        bounds: &sol.bounds,
    };
    Ok(vec![
        output::value_csv(sol),
        output::measure_csv("measure.csv", &sol.grid, &sol.m),
        output::aggregate_csv(&sol.grid, &sol.eps, &sol.q_path, &sol.mass, &sol.m.tv()),
        output::slices_csv(sol),
        Artifact::json("solution.json", &report).map_err(io_to_numeric)?,
    ])
}

// rendering failures inside the runner are reported as numeric errors; real
// filesystem errors are handled by the caller
fn io_to_numeric(e: anyhow::Error) -> cmfg::CmfgError {
    cmfg::CmfgError::numeric(format!("artifact rendering failed: {e}"))
}

pub fn execute(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<Artifact>> {
    let p = cfg.build()?;
    match &cfg.run {
        RunSpec::Solve => {
            let sol = mfg_solver::solve_finite(&p.grid, &p.model, &p.eps, p.r, &p.m0, &p.terminal, &p.opts)?;
            solution_artifacts(&sol)
        }
        RunSpec::InfiniteSolve { horizons } => run_infinite(&p, horizons),
        RunSpec::Kernel { ys } => run_kernel(&p, ys),
        RunSpec::MasterResidual { alpha, y_stride } => run_master(&p, *alpha, *y_stride),
        RunSpec::UniquenessProbe { n_starts } => run_probe(&p, *n_starts, seed),
        RunSpec::FpValidate => run_fp_validate(&p),
        RunSpec::McValidate { n_paths, dt_mc } => run_mc_validate(&p, *n_paths, *dt_mc, seed),
    }
}

#[derive(Serialize)]
struct InfiniteReport<'a> {
    horizons: &'a [f64],
    gaps: &'a [f64],
    report: &'a DiagnosticReport,
}

fn run_infinite(p: &Problem, horizons: &[f64]) -> Result<Vec<Artifact>> {
    let inf = mfg_solver::solve_infinite(&p.grid, &p.model, p.eps.eps0(), p.r, &p.m0, horizons, &p.opts)?;
    let mut s = String::from("horizon,i,x,u0\n");
    for (t_h, sol) in inf.horizons.iter().zip(&inf.solutions) {
        let row = sol.u.row(0);
        for i in 0..=p.grid.nx + 1 {
            let _ = writeln!(s, "{},{},{},{}", t_h, i, p.grid.x(i), row[i]);
        }
    }
    let mut gaps = String::from("horizon_lo,horizon_hi,gap\n");
    for (w, gap) in inf.horizons.windows(2).zip(&inf.gaps) {
        let _ = writeln!(gaps, "{},{},{}", w[0], w[1], gap);
    }
    let report = InfiniteReport { horizons: &inf.horizons, gaps: &inf.gaps, report: &inf.report };
    let mut artifacts = vec![
        Artifact::new("u0_slices.csv", s.into_bytes()),
        Artifact::new("gaps.csv", gaps.into_bytes()),
        Artifact::json("infinite.json", &report).map_err(io_to_numeric)?,
    ];
    if let Some(last) = inf.solutions.last() {
        artifacts.extend(solution_artifacts(last)?);
    }
    Ok(artifacts)
}

#[derive(Serialize)]
struct KernelReport {
    ys: Vec<f64>,
    iterations: Vec<usize>,
    fixed_point_gaps: Vec<f64>,
    coefficient_ranges: DiagnosticReport,
}

fn run_kernel(p: &Problem, ys: &[f64]) -> Result<Vec<Artifact>> {
    if ys.is_empty() {
        return Err(cmfg::CmfgError::domain("kernel run needs at least one y"));
    }
    let sol = mfg_solver::solve_finite(&p.grid, &p.model, &p.eps, p.r, &p.m0, &p.terminal, &p.opts)?;
    let solves: Vec<_> = ys
        .par_iter()
        .map(|&y| linearized::master_derivative_kernel(&sol, y, &p.opts))
        .collect::<Result<Vec<_>>>()?;
    let slices: Vec<Vec<f64>> = solves.iter().map(|l| l.initial_slice()).collect();
    let coeffs = linearized::build_coeffs(linearized::CoeffMode::Derivative, &sol, None)?;
    let report = KernelReport {
        ys: ys.to_vec(),
        iterations: solves.iter().map(|l| l.iterations).collect(),
        fixed_point_gaps: solves.iter().map(|l| l.fixed_point_gap).collect(),
        coefficient_ranges: linearized::coeff_range_report(&coeffs, &p.model, p.eps.eps0()),
    };
    Ok(vec![
        output::kernel_csv(&p.grid, ys, &slices),
        Artifact::json("kernel.json", &report).map_err(io_to_numeric)?,
    ])
}

fn run_master(p: &Problem, alpha: f64, y_stride: usize) -> Result<Vec<Artifact>> {
    let sol = mfg_solver::solve_finite(&p.grid, &p.model, &p.eps, p.r, &p.m0, &p.terminal, &p.opts)?;
    let opts = MasterOptions { y_stride, ..Default::default() };
    let eval = master_field::master_residual(&sol, alpha, &opts)?;
    Ok(vec![
        output::residual_csv(&p.grid, &eval.residual),
        output::kernel_csv(&p.grid, &eval.y_samples, &eval.kernel),
        Artifact::json("master.json", &eval).map_err(io_to_numeric)?,
    ])
}

#[derive(Serialize)]
struct ProbeReport<'a> {
    n_starts: usize,
    seed: u64,
    spread_q: f64,
    spread_u0: f64,
    report: &'a DiagnosticReport,
}

fn run_probe(p: &Problem, n_starts: usize, seed: u64) -> Result<Vec<Artifact>> {
    let probe = mfg_solver::uniqueness_probe(&p.grid, &p.model, &p.eps, p.r, &p.m0, &p.terminal, n_starts, seed, &p.opts)?;
    let mut s = String::from("start,k,t,q\n");
    for (j, path) in probe.final_paths.iter().enumerate() {
        for (k, q) in path.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{}", j, k, p.grid.t(k), q);
        }
    }
    let report = ProbeReport {
        n_starts,
        seed,
        spread_q: probe.spread_q,
        spread_u0: probe.spread_u0,
        report: &probe.report,
    };
    Ok(vec![
        Artifact::new("qpaths.csv", s.into_bytes()),
        Artifact::json("probe.json", &report).map_err(io_to_numeric)?,
    ])
}

#[derive(Serialize)]
struct FpReport {
    linf_density_error: f64,
    l1_mass_error: f64,
    eta_fd_end: f64,
    eta_exact_end: f64,
    mass_identity_gap: f64,
    clamp_defect: f64,
}

fn mass_identity_gap(mass: &MassHistory) -> f64 {
    let start = mass.eta[0];
    mass.eta
        .iter()
        .zip(&mass.absorbed_left)
        .zip(&mass.lost_right)
        .map(|((e, a), l)| (e + a + l - start).abs())
        .fold(0.0, f64::max)
}

fn run_fp_validate(p: &Problem) -> Result<Vec<Artifact>> {
    let grid = p.grid;
    let (traj, mass) = fokker_planck::fp_solve(&grid, &p.m0, &|_, _| 0.0)?;
    let t_end = grid.t_h;
    let exact = fokker_planck::heat_solution(&p.m0, t_end, grid.sigma)?;
    let fd_end = traj.row(grid.nt);
    let dx = grid.dx();

    let mut s = String::from("i,x,density_fd,density_images,abs_err\n");
    let mut linf = 0.0f64;
    let mut l1 = 0.0f64;
    for i in 1..=grid.nx {
        let d_fd = fd_end[i - 1] / dx;
        let d_ex = exact.masses[i - 1] / dx;
        let err = (d_fd - d_ex).abs();
        linf = linf.max(err);
        l1 += (fd_end[i - 1] - exact.masses[i - 1]).abs();
        let _ = writeln!(s, "{},{},{},{},{}", i, grid.x(i), d_fd, d_ex, err);
    }

    let mut eta_csv = String::from("k,t,eta_fd,eta_exact\n");
    for k in 0..=grid.nt {
        let t = grid.t(k);
        let eta_exact = fokker_planck::mass_function_heat(&p.m0, t)?;
        let _ = writeln!(eta_csv, "{},{},{},{}", k, t, mass.eta[k], eta_exact);
    }

    let report = FpReport {
        linf_density_error: linf,
        l1_mass_error: l1,
        eta_fd_end: mass.eta[grid.nt],
        eta_exact_end: fokker_planck::mass_function_heat(&p.m0, t_end)?,
        mass_identity_gap: mass_identity_gap(&mass),
        clamp_defect: mass.clamp_defect,
    };
    Ok(vec![
        Artifact::new("fp_error.csv", s.into_bytes()),
        Artifact::new("fp_eta.csv", eta_csv.into_bytes()),
        Artifact::json("fp_report.json", &report).map_err(io_to_numeric)?,
    ])
}

#[derive(Serialize)]
struct McReport {
    n_paths: usize,
    dt_mc: f64,
    seed: u64,
    eta_mc_end: f64,
    eta_exact_end: f64,
    stderr_end: f64,
    z_end: f64,
}

fn run_mc_validate(p: &Problem, n_paths: usize, dt_mc: f64, seed: u64) -> Result<Vec<Artifact>> {
    let grid = p.grid;
    let mc = fokker_planck::mc_absorbed_sde(&p.m0, &|_, _| 0.0, grid.sigma, n_paths, dt_mc, grid.t_h, seed)?;
    let total = p.m0.total_mass();

    let mut s = String::from("k,t,eta_mc,eta_exact\n");
    let mut eta_exact_end = 0.0;
    for (k, (&t, &eta_mc)) in mc.times.iter().zip(&mc.survival).enumerate() {
        let eta_exact = fokker_planck::mass_function_heat(&p.m0, t)?;
        eta_exact_end = eta_exact;
        let _ = writeln!(s, "{},{},{},{}", k, t, eta_mc, eta_exact);
    }
    let eta_mc_end = *mc.survival.last().unwrap();
    let p_hat = (eta_mc_end / total).clamp(0.0, 1.0);
    let stderr_end = total * (p_hat * (1.0 - p_hat) / n_paths as f64).sqrt();
    let z_end = if stderr_end > 0.0 { (eta_mc_end - eta_exact_end).abs() / stderr_end } else { f64::INFINITY };

    let report = McReport { n_paths, dt_mc, seed, eta_mc_end, eta_exact_end, stderr_end, z_end };
    Ok(vec![
        Artifact::new("mc.csv", s.into_bytes()),
        Artifact::json("mc_report.json", &report).map_err(io_to_numeric)?,
    ])
}

/// Structural assumption report for `--validate-only`.
pub fn validate_only(cfg: &ScenarioConfig) -> Result<Vec<Artifact>> {
    let p = cfg.build()?;
    let report = mfg_solver::check_assumptions(&p.model, p.grid.sigma, p.r, p.eps.eps0(), p.terminal.c1, p.terminal.c3)?;
    Ok(vec![Artifact::json("assumptions.json", &report).map_err(io_to_numeric)?])
}
