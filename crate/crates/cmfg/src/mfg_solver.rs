//! Coupled equilibrium solver: backward value sweep, forward measure sweep,
//! and per-time market clearing, iterated as a damped fixed point on the
//! aggregate path.

use crate::consts::{DEFAULT_DAMPING, DEFAULT_FP_TOL, DEFAULT_MAX_ITER};
use crate::diagnostics::{self, DiagnosticReport, Relation};
use crate::error::{CmfgError, Result};
use crate::fokker_planck::{fp_solve, MassHistory};
use crate::grid::Grid;
use crate::hamiltonian::{self, HamiltonianPoint, PriceModel};
use crate::hjb::{self, EpsilonSchedule, TerminalData, ValueField};
use crate::measure::{MeasureTrajectory, MeasureVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> SolveOptions {
        SolveOptions { damping: DEFAULT_DAMPING, tol: DEFAULT_FP_TOL, max_iter: DEFAULT_MAX_ITER }
    }
}

/// Converged equilibrium triple plus derived fields and reports.
/// `gradients` holds the clamped backward-difference gradient and `drift`
/// the equilibrium velocity `dH/da` at every time node and interior node;
/// both are the exact arrays the forward sweep and the clearing used.
#[derive(Debug, Clone)]
pub struct MfgSolution {
    pub grid: Grid,
    pub model: PriceModel,
    pub eps: EpsilonSchedule,
    pub r: f64,
    pub terminal: TerminalData,
    pub u: ValueField,
    pub m: MeasureTrajectory,
    pub q_path: Vec<f64>,
    pub gradients: Array2<f64>,
    pub drift: Array2<f64>,
    pub mass: MassHistory,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    /// residual of the clearing equation at the final triple, every time node
    pub clearing_residual: f64,
    /// distance between the aggregate path used by the final backward sweep
    /// and the one cleared from the resulting fields
    pub fixed_point_gap: f64,
    /// structural-regime records (may contain honest failures)
    pub assumptions: DiagnosticReport,
    /// a priori bound checks on the computed solution (expected to pass)
    pub bounds: DiagnosticReport,
}

impl MfgSolution {
    pub fn value_bound(&self) -> Result<f64> {
        let h0 = hamiltonian::hamiltonian_value(&self.model, &HamiltonianPoint::new(0.0, 0.0, 0.0)?)?;
        Ok(h0 / self.r + self.terminal.c1)
    }

    pub fn gradient_bound(&self) -> Result<f64> {
        hjb::gradient_bound(&self.model, self.grid.sigma, self.r, self.terminal.c1, self.terminal.c3)
    }

    pub fn aggregate_bound(&self) -> Result<f64> {
        hamiltonian::q_cap(&self.model, self.eps.eps0())
    }
}

fn smoothness_constant(model: &PriceModel, eps: f64, qbar: f64, grad_cap: f64) -> Result<f64> {
    if model.is_linear() {
        return Ok(2.0);
    }
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for ie in 0..=10 {
        for iq in 0..=10 {
            for ia in 0..=20 {
                let p = HamiltonianPoint::new(
                    eps * ie as f64 / 10.0,
                    qbar * iq as f64 / 10.0,
                    grad_cap * ia as f64 / 20.0,
                )?;
                let d2 = hamiltonian::d2h_da2(model, &p)?;
                if d2 > 0.0 {
                    lo = lo.min(d2);
                    hi = hi.max(d2);
                }
            }
        }
    }
    if !lo.is_finite() || hi == 0.0 {
        return Err(CmfgError::numeric("convexity constant: no interior samples found"));
    }
    Ok(hi.max(1.0 / lo))
}

/// Structural-regime report: the smoothness margin, the discount-threshold
/// constants (at weight index zero, where they are discount-independent), and
/// the uniqueness-regime indicators. Entries record honest comparisons; a
/// failing entry means the configuration sits outside that regime, not that
/// the computation is wrong.
pub fn check_assumptions(
    model: &PriceModel,
    sigma: f64,
    r: f64,
    eps: f64,
    c1: f64,
    c3: f64,
) -> Result<DiagnosticReport> {
    if !(sigma > 0.0) || !(r > 0.0) || !(eps >= 0.0) {
        return Err(CmfgError::domain(format!(
            "assumption check needs sigma > 0, r > 0, eps >= 0; got {sigma}, {r}, {eps}"
        )));
    }
    model.validate_for(eps)?;
    let refs = vec![diagnostics::artifact_ref("params", diagnostics::hash_f64s([sigma, r, eps, c1, c3]))];
    let h0 = hamiltonian::hamiltonian_value(model, &HamiltonianPoint::new(0.0, 0.0, 0.0)?)?;
    let qbar = hamiltonian::q_cap(model, eps)?;
    let rho = model.prudence_bound();
    let c = ((2.0 - rho) / (2.0 + eps - (1.0 + eps) * rho)).max(1.0);
    let pbar = ((rho - 1.0) / (rho - 2.0)).abs().max(1.0);
    let p0 = model.eval(0.0);
    let m_inf = 2.0 * (2.0 / (sigma * sigma * r)).sqrt() * h0;
    let m_fin = hjb::gradient_bound(model, sigma, r, c1, c3)?;
    let c_h = smoothness_constant(model, eps, qbar, m_fin.max(m_inf))?;

    let mut rep = DiagnosticReport::default();
    rep.push_check("smooth_hamiltonian_margin", m_inf, Relation::Le, model.eval(eps * qbar), refs.clone());

    let kappa = 32.0 * (1.0 + c * pbar * eps).powi(2) * qbar * qbar * (8.0f64).ln();
    let kappa0 = 36.0 * (1.0 + c).powi(2) * qbar * qbar;
    let kappa1 = 3200.0 * (qbar + eps * p0 + 1.0).powi(2) * (20.0f64).ln();
    rep.push_check("discount_vs_kappa", r, Relation::Ge, 2.0 * kappa.max(kappa0).max(kappa1), refs.clone());

    let r_star = 1000.0
        * (1.0 + c * pbar * eps)
            .max(1.0 + c * qbar)
            .max(qbar + eps * p0 + 1.0)
            .powi(2);
    rep.push_check("discount_vs_r_star", r, Relation::Ge, r_star, refs.clone());

    let eps_star = 1.0 / (4.0 * c_h * c * (1.0 + qbar) * (c_h * (p0 + 1.0) + pbar));
    rep.push_check("epsilon_vs_eps_star", eps, Relation::Le, eps_star, refs.clone());

    let small_regime = rep.checks[2].pass && rep.checks[3].pass;
    let unique = if model.is_linear() && eps < 2.0 { 1.0 } else if small_regime { 1.0 } else { 0.0 };
    rep.push_check("uniqueness_regime", unique, Relation::Ge, 1.0, refs.clone());

    rep.push_check("aggregate_cap", qbar, Relation::Ge, 0.0, refs.clone());
    rep.push_check("gradient_cap", m_fin, Relation::Ge, 0.0, refs.clone());
    rep.push_check("value_cap", h0 / r + c1, Relation::Ge, 0.0, refs);
    Ok(rep)
}

struct SweepOutput {
    u: ValueField,
    gradients: Array2<f64>,
    drift: Array2<f64>,
    m: MeasureTrajectory,
    mass: MassHistory,
}

fn sweep(
    grid: &Grid,
    model: &PriceModel,
    eps: &EpsilonSchedule,
    r: f64,
    m0: &MeasureVector,
    terminal: &TerminalData,
    q_path: &[f64],
) -> Result<SweepOutput> {
    let u = hjb::hjb_solve(grid, model, eps, q_path, r, terminal)?;
    let (nt, nx) = (grid.nt, grid.nx);
    let mut gradients = Array2::zeros((nt + 1, nx));
    let mut drift = Array2::zeros((nt + 1, nx));
    for k in 0..=nt {
        let row = u.ux_row(k);
        for (j, &g) in row.iter().enumerate() {
            let a = g.max(0.0);
            gradients[(k, j)] = a;
            let p = HamiltonianPoint::new(eps.value(k), q_path[k], a)?;
            drift[(k, j)] = hamiltonian::dh_da(model, &p)?;
        }
    }
    let (m, mass) = fp_solve(grid, m0, &|k, i| drift[(k, i - 1)])?;
    Ok(SweepOutput { u, gradients, drift, m, mass })
}

fn clear_path(
    grid: &Grid,
    model: &PriceModel,
    eps: &EpsilonSchedule,
    out: &SweepOutput,
) -> Result<Vec<f64>> {
    (0..=grid.nt)
        .into_par_iter()
        .map(|k| {
            let phi: Vec<f64> = out.gradients.row(k).to_vec();
            let mk = out.m.measure_at(k);
            hamiltonian::market_clearing(model, eps.value(k), &phi, &mk)
        })
        .collect()
}

fn max_clearing_residual(
    grid: &Grid,
    model: &PriceModel,
    eps: &EpsilonSchedule,
    out: &SweepOutput,
    q_path: &[f64],
) -> Result<f64> {
    let residuals: Vec<f64> = (0..=grid.nt)
        .into_par_iter()
        .map(|k| {
            let phi: Vec<f64> = out.gradients.row(k).to_vec();
            let mk = out.m.measure_at(k);
            hamiltonian::clearing_residual(model, eps.value(k), q_path[k], &phi, &mk).map(f64::abs)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(residuals.into_iter().fold(0.0, f64::max))
}

fn solve_finite_from(
    grid: &Grid,
    model: &PriceModel,
    eps: &EpsilonSchedule,
    r: f64,
    m0: &MeasureVector,
    terminal: &TerminalData,
    opts: &SolveOptions,
    q_init: Vec<f64>,
) -> Result<MfgSolution> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(CmfgError::domain(format!("discount rate must be positive, got {r}")));
    }
    if !(opts.tol > 0.0) || !(opts.damping > 0.0 && opts.damping <= 1.0) || opts.max_iter == 0 {
        return Err(CmfgError::domain(format!(
            "solver options out of range: damping {}, tol {}, max_iter {}",
            opts.damping, opts.tol, opts.max_iter
        )));
    }
    if !m0.grid.same_mesh(grid) {
        return Err(CmfgError::MeshMismatch("initial measure lives on a different mesh".into()));
    }
    if m0.signed {
        return Err(CmfgError::domain("equilibrium solve needs an unsigned initial measure"));
    }
    if m0.total_mass() > 1.0 + 1e-9 {
        return Err(CmfgError::domain(format!("initial mass {} exceeds one", m0.total_mass())));
    }
    model.validate_for(eps.eps0())?;

    let mut q = q_init;
    let mut theta = opts.damping;
    let mut residual_history: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut last: Option<SweepOutput> = None;

    for _ in 0..opts.max_iter {
        let out = sweep(grid, model, eps, r, m0, terminal, &q)?;
        let q_new = clear_path(grid, model, eps, &out)?;
        let residual = q.iter().zip(&q_new).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if let Some(&prev) = residual_history.last() {
            if residual > prev {
                theta = (0.5 * theta).max(0.05);
            } else {
                theta = (1.4 * theta).min(1.0);
            }
        }
        residual_history.push(residual);
        last = Some(out);
        if residual <= opts.tol {
            q = q_new;
            converged = true;
            break;
        }
        for (qi, ni) in q.iter_mut().zip(&q_new) {
            *qi += theta * (ni - *qi);
        }
    }
    if !converged {
        return Err(CmfgError::Nonconvergence {
            what: "aggregate fixed point".into(),
            iterations: residual_history.len(),
            last: *residual_history.last().unwrap_or(&f64::NAN),
            residual_history,
        });
    }
    drop(last);

    // finishing pass: fields from the converged path, then one exact clearing
    let out = sweep(grid, model, eps, r, m0, terminal, &q)?;
    let q_final = clear_path(grid, model, eps, &out)?;
    let fixed_point_gap = q.iter().zip(&q_final).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let q = q_final;
    let clearing_residual = max_clearing_residual(grid, model, eps, &out, &q)?;

    let assumptions = check_assumptions(model, grid.sigma, r, eps.eps0(), terminal.c1, terminal.c3)?;
    let iterations = residual_history.len();
    let mut sol = MfgSolution {
        grid: *grid,
        model: model.clone(),
        eps: eps.clone(),
        r,
        terminal: terminal.clone(),
        u: out.u,
        m: out.m,
        q_path: q,
        gradients: out.gradients,
        drift: out.drift,
        mass: out.mass,
        iterations,
        residual_history,
        clearing_residual,
        fixed_point_gap,
        assumptions,
        bounds: DiagnosticReport::default(),
    };
    sol.bounds = diagnostics::verify_solution_bounds(&sol)?;
    Ok(sol)
}

/// Equilibrium solve on a finite horizon, starting the aggregate path at
/// half its a priori cap.
pub fn solve_finite(
    grid: &Grid,
    model: &PriceModel,
    eps: &EpsilonSchedule,
    r: f64,
    m0: &MeasureVector,
    terminal: &TerminalData,
    opts: &SolveOptions,
) -> Result<MfgSolution> {
    let q0 = hamiltonian::q_cap(model, eps.eps0())? / 2.0;
    solve_finite_from(grid, model, eps, r, m0, terminal, opts, vec![q0; grid.nt + 1])
}

/// Horizon-extension surrogate for the stationary problem: solve on each
/// horizon with terminal slope `1/T` (so the terminal data washes out as the
/// horizon grows) and record the sup-distance between consecutive initial
/// value slices. `gaps[j]` compares horizons `j` and `j+1`.
pub struct InfiniteSolve {
    pub horizons: Vec<f64>,
    pub solutions: Vec<MfgSolution>,
    pub gaps: Vec<f64>,
    pub report: DiagnosticReport,
}

pub fn solve_infinite(
    grid: &Grid,
    model: &PriceModel,
    eps0: f64,
    r: f64,
    m0: &MeasureVector,
    horizons: &[f64],
    opts: &SolveOptions,
) -> Result<InfiniteSolve> {
    if horizons.len() < 2 {
        return Err(CmfgError::domain("horizon extension needs at least two horizons"));
    }
    for w in horizons.windows(2) {
        if !(w[0] > 0.0) || w[1] <= w[0] {
            return Err(CmfgError::domain("horizons must be positive and strictly increasing"));
        }
    }
    let dt = grid.dt();
    let mut solutions = Vec::with_capacity(horizons.len());
    for &t_h in horizons {
        let nt = (t_h / dt).round().max(1.0) as usize;
        let g = Grid::new(grid.l, grid.nx, t_h, nt, grid.sigma)?;
        let eps = EpsilonSchedule::default_ramp(&g, eps0)?;
        let terminal = hjb::build_terminal(&g, model, 1.0 / t_h)?;
        let m0_t = MeasureVector::from_cells(g, m0.masses.to_vec(), m0.signed)?;
        solutions.push(solve_finite(&g, model, &eps, r, &m0_t, &terminal, opts)?);
    }
    let slices: Vec<Vec<f64>> = solutions.iter().map(|s| s.u.row(0).to_vec()).collect();
    let gaps: Vec<f64> = slices
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .collect();

    let mut report = DiagnosticReport::default();
    let refs = vec![diagnostics::artifact_ref("gaps", diagnostics::hash_f64s(gaps.iter().copied()))];
    let mut worst_increase: f64 = 0.0;
    for j in 1..gaps.len() {
        if r * horizons[j] >= 8.0 {
            worst_increase = worst_increase.max(gaps[j] - gaps[j - 1]);
        }
    }
    report.push_check("tail_gap_monotone", worst_increase, Relation::Le, 1e-10, refs.clone());
    if let (Some(first), Some(last)) = (gaps.first(), gaps.last()) {
        report.push_check("tail_gap_shrinks", *last, Relation::Le, *first, refs);
    }
    Ok(InfiniteSolve { horizons: horizons.to_vec(), solutions, gaps, report })
}

/// Re-solve the same problem from several aggregate-path starts and measure
/// how far apart the converged equilibria land. Only meaningful where the
/// equilibrium is unique: a linear demand schedule, or a discount large
/// enough and market coupling small enough per `check_assumptions`.
pub struct ProbeOutcome {
    pub spread_q: f64,
    pub spread_u0: f64,
    pub final_paths: Vec<Vec<f64>>,
    pub report: DiagnosticReport,
}

pub fn uniqueness_probe(
    grid: &Grid,
    model: &PriceModel,
    eps: &EpsilonSchedule,
    r: f64,
    m0: &MeasureVector,
    terminal: &TerminalData,
    n_starts: usize,
    seed: u64,
    opts: &SolveOptions,
) -> Result<ProbeOutcome> {
    if n_starts < 2 {
        return Err(CmfgError::domain("uniqueness probe needs at least two starts"));
    }
    let assumptions = check_assumptions(model, grid.sigma, r, eps.eps0(), terminal.c1, terminal.c3)?;
    let linear_ok = model.is_linear() && eps.eps0() < 2.0;
    let small_ok = assumptions.checks.iter().filter(|c| c.name == "discount_vs_r_star" || c.name == "epsilon_vs_eps_star").all(|c| c.pass);
    if !linear_ok && !small_ok {
        return Err(CmfgError::domain(
            "uniqueness probe outside the uniqueness regime: needs a linear demand schedule or large discount with small coupling",
        ));
    }
    let qbar = hamiltonian::q_cap(model, eps.eps0())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<Vec<f64>> = vec![vec![qbar / 2.0; grid.nt + 1]];
    for _ in 1..n_starts {
        let base: f64 = rng.random_range(0.0..1.0);
        let amp: f64 = rng.random_range(0.0..0.5);
        let freq: f64 = rng.random_range(0.5..3.0);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let path = (0..=grid.nt)
            .map(|k| {
                let s = k as f64 / grid.nt as f64;
                (qbar * (base + amp * (std::f64::consts::PI * freq * s + phase).sin())).clamp(0.0, qbar)
            })
            .collect();
        starts.push(path);
    }

    let solutions: Vec<MfgSolution> = starts
        .into_par_iter()
        .map(|q0| solve_finite_from(grid, model, eps, r, m0, terminal, opts, q0))
        .collect::<Result<Vec<_>>>()?;

    let mut spread_q: f64 = 0.0;
    let mut spread_u0: f64 = 0.0;
    for i in 0..solutions.len() {
        for j in i + 1..solutions.len() {
            let dq = solutions[i]
                .q_path
                .iter()
                .zip(&solutions[j].q_path)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            spread_q = spread_q.max(dq);
            let du = solutions[i]
                .u
                .row(0)
                .iter()
                .zip(solutions[j].u.row(0).iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            spread_u0 = spread_u0.max(du);
        }
    }
    let final_paths: Vec<Vec<f64>> = solutions.iter().map(|s| s.q_path.clone()).collect();
    let mut report = DiagnosticReport::default();
    let refs = vec![diagnostics::artifact_ref(
        "paths",
        diagnostics::hash_f64s(final_paths.iter().flatten().copied()),
    )];
    report.push_check("probe_spread_q", spread_q, Relation::Le, 10.0 * opts.tol, refs.clone());
    report.push_check("probe_spread_u0", spread_u0, Relation::Ge, 0.0, refs);
    Ok(ProbeOutcome { spread_q, spread_u0, final_paths, report })
}
