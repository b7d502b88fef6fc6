//! Acceptance suite. Each test pins one shipped criterion at its stated
//! tolerance and prints a single verdict line; analytic criteria run the
//! library directly, bundle criteria run the `cmfg` binary on the shipped
//! scenarios. Expensive equilibria are solved once and shared.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use cmfg::hamiltonian::{self, HamiltonianPoint};
use cmfg::hjb::{self, EpsilonSchedule, TerminalData};
use cmfg::linearized::{self, CoeffMode};
use cmfg::mfg_solver::{self, MfgSolution, SolveOptions};
use cmfg::{fokker_planck, diagnostics, Grid, MeasureVector, PriceModel};
use cmfg_cli::config::ScenarioConfig;
use serde_json::Value;
use tempfile::TempDir;

fn verdict(n: u32, label: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n:02} {tag} {label}: {detail}");
    assert!(pass, "criterion {n:02} {label}: {detail}");
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cmfg")
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn run_bundle(config: &Path, out: &Path) {
    let status = Command::new(bin())
        .arg("run")
        .arg(config)
        .arg("--out")
        .arg(out)
        .status()
        .expect("spawn cmfg");
    assert!(status.success(), "cmfg run {} exited with {status}", config.display());
}

fn read_json(dir: &Path, name: &str) -> Value {
    let text = std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn scenario_json(name: &str) -> Value {
    let text = std::fs::read_to_string(scenario(name)).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn write_config(dir: &Path, stem: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

struct Bundle {
    _tmp: TempDir,
    dir: PathBuf,
}

/// One binary run of the shipped equilibrium scenario, shared by the
/// criteria that read its bundle.
fn baseline_bundle() -> &'static Bundle {
    static B: OnceLock<Bundle> = OnceLock::new();
    B.get_or_init(|| {
        let tmp = TempDir::new().unwrap();
        let dir = tmp.path().join("linear_baseline");
        run_bundle(&scenario("linear_baseline.json"), &dir);
        Bundle { _tmp: tmp, dir }
    })
}

struct Setup {
    grid: Grid,
    model: PriceModel,
    eps: EpsilonSchedule,
    r: f64,
    terminal: TerminalData,
    opts: SolveOptions,
}

/// The in-process problem for the perturbation criteria: the equilibrium
/// scenario at half resolution, tight fixed-point tolerance, and initial
/// mass 0.9 so that measure bumps stay inside the unit-mass cap.
fn setup() -> Setup {
    let grid = Grid::new(8.0, 199, 1.0, 250, 1.0).unwrap();
    let model = PriceModel::linear();
    let eps = EpsilonSchedule::default_ramp(&grid, 0.5).unwrap();
    let terminal = hjb::build_terminal(&grid, &model, 1.0).unwrap();
    let opts = SolveOptions { tol: 1e-10, max_iter: 400, ..Default::default() };
    Setup { grid, model, eps, r: 50.0, terminal, opts }
}

fn solve_with_m0(m0: &MeasureVector) -> MfgSolution {
    let s = setup();
    mfg_solver::solve_finite(&s.grid, &s.model, &s.eps, s.r, m0, &s.terminal, &s.opts).unwrap()
}

fn base_solution() -> &'static MfgSolution {
    static BASE: OnceLock<MfgSolution> = OnceLock::new();
    BASE.get_or_init(|| {
        let s = setup();
        let m0 = MeasureVector::uniform(s.grid, 0.5, 1.5, 0.9).unwrap();
        solve_with_m0(&m0)
    })
}

fn lsq_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[test]
fn criterion_01_heat_flow_oracle() {
    let tmp = TempDir::new().unwrap();
    // dt shrinks with dx^2 so both error terms refine at the same rate
    let rungs: [(u64, u64); 3] = [(100, 125), (200, 500), (400, 2000)];
    let mut dxs = Vec::new();
    let mut errs = Vec::new();
    for (j, &(nx, nt)) in rungs.iter().enumerate() {
        let out = tmp.path().join(format!("rung{j}"));
        if nx == 400 {
            run_bundle(&scenario("heat_oracle.json"), &out);
        } else {
            let mut cfg = scenario_json("heat_oracle.json");
            cfg["name"] = Value::from(format!("heat_oracle_nx{nx}"));
            cfg["grid"]["nx"] = Value::from(nx);
            cfg["grid"]["nt"] = Value::from(nt);
            let path = write_config(tmp.path(), &format!("rung{j}"), &cfg);
            run_bundle(&path, &out);
        }
        let rep = read_json(&out, "fp_report.json");
        errs.push(rep["linf_density_error"].as_f64().unwrap());
        dxs.push(6.0 / (nx as f64 + 1.0));
    }
    let order_01 = (errs[0] / errs[1]).ln() / (dxs[0] / dxs[1]).ln();
    let order_12 = (errs[1] / errs[2]).ln() / (dxs[1] / dxs[2]).ln();
    let pass = errs[2] <= 5e-3 && order_01 >= 1.8 && order_12 >= 1.8;
    verdict(
        1,
        "heat-flow oracle",
        pass,
        &format!(
            "linf {:.3e} / {:.3e} / {:.3e} (finest <= 5e-3), orders {:.2} and {:.2} >= 1.8",
            errs[0], errs[1], errs[2], order_01, order_12
        ),
    );
}

#[test]
fn criterion_02_survival_oracle() {
    let exact = libm::erf(1.0 / std::f64::consts::SQRT_2);
    let tmp = TempDir::new().unwrap();

    let cfg = serde_json::json!({
        "name": "survival_fd",
        "run": {"kind": "fp_validate"},
        "model": {"kind": "linear"},
        "epsilon": 0.0,
        "r": 1.0,
        "grid": {"l": 8.0, "nx": 399, "horizon": 1.0, "nt": 200, "sigma": 1.0},
        "m0": {"kind": "dirac", "y": 1.0},
        "seed": 0
    });
    let fd_out = tmp.path().join("fd");
    run_bundle(&write_config(tmp.path(), "survival_fd", &cfg), &fd_out);
    let fd = read_json(&fd_out, "fp_report.json");
    let eta_fd = fd["eta_fd_end"].as_f64().unwrap();
    let oracle_gap = (fd["eta_exact_end"].as_f64().unwrap() - exact).abs();
    let fd_gap = (eta_fd - exact).abs();

    let mc_out = tmp.path().join("mc");
    run_bundle(&scenario("survival_mc.json"), &mc_out);
    let mc = read_json(&mc_out, "mc_report.json");
    let z = (mc["eta_mc_end"].as_f64().unwrap() - exact).abs() / mc["stderr_end"].as_f64().unwrap();

    let pass = oracle_gap <= 1e-12 && fd_gap <= 2e-3 && z <= 3.0;
    verdict(
        2,
        "survival oracle",
        pass,
        &format!("target erf(1/sqrt2) = {exact:.6}; fd gap {fd_gap:.2e} <= 2e-3, mc z {z:.2} <= 3"),
    );
}

#[test]
fn criterion_03_hamiltonian_closed_forms() {
    let model = PriceModel::linear();
    let origin = HamiltonianPoint::new(0.0, 0.0, 0.0).unwrap();
    let q_closed = hamiltonian::optimal_quantity(&model, &origin).unwrap();
    let h_closed = hamiltonian::hamiltonian_value(&model, &origin).unwrap();
    let d2_closed = hamiltonian::d2h_da2(&model, &origin).unwrap();
    let d2_interior = hamiltonian::d2h_da2(&model, &HamiltonianPoint::new(0.0, 0.0, 0.2).unwrap()).unwrap();

    // independent route: argmax of the profit on a 1e-6-step production
    // grid; the reference quantities land on grid points, so the scanned
    // maxima are flat to second order and comparable at 1e-12
    let scan = |a: f64| -> (f64, f64) {
        let p = HamiltonianPoint::new(0.0, 0.0, a).unwrap();
        let mut best_q = 0.0;
        let mut best_v = f64::NEG_INFINITY;
        for k in 0..=1_000_000u64 {
            let q = k as f64 * 1e-6;
            let v = hamiltonian::profit(&model, &p, q).unwrap();
            if v > best_v {
                best_v = v;
                best_q = q;
            }
        }
        (best_q, best_v)
    };
    let (q_hat, h_hat) = scan(0.0);
    // scanned maxima are quadratic in the marginal value, so their second
    // difference is curvature-exact at any step
    let (_, h_m) = scan(0.1);
    let (_, h_c) = scan(0.2);
    let (_, h_p) = scan(0.3);
    let d2_hat = (h_m - 2.0 * h_c + h_p) / 0.01;

    let gaps = [
        (q_closed - 0.5).abs(),
        (h_closed - 0.25).abs(),
        (d2_closed - 0.5).abs(),
        (d2_interior - 0.5).abs(),
        (q_hat - 0.5).abs(),
        (h_hat - 0.25).abs(),
        (d2_hat - 0.5).abs(),
    ];
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    let pass = worst <= 1e-12;
    verdict(
        3,
        "closed forms vs grid argmax",
        pass,
        &format!(
            "q* {q_closed} (scan {q_hat}), H {h_closed} (scan {h_hat}), d2H {d2_closed} (scan {d2_hat}); worst gap {worst:.2e} <= 1e-12"
        ),
    );
}

#[test]
fn criterion_04_market_clearing() {
    // flat marginal value, unit mass: the best response (1 - Q)/2 aggregates
    // to the fixed point Q = 1/3
    let model = PriceModel::linear();
    let grid = Grid::new(4.0, 80, 0.5, 10, 1.0).unwrap();
    let m = MeasureVector::uniform(grid, 1.0, 3.0, 1.0).unwrap();
    let phi = vec![0.0; 80];
    let q = hamiltonian::market_clearing(&model, 1.0, &phi, &m).unwrap();
    let q_gap = (q - 1.0 / 3.0).abs();
    let res = hamiltonian::clearing_residual(&model, 1.0, q, &phi, &m).unwrap().abs();

    // every solved scenario records its worst clearing residual over time nodes
    let sol = read_json(&baseline_bundle().dir, "solution.json");
    let solved = sol["clearing_residual"].as_f64().unwrap();
    let base = base_solution().clearing_residual;

    let pass = q_gap <= 1e-10 && res <= 1e-10 && solved <= 1e-10 && base <= 1e-10;
    verdict(
        4,
        "clearing fixed point",
        pass,
        &format!(
            "Q* gap {q_gap:.2e} <= 1e-10, direct residual {res:.2e}, solved-path residuals {solved:.2e} and {base:.2e} <= 1e-10"
        ),
    );
}

#[test]
fn criterion_05_bounds_suite() {
    let sol = read_json(&baseline_bundle().dir, "solution.json");
    let checks = sol["bounds"]["checks"].as_array().unwrap();
    let entry = |name: &str| -> &Value {
        checks
            .iter()
            .find(|c| c["name"] == name)
            .unwrap_or_else(|| panic!("missing bound check {name}"))
    };
    let all_pass = checks.iter().all(|c| c["pass"].as_bool().unwrap());

    // the recorded ceilings must be the stated constants of this scenario
    let value_rhs = entry("value_upper")["rhs"].as_f64().unwrap();
    let agg_rhs = entry("aggregate_upper")["rhs"].as_f64().unwrap();
    let grad_rhs = entry("gradient_upper")["rhs"].as_f64().unwrap();
    let model = PriceModel::linear();
    let grad_bound = hjb::gradient_bound(&model, 1.0, 50.0, 1.0, 1.0).unwrap();
    let stated = (value_rhs - (0.25 / 50.0 + 1.0)).abs() <= 1e-6
        && (agg_rhs - 0.5).abs() <= 1e-6
        && (grad_rhs - grad_bound).abs() <= 1e-6;

    // second route: the raw per-time-node series from the bundle
    let agg = std::fs::read_to_string(baseline_bundle().dir.join("aggregate.csv")).unwrap();
    let mut q_max = f64::NEG_INFINITY;
    let mut eta_increase = f64::NEG_INFINITY;
    let mut tv_increase = f64::NEG_INFINITY;
    let mut prev: Option<(f64, f64)> = None;
    for line in agg.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        let (q, eta, tv) = (cols[3], cols[4], cols[5]);
        q_max = q_max.max(q);
        if let Some((e, t)) = prev {
            eta_increase = eta_increase.max(eta - e);
            tv_increase = tv_increase.max(tv - t);
        }
        prev = Some((eta, tv));
    }
    let series = q_max <= 0.5 + 1e-9 && eta_increase <= 1e-12 && tv_increase <= 1e-12;

    let pass = all_pass && stated && series;
    verdict(
        5,
        "a priori bounds suite",
        pass,
        &format!(
            "{} recorded checks pass; max Q* {q_max:.4} <= 0.5, worst eta step {eta_increase:.1e}, worst tv step {tv_increase:.1e}",
            checks.len()
        ),
    );
}

#[test]
fn criterion_06_uniqueness_probe() {
    let text = std::fs::read_to_string(scenario("linear_baseline.json")).unwrap();
    let cfg = ScenarioConfig::from_str(&text).unwrap();
    let p = cfg.build().unwrap();
    let probe =
        mfg_solver::uniqueness_probe(&p.grid, &p.model, &p.eps, p.r, &p.m0, &p.terminal, 5, 20260814, &p.opts)
            .unwrap();
    let cap = 10.0 * p.opts.tol;
    let pass = probe.spread_q <= cap;
    verdict(
        6,
        "uniqueness probe",
        pass,
        &format!(
            "5 starts: aggregate spread {:.2e} <= {cap:.0e}, value spread {:.2e}",
            probe.spread_q, probe.spread_u0
        ),
    );
}

#[test]
fn criterion_07_linearization_consistency() {
    let s = setup();
    let base = base_solution();
    let bump = MeasureVector::uniform(s.grid, 1.0, 1.5, 0.1).unwrap();
    let m0 = base.m.measure_at(0);
    let m0_hat = m0.add(&bump).unwrap();
    let hat = solve_with_m0(&m0_hat);
    let mu0 = m0_hat.sub(&m0).unwrap();
    let tv = mu0.tv_norm();

    let coeffs = linearized::build_coeffs(CoeffMode::Differences, base, Some(&hat)).unwrap();
    let lin = linearized::solve_linearized(&coeffs, base, &mu0, &s.opts).unwrap();

    let mut w_gap = 0.0f64;
    let mut mu_gap = 0.0f64;
    let mut q_gap = 0.0f64;
    for k in 0..=s.grid.nt {
        for i in 0..=s.grid.nx + 1 {
            w_gap = w_gap.max((lin.w[(k, i)] - (hat.u.value(k, i) - base.u.value(k, i))).abs());
        }
        for j in 0..s.grid.nx {
            mu_gap = mu_gap.max((lin.mu.data[(k, j)] - (hat.m.data[(k, j)] - base.m.data[(k, j)])).abs());
        }
        q_gap = q_gap.max((lin.q_script[k] - (hat.q_path[k] - base.q_path[k])).abs());
    }
    let pass = (tv - 0.1).abs() <= 1e-12 && w_gap <= 5e-3 && mu_gap <= 5e-3 && q_gap <= 5e-3;
    verdict(
        7,
        "linearization consistency",
        pass,
        &format!("tv {tv:.3}: sup gaps w {w_gap:.2e}, mu {mu_gap:.2e}, aggregate {q_gap:.2e} <= 5e-3"),
    );
}

#[test]
fn criterion_08_master_differentiability() {
    let s = setup();
    let base = base_solution();
    let kernel = linearized::master_derivative_kernel(base, 1.0, &s.opts).unwrap().initial_slice();
    let u0 = base.u.row(0).to_vec();
    let m0 = base.m.measure_at(0);

    let ts = [0.08, 0.04, 0.02, 0.01];
    let mut remainders = Vec::new();
    for &t in &ts {
        let bump = MeasureVector::dirac(s.grid, 1.0).unwrap().scale(t);
        let hat = solve_with_m0(&m0.add(&bump).unwrap());
        let u_t = hat.u.row(0);
        let rem = (0..u0.len())
            .map(|i| (u_t[i] - u0[i] - t * kernel[i]).abs())
            .fold(0.0f64, f64::max);
        remainders.push(rem);
    }
    let lt: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let lr: Vec<f64> = remainders.iter().map(|r| r.ln()).collect();
    let slope = lsq_slope(&lt, &lr);
    let pass = slope >= 1.7;
    verdict(
        8,
        "master-field differentiability",
        pass,
        &format!(
            "remainders {:.2e} / {:.2e} / {:.2e} / {:.2e} over t = 0.08..0.01, slope {slope:.2} >= 1.7",
            remainders[0], remainders[1], remainders[2], remainders[3]
        ),
    );
}

#[test]
fn criterion_09_master_residual_refinement() {
    let tmp = TempDir::new().unwrap();
    let coarse_out = tmp.path().join("coarse");
    run_bundle(&scenario("master_residual_small.json"), &coarse_out);

    let mut cfg = scenario_json("master_residual_small.json");
    cfg["name"] = Value::from("master_residual_refined");
    cfg["grid"]["nx"] = Value::from(399);
    cfg["grid"]["nt"] = Value::from(500);
    cfg["run"]["y_stride"] = Value::from(4);
    let fine_out = tmp.path().join("fine");
    run_bundle(&write_config(tmp.path(), "refined", &cfg), &fine_out);

    let coarse = read_json(&coarse_out, "master.json")["sup_residual"].as_f64().unwrap();
    let fine = read_json(&fine_out, "master.json")["sup_residual"].as_f64().unwrap();
    let ratio = coarse / fine;
    let pass = ratio >= 1.5;
    verdict(
        9,
        "master residual refinement",
        pass,
        &format!("sup residual {coarse:.3e} -> {fine:.3e}, ratio {ratio:.2} >= 1.5"),
    );
}

#[test]
fn criterion_10_energy_estimates() {
    let s = setup();
    let base = base_solution();
    let m0 = base.m.measure_at(0);
    let bumps = [
        MeasureVector::uniform(s.grid, 1.0, 1.5, 0.1).unwrap(),
        MeasureVector::mollified_dirac(s.grid, 2.0, 0.2, 0.05).unwrap(),
        MeasureVector::uniform(s.grid, 0.6, 0.9, 0.08).unwrap(),
    ];
    let mut detail = String::new();
    let mut pass = true;
    for bump in &bumps {
        let hat = solve_with_m0(&m0.add(bump).unwrap());
        let gap = linearized::energy_gap(base, &hat, 2).unwrap();
        pass = pass && gap.lhs >= -1e-12 && gap.lhs <= gap.rhs && gap.regime == "linear";
        detail.push_str(&format!(" {:.2e} <= {:.2e};", gap.lhs, gap.rhs));
    }
    verdict(10, "energy estimates", pass, &format!("three pairs, lhs >= 0 and{detail}"));
}

#[test]
fn criterion_11_non_holder_mass_function() {
    // dyadic atoms with tail mass 1/|ln x|: the discrete stand-in for the
    // 1/(x ln^2 x) density whose surviving mass is not Holder at t = 0
    let ln2 = std::f64::consts::LN_2;
    let atoms: Vec<(f64, f64)> = (1..=60)
        .map(|j| {
            let jf = j as f64;
            (0.5f64.powi(j), (1.0 / ln2) / (jf * (jf + 1.0)))
        })
        .collect();
    let series = |step: f64| -> (Vec<f64>, Vec<f64>) {
        let times: Vec<f64> = (0..=200).map(|k| k as f64 * step).collect();
        let values: Vec<f64> = times
            .iter()
            .map(|&t| fokker_planck::mass_function_heat_atoms(&atoms, t, 1.0).unwrap())
            .collect();
        (times, values)
    };
    let (ta, va) = series(5e-7);
    let fit_a = diagnostics::holder_fit(&ta, &va, (1e-6, 1e-4)).unwrap();
    let (tb, vb) = series(5e-5);
    let fit_b = diagnostics::holder_fit(&tb, &vb, (1e-4, 1e-2)).unwrap();
    let pass = fit_a.exponent < fit_b.exponent
        && fit_a.exponent > 0.0
        && fit_b.exponent < 1.0;
    verdict(
        11,
        "non-Holder mass function",
        pass,
        &format!(
            "fitted exponent {:.4} on [1e-6,1e-4] < {:.4} on [1e-4,1e-2]",
            fit_a.exponent, fit_b.exponent
        ),
    );
}

#[test]
fn criterion_12_determinism() {
    let names = ["heat_oracle.json", "linear_baseline.json", "master_residual_small.json", "survival_mc.json"];
    let mut compared = 0usize;
    for name in names {
        let tmp = TempDir::new().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        run_bundle(&scenario(name), &a);
        run_bundle(&scenario(name), &b);
        let list = |d: &Path| -> Vec<String> {
            let mut v: Vec<String> = std::fs::read_dir(d)
                .unwrap()
                .map(|e| e.unwrap().file_name().into_string().unwrap())
                .collect();
            v.sort();
            v
        };
        let files = list(&a);
        assert_eq!(files, list(&b), "{name}: bundles list different files");
        for f in &files {
            let left = std::fs::read(a.join(f)).unwrap();
            let right = std::fs::read(b.join(f)).unwrap();
            assert_eq!(left, right, "{name}: {f} differs between identical runs");
            compared += 1;
        }
    }
    verdict(
        12,
        "determinism",
        true,
        &format!("4 scenarios re-run with their seeds: all {compared} files byte-identical, manifests included"),
    );
}
