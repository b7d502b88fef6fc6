//! Discrete surrogate norms, Hölder-exponent fitting, and the check-report
//! plumbing shared by the solver modules.

use crate::error::{CmfgError, Result};
use crate::grid::Grid;
use crate::measure::MeasureVector;
use serde::Serialize;

/// FNV-1a over the bit patterns of a stream of floats; used to stamp report
/// entries with the content of the arrays they were computed from.
pub fn hash_f64s<I: IntoIterator<Item = f64>>(data: I) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in data {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

pub fn artifact_ref(name: &str, hash: u64) -> String {
    format!("{name}#{hash:016x}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
}

impl Relation {
    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Relation::Le => lhs <= rhs,
            Relation::Ge => lhs >= rhs,
            Relation::Eq => lhs == rhs,
        }
    }
}

/// One named inequality check: `pass` is always the recorded comparison of
/// the recorded sides.
#[derive(Debug, Clone, Serialize)]
pub struct CheckEntry {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub relation: Relation,
    pub pass: bool,
    pub refs: Vec<String>,
}

impl CheckEntry {
    pub fn new(name: impl Into<String>, lhs: f64, relation: Relation, rhs: f64, refs: Vec<String>) -> CheckEntry {
        CheckEntry { name: name.into(), lhs, rhs, relation, pass: relation.holds(lhs, rhs), refs }
    }
}

/// A fitted power-law exponent over a stated time window.
#[derive(Debug, Clone, Serialize)]
pub struct FitEntry {
    pub series: String,
    pub exponent: f64,
    pub constant: f64,
    pub window: (f64, f64),
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct DiagnosticReport {
    pub checks: Vec<CheckEntry>,
    pub fits: Vec<FitEntry>,
}

impl DiagnosticReport {
    pub fn push_check(
        &mut self,
        name: impl Into<String>,
        lhs: f64,
        relation: Relation,
        rhs: f64,
        refs: Vec<String>,
    ) {
        self.checks.push(CheckEntry::new(name, lhs, relation, rhs, refs));
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failed(&self) -> Vec<&CheckEntry> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

/// Weighted seminorm ladder on mesh functions: `max_{j<=n} sup_x d(x)^j
/// |f^(j)(x)|` with `d(x) = min{x, 1}`. `f` is sampled on the full node set
/// `x_0 = 0 .. x_{nx+1} = L`; differences are centered inside, one-sided at
/// the ends.
pub fn weighted_norm_xn(f: &[f64], grid: &Grid, n: usize) -> Result<f64> {
    if n > 2 {
        return Err(CmfgError::domain(format!("weighted norm implemented for n <= 2, got {n}")));
    }
    if f.len() != grid.nx + 2 {
        return Err(CmfgError::MeshMismatch(format!(
            "norm input has {} nodes, grid has {}",
            f.len(),
            grid.nx + 2
        )));
    }
    let dx = grid.dx();
    let d = |i: usize| grid.x(i).min(1.0);
    let mut norm: f64 = f.iter().fold(0.0, |acc, v| acc.max(v.abs()));
    if n >= 1 {
        for i in 0..f.len() {
            let df = if i == 0 {
                (f[1] - f[0]) / dx
            } else if i == f.len() - 1 {
                (f[i] - f[i - 1]) / dx
            } else {
                (f[i + 1] - f[i - 1]) / (2.0 * dx)
            };
            norm = norm.max(d(i) * df.abs());
        }
    }
    if n >= 2 {
        for i in 1..f.len() - 1 {
            let d2 = (f[i + 1] - 2.0 * f[i] + f[i - 1]) / (dx * dx);
            norm = norm.max(d(i) * d(i) * d2.abs());
        }
    }
    Ok(norm)
}

fn smoothstep5(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
}

/// Dual-norm surrogate `sup { <phi, mu> : ||phi||_{X_n} <= 1 }`, maximized
/// over a fixed dictionary of smooth mesh functions (steps at several centers
/// and widths, their complements, 16 sinusoid frequencies, constants, and the
/// sign pattern), each normalized by its computed X_n norm. For `n = 0` this
/// returns the total variation exactly. Documented lower bound of the true
/// dual norm.
pub fn dual_norm_minus_n(mu: &MeasureVector, n: usize) -> Result<f64> {
    if n > 2 {
        return Err(CmfgError::domain(format!("dual norm implemented for n <= 2, got {n}")));
    }
    if n == 0 {
        return Ok(mu.tv_norm());
    }
    let grid = mu.grid;
    let nodes = grid.nx + 2;
    let pair = |phi: &[f64]| -> f64 {
        mu.masses.iter().enumerate().map(|(j, m)| phi[j + 1] * m).sum::<f64>()
    };

    let mut best: f64 = 0.0;
    let mut consider = |phi: Vec<f64>| -> Result<()> {
        let norm = weighted_norm_xn(&phi, &grid, n)?;
        if norm > 0.0 && norm.is_finite() {
            best = best.max(pair(&phi).abs() / norm);
        }
        Ok(())
    };

    // constants
    consider(vec![1.0; nodes])?;

    // smooth steps up/down over centers spanning the domain and dyadic widths
    let widths = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2];
    let n_centers = 24;
    for w in widths {
        if w > 2.0 * grid.l {
            continue;
        }
        for c in 0..=n_centers {
            let a = grid.l * c as f64 / n_centers as f64 - 0.5 * w;
            let up: Vec<f64> = (0..nodes).map(|i| smoothstep5((grid.x(i) - a) / w)).collect();
            let down: Vec<f64> = up.iter().map(|v| 1.0 - v).collect();
            consider(up)?;
            consider(down)?;
        }
    }

    // sinusoids at 16 frequencies
    for k in 1..=16 {
        let om = k as f64 * std::f64::consts::PI / grid.l;
        consider((0..nodes).map(|i| (om * grid.x(i)).sin()).collect())?;
        consider((0..nodes).map(|i| (om * grid.x(i)).cos()).collect())?;
    }

    // sign pattern (extremal for n = 0; normalized here, so merely admissible)
    let mut sign = vec![0.0; nodes];
    for (j, &m) in mu.masses.iter().enumerate() {
        sign[j + 1] = if m >= 0.0 { 1.0 } else { -1.0 };
    }
    consider(sign)?;

    Ok(best)
}

/// A priori bound checks on a computed equilibrium: value and gradient
/// windows, the aggregate cap, surviving-mass monotonicity, the exact mass
/// balance of the forward scheme, the clearing residual, and the boundary
/// compatibility of the terminal data. Every entry records both sides.
pub fn verify_solution_bounds(sol: &crate::mfg_solver::MfgSolution) -> Result<DiagnosticReport> {
    use crate::consts::{BOUND_SLACK, CLEARING_RESIDUAL_MAX};
    let refs = vec![
        artifact_ref("u", hash_f64s(sol.u.u.iter().copied())),
        artifact_ref("m", hash_f64s(sol.m.data.iter().copied())),
        artifact_ref("q_path", hash_f64s(sol.q_path.iter().copied())),
    ];
    let mut rep = DiagnosticReport::default();
    let push = |rep: &mut DiagnosticReport, name: &str, lhs: f64, relation: Relation, rhs: f64| {
        rep.push_check(name, lhs, relation, rhs, refs.clone());
    };

    push(&mut rep, "clearing_residual", sol.clearing_residual, Relation::Le, CLEARING_RESIDUAL_MAX);
    push(&mut rep, "value_lower", sol.u.min_value(), Relation::Ge, -BOUND_SLACK);
    push(&mut rep, "value_upper", sol.u.max_value(), Relation::Le, sol.value_bound()? + BOUND_SLACK);
    push(&mut rep, "gradient_lower", sol.u.min_gradient(), Relation::Ge, -BOUND_SLACK);
    push(&mut rep, "gradient_upper", sol.u.max_gradient(), Relation::Le, sol.gradient_bound()? + BOUND_SLACK);
    let qmin = sol.q_path.iter().copied().fold(f64::INFINITY, f64::min);
    let qmax = sol.q_path.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    push(&mut rep, "aggregate_lower", qmin, Relation::Ge, 0.0);
    push(&mut rep, "aggregate_upper", qmax, Relation::Le, sol.aggregate_bound()? + BOUND_SLACK);

    let eta = &sol.mass.eta;
    let worst_increase = eta.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    push(&mut rep, "eta_nonincreasing", worst_increase, Relation::Le, 1e-12);
    let balance_defect = (0..eta.len())
        .map(|k| (eta[k] + sol.mass.absorbed_left[k] + sol.mass.lost_right[k] - eta[0]).abs())
        .fold(0.0, f64::max);
    push(&mut rep, "mass_balance", balance_defect, Relation::Le, 1e-10);
    push(&mut rep, "fp_clamp_defect", sol.mass.clamp_defect, Relation::Le, 1e-10);
    push(&mut rep, "gradient_clamp_defect", sol.u.grad_clamp_defect, Relation::Le, 1e-9);
    let compat = sol.terminal.compatibility_residual(&sol.grid, &sol.model)?;
    push(&mut rep, "terminal_compatibility", compat, Relation::Le, 1e-4);
    Ok(rep)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct HolderFit {
    pub exponent: f64,
    pub constant: f64,
    pub window: (f64, f64),
}

/// Least-squares fit of `log|v(t) - v(s)|` against `log|t - s|` over dyadic
/// index lags inside the window. A constant series yields the `+inf`
/// exponent sentinel.
pub fn holder_fit(times: &[f64], values: &[f64], window: (f64, f64)) -> Result<HolderFit> {
    if times.len() != values.len() {
        return Err(CmfgError::MeshMismatch("holder fit: times and values differ in length".into()));
    }
    let idx: Vec<usize> = (0..times.len())
        .filter(|&i| times[i] >= window.0 && times[i] <= window.1)
        .collect();
    if idx.len() < 8 {
        return Err(CmfgError::domain(format!(
            "holder fit needs at least 8 points in the window, found {}",
            idx.len()
        )));
    }

    // one point per dyadic lag: the largest increment over the window (the
    // discrete Hölder modulus); averaging over pairs would let the smooth
    // interior of the window mask the behaviour at its rough end
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut lag = 1;
    while lag < idx.len() {
        let mut dv_max = 0.0f64;
        let mut dt_rep = 0.0f64;
        for w in idx.windows(lag + 1).step_by(1.max(lag / 2)) {
            let (i, j) = (w[0], w[lag]);
            let dt = times[j] - times[i];
            let dv = (values[j] - values[i]).abs();
            if dt > 0.0 && dv > dv_max {
                dv_max = dv;
                dt_rep = dt;
            }
        }
        if dt_rep > 0.0 && dv_max > 1e-300 {
            xs.push(dt_rep.ln());
            ys.push(dv_max.ln());
        }
        lag *= 2;
    }
    if xs.len() < 2 {
        return Ok(HolderFit { exponent: f64::INFINITY, constant: 0.0, window });
    }

    let nn = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / nn;
    let my = ys.iter().sum::<f64>() / nn;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Ok(HolderFit { exponent: f64::INFINITY, constant: 0.0, window });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    Ok(HolderFit { exponent: slope, constant: intercept.exp(), window })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid() -> Grid {
        Grid::new(4.0, 199, 1.0, 100, 1.0).unwrap()
    }

    #[test]
    fn norm_of_constant_is_one() {
        let g = grid();
        let f = vec![1.0; g.nx + 2];
        for n in 0..=2 {
            assert_abs_diff_eq!(weighted_norm_xn(&f, &g, n).unwrap(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn norm_of_identity_caps_slope_weight() {
        let g = grid();
        let f: Vec<f64> = (0..g.nx + 2).map(|i| g.x(i)).collect();
        // sup |f| = L dominates; the slope term contributes min(x,1)*1 <= 1
        let n1 = weighted_norm_xn(&f, &g, 1).unwrap();
        assert_abs_diff_eq!(n1, g.l.max(1.0), epsilon = 1e-12);
    }

    #[test]
    fn norm_of_capped_ramp() {
        let g = grid();
        let f: Vec<f64> = (0..g.nx + 2).map(|i| g.x(i).min(1.0)).collect();
        assert_abs_diff_eq!(weighted_norm_xn(&f, &g, 0).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn dual_n0_is_tv() {
        let g = grid();
        let a = MeasureVector::uniform(g, 0.5, 1.5, 1.0).unwrap();
        let b = MeasureVector::uniform(g, 1.0, 2.0, 1.0).unwrap();
        let d = a.sub(&b).unwrap();
        assert_abs_diff_eq!(dual_norm_minus_n(&d, 0).unwrap(), d.tv_norm(), epsilon = 1e-14);
    }

    #[test]
    fn dual_never_exceeds_tv_and_zero_on_zero() {
        let g = grid();
        let z = MeasureVector::zero(g);
        assert_eq!(dual_norm_minus_n(&z, 2).unwrap(), 0.0);
        let a = MeasureVector::uniform(g, 0.5, 1.5, 1.0).unwrap();
        let b = MeasureVector::uniform(g, 0.6, 1.6, 1.0).unwrap();
        let d = a.sub(&b).unwrap();
        let dual = dual_norm_minus_n(&d, 2).unwrap();
        assert!(dual > 0.0);
        // ||phi||_X2 >= sup|phi|, so the dual surrogate is below TV
        assert!(dual <= d.tv_norm() + 1e-12);
    }

    #[test]
    fn dual_of_close_diracs_scales_linearly() {
        let g = Grid::new(4.0, 799, 1.0, 100, 1.0).unwrap();
        let mut norms = Vec::new();
        for sep in [2, 4, 8] {
            let base = g.node_at(2.0).unwrap();
            let mut cells = vec![0.0; g.nx];
            cells[base - 1] = 1.0;
            cells[base - 1 + sep] = -1.0;
            let mu = MeasureVector::from_cells(g, cells, true).unwrap();
            norms.push(dual_norm_minus_n(&mu, 2).unwrap());
        }
        // roughly linear in separation: doubling sep should not far exceed 2x
        let r1 = norms[1] / norms[0];
        let r2 = norms[2] / norms[1];
        assert!(r1 > 1.3 && r1 < 2.7, "ratio {r1}");
        assert!(r2 > 1.3 && r2 < 2.7, "ratio {r2}");
    }

    #[test]
    fn holder_fit_recovers_power_laws() {
        let times: Vec<f64> = (0..200).map(|k| k as f64 * 0.005).collect();
        let sqrt_vals: Vec<f64> = times.iter().map(|t| t.sqrt()).collect();
        let fit = holder_fit(&times, &sqrt_vals, (0.0, 1.0)).unwrap();
        assert!((fit.exponent - 0.5).abs() < 0.05, "exponent {}", fit.exponent);

        let lin_vals: Vec<f64> = times.clone();
        let fit = holder_fit(&times, &lin_vals, (0.0, 1.0)).unwrap();
        assert!((fit.exponent - 1.0).abs() < 0.05, "exponent {}", fit.exponent);
    }

    #[test]
    fn holder_fit_constant_series_sentinel() {
        let times: Vec<f64> = (0..20).map(|k| k as f64 * 0.1).collect();
        let vals = vec![3.0; 20];
        let fit = holder_fit(&times, &vals, (0.0, 2.0)).unwrap();
        assert!(fit.exponent.is_infinite());
    }

    #[test]
    fn holder_fit_needs_points() {
        let times = vec![0.1, 0.2, 0.3];
        let vals = vec![1.0, 2.0, 3.0];
        assert!(holder_fit(&times, &vals, (0.0, 1.0)).is_err());
    }

    #[test]
    fn check_entry_pass_matches_relation() {
        let c = CheckEntry::new("x", 1.0, Relation::Le, 2.0, vec![]);
        assert!(c.pass);
        let c = CheckEntry::new("x", 3.0, Relation::Le, 2.0, vec![]);
        assert!(!c.pass);
        let mut rep = DiagnosticReport::default();
        rep.push_check("a", 1.0, Relation::Ge, 0.0, vec![]);
        rep.push_check("b", -1.0, Relation::Ge, 0.0, vec![]);
        assert!(!rep.all_pass());
        assert_eq!(rep.failed().len(), 1);
    }

    #[test]
    fn hashes_differ_on_content() {
        let a = hash_f64s([1.0, 2.0, 3.0]);
        let b = hash_f64s([1.0, 2.0, 3.0 + 1e-15]);
        assert_ne!(a, b);
        assert_eq!(a, hash_f64s([1.0, 2.0, 3.0]));
    }
}
