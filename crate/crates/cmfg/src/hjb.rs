//! Backward value equation on the truncated half-line: zero boundary value
//! at the origin, homogeneous Neumann closure at the right wall, implicit
//! Euler in time with the gradient taken by backward differences (the
//! monotone upwind choice when the optimal drift points toward the origin).

use crate::error::{CmfgError, Result};
use crate::grid::Grid;
use crate::hamiltonian::{self, HamiltonianPoint, PriceModel};
use crate::tridiag;
use ndarray::{Array1, Array2, ArrayView1};
use serde::Serialize;

const SLOPE_TOL: f64 = 1e-9;

fn smootherstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
}

/// Market-size schedule sampled at the time nodes: nonnegative,
/// nonincreasing, zero at the horizon, with slope at most one.
#[derive(Debug, Clone, Serialize)]
pub struct EpsilonSchedule {
    eps0: f64,
    values: Vec<f64>,
}

impl EpsilonSchedule {
    /// Constant plateau at `eps0` followed by a quintic ramp down to zero
    /// over a window `W = min(T, max(eps0 T, 1.875 eps0))`, the narrowest
    /// width keeping the slope within one. Fails if the horizon itself is
    /// shorter than the required ramp.
    pub fn default_ramp(grid: &Grid, eps0: f64) -> Result<EpsilonSchedule> {
        if !(eps0 >= 0.0) || !eps0.is_finite() {
            return Err(CmfgError::domain(format!("epsilon must be a nonnegative finite number, got {eps0}")));
        }
        if eps0 == 0.0 {
            return Ok(EpsilonSchedule { eps0, values: vec![0.0; grid.nt + 1] });
        }
        let t_h = grid.t_h;
        let w = t_h.min((eps0 * t_h).max(1.875 * eps0));
        if 1.875 * eps0 / w > 1.0 + SLOPE_TOL {
            return Err(CmfgError::domain(format!(
                "horizon {t_h} too short to ramp epsilon {eps0} down at slope <= 1"
            )));
        }
        let values = (0..=grid.nt).map(|k| eps0 * smootherstep((t_h - grid.t(k)) / w)).collect();
        Ok(EpsilonSchedule { eps0, values })
    }

    pub fn constant_zero(grid: &Grid) -> EpsilonSchedule {
        EpsilonSchedule { eps0: 0.0, values: vec![0.0; grid.nt + 1] }
    }

    /// Wrap explicit samples, enforcing the structural conditions.
    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<EpsilonSchedule> {
        if values.len() != grid.nt + 1 {
            return Err(CmfgError::MeshMismatch(format!(
                "epsilon schedule has {} samples, grid has {} time nodes",
                values.len(),
                grid.nt + 1
            )));
        }
        let dt = grid.dt();
        for (k, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(CmfgError::domain(format!("epsilon sample {v} at node {k} is not a nonnegative number")));
            }
            if k > 0 {
                let step = values[k] - values[k - 1];
                if step > SLOPE_TOL {
                    return Err(CmfgError::domain(format!("epsilon schedule increases at node {k}")));
                }
                if -step / dt > 1.0 + SLOPE_TOL {
                    return Err(CmfgError::domain(format!(
                        "epsilon schedule slope {} at node {k} exceeds one",
                        -step / dt
                    )));
                }
            }
        }
        if *values.last().unwrap() > 1e-12 {
            return Err(CmfgError::domain("epsilon schedule must vanish at the horizon"));
        }
        let eps0 = values[0];
        Ok(EpsilonSchedule { eps0, values })
    }

    pub fn eps0(&self) -> f64 {
        self.eps0
    }

    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TerminalKind {
    CubicPlateau,
    CubicZeroCurvature,
    Zero,
    Custom,
}

/// Terminal condition sampled on the full node set, with its structural
/// constants: `c1` caps the values, `c3` caps the slope.
#[derive(Debug, Clone, Serialize)]
pub struct TerminalData {
    pub values: Array1<f64>,
    pub c1: f64,
    pub c3: f64,
    pub kind: TerminalKind,
}

/// Cubic terminal data with initial slope `c3`, zero value and matched
/// curvature at the origin, rising to a constant plateau. With
/// `h = 2 H(0,0,c3) / sigma^2`: for `h > 0` the profile is
/// `2 c3^2/(3h) + h^2/(12 c3) (x - 2 c3/h)_-^3`; for `h = 0` it is a pair of
/// cubic arcs `c3 x - x^3/6` and `c3^{3/2} + (x - 2 sqrt(c3))^3 / 6` joined
/// twice continuously differentiably at `sqrt(c3)`, flat beyond `2 sqrt(c3)`.
pub fn build_terminal(grid: &Grid, model: &PriceModel, c3: f64) -> Result<TerminalData> {
    if !(c3 > 0.0) || !c3.is_finite() {
        return Err(CmfgError::domain(format!("terminal slope c3 must be positive, got {c3}")));
    }
    let h0 = hamiltonian::hamiltonian_value(model, &HamiltonianPoint::new(0.0, 0.0, c3)?)?;
    let h = 2.0 * h0 / (grid.sigma * grid.sigma);
    let nodes = grid.nx + 2;
    let mut values = Array1::zeros(nodes);
    if h > 0.0 {
        let plateau = 2.0 * c3 * c3 / (3.0 * h);
        let knee = 2.0 * c3 / h;
        for i in 0..nodes {
            let xm = (grid.x(i) - knee).min(0.0);
            values[i] = plateau + h * h / (12.0 * c3) * xm * xm * xm;
        }
        Ok(TerminalData { values, c1: plateau, c3, kind: TerminalKind::CubicPlateau })
    } else {
        let s = c3.sqrt();
        let plateau = c3 * s;
        for i in 0..nodes {
            let x = grid.x(i);
            values[i] = if x <= s {
                c3 * x - x * x * x / 6.0
            } else if x <= 2.0 * s {
                let z = x - 2.0 * s;
                plateau + z * z * z / 6.0
            } else {
                plateau
            };
        }
        Ok(TerminalData { values, c1: plateau, c3, kind: TerminalKind::CubicZeroCurvature })
    }
}

impl TerminalData {
    pub fn zero(grid: &Grid) -> TerminalData {
        TerminalData { values: Array1::zeros(grid.nx + 2), c1: 0.0, c3: 0.0, kind: TerminalKind::Zero }
    }

    pub fn custom(grid: &Grid, values: Vec<f64>, c1: f64, c3: f64) -> Result<TerminalData> {
        if values.len() != grid.nx + 2 {
            return Err(CmfgError::MeshMismatch(format!(
                "terminal data has {} nodes, grid has {}",
                values.len(),
                grid.nx + 2
            )));
        }
        if values[0] != 0.0 {
            return Err(CmfgError::domain("terminal data must vanish at the origin"));
        }
        for &v in &values {
            if !v.is_finite() || v < 0.0 || v > c1 + 1e-12 {
                return Err(CmfgError::domain(format!("terminal value {v} outside [0, c1 = {c1}]")));
            }
        }
        Ok(TerminalData { values: Array1::from_vec(values), c1, c3, kind: TerminalKind::Custom })
    }

    /// Residual of the corner condition
    /// `sigma^2/2 u_T''(0) + H(0, 0, u_T'(0))`, with one-sided third-order
    /// differences at the origin. Zero (to discretization accuracy) for the
    /// built cubic profiles; a positive residual flags terminal data that
    /// meets the absorbing boundary non-smoothly.
    pub fn compatibility_residual(&self, grid: &Grid, model: &PriceModel) -> Result<f64> {
        let dx = grid.dx();
        let u = &self.values;
        let d1 = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * dx);
        let d2 = (2.0 * u[0] - 5.0 * u[1] + 4.0 * u[2] - u[3]) / (dx * dx);
        let h = hamiltonian::hamiltonian_value(model, &HamiltonianPoint::new(0.0, 0.0, d1.max(0.0))?)?;
        Ok((0.5 * grid.sigma * grid.sigma * d2 + h).abs())
    }
}

/// Gradient bound `M(sigma, r, c1, c3)` for the value function:
/// `2 sqrt(2 H0 (H0 + r c1) / (sigma^2 r))` while
/// `c3 <= sqrt(2/(sigma^2 r)) H0`, and
/// `c3 + 2 H0^2 / (sigma^2 r c3) + 2 c1 H0 / (sigma^2 c3)` beyond, with
/// `H0 = H(0,0,0)`.
pub fn gradient_bound(model: &PriceModel, sigma: f64, r: f64, c1: f64, c3: f64) -> Result<f64> {
    if !(sigma > 0.0) || !(r > 0.0) || c1 < 0.0 || c3 < 0.0 {
        return Err(CmfgError::domain(format!(
            "gradient bound needs sigma > 0, r > 0, c1 >= 0, c3 >= 0; got {sigma}, {r}, {c1}, {c3}"
        )));
    }
    let h0 = hamiltonian::hamiltonian_value(model, &HamiltonianPoint::new(0.0, 0.0, 0.0)?)?;
    let s2r = sigma * sigma * r;
    if c3 <= (2.0 / s2r).sqrt() * h0 {
        Ok(2.0 * (2.0 * h0 * (h0 + r * c1) / s2r).sqrt())
    } else {
        Ok(c3 + 2.0 * h0 * h0 / (s2r * c3) + 2.0 * c1 * h0 / (sigma * sigma * c3))
    }
}

/// Value function on the space-time mesh. Row `k` holds all `nx + 2` nodes
/// at time `t_k`; the ghost node `nx + 1` mirrors node `nx` (Neumann
/// closure) and node 0 is pinned to zero.
#[derive(Debug, Clone)]
pub struct ValueField {
    pub grid: Grid,
    pub u: Array2<f64>,
    /// total negative part clipped from gradient arguments, roundoff scale
    pub grad_clamp_defect: f64,
}

impl ValueField {
    pub fn row(&self, k: usize) -> ArrayView1<'_, f64> {
        self.u.row(k)
    }

    pub fn value(&self, k: usize, i: usize) -> f64 {
        self.u[(k, i)]
    }

    /// Backward-difference gradient at interior nodes `1..=nx`, index `j`
    /// aligned with measure cell `j`. This is the single gradient definition
    /// used for clearing, drift, and linearization coefficients.
    pub fn ux_row(&self, k: usize) -> Vec<f64> {
        let dx = self.grid.dx();
        (1..=self.grid.nx).map(|i| (self.u[(k, i)] - self.u[(k, i - 1)]) / dx).collect()
    }

    /// Centered second difference at interior nodes `1..=nx`.
    pub fn uxx_row(&self, k: usize) -> Vec<f64> {
        let dx2 = self.grid.dx() * self.grid.dx();
        (1..=self.grid.nx)
            .map(|i| (self.u[(k, i + 1)] - 2.0 * self.u[(k, i)] + self.u[(k, i - 1)]) / dx2)
            .collect()
    }

    pub fn max_value(&self) -> f64 {
        self.u.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
    }

    pub fn min_value(&self) -> f64 {
        self.u.iter().fold(f64::INFINITY, |a, &b| a.min(b))
    }

    pub fn max_gradient(&self) -> f64 {
        (0..=self.grid.nt)
            .flat_map(|k| self.ux_row(k))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_gradient(&self) -> f64 {
        (0..=self.grid.nt)
            .flat_map(|k| self.ux_row(k))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Low-level backward sweep: `ham(k, grad)` maps the clamped gradient at
/// interior nodes (aligned like `ux_row`) to the nonlinearity values at time
/// level `k`. Each step solves the implicit diffusion-discount system with
/// the nonlinearity frozen at the previous level, then once more with it
/// re-evaluated at the first pass (one refresh sweep).
pub fn hjb_solve_with(
    grid: &Grid,
    r: f64,
    terminal: &TerminalData,
    ham: &dyn Fn(usize, &[f64]) -> Result<Vec<f64>>,
) -> Result<ValueField> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(CmfgError::domain(format!("discount rate must be positive, got {r}")));
    }
    if terminal.values.len() != grid.nx + 2 {
        return Err(CmfgError::MeshMismatch("terminal data does not match the grid".into()));
    }
    let (nx, nt) = (grid.nx, grid.nt);
    let (dx, dt) = (grid.dx(), grid.dt());
    let alpha = grid.sigma * grid.sigma * dt / (2.0 * dx * dx);

    let mut u = Array2::zeros((nt + 1, nx + 2));
    u.row_mut(nt).assign(&terminal.values.view());
    u[(nt, 0)] = 0.0;
    u[(nt, nx + 1)] = u[(nt, nx)];
    let mut clamp = 0.0;

    let mut sub = vec![0.0; nx];
    let mut diag = vec![0.0; nx];
    let mut sup = vec![0.0; nx];

    let grad_of = |row: &[f64], clamp: &mut f64| -> Vec<f64> {
        (1..=nx)
            .map(|i| {
                let g = (row[i] - row[i - 1]) / dx;
                if g < 0.0 {
                    *clamp += -g;
                    0.0
                } else {
                    g
                }
            })
            .collect()
    };

    for k in (0..nt).rev() {
        let prev: Vec<f64> = u.row(k + 1).to_vec();
        let mut grad = grad_of(&prev, &mut clamp);
        let mut new_row = vec![0.0; nx + 2];
        for pass in 0..2 {
            let hvals = ham(k, &grad)?;
            if hvals.len() != nx {
                return Err(CmfgError::MeshMismatch("nonlinearity callback returned wrong length".into()));
            }
            for i in 1..=nx {
                diag[i - 1] = 1.0 + r * dt + if i == nx { alpha } else { 2.0 * alpha };
                sub[i - 1] = if i > 1 { -alpha } else { 0.0 };
                sup[i - 1] = if i < nx { -alpha } else { 0.0 };
            }
            let rhs: Vec<f64> = (1..=nx).map(|i| prev[i] + dt * hvals[i - 1]).collect();
            let interior = tridiag::solve(&sub[1..], &diag, &sup[..nx - 1], &rhs)?;
            new_row[0] = 0.0;
            new_row[1..=nx].copy_from_slice(&interior);
            new_row[nx + 1] = new_row[nx];
            if pass == 0 {
                grad = grad_of(&new_row, &mut clamp);
            }
        }
        for (i, v) in new_row.iter().enumerate() {
            u[(k, i)] = *v;
        }
    }
    Ok(ValueField { grid: *grid, u, grad_clamp_defect: clamp })
}

/// Backward solve with the market Hamiltonian along a given aggregate path
/// (one value per time node).
pub fn hjb_solve(
    grid: &Grid,
    model: &PriceModel,
    eps: &EpsilonSchedule,
    q_path: &[f64],
    r: f64,
    terminal: &TerminalData,
) -> Result<ValueField> {
    if q_path.len() != grid.nt + 1 {
        return Err(CmfgError::MeshMismatch(format!(
            "aggregate path has {} samples, grid has {} time nodes",
            q_path.len(),
            grid.nt + 1
        )));
    }
    if eps.values().len() != grid.nt + 1 {
        return Err(CmfgError::MeshMismatch("epsilon schedule does not match the grid".into()));
    }
    for &q in q_path {
        if !q.is_finite() || q < 0.0 {
            return Err(CmfgError::domain(format!("aggregate path value {q} is not a nonnegative number")));
        }
    }
    model.validate_for(eps.eps0())?;
    let ham = |k: usize, grad: &[f64]| -> Result<Vec<f64>> {
        grad.iter()
            .map(|&a| {
                let p = HamiltonianPoint::new(eps.value(k), q_path[k], a)?;
                hamiltonian::hamiltonian_value(model, &p)
            })
            .collect()
    };
    hjb_solve_with(grid, r, terminal, &ham)
}
