use crate::error::{CmfgError, Result};
use serde::{Deserialize, Serialize};

/// Uniform mesh on the truncated state interval `[0, L]` crossed with a
/// uniform time mesh on `[0, T_h]`.
///
/// Interior nodes sit at `x_i = i*dx`, `i = 1..=nx`, with `dx = L/(nx+1)`;
/// `x_0 = 0` is the absorbing boundary and `x_{nx+1} = L` the truncation
/// boundary. Time nodes are `t_k = k*dt`, `k = 0..=nt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub l: f64,
    pub nx: usize,
    pub t_h: f64,
    pub nt: usize,
    pub sigma: f64,
}

impl Grid {
    pub fn new(l: f64, nx: usize, t_h: f64, nt: usize, sigma: f64) -> Result<Grid> {
        if !(l > 0.0) || !l.is_finite() {
            return Err(CmfgError::domain(format!("grid: L must be positive, got {l}")));
        }
        if nx == 0 || nt == 0 {
            return Err(CmfgError::domain("grid: nx and nt must be at least 1"));
        }
        if !(t_h > 0.0) || !t_h.is_finite() {
            return Err(CmfgError::domain(format!("grid: horizon must be positive, got {t_h}")));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(CmfgError::domain(format!("grid: sigma must be positive, got {sigma}")));
        }
        Ok(Grid { l, nx, t_h, nt, sigma })
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        self.l / (self.nx as f64 + 1.0)
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.t_h / self.nt as f64
    }

    /// Position of node `i`, valid for `0..=nx+1`.
    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.dx()
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    /// Interior node index whose position is nearest to `y`.
    pub fn node_at(&self, y: f64) -> Result<usize> {
        if !(y > 0.0 && y < self.l) {
            return Err(CmfgError::domain(format!(
                "position {y} outside the open interval (0, {})",
                self.l
            )));
        }
        let i = (y / self.dx()).round() as usize;
        Ok(i.clamp(1, self.nx))
    }

    /// Advisory CFL number `dt*max|b|/dx` for a drift bound; the schemes are
    /// implicit and stable regardless, but accuracy degrades above ~1.
    pub fn cfl(&self, max_drift: f64) -> f64 {
        self.dt() * max_drift.abs() / self.dx()
    }

    pub fn same_mesh(&self, other: &Grid) -> bool {
        self == other
    }
}
