use crate::consts::NEG_MASS_TOL;
use crate::error::{CmfgError, Result};
use crate::grid::Grid;
use ndarray::{Array1, Array2, ArrayView1};

/// Discrete (sub-)measure on the interior nodes of a [`Grid`]: entry `j`
/// holds the mass of the cell centered at node `i = j+1`, i.e. at
/// `x = (j+1)*dx`. Nonnegative unless `signed` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureVector {
    pub masses: Array1<f64>,
    pub grid: Grid,
    pub signed: bool,
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

impl MeasureVector {
    pub fn zero(grid: Grid) -> MeasureVector {
        MeasureVector { masses: Array1::zeros(grid.nx), grid, signed: false }
    }

    pub fn from_cells(grid: Grid, masses: Vec<f64>, signed: bool) -> Result<MeasureVector> {
        if masses.len() != grid.nx {
            return Err(CmfgError::MeshMismatch(format!(
                "measure has {} cells, grid has {} interior nodes",
                masses.len(),
                grid.nx
            )));
        }
        if masses.iter().any(|m| !m.is_finite()) {
            return Err(CmfgError::domain("measure cells must be finite"));
        }
        if !signed {
            if let Some(bad) = masses.iter().find(|&&m| m < -NEG_MASS_TOL) {
                return Err(CmfgError::domain(format!(
                    "unsigned measure has a negative cell {bad:.3e}"
                )));
            }
        }
        Ok(MeasureVector { masses: Array1::from(masses), grid, signed })
    }

    /// Unit point mass placed in the single cell whose node is nearest `y`.
    pub fn dirac(grid: Grid, y: f64) -> Result<MeasureVector> {
        let node = grid.node_at(y)?;
        let mut m = MeasureVector::zero(grid);
        m.masses[node - 1] = 1.0;
        Ok(m)
    }

    /// Uniform distribution of `mass` over `[a, b]`, apportioned to cells by
    /// overlap length.
    pub fn uniform(grid: Grid, a: f64, b: f64, mass: f64) -> Result<MeasureVector> {
        if !(b > a) || a < 0.0 {
            return Err(CmfgError::domain(format!("uniform support [{a}, {b}] is invalid")));
        }
        if b > grid.l {
            return Err(CmfgError::domain(format!(
                "uniform support end {b} exceeds the domain length {}",
                grid.l
            )));
        }
        let dx = grid.dx();
        let mut masses = vec![0.0; grid.nx];
        for (j, cell) in masses.iter_mut().enumerate() {
            let x = grid.x(j + 1);
            let lo = (x - 0.5 * dx).max(a);
            let hi = (x + 0.5 * dx).min(b);
            if hi > lo {
                *cell = mass * (hi - lo) / (b - a);
            }
        }
        MeasureVector::from_cells(grid, masses, false)
    }

    /// Dirac at `y` mollified to a Gaussian of standard deviation `width`,
    /// projected onto cells by exact cdf differences.
    pub fn mollified_dirac(grid: Grid, y: f64, width: f64, mass: f64) -> Result<MeasureVector> {
        if !(width > 0.0) {
            return Err(CmfgError::domain("mollifier width must be positive"));
        }
        let dx = grid.dx();
        let mut masses = vec![0.0; grid.nx];
        for (j, cell) in masses.iter_mut().enumerate() {
            let x = grid.x(j + 1);
            let hi = std_normal_cdf((x + 0.5 * dx - y) / width);
            let lo = std_normal_cdf((x - 0.5 * dx - y) / width);
            *cell = mass * (hi - lo);
        }
        MeasureVector::from_cells(grid, masses, false)
    }

    /// Lognormal(mu, s) truncated to the grid interval and renormalized to
    /// carry exactly `mass`.
    pub fn truncated_lognormal(grid: Grid, mu: f64, s: f64, mass: f64) -> Result<MeasureVector> {
        if !(s > 0.0) {
            return Err(CmfgError::domain("lognormal scale must be positive"));
        }
        let dx = grid.dx();
        let cdf = |x: f64| {
            if x <= 0.0 {
                0.0
            } else {
                std_normal_cdf((x.ln() - mu) / s)
            }
        };
        let mut masses = vec![0.0; grid.nx];
        let mut total = 0.0;
        for (j, cell) in masses.iter_mut().enumerate() {
            let x = grid.x(j + 1);
            let w = cdf(x + 0.5 * dx) - cdf(x - 0.5 * dx);
            *cell = w;
            total += w;
        }
        if total <= 0.0 {
            return Err(CmfgError::domain("lognormal has no mass inside the domain"));
        }
        for cell in &mut masses {
            *cell *= mass / total;
        }
        MeasureVector::from_cells(grid, masses, false)
    }

    #[inline]
    pub fn total_mass(&self) -> f64 {
        self.masses.sum()
    }

    /// Total variation: sum of absolute cell masses.
    pub fn tv_norm(&self) -> f64 {
        self.masses.iter().map(|m| m.abs()).sum()
    }

    /// Position of the cell at index `j`.
    #[inline]
    pub fn position(&self, j: usize) -> f64 {
        self.grid.x(j + 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let dx = self.grid.dx();
        self.masses.iter().enumerate().map(move |(j, &m)| ((j + 1) as f64 * dx, m))
    }

    /// Mesh quadrature `sum_i f(x_i) m_i`.
    pub fn quadrature(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.iter().map(|(x, m)| f(x) * m).sum()
    }

    /// `∫ x^{-alpha} d|m|`, the inverse-moment diagnostic. Cell nodes are the
    /// representative points; the first cell sits at `x = dx > 0`.
    pub fn inverse_moment(&self, alpha: f64) -> f64 {
        self.iter().map(|(x, m)| m.abs() * x.powf(-alpha)).sum()
    }

    /// Clamps negative cells of a nominally unsigned measure to zero and
    /// returns the clamped amount.
    pub fn clamp_negative(&mut self) -> f64 {
        let mut defect = 0.0;
        for m in self.masses.iter_mut() {
            if *m < 0.0 {
                defect -= *m;
                *m = 0.0;
            }
        }
        defect
    }

    pub fn scale(&self, factor: f64) -> MeasureVector {
        MeasureVector {
            masses: &self.masses * factor,
            grid: self.grid,
            signed: self.signed || factor < 0.0,
        }
    }

    /// Signed difference `self - other`.
    pub fn sub(&self, other: &MeasureVector) -> Result<MeasureVector> {
        if !self.grid.same_mesh(&other.grid) {
            return Err(CmfgError::MeshMismatch("measure difference across different grids".into()));
        }
        Ok(MeasureVector {
            masses: &self.masses - &other.masses,
            grid: self.grid,
            signed: true,
        })
    }

    pub fn add(&self, other: &MeasureVector) -> Result<MeasureVector> {
        if !self.grid.same_mesh(&other.grid) {
            return Err(CmfgError::MeshMismatch("measure sum across different grids".into()));
        }
        Ok(MeasureVector {
            masses: &self.masses + &other.masses,
            grid: self.grid,
            signed: self.signed || other.signed,
        })
    }
}

/// Space-time stack of measures: row `k` is the measure at time node `k`.
#[derive(Debug, Clone)]
pub struct MeasureTrajectory {
    pub data: Array2<f64>,
    pub grid: Grid,
    pub signed: bool,
}

impl MeasureTrajectory {
    pub fn zeros(grid: Grid, signed: bool) -> MeasureTrajectory {
        MeasureTrajectory { data: Array2::zeros((grid.nt + 1, grid.nx)), grid, signed }
    }

    #[inline]
    pub fn row(&self, k: usize) -> ArrayView1<'_, f64> {
        self.data.row(k)
    }

    pub fn measure_at(&self, k: usize) -> MeasureVector {
        MeasureVector {
            masses: self.data.row(k).to_owned(),
            grid: self.grid,
            signed: self.signed,
        }
    }

    /// Total mass per time node.
    pub fn eta(&self) -> Vec<f64> {
        (0..=self.grid.nt).map(|k| self.data.row(k).sum()).collect()
    }

    /// Total variation per time node.
    pub fn tv(&self) -> Vec<f64> {
        (0..=self.grid.nt)
            .map(|k| self.data.row(k).iter().map(|m| m.abs()).sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid() -> Grid {
        Grid::new(4.0, 199, 1.0, 100, 1.0).unwrap()
    }

    #[test]
    fn dirac_is_a_single_cell() {
        let g = grid();
        let m = MeasureVector::dirac(g, 1.0).unwrap();
        assert_abs_diff_eq!(m.total_mass(), 1.0, epsilon = 1e-15);
        let node = g.node_at(1.0).unwrap();
        assert_eq!(m.masses[node - 1], 1.0);
        assert_eq!(m.masses.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn dirac_inverse_moment_is_power_of_position() {
        let g = grid();
        let m = MeasureVector::dirac(g, 0.5).unwrap();
        let y = m.position(g.node_at(0.5).unwrap() - 1);
        for alpha in [0.0, 0.5, 1.0, 2.5] {
            assert_abs_diff_eq!(m.inverse_moment(alpha), y.powf(-alpha), epsilon = 1e-14);
        }
    }

    #[test]
    fn uniform_mass_and_mean() {
        let g = grid();
        let m = MeasureVector::uniform(g, 0.5, 1.5, 1.0).unwrap();
        assert_abs_diff_eq!(m.total_mass(), 1.0, epsilon = 1e-12);
        let mean = m.quadrature(|x| x);
        assert_abs_diff_eq!(mean, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn mollified_dirac_matches_gaussian_moments() {
        let g = grid();
        let w = 0.1;
        let m = MeasureVector::mollified_dirac(g, 1.0, w, 1.0).unwrap();
        assert_abs_diff_eq!(m.total_mass(), 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(m.quadrature(|x| x), 1.0, epsilon = 1e-6);
        let var = m.quadrature(|x| (x - 1.0) * (x - 1.0));
        // cell projection adds dx^2/12 to the variance
        let dx = g.dx();
        assert_abs_diff_eq!(var, w * w + dx * dx / 12.0, epsilon = 1e-6);
    }

    #[test]
    fn lognormal_is_normalized_and_positive() {
        let g = grid();
        let m = MeasureVector::truncated_lognormal(g, 0.0, 0.4, 0.7).unwrap();
        assert_abs_diff_eq!(m.total_mass(), 0.7, epsilon = 1e-12);
        assert!(m.masses.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn signed_difference_and_tv() {
        let g = grid();
        let a = MeasureVector::uniform(g, 0.5, 1.5, 1.0).unwrap();
        let b = MeasureVector::uniform(g, 0.5, 1.5, 0.9).unwrap();
        let d = b.sub(&a).unwrap();
        assert!(d.signed);
        assert_abs_diff_eq!(d.tv_norm(), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(d.total_mass(), -0.1, epsilon = 1e-12);
    }

    #[test]
    fn clamp_reports_defect() {
        let g = grid();
        let mut m = MeasureVector::zero(g);
        m.masses[3] = -1e-13;
        m.masses[4] = 0.5;
        let defect = m.clamp_negative();
        assert_abs_diff_eq!(defect, 1e-13, epsilon = 1e-20);
        assert_eq!(m.masses[3], 0.0);
    }

    #[test]
    fn rejects_mismatched_lengths_and_negatives() {
        let g = grid();
        assert!(MeasureVector::from_cells(g, vec![0.0; 7], false).is_err());
        let mut cells = vec![0.0; g.nx];
        cells[0] = -1e-3;
        assert!(MeasureVector::from_cells(g, cells, false).is_err());
    }
}
