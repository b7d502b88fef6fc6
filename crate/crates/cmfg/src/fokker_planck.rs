//! Forward equation on the half-line with an absorbing boundary at zero:
//! exact heat-flow formulas (method of images), the implicit finite-volume
//! solver, and a particle simulation used as an independent cross-check.
//!
//! Drift convention, used across the crate: `drift` is the SDE velocity,
//! `dX = drift dt + sigma dW`, and the forward equation is
//! `dm/dt - sigma^2/2 m_xx + d/dx(drift m) = 0`. In equilibrium the drift is
//! `dH/da = -q* <= 0`, so mass moves toward the absorbing boundary.

use crate::consts::NEG_MASS_TOL;
use crate::diagnostics::{holder_fit, HolderFit};
use crate::error::{CmfgError, Result};
use crate::grid::Grid;
use crate::measure::{MeasureTrajectory, MeasureVector};
use crate::tridiag;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Gaussian heat kernel `S(x,t) = exp(-x^2 / (2 sigma^2 t)) / sqrt(2 pi sigma^2 t)`.
pub fn heat_kernel(x: f64, t: f64, sigma: f64) -> Result<f64> {
    if !(t > 0.0) || !(sigma > 0.0) {
        return Err(CmfgError::domain(format!("heat kernel needs t > 0, sigma > 0; got t={t}, sigma={sigma}")));
    }
    let var = sigma * sigma * t;
    Ok((-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt())
}

/// Driftless absorbed evolution of a discrete initial measure, by the method
/// of images. Each cell of `m0` acts as an atom at its center; the returned
/// cell masses are exact integrals of `S(x - y, t) - S(x + y, t)` over each
/// cell, so the Dirichlet condition at zero is honored exactly.
pub fn heat_solution(m0: &MeasureVector, t: f64, sigma: f64) -> Result<MeasureVector> {
    if t < 0.0 || !(sigma > 0.0) {
        return Err(CmfgError::domain(format!("heat solution needs t >= 0, sigma > 0; got t={t}, sigma={sigma}")));
    }
    if t == 0.0 {
        return Ok(m0.clone());
    }
    let grid = m0.grid;
    let dx = grid.dx();
    let s = sigma * t.sqrt();
    let atoms: Vec<(f64, f64)> = m0.iter().filter(|&(_, m)| m != 0.0).collect();
    let mut cells = vec![0.0; grid.nx];
    for (j, cell) in cells.iter_mut().enumerate() {
        let xc = grid.x(j + 1);
        let (lo, hi) = (xc - 0.5 * dx, xc + 0.5 * dx);
        let mut acc = 0.0;
        for &(y, m) in &atoms {
            let direct = std_normal_cdf((hi - y) / s) - std_normal_cdf((lo - y) / s);
            let image = std_normal_cdf((hi + y) / s) - std_normal_cdf((lo + y) / s);
            acc += m * (direct - image);
        }
        *cell = acc;
    }
    MeasureVector::from_cells(grid, cells, m0.signed)
}

/// Surviving mass of the driftless absorbed evolution started from point
/// masses `(position, mass)`: `sum_j m_j erf(y_j / (sigma sqrt(2t)))`.
/// This is the closed form of the Fubini representation
/// `sqrt(2/(pi sigma^2)) int_0^inf exp(-x^2/(2 sigma^2)) m0((sqrt(t) x, inf)) dx`.
pub fn mass_function_heat_atoms(atoms: &[(f64, f64)], t: f64, sigma: f64) -> Result<f64> {
    if t < 0.0 || !(sigma > 0.0) {
        return Err(CmfgError::domain(format!("mass function needs t >= 0, sigma > 0; got t={t}, sigma={sigma}")));
    }
    for &(y, _) in atoms {
        if !(y >= 0.0) || !y.is_finite() {
            return Err(CmfgError::domain(format!("atom position {y} outside [0, inf)")));
        }
    }
    if t == 0.0 {
        return Ok(atoms.iter().map(|&(_, m)| m).sum());
    }
    let s = sigma * (2.0 * t).sqrt();
    Ok(atoms.iter().map(|&(y, m)| m * libm::erf(y / s)).sum())
}

/// `mass_function_heat_atoms` applied to the cells of a discrete measure,
/// with the grid's diffusion coefficient.
pub fn mass_function_heat(m0: &MeasureVector, t: f64) -> Result<f64> {
    let atoms: Vec<(f64, f64)> = m0.iter().collect();
    mass_function_heat_atoms(&atoms, t, m0.grid.sigma)
}

/// Mass accounting along a forward solve. `eta` is the surviving mass at each
/// time node; `absorbed_left` and `lost_right` are the cumulative boundary
/// losses, satisfying `eta[k] + absorbed_left[k] + lost_right[k] = eta[0]`
/// exactly (a telescoping identity of the scheme). The Hölder estimate is a
/// log-log fit of `eta` increments over the last nine tenths of the horizon.
#[derive(Debug, Clone, Serialize)]
pub struct MassHistory {
    pub times: Vec<f64>,
    pub eta: Vec<f64>,
    pub absorbed_left: Vec<f64>,
    pub lost_right: Vec<f64>,
    pub clamp_defect: f64,
    pub holder_estimate: Option<HolderFit>,
}

/// Implicit finite-volume solve of the forward equation. `drift(k, i)` is the
/// SDE velocity at time level `k` (the target level of the step into it) and
/// interior node `i` in `1..=nx`. Upwind donor-cell advection plus centered
/// diffusion gives an M-matrix, so nonnegative data stays nonnegative and
/// surviving mass never increases; roundoff negatives are clamped (unsigned
/// input only) and the total clamped mass is reported.
pub fn fp_solve(
    grid: &Grid,
    m0: &MeasureVector,
    drift: &dyn Fn(usize, usize) -> f64,
) -> Result<(MeasureTrajectory, MassHistory)> {
    if !m0.grid.same_mesh(grid) {
        return Err(CmfgError::MeshMismatch("fp_solve: initial measure lives on a different mesh".into()));
    }
    let (nx, nt) = (grid.nx, grid.nt);
    let (dx, dt) = (grid.dx(), grid.dt());
    let alpha = grid.sigma * grid.sigma * dt / (2.0 * dx * dx);
    let lam = dt / dx;

    let mut data = Array2::zeros((nt + 1, nx));
    data.row_mut(0).assign(&m0.masses);

    let mut eta = Vec::with_capacity(nt + 1);
    let mut absorbed_left = Vec::with_capacity(nt + 1);
    let mut lost_right = Vec::with_capacity(nt + 1);
    eta.push(m0.masses.sum());
    absorbed_left.push(0.0);
    lost_right.push(0.0);
    let mut clamp_defect = 0.0;

    let mut sub = vec![0.0; nx];
    let mut diag = vec![0.0; nx];
    let mut sup = vec![0.0; nx];
    let mut v = vec![0.0; nx + 1];

    for k in 1..=nt {
        for i in 1..=nx {
            let vi = drift(k, i);
            if !vi.is_finite() {
                return Err(CmfgError::numeric(format!("fp_solve: drift not finite at level {k}, node {i}")));
            }
            v[i] = vi;
        }
        for i in 1..=nx {
            let (vp, vm) = (v[i].max(0.0), v[i].min(0.0));
            diag[i - 1] = 1.0 + 2.0 * alpha + lam * (vp - vm);
            if i > 1 {
                sub[i - 1] = -alpha - lam * v[i - 1].max(0.0);
            }
            if i < nx {
                sup[i - 1] = -alpha + lam * v[i + 1].min(0.0);
            }
        }
        let rhs: Vec<f64> = data.row(k - 1).to_vec();
        let mut next = tridiag::solve(&sub[1..], &diag, &sup[..nx - 1], &rhs)?;
        if !m0.signed {
            for m in next.iter_mut() {
                if *m < 0.0 {
                    if *m < -NEG_MASS_TOL {
                        return Err(CmfgError::numeric(format!(
                            "fp_solve produced mass {m} below the roundoff clamp at level {k}"
                        )));
                    }
                    clamp_defect += -*m;
                    *m = 0.0;
                }
            }
        }
        let left = (alpha - lam * v[1].min(0.0)) * next[0];
        let right = (alpha + lam * v[nx].max(0.0)) * next[nx - 1];
        absorbed_left.push(absorbed_left[k - 1] + left);
        lost_right.push(lost_right[k - 1] + right);
        eta.push(next.iter().sum());
        for (j, m) in next.into_iter().enumerate() {
            data[(k, j)] = m;
        }
    }

    let times: Vec<f64> = (0..=nt).map(|k| grid.t(k)).collect();
    let window = (0.1 * grid.t_h, grid.t_h);
    let holder_estimate = holder_fit(&times, &eta, window).ok();
    let traj = MeasureTrajectory { data, grid: *grid, signed: m0.signed };
    Ok((traj, MassHistory { times, eta, absorbed_left, lost_right, clamp_defect, holder_estimate }))
}

/// Particle endpoint of the same dynamics: Euler steps plus a Brownian-bridge
/// absorption test per substep (crossing probability
/// `exp(-2 x_k x_{k+1} / (sigma^2 dt))`), which removes the O(sqrt(dt))
/// barrier bias of naive Euler. Results are binned on the grid of `m0` at the
/// grid's time nodes scaled to `horizon`. Paths run in fixed-size batches with
/// one counter-mode RNG stream per batch, and the integer counts are reduced
/// in batch order, so output depends only on `seed`, not on thread count.
pub struct McOutput {
    pub times: Vec<f64>,
    pub measures: Vec<MeasureVector>,
    pub survival: Vec<f64>,
    pub n_paths: usize,
}

pub fn mc_absorbed_sde(
    m0: &MeasureVector,
    drift: &(dyn Fn(f64, f64) -> f64 + Sync),
    sigma: f64,
    n_paths: usize,
    dt_mc: f64,
    horizon: f64,
    seed: u64,
) -> Result<McOutput> {
    if n_paths == 0 || !(dt_mc > 0.0) || !(horizon > 0.0) || !(sigma > 0.0) {
        return Err(CmfgError::domain(format!(
            "mc_absorbed_sde needs n_paths > 0, dt_mc > 0, horizon > 0, sigma > 0; got {n_paths}, {dt_mc}, {horizon}, {sigma}"
        )));
    }
    let grid = m0.grid;
    let total = m0.total_mass();
    if m0.signed || total <= 0.0 {
        return Err(CmfgError::domain("mc_absorbed_sde needs a nonzero unsigned initial measure"));
    }
    let nx = grid.nx;
    let dx = grid.dx();
    let n_out = grid.nt;
    let dt_out = horizon / n_out as f64;
    let n_sub = (dt_out / dt_mc).ceil().max(1.0) as usize;
    let dt_eff = dt_out / n_sub as f64;
    let sq = sigma * dt_eff.sqrt();

    // cell sampler: cumulative masses, inverse transform with in-cell jitter
    let mut cum = Vec::with_capacity(nx);
    let mut acc = 0.0;
    for &m in m0.masses.iter() {
        acc += m;
        cum.push(acc);
    }

    const BATCH: usize = 8192;
    let n_batches = n_paths.div_ceil(BATCH);

    let batch_results: Vec<(Vec<u32>, Vec<u32>)> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let lo = b * BATCH;
            let hi = ((b + 1) * BATCH).min(n_paths);
            let mut counts = vec![0u32; (n_out + 1) * nx];
            let mut alive_counts = vec![0u32; n_out + 1];
            for _ in lo..hi {
                let u: f64 = rng.random_range(0.0..total);
                let j = cum.partition_point(|&c| c < u).min(nx - 1);
                let prev = if j == 0 { 0.0 } else { cum[j - 1] };
                let w = cum[j] - prev;
                let frac: f64 = if w > 0.0 { (u - prev) / w } else { 0.5 };
                let mut x = grid.x(j + 1) - 0.5 * dx + frac * dx;
                let mut alive = true;

                let bin = |x: f64| -> usize {
                    ((x / dx).round() as isize).clamp(1, nx as isize) as usize - 1
                };
                alive_counts[0] += 1;
                counts[bin(x)] += 1;

                'time: for k in 1..=n_out {
                    if alive {
                        for s in 0..n_sub {
                            let t = (k - 1) as f64 * dt_out + s as f64 * dt_eff;
                            let z: f64 = rng.sample(rand_distr::StandardNormal);
                            let xn = x + drift(t, x) * dt_eff + sq * z;
                            if xn <= 0.0 {
                                alive = false;
                            } else {
                                let expo = -2.0 * x * xn / (sigma * sigma * dt_eff);
                                if expo > -30.0 && rng.random_range(0.0..1.0) < expo.exp() {
                                    alive = false;
                                }
                            }
                            x = xn;
                            if !alive {
                                continue 'time;
                            }
                        }
                        alive_counts[k] += 1;
                        counts[k * nx + bin(x)] += 1;
                    }
                }
            }
            (counts, alive_counts)
        })
        .collect();

    let mut counts = vec![0u64; (n_out + 1) * nx];
    let mut alive = vec![0u64; n_out + 1];
    for (c, a) in batch_results {
        for (tot, v) in counts.iter_mut().zip(c) {
            *tot += v as u64;
        }
        for (tot, v) in alive.iter_mut().zip(a) {
            *tot += v as u64;
        }
    }

    let scale = total / n_paths as f64;
    let times: Vec<f64> = (0..=n_out).map(|k| k as f64 * dt_out).collect();
    let survival: Vec<f64> = alive.iter().map(|&a| a as f64 * scale).collect();
    let mut measures = Vec::with_capacity(n_out + 1);
    for k in 0..=n_out {
        let cells: Vec<f64> = (0..nx).map(|j| counts[k * nx + j] as f64 * scale).collect();
        measures.push(MeasureVector::from_cells(grid, cells, false)?);
    }
    Ok(McOutput { times, measures, survival, n_paths })
}

/// Envelope factor `(sigma^2 t)^{-n/2} P_n(|x| / sqrt(sigma^2 t)) S(x, t)`
/// with `P_n` the probabilists' Hermite polynomial, for derivative orders
/// `n <= 3`. For `x > 0` this equals `(-1)^n` times the n-th spatial
/// derivative of the heat kernel.
pub fn hermite_kernel_factor(n: usize, x: f64, t: f64, sigma: f64) -> Result<f64> {
    if n > 3 {
        return Err(CmfgError::domain(format!("hermite factor implemented for n <= 3, got {n}")));
    }
    let s = heat_kernel(x, t, sigma)?;
    let tau = sigma * sigma * t;
    let z = x.abs() / tau.sqrt();
    let he = match n {
        0 => 1.0,
        1 => z,
        2 => z * z - 1.0,
        _ => z * z * z - 3.0 * z,
    };
    Ok(tau.powf(-(n as f64) / 2.0) * he * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        // n even
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn kernel_peak_symmetry_and_mass() {
        let t = 1.0 / (2.0 * std::f64::consts::PI);
        assert_abs_diff_eq!(heat_kernel(0.0, t, 1.0).unwrap(), 1.0, epsilon = 1e-14);
        for k in 0..100 {
            let x = -5.0 + 0.1 * k as f64;
            assert_abs_diff_eq!(
                heat_kernel(x, 0.7, 1.3).unwrap(),
                heat_kernel(-x, 0.7, 1.3).unwrap(),
                epsilon = 1e-15
            );
        }
        let mass = simpson(|x| heat_kernel(x, 0.5, 1.0).unwrap(), -40.0, 40.0, 40_000);
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-9);
        assert!(heat_kernel(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn heat_solution_total_mass_matches_mass_function() {
        let g = Grid::new(8.0, 399, 1.0, 100, 1.0).unwrap();
        let m0 = MeasureVector::dirac(g, 1.0).unwrap();
        let sol = heat_solution(&m0, 0.1, 1.0).unwrap();
        let eta = mass_function_heat(&m0, 0.1).unwrap();
        // the cells tile [dx/2, L - dx/2]; adding the images mass of the two
        // leftover slivers must reproduce the erf-route mass exactly
        let s = 0.1f64.sqrt();
        let seg = |a: f64, b: f64| -> f64 {
            (std_normal_cdf((b - 1.0) / s) - std_normal_cdf((a - 1.0) / s))
                - (std_normal_cdf((b + 1.0) / s) - std_normal_cdf((a + 1.0) / s))
        };
        let dx = g.dx();
        let sliver = seg(0.0, 0.5 * dx);
        let tail = (1.0 - std_normal_cdf((g.l - 0.5 * dx - 1.0) / s))
            - (1.0 - std_normal_cdf((g.l - 0.5 * dx + 1.0) / s));
        assert!(sliver > 0.0 && sliver < 1e-4);
        assert_abs_diff_eq!(sol.total_mass() + sliver + tail, eta, epsilon = 1e-12);
        // Dirichlet boundary: only a trace has diffused down to the first
        // cell; the density vanishes linearly there, so the cell holds about
        // eight slivers' worth
        assert!(sol.masses[0] > 0.0 && sol.masses[0] < 10.0 * sliver);
    }

    #[test]
    fn heat_solution_at_zero_time_is_identity() {
        let g = Grid::new(8.0, 199, 1.0, 100, 1.0).unwrap();
        let m0 = MeasureVector::uniform(g, 0.5, 1.5, 0.9).unwrap();
        let sol = heat_solution(&m0, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(sol.tv_norm(), m0.tv_norm(), epsilon = 0.0);
    }

    #[test]
    fn mass_function_examples() {
        let g = Grid::new(8.0, 399, 1.0, 100, 1.0).unwrap();
        let m0 = MeasureVector::dirac(g, 1.0).unwrap();
        // erf(1/sqrt(2)) at t = 1, sigma = 1
        assert_abs_diff_eq!(
            mass_function_heat(&m0, 1.0).unwrap(),
            libm::erf(1.0 / std::f64::consts::SQRT_2),
            epsilon = 1e-12
        );
        // short-time limit recovers full mass
        assert_abs_diff_eq!(mass_function_heat(&m0, 1e-12).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mass_function_heat(&m0, 0.0).unwrap(), 1.0, epsilon = 0.0);
    }

    #[test]
    fn mass_function_matches_quadrature_of_tail_representation() {
        // independent route: integrate the Gaussian-weighted tail function
        let atoms = [(0.4, 0.3), (1.0, 0.5), (2.5, 0.2)];
        let (t, sigma) = (0.37f64, 1.2);
        let tail = |x: f64| -> f64 {
            atoms.iter().filter(|&&(y, _)| y > t.sqrt() * x).map(|&(_, m)| m).sum()
        };
        let pref = (2.0 / (std::f64::consts::PI * sigma * sigma)).sqrt();
        let gauss = |x: f64| pref * (-x * x / (2.0 * sigma * sigma)).exp();
        // the tail level is constant between the points where an atom drops
        // out, so quadrature only has to handle the gaussian factor per piece
        let mut cuts: Vec<f64> = atoms.iter().map(|&(y, _)| y / t.sqrt()).collect();
        cuts.insert(0, 0.0);
        cuts.push(15.0 * sigma);
        let quad: f64 = cuts
            .windows(2)
            .map(|w| tail(0.5 * (w[0] + w[1])) * simpson(&gauss, w[0], w[1], 20_000))
            .sum();
        let exact = mass_function_heat_atoms(&atoms, t, sigma).unwrap();
        assert_abs_diff_eq!(quad, exact, epsilon = 1e-9);
    }

    #[test]
    fn fp_zero_drift_tracks_images() {
        let g = Grid::new(6.0, 99, 0.5, 125, 1.0).unwrap();
        let m0 = MeasureVector::mollified_dirac(g, 1.0, 0.1, 1.0).unwrap();
        let (traj, hist) = fp_solve(&g, &m0, &|_, _| 0.0).unwrap();
        let exact = heat_solution(&m0, 0.5, 1.0).unwrap();
        let last = traj.measure_at(g.nt);
        let dx = g.dx();
        let sup = last
            .masses
            .iter()
            .zip(exact.masses.iter())
            .map(|(a, b)| ((a - b) / dx).abs())
            .fold(0.0f64, f64::max);
        assert!(sup < 2e-2, "density sup error {sup}");
        assert_abs_diff_eq!(hist.eta[g.nt], mass_function_heat(&m0, 0.5).unwrap(), epsilon = 5e-3);
    }

    #[test]
    fn fp_mass_identity_is_exact() {
        let g = Grid::new(4.0, 80, 0.3, 60, 0.8).unwrap();
        let m0 = MeasureVector::uniform(g, 0.5, 2.0, 1.0).unwrap();
        // drift changes sign in space and time to exercise both upwind branches
        let drift = |k: usize, i: usize| 0.8 * ((i as f64 * 0.2).sin() - 0.3) + 0.05 * (k as f64 * 0.1).cos();
        let (_, hist) = fp_solve(&g, &m0, &drift).unwrap();
        for k in 0..=g.nt {
            let balance = hist.eta[k] + hist.absorbed_left[k] + hist.lost_right[k];
            assert_abs_diff_eq!(balance, hist.eta[0], epsilon = 1e-12);
        }
        assert!(hist.lost_right[g.nt] >= 0.0 && hist.absorbed_left[g.nt] > 0.0);
    }

    #[test]
    fn fp_eta_nonincreasing_and_nonnegative() {
        let g = Grid::new(5.0, 60, 0.4, 40, 1.0).unwrap();
        let m0 = MeasureVector::dirac(g, 0.8).unwrap();
        let (traj, hist) = fp_solve(&g, &m0, &|_, i| -0.5 - 0.1 * (i as f64 * 0.3).cos()).unwrap();
        for k in 1..=g.nt {
            assert!(hist.eta[k] <= hist.eta[k - 1] + 1e-13);
        }
        for k in 0..=g.nt {
            assert!(traj.row(k).iter().all(|&m| m >= 0.0));
        }
        assert!(hist.clamp_defect < 1e-10);
    }

    #[test]
    fn fp_weak_form_consistency_under_refinement() {
        // d/dt <phi, m> vs <sigma^2/2 phi'' + v phi', m> for compactly
        // supported smooth phi; the defect should shrink with the mesh
        let run = |nx: usize, nt: usize| -> f64 {
            let g = Grid::new(6.0, nx, 0.4, nt, 1.0).unwrap();
            let m0 = MeasureVector::mollified_dirac(g, 2.0, 0.2, 1.0).unwrap();
            let v = |_k: usize, i: usize| -0.4 * ((0.5 * (i as f64) * g.dx()).sin());
            let (traj, _) = fp_solve(&g, &m0, &v).unwrap();
            let phi = |x: f64| {
                let z: f64 = (x - 2.5) / 1.5;
                if z.abs() >= 1.0 { 0.0 } else { (1.0 - z * z).powi(3) }
            };
            let dphi = |x: f64| {
                let z: f64 = (x - 2.5) / 1.5;
                if z.abs() >= 1.0 { 0.0 } else { -6.0 * z * (1.0 - z * z).powi(2) / 1.5 }
            };
            let d2phi = |x: f64| {
                let z: f64 = (x - 2.5) / 1.5;
                if z.abs() >= 1.0 {
                    0.0
                } else {
                    (-6.0 * (1.0 - z * z).powi(2) + 24.0 * z * z * (1.0 - z * z)) / (1.5 * 1.5)
                }
            };
            let dt = g.dt();
            let mut worst = 0.0f64;
            for k in [nt / 4, nt / 2, 3 * nt / 4] {
                let a = traj.measure_at(k);
                let b = traj.measure_at(k + 1);
                let lhs = (b.quadrature(phi) - a.quadrature(phi)) / dt;
                let rhs: f64 = b
                    .iter()
                    .enumerate()
                    .map(|(j, (x, m))| (0.5 * d2phi(x) + v(k + 1, j + 1) * dphi(x)) * m)
                    .sum();
                worst = worst.max((lhs - rhs).abs());
            }
            worst
        };
        let coarse = run(60, 40);
        let fine = run(120, 80);
        assert!(fine < 0.75 * coarse, "coarse {coarse}, fine {fine}");
        assert!(fine < 0.05);
    }

    #[test]
    fn mc_survival_near_exact_erf() {
        let g = Grid::new(8.0, 199, 1.0, 50, 1.0).unwrap();
        let m0 = MeasureVector::dirac(g, 1.0).unwrap();
        let out = mc_absorbed_sde(&m0, &|_, _| 0.0, 1.0, 20_000, 0.01, 1.0, 7).unwrap();
        let exact = libm::erf(1.0 / std::f64::consts::SQRT_2);
        let se = (exact * (1.0 - exact) / 20_000.0f64).sqrt();
        let err = (out.survival[g.nt] - exact).abs();
        assert!(err < 4.0 * se, "err {err}, 4se {}", 4.0 * se);
        // survival is a nonincreasing step curve starting at the full mass
        assert_abs_diff_eq!(out.survival[0], 1.0, epsilon = 0.0);
        for k in 1..out.survival.len() {
            assert!(out.survival[k] <= out.survival[k - 1]);
        }
    }

    #[test]
    fn mc_binned_measure_close_to_fp() {
        let g = Grid::new(6.0, 120, 0.5, 50, 1.0).unwrap();
        let m0 = MeasureVector::uniform(g, 0.8, 1.8, 1.0).unwrap();
        let (traj, hist) = fp_solve(&g, &m0, &|_, _| -0.3).unwrap();
        let out = mc_absorbed_sde(&m0, &|_, _| -0.3, 1.0, 40_000, 0.005, 0.5, 11).unwrap();
        let fp_last = traj.measure_at(g.nt);
        let mc_last = &out.measures[g.nt];
        let l1: f64 = fp_last
            .masses
            .iter()
            .zip(mc_last.masses.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(l1 < 0.06, "l1 distance {l1}");
        assert!((out.survival[g.nt] - hist.eta[g.nt]).abs() < 0.02);
    }

    #[test]
    fn mc_same_seed_reproduces() {
        let g = Grid::new(4.0, 50, 0.2, 10, 1.0).unwrap();
        let m0 = MeasureVector::dirac(g, 1.0).unwrap();
        let a = mc_absorbed_sde(&m0, &|_, x| -0.2 * x, 1.0, 9000, 0.01, 0.2, 42).unwrap();
        let b = mc_absorbed_sde(&m0, &|_, x| -0.2 * x, 1.0, 9000, 0.01, 0.2, 42).unwrap();
        assert_eq!(a.survival, b.survival);
        for (ma, mb) in a.measures.iter().zip(b.measures.iter()) {
            assert_eq!(ma.masses.as_slice().unwrap(), mb.masses.as_slice().unwrap());
        }
        let c = mc_absorbed_sde(&m0, &|_, x| -0.2 * x, 1.0, 9000, 0.01, 0.2, 43).unwrap();
        assert_ne!(a.survival, c.survival);
    }

    #[test]
    fn hermite_factors_match_kernel_derivatives() {
        let sigma = 1.1;
        for &(x, t) in &[(0.5, 0.3), (1.7, 0.8), (2.4, 0.05)] {
            let s = |x: f64| heat_kernel(x, t, sigma).unwrap();
            let h = 1e-4;
            let d1 = (s(x + h) - s(x - h)) / (2.0 * h);
            let d2 = (s(x + h) - 2.0 * s(x) + s(x - h)) / (h * h);
            let d3 = (s(x + 2.0 * h) - 2.0 * s(x + h) + 2.0 * s(x - h) - s(x - 2.0 * h)) / (2.0 * h * h * h);
            assert_abs_diff_eq!(hermite_kernel_factor(0, x, t, sigma).unwrap(), s(x), epsilon = 1e-12);
            assert_abs_diff_eq!(hermite_kernel_factor(1, x, t, sigma).unwrap(), -d1, epsilon = 1e-5);
            assert_abs_diff_eq!(hermite_kernel_factor(2, x, t, sigma).unwrap(), d2, epsilon = 1e-4);
            assert_abs_diff_eq!(hermite_kernel_factor(3, x, t, sigma).unwrap(), -d3, epsilon = 1e-3);
        }
        assert!(hermite_kernel_factor(4, 1.0, 1.0, 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn fp_invariants_random_drift(
            amp in -1.0f64..1.0,
            freq in 0.1f64..2.0,
            y in 0.5f64..3.0,
        ) {
            let g = Grid::new(4.0, 50, 0.2, 20, 1.0).unwrap();
            let m0 = MeasureVector::dirac(g, y).unwrap();
            let drift = move |_k: usize, i: usize| amp * (freq * i as f64 * g.dx()).sin();
            let (traj, hist) = fp_solve(&g, &m0, &drift).unwrap();
            for k in 1..=g.nt {
                prop_assert!(hist.eta[k] <= hist.eta[k - 1] + 1e-13);
                prop_assert!(traj.row(k).iter().all(|&m| m >= 0.0));
                let balance = hist.eta[k] + hist.absorbed_left[k] + hist.lost_right[k];
                prop_assert!((balance - hist.eta[0]).abs() < 1e-12);
            }
        }
    }
}
