//! Scenario configuration: JSON schema, validation, and construction of the
//! solver-side objects.

use cmfg::hjb::{self, EpsilonSchedule, TerminalData};
use cmfg::mfg_solver::SolveOptions;
use cmfg::{CmfgError, Grid, MeasureVector, PriceModel};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub run: RunSpec,
    pub model: ModelSpec,
    /// initial coupling strength; the schedule ramps it to zero at the horizon
    pub epsilon: f64,
    /// explicit schedule values (length nt + 1) overriding the default ramp
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_values: Option<Vec<f64>>,
    pub r: f64,
    pub grid: GridSpec,
    pub m0: MeasureSpec,
    /// terminal slope at the boundary; defaults to 1/horizon
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_c3: Option<f64>,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RunSpec {
    /// one equilibrium solve of the coupled system
    Solve,
    /// horizon-extension ladder approximating the stationary problem
    InfiniteSolve { horizons: Vec<f64> },
    /// measure-derivative kernel slices K(x, y) at the listed y
    Kernel { ys: Vec<f64> },
    /// master-equation residual assembly
    MasterResidual {
        alpha: f64,
        #[serde(default = "default_stride")]
        y_stride: usize,
    },
    /// multi-start equilibrium probe
    UniquenessProbe { n_starts: usize },
    /// drift-free forward solve against the method-of-images solution
    FpValidate,
    /// drift-free Monte Carlo against the survival-function oracle
    McValidate { n_paths: usize, dt_mc: f64 },
}

fn default_stride() -> usize {
    8
}

impl RunSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            RunSpec::Solve => "solve",
            RunSpec::InfiniteSolve { .. } => "infinite_solve",
            RunSpec::Kernel { .. } => "kernel",
            RunSpec::MasterResidual { .. } => "master_residual",
            RunSpec::UniquenessProbe { .. } => "uniqueness_probe",
            RunSpec::FpValidate => "fp_validate",
            RunSpec::McValidate { .. } => "mc_validate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Linear,
    ConstantPrudence { rho: f64, p0: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub l: f64,
    pub nx: usize,
    pub horizon: f64,
    pub nt: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    Uniform { a: f64, b: f64, mass: f64 },
    Dirac { y: f64 },
    MollifiedDirac { y: f64, width: f64, mass: f64 },
    TruncatedLognormal { mu: f64, s: f64, mass: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSpec {
    fn default() -> SolverSpec {
        let d = SolveOptions::default();
        SolverSpec { damping: d.damping, tol: d.tol, max_iter: d.max_iter }
    }
}

/// Solver-side objects built from a validated config.
pub struct Problem {
    pub grid: Grid,
    pub model: PriceModel,
    pub eps: EpsilonSchedule,
    pub m0: MeasureVector,
    pub terminal: TerminalData,
    pub opts: SolveOptions,
    pub r: f64,
}

impl ScenarioConfig {
    pub fn from_str(text: &str) -> Result<ScenarioConfig, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Build every solver object, running all domain validation on the way.
    pub fn build(&self) -> cmfg::Result<Problem> {
        if !(self.r > 0.0) {
            return Err(CmfgError::domain(format!("discount rate must be positive, got {}", self.r)));
        }
        if self.epsilon < 0.0 {
            return Err(CmfgError::domain(format!("epsilon must be nonnegative, got {}", self.epsilon)));
        }
        let g = &self.grid;
        let grid = Grid::new(g.l, g.nx, g.horizon, g.nt, g.sigma)?;
        let model = match self.model {
            ModelSpec::Linear => PriceModel::linear(),
            ModelSpec::ConstantPrudence { rho, p0 } => PriceModel::constant_prudence(rho, p0)?,
        };
        model.validate_for(self.epsilon)?;
        let eps = match &self.epsilon_values {
            Some(values) => {
                let sched = EpsilonSchedule::from_values(&grid, values.clone())?;
                if (sched.eps0() - self.epsilon).abs() > 1e-12 {
                    return Err(CmfgError::domain(format!(
                        "epsilon_values start at {} but epsilon is {}",
                        sched.eps0(),
                        self.epsilon
                    )));
                }
                sched
            }
            None if self.epsilon == 0.0 => EpsilonSchedule::constant_zero(&grid),
            None => EpsilonSchedule::default_ramp(&grid, self.epsilon)?,
        };
        let m0 = match self.m0 {
            MeasureSpec::Uniform { a, b, mass } => MeasureVector::uniform(grid, a, b, mass)?,
            MeasureSpec::Dirac { y } => MeasureVector::dirac(grid, y)?,
            MeasureSpec::MollifiedDirac { y, width, mass } => MeasureVector::mollified_dirac(grid, y, width, mass)?,
            MeasureSpec::TruncatedLognormal { mu, s, mass } => MeasureVector::truncated_lognormal(grid, mu, s, mass)?,
        };
        let c3 = self.terminal_c3.unwrap_or(1.0 / g.horizon);
        let terminal = hjb::build_terminal(&grid, &model, c3)?;
        let s = self.solver;
        if !(s.damping > 0.0 && s.damping <= 1.0) || !(s.tol > 0.0) || s.max_iter == 0 {
            return Err(CmfgError::domain(format!(
                "solver options out of range: damping {} tol {} max_iter {}",
                s.damping, s.tol, s.max_iter
            )));
        }
        let opts = SolveOptions { damping: s.damping, tol: s.tol, max_iter: s.max_iter };
        Ok(Problem { grid, model, eps, m0, terminal, opts, r: self.r })
    }
}
