//! Solver and verification harness for a Cournot mean field game of controls
//! with absorption at zero reserves.
//!
//! The backward value equation and the forward population equation are coupled
//! through a market-clearing aggregate `Q*(t)`; the crate solves that system,
//! differentiates the resulting value map with respect to the population
//! measure through a linearized forward-backward system, and assembles the
//! master-equation residual together with the a priori bound checks.

pub mod consts;
pub mod diagnostics;
pub mod error;
pub mod fokker_planck;
pub mod grid;
pub mod hamiltonian;
pub mod hjb;
pub mod linearized;
pub mod master_field;
pub mod measure;
pub mod mfg_solver;
pub mod tridiag;

pub use error::{CmfgError, Result};
pub use grid::Grid;
pub use hamiltonian::{HamiltonianPoint, PriceModel};
pub use measure::{MeasureTrajectory, MeasureVector};
