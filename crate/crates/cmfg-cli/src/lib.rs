//! Library side of the command-line front end: scenario configs, run
//! dispatch, and deterministic artifact rendering. The `cmfg` binary is a
//! thin argument-parsing shell over these modules.

pub mod config;
pub mod output;
pub mod runner;
