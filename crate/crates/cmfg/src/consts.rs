//! Central numeric tolerances. Every hard-coded threshold used by the solvers
//! and the verification reports lives here so the test suite and the reports
//! agree on what "satisfied" means.

/// Bisection tolerance for the market-clearing root and the best-response
/// Newton iteration.
pub const ROOT_TOL: f64 = 1e-12;

/// Widening factor applied to the a priori clearing bracket before bisection,
/// absorbing quadrature error in the best-response integral.
pub const Q_CAP_WIDEN: f64 = 1.01;

/// Stored equilibria must satisfy the clearing relation to this tolerance at
/// every time node.
pub const CLEARING_RESIDUAL_MAX: f64 = 1e-8;

/// Stored linearized solutions must satisfy their scalar relation (iii) to
/// this tolerance at every time node.
pub const LIN_RESIDUAL_MAX: f64 = 1e-8;

/// Cells of nominally nonnegative measures may undershoot zero by at most
/// this much before clamping counts as a defect.
pub const NEG_MASS_TOL: f64 = 1e-12;

/// Slack used when checking a priori bound inequalities that hold exactly in
/// the continuum but involve rounded discrete quantities.
pub const BOUND_SLACK: f64 = 1e-9;

/// Default outer damping for the clearing-path fixed point.
pub const DEFAULT_DAMPING: f64 = 0.5;

/// Default sup-norm tolerance on the clearing-path update.
pub const DEFAULT_FP_TOL: f64 = 1e-7;

/// Default iteration cap for outer fixed points.
pub const DEFAULT_MAX_ITER: usize = 400;
