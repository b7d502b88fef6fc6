//! Cournot profit, best response, Hamiltonian derivatives, and the
//! market-clearing fixed point.
//!
//! A producer holding marginal continuation value `a` facing weighted
//! aggregate output `eps*Q` earns `q*(P(eps*Q + q) - a)` at rate `q`; the
//! Hamiltonian is the maximized profit and its `a`-derivative is minus the
//! maximizer. Everything here is a pure function of immutable inputs.

use crate::consts::{Q_CAP_WIDEN, ROOT_TOL};
use crate::error::{CmfgError, Result};
use crate::measure::MeasureVector;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};
use std::fmt;
use std::sync::Arc;

type PriceFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceKind {
    Linear,
    Custom,
}

/// Inverse demand schedule `P` with its first two derivatives, the quantity
/// `saturation` where the price hits zero, and a bound on the relative
/// prudence `-q P''(q)/P'(q)`.
#[derive(Clone)]
pub struct PriceModel {
    kind: PriceKind,
    name: String,
    params: Vec<(&'static str, f64)>,
    p: PriceFn,
    dp: PriceFn,
    d2p: PriceFn,
    saturation: f64,
    prudence_bound: f64,
}

impl fmt::Debug for PriceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PriceModel")
            .field("kind", &self.kind)
            .field("name", &self.name)
            .field("saturation", &self.saturation)
            .field("prudence_bound", &self.prudence_bound)
            .finish()
    }
}

impl Serialize for PriceModel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("PriceModel", 2)?;
        s.serialize_field("kind", &self.name)?;
        let params: std::collections::BTreeMap<&str, f64> = self.params.iter().copied().collect();
        s.serialize_field("params", &params)?;
        s.end()
    }
}

impl PriceModel {
    /// `P(q) = 1 - q`.
    pub fn linear() -> PriceModel {
        PriceModel {
            kind: PriceKind::Linear,
            name: "linear".into(),
            params: vec![],
            p: Arc::new(|q| 1.0 - q),
            dp: Arc::new(|_| -1.0),
            d2p: Arc::new(|_| 0.0),
            saturation: 1.0,
            prudence_bound: 0.0,
        }
    }

    /// Constant relative prudence `rho` in (0,1): `P'(q) = -q^{-rho}`, so
    /// `P(q) = p0 - q^{1-rho}/(1-rho)` and the price saturates at
    /// `((1-rho) p0)^{1/(1-rho)}`.
    pub fn constant_prudence(rho: f64, p0: f64) -> Result<PriceModel> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(CmfgError::domain(format!(
                "constant-prudence model needs rho in (0,1), got {rho}"
            )));
        }
        if !(p0 > 0.0) {
            return Err(CmfgError::domain(format!("P(0) = {p0} must be positive")));
        }
        let saturation = ((1.0 - rho) * p0).powf(1.0 / (1.0 - rho));
        Ok(PriceModel {
            kind: PriceKind::Custom,
            name: "constant_prudence".into(),
            params: vec![("rho", rho), ("p0", p0)],
            p: Arc::new(move |q| p0 - q.powf(1.0 - rho) / (1.0 - rho)),
            dp: Arc::new(move |q| -q.powf(-rho)),
            d2p: Arc::new(move |q| rho * q.powf(-rho - 1.0)),
            saturation,
            prudence_bound: rho,
        })
    }

    /// Arbitrary schedule from callable `(P, P', P'')`; never differentiated
    /// numerically. Checks `P(0) > 0`, `P(saturation) = 0` and strict decrease
    /// on a sample.
    pub fn custom(
        name: impl Into<String>,
        p: PriceFn,
        dp: PriceFn,
        d2p: PriceFn,
        saturation: f64,
        prudence_bound: f64,
    ) -> Result<PriceModel> {
        if !(p(0.0) > 0.0) {
            return Err(CmfgError::domain("custom price model must have P(0) > 0"));
        }
        if !(saturation > 0.0) || p(saturation).abs() > 1e-10 {
            return Err(CmfgError::domain(format!(
                "P(saturation) = {:.3e} is not zero within 1e-10",
                p(saturation)
            )));
        }
        for k in 1..=64 {
            let q = saturation * k as f64 / 64.0;
            if !(dp(q) < 0.0) {
                return Err(CmfgError::domain(format!(
                    "custom price model is not strictly decreasing at q = {q}"
                )));
            }
        }
        Ok(PriceModel {
            kind: PriceKind::Custom,
            name: name.into(),
            params: vec![],
            p,
            dp,
            d2p,
            saturation,
            prudence_bound,
        })
    }

    #[inline]
    pub fn kind(&self) -> PriceKind {
        self.kind
    }

    #[inline]
    pub fn is_linear(&self) -> bool {
        self.kind == PriceKind::Linear
    }

    #[inline]
    pub fn eval(&self, q: f64) -> f64 {
        (self.p)(q)
    }

    #[inline]
    pub fn deriv1(&self, q: f64) -> f64 {
        (self.dp)(q)
    }

    #[inline]
    pub fn deriv2(&self, q: f64) -> f64 {
        (self.d2p)(q)
    }

    #[inline]
    pub fn saturation(&self) -> f64 {
        self.saturation
    }

    #[inline]
    pub fn prudence_bound(&self) -> f64 {
        self.prudence_bound
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The concavity condition: the prudence bound must stay below
    /// `(2+eps)/(1+eps)` for the scenario's substitutability.
    pub fn validate_for(&self, eps: f64) -> Result<()> {
        let cap = (2.0 + eps) / (1.0 + eps);
        if self.prudence_bound >= cap {
            return Err(CmfgError::domain(format!(
                "prudence bound {} violates the concavity cap {} at eps = {}",
                self.prudence_bound, cap, eps
            )));
        }
        Ok(())
    }
}

/// Evaluation point `(eps, Q, a)`: substitutability, aggregate output, and
/// marginal continuation value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HamiltonianPoint {
    pub eps: f64,
    pub q_agg: f64,
    pub a: f64,
}

impl HamiltonianPoint {
    pub fn new(eps: f64, q_agg: f64, a: f64) -> Result<HamiltonianPoint> {
        for (name, v) in [("eps", eps), ("Q", q_agg), ("a", a)] {
            if !v.is_finite() || v < 0.0 {
                return Err(CmfgError::domain(format!(
                    "Hamiltonian point field {name} = {v} must be finite and nonnegative"
                )));
            }
        }
        Ok(HamiltonianPoint { eps, q_agg, a })
    }
}

/// Instantaneous profit of producing at rate `q`; zero by definition at `q=0`.
pub fn profit(model: &PriceModel, p: &HamiltonianPoint, q: f64) -> Result<f64> {
    if !(q >= 0.0) {
        return Err(CmfgError::domain(format!("production rate {q} must be nonnegative")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    Ok(q * (model.eval(p.eps * p.q_agg + q) - p.a))
}

/// Relative prudence `-Q P''(Q) / P'(Q)`.
pub fn relative_prudence(model: &PriceModel, q: f64) -> Result<f64> {
    if !(q > 0.0) {
        return Err(CmfgError::domain(format!("relative prudence needs Q > 0, got {q}")));
    }
    let dp = model.deriv1(q);
    if dp == 0.0 {
        return Err(CmfgError::domain("relative prudence undefined where P' = 0"));
    }
    Ok(-q * model.deriv2(q) / dp)
}

/// Unique maximizer `q*` of the profit. Zero exactly when `P(eps*Q) <= a`;
/// otherwise the root of the first-order condition, by safeguarded Newton on
/// the bracket `[0, saturation - eps*Q]`.
pub fn optimal_quantity(model: &PriceModel, p: &HamiltonianPoint) -> Result<f64> {
    if model.is_linear() {
        return Ok((0.5 * (1.0 - p.eps * p.q_agg - p.a)).max(0.0));
    }
    let shift = p.eps * p.q_agg;
    if shift >= model.saturation || model.eval(shift) <= p.a {
        return Ok(0.0);
    }
    // foc(q) = q P'(shift+q) + P(shift+q) - a, strictly decreasing in q
    let foc = |q: f64| q * model.deriv1(shift + q) + model.eval(shift + q) - p.a;
    let dfoc = |q: f64| q * model.deriv2(shift + q) + 2.0 * model.deriv1(shift + q);

    let mut lo = 0.0;
    let mut hi = model.saturation - shift;
    let mut q = 0.5 * (lo + hi);
    for _ in 0..200 {
        let g = foc(q);
        if g.abs() < ROOT_TOL {
            return Ok(q);
        }
        if g > 0.0 {
            lo = q;
        } else {
            hi = q;
        }
        if hi - lo < ROOT_TOL * model.saturation.max(1.0) {
            return Ok(0.5 * (lo + hi));
        }
        let d = dfoc(q);
        let newton = q - g / d;
        q = if d < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Err(CmfgError::numeric(format!(
        "best-response Newton stalled on bracket [{lo:.6e}, {hi:.6e}] at ({}, {}, {})",
        p.eps, p.q_agg, p.a
    )))
}

/// Maximized profit `H(eps, Q, a)`.
pub fn hamiltonian_value(model: &PriceModel, p: &HamiltonianPoint) -> Result<f64> {
    let q = optimal_quantity(model, p)?;
    profit(model, p, q)
}

/// `dH/da = -q*`, the envelope identity (never finite-differenced).
pub fn dh_da(model: &PriceModel, p: &HamiltonianPoint) -> Result<f64> {
    Ok(-optimal_quantity(model, p)?)
}

/// `d²H/da² = -dq*/da = 1 / (-(q* P'' + 2 P'))` at the maximizer, from the
/// implicit-function formula on the first-order condition; zero on the
/// `q* = 0` branch.
pub fn d2h_da2(model: &PriceModel, p: &HamiltonianPoint) -> Result<f64> {
    let q = optimal_quantity(model, p)?;
    if q == 0.0 {
        return Ok(0.0);
    }
    let s = p.eps * p.q_agg + q;
    let curv = q * model.deriv2(s) + 2.0 * model.deriv1(s);
    if !(curv < 0.0) {
        return Err(CmfgError::numeric(format!(
            "profit is not strictly concave at q = {q} (curvature {curv})"
        )));
    }
    Ok(-1.0 / curv)
}

/// `dH/dQ = eps * q* * P'(eps*Q + q*)`.
pub fn dh_dq(model: &PriceModel, p: &HamiltonianPoint) -> Result<f64> {
    let q = optimal_quantity(model, p)?;
    if q == 0.0 {
        return Ok(0.0);
    }
    Ok(p.eps * q * model.deriv1(p.eps * p.q_agg + q))
}

/// `d²H/(dQ da) = -dq*/dQ`, the cross derivative used by the linearized
/// system; zero on the `q* = 0` branch.
pub fn d2h_dqda(model: &PriceModel, p: &HamiltonianPoint) -> Result<f64> {
    let q = optimal_quantity(model, p)?;
    if q == 0.0 {
        return Ok(0.0);
    }
    // Differentiate foc(q*, Q) = q* P'(eps Q + q*) + P(eps Q + q*) - a = 0:
    // dq*/dQ = -eps (q* P'' + P') / (q* P'' + 2 P'), and the cross
    // derivative is minus that.
    let s = p.eps * p.q_agg + q;
    let num = q * model.deriv2(s) + model.deriv1(s);
    let den = q * model.deriv2(s) + 2.0 * model.deriv1(s);
    Ok(p.eps * num / den)
}

/// Upper bound `c(rho_bar, eps) * q*(0,0,0)` for the clearing value.
pub fn q_cap(model: &PriceModel, eps: f64) -> Result<f64> {
    model.validate_for(eps)?;
    let rb = model.prudence_bound();
    let denom = 2.0 + eps - (1.0 + eps) * rb;
    let c = ((2.0 - rb) / denom).max(1.0);
    let q000 = optimal_quantity(model, &HamiltonianPoint::new(0.0, 0.0, 0.0)?)?;
    Ok(c * q000)
}

/// Unique root of `f(Q) = Q - ∫ q*(eps, Q, phi(x)) dm(x)`, by bisection on
/// the a priori interval `[0, 1.01 * q_cap]` to tolerance 1e-12. `phi` holds
/// the marginal values at the cells of `m`, in cell order.
pub fn market_clearing(
    model: &PriceModel,
    eps: f64,
    phi: &[f64],
    m: &MeasureVector,
) -> Result<f64> {
    if phi.len() != m.masses.len() {
        return Err(CmfgError::MeshMismatch(format!(
            "phi has {} entries for {} cells",
            phi.len(),
            m.masses.len()
        )));
    }
    if let Some(bad) = phi.iter().find(|&&a| !(a >= 0.0)) {
        return Err(CmfgError::domain(format!("marginal value {bad} must be nonnegative")));
    }
    let mass = m.total_mass();
    if mass > 1.0 + 1e-9 {
        return Err(CmfgError::domain(format!("total mass {mass} exceeds 1")));
    }
    if mass == 0.0 {
        return Ok(0.0);
    }

    let response = |q_agg: f64| -> Result<f64> {
        let mut total = 0.0;
        for (j, &mj) in m.masses.iter().enumerate() {
            if mj != 0.0 {
                let pt = HamiltonianPoint { eps, q_agg, a: phi[j] };
                total += mj * optimal_quantity(model, &pt)?;
            }
        }
        Ok(total)
    };

    let mut lo = 0.0;
    let mut hi = Q_CAP_WIDEN * q_cap(model, eps)?;
    // f(0) <= 0 always; the a priori bound forces f(hi) >= 0
    let f_hi = hi - response(hi)?;
    if f_hi < 0.0 {
        return Err(CmfgError::numeric(format!(
            "clearing bracket violated: f({hi}) = {f_hi} < 0; prudence assumption broken"
        )));
    }
    while hi - lo > ROOT_TOL {
        let mid = 0.5 * (lo + hi);
        if mid - response(mid)? > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Residual of the clearing relation at a proposed `Q`.
pub fn clearing_residual(
    model: &PriceModel,
    eps: f64,
    q_agg: f64,
    phi: &[f64],
    m: &MeasureVector,
) -> Result<f64> {
    let mut total = 0.0;
    for (j, &mj) in m.masses.iter().enumerate() {
        if mj != 0.0 {
            let pt = HamiltonianPoint { eps, q_agg, a: phi[j] };
            total += mj * optimal_quantity(model, &pt)?;
        }
    }
    Ok(q_agg - total)
}
