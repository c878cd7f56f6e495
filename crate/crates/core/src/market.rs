//! Net energy metering, quadratic utilities and the rational prosumer's
//! response to a linear incentive.

use crate::error::{Error, Result};

/// Flat NEM tariff shared by every prosumer: the net injection `p` is
/// charged `-pi p + pi0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tariff {
    /// Retail rate, currency per unit power.
    pub pi: f64,
    /// Non-volumetric surcharge, currency.
    pub pi0: f64,
}

impl Tariff {
    pub fn new(pi: f64, pi0: f64) -> Result<Self> {
        if !(pi.is_finite() && pi > 0.0) || !pi0.is_finite() {
            return Err(Error::Validation(format!(
                "retail rate must be positive and finite (pi = {pi}, pi0 = {pi0})"
            )));
        }
        Ok(Tariff { pi, pi0 })
    }
}

/// A bus customer with utility `U(d) = -(alpha/2) d^2 + beta d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prosumer {
    pub alpha: f64,
    pub beta: f64,
    /// Behind-the-meter active generation.
    pub r: f64,
    /// Reactive power, entering the voltage model as `+X q`; negative for
    /// a load that absorbs it.
    pub q: f64,
    pub d_min: f64,
    pub d_max: f64,
}

impl Prosumer {
    /// A prosumer with unbounded demand flexibility.
    pub fn new(alpha: f64, beta: f64, r: f64, q: f64) -> Self {
        Prosumer {
            alpha,
            beta,
            r,
            q,
            d_min: 0.0,
            d_max: f64::INFINITY,
        }
    }

    pub fn validate(&self, tariff: &Tariff) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Validation(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !self.beta.is_finite() || self.beta < tariff.pi {
            return Err(Error::Validation(format!(
                "beta = {} is below the retail rate {}; nominal demand would be negative",
                self.beta, tariff.pi
            )));
        }
        if !self.r.is_finite() || self.r < 0.0 || !self.q.is_finite() {
            return Err(Error::Validation(format!(
                "generation must be finite and nonnegative (r = {}, q = {})",
                self.r, self.q
            )));
        }
        if self.d_min.is_nan() || self.d_max.is_nan() || self.d_min > self.d_max {
            return Err(Error::Validation(format!(
                "demand bounds [{}, {}] are empty",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }

    /// Smallest incentive keeping the demand response nonnegative, `pi - beta`.
    pub fn incentive_floor(&self, tariff: &Tariff) -> f64 {
        tariff.pi - self.beta
    }
}

pub fn utility(pros: &Prosumer, d: f64) -> Result<f64> {
    if d < 0.0 {
        return Err(Error::Domain(format!("demand must be nonnegative, got {d}")));
    }
    Ok(-0.5 * pros.alpha * d * d + pros.beta * d)
}

/// NEM charge for a net injection `p` (negative when the prosumer is paid).
pub fn nem_charge(tariff: &Tariff, p: f64) -> f64 {
    -tariff.pi * p + tariff.pi0
}

/// Surplus-maximizing demand with no incentive, `(beta - pi) / alpha`.
///
/// The demand bounds are not applied; see [`clamped_demand`].
pub fn nominal_demand(pros: &Prosumer, tariff: &Tariff) -> f64 {
    (pros.beta - tariff.pi) / pros.alpha
}

/// Affine response `d_hat + xi / alpha`, with no validity check.
pub fn demand_response(pros: &Prosumer, tariff: &Tariff, xi: f64) -> f64 {
    nominal_demand(pros, tariff) + xi / pros.alpha
}

/// Maximizer of the shaped surplus under incentive `xi`.
///
/// Fails with [`Error::ConstraintViolation`] when `xi < pi - beta`, where the
/// unconstrained maximizer is a negative demand.
pub fn optimal_demand(pros: &Prosumer, tariff: &Tariff, xi: f64) -> Result<f64> {
    let floor = pros.incentive_floor(tariff);
    if xi < floor {
        return Err(Error::ConstraintViolation(format!(
            "incentive {xi} is below the floor {floor}; demand would be negative"
        )));
    }
    Ok(demand_response(pros, tariff, xi))
}

/// The response projected onto `[d_min, d_max]`.
pub fn clamped_demand(pros: &Prosumer, tariff: &Tariff, xi: f64) -> f64 {
    demand_response(pros, tariff, xi).clamp(pros.d_min, pros.d_max)
}

/// Incentive `xi (d - d_hat)` paid for deviating from the nominal demand.
pub fn incentive_payment(pros: &Prosumer, tariff: &Tariff, xi: f64, d: f64) -> f64 {
    xi * (d - nominal_demand(pros, tariff))
}

/// Utility minus the NEM charge, plus the incentive.
pub fn surplus(pros: &Prosumer, tariff: &Tariff, xi: f64, d: f64) -> Result<f64> {
    let u = utility(pros, d)?;
    Ok(u - nem_charge(tariff, pros.r - d) + incentive_payment(pros, tariff, xi, d))
}
