//! Iterative incentive updates driven by grid measurements.
//!
//! Three controllers with decreasing model knowledge:
//!
//! * [`dual_ascent_step`]: knows `A`, `R` and `pi`; recovers the incentive in
//!   closed form from the multipliers and climbs the dual with measured
//!   voltages and substation power.
//! * [`first_order_step`]: a primal-dual gradient step on the Lagrangian
//!   written in terms of measured demand, using only sensitivity matrices.
//! * [`zero_order_step`]: replaces the primal gradient with a two-point
//!   estimate from perturbed incentives applied to the grid.
//!
//! All three share the projected multiplier update. The Lagrangian built from
//! measured demand weighs the nonnegativity row by `-d`, which is `A` times
//! the row used by dual ascent, so its `nu` equals `A^{-1}` times the
//! multiplier of the explicit form at a common saddle point
//! ([`MultiplierState::explicit_theta`]).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};

use crate::error::{check_dim, Error, Result};
use crate::program::{step_size_bound, OperationalLimits, QpData};

#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierState {
    pub xi: DVector<f64>,
    pub lambda_up: DVector<f64>,
    pub lambda_lo: DVector<f64>,
    pub mu_up: f64,
    pub mu_lo: f64,
    pub nu: DVector<f64>,
    pub iteration: usize,
}

impl MultiplierState {
    pub fn zeros(n: usize) -> Self {
        MultiplierState {
            xi: DVector::zeros(n),
            lambda_up: DVector::zeros(n),
            lambda_lo: DVector::zeros(n),
            mu_up: 0.0,
            mu_lo: 0.0,
            nu: DVector::zeros(n),
            iteration: 0,
        }
    }

    /// Splits a stacked `[lambda_up; lambda_lo; mu_up; mu_lo; nu]`.
    pub fn from_theta(xi: DVector<f64>, theta: &DVector<f64>) -> Result<Self> {
        let n = xi.len();
        check_dim("multipliers", 3 * n + 2, theta.len())?;
        Ok(MultiplierState {
            lambda_up: theta.rows(0, n).into_owned(),
            lambda_lo: theta.rows(n, n).into_owned(),
            mu_up: theta[2 * n],
            mu_lo: theta[2 * n + 1],
            nu: theta.rows(2 * n + 2, n).into_owned(),
            xi,
            iteration: 0,
        })
    }

    pub fn bus_count(&self) -> usize {
        self.xi.len()
    }

    pub fn theta(&self) -> DVector<f64> {
        let n = self.bus_count();
        let mut theta = DVector::zeros(3 * n + 2);
        theta.rows_mut(0, n).copy_from(&self.lambda_up);
        theta.rows_mut(n, n).copy_from(&self.lambda_lo);
        theta[2 * n] = self.mu_up;
        theta[2 * n + 1] = self.mu_lo;
        theta.rows_mut(2 * n + 2, n).copy_from(&self.nu);
        theta
    }

    /// Multipliers in the convention of the compact program, converting the
    /// demand-weighted `nu` of the gradient controllers when `demand_weighted`.
    pub fn explicit_theta(&self, qp: &QpData, demand_weighted: bool) -> DVector<f64> {
        let mut theta = self.theta();
        if demand_weighted {
            let n = self.bus_count();
            for k in 0..n {
                theta[2 * n + 2 + k] *= qp.a[k];
            }
        }
        theta
    }

    fn all_multipliers_nonnegative(&self) -> bool {
        self.theta().iter().all(|t| *t >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    DualAscent,
    FirstOrder,
    ZeroOrder,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::DualAscent, Algorithm::FirstOrder, Algorithm::ZeroOrder];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::DualAscent => "dual",
            Algorithm::FirstOrder => "first",
            Algorithm::ZeroOrder => "zero",
        }
    }

    /// Whether the controller's `nu` is weighted by demand (see the module
    /// documentation).
    pub fn demand_weighted(self) -> bool {
        !matches!(self, Algorithm::DualAscent)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Algorithm::DualAscent),
            "first" => Ok(Algorithm::FirstOrder),
            "zero" => Ok(Algorithm::ZeroOrder),
            other => Err(Error::Validation(format!(
                "unknown algorithm {other:?}; expected dual, first or zero"
            ))),
        }
    }
}

/// Step size used when the configuration leaves it open.
pub fn default_epsilon(algorithm: Algorithm, qp: &QpData) -> f64 {
    match algorithm {
        Algorithm::DualAscent => 0.9 * step_size_bound(qp),
        Algorithm::FirstOrder => 0.3,
        Algorithm::ZeroOrder => 0.05,
    }
}

/// The configured step size or the algorithm default.
pub fn step_epsilon(algorithm: Algorithm, config: &ControllerConfig, qp: &QpData) -> f64 {
    config.epsilon.unwrap_or_else(|| default_epsilon(algorithm, qp))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbationLaw {
    /// Independent uniform `[-1, 1]` components.
    Uniform,
    /// `e_k` with `k` cycling through the buses.
    CoordinateCycle,
}

/// Which measurement feeds the multiplier update of the zero-order method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualFeedback {
    /// A third probe at the unperturbed incentive.
    Unperturbed,
    /// The average of the two perturbed probes.
    PerturbedAverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    /// Step size; `None` selects the per-algorithm default.
    pub epsilon: Option<f64>,
    pub sigma: f64,
    pub rng_seed: u64,
    pub perturbation: PerturbationLaw,
    pub dual_feedback: DualFeedback,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            epsilon: None,
            sigma: 0.02,
            rng_seed: 0,
            perturbation: PerturbationLaw::Uniform,
            dual_feedback: DualFeedback::Unperturbed,
            max_iterations: 100_000,
            tolerance: 1e-6,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(eps) = self.epsilon {
            if !(eps.is_finite() && eps > 0.0) {
                return Err(Error::Validation(format!("epsilon must be positive, got {eps}")));
            }
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Validation(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::Validation(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// Grid state observed under the applied incentive.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub v: DVector<f64>,
    pub p0: f64,
    pub d: DVector<f64>,
}

impl Measurement {
    pub fn check_finite(&self) -> Result<()> {
        if self.v.iter().chain(self.d.iter()).all(|x| x.is_finite()) && self.p0.is_finite() {
            Ok(())
        } else {
            Err(Error::Measurement(format!(
                "measurement contains non-finite entries (p0 = {})",
                self.p0
            )))
        }
    }

    fn average(a: &Measurement, b: &Measurement) -> Measurement {
        Measurement {
            v: (&a.v + &b.v) / 2.0,
            p0: (a.p0 + b.p0) / 2.0,
            d: (&a.d + &b.d) / 2.0,
        }
    }
}

/// What every controller needs to update its multipliers: the limits and the
/// lowest admissible incentive `pi 1 - beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTargets {
    pub limits: OperationalLimits,
    pub incentive_floor: DVector<f64>,
}

impl DualTargets {
    pub fn of(qp: &QpData) -> Self {
        DualTargets {
            limits: qp.limits.clone(),
            incentive_floor: qp.incentive_floor(),
        }
    }
}

/// Prosumer-side quantities the gradient controllers use in the Lagrangian.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketTerms {
    pub pi: f64,
    pub d_hat: DVector<f64>,
    pub c_prime: f64,
}

impl MarketTerms {
    pub fn of(qp: &QpData) -> Self {
        MarketTerms {
            pi: qp.pi,
            d_hat: qp.d_hat.clone(),
            c_prime: qp.c_prime,
        }
    }
}

/// Transposed Jacobians of demand, voltages and substation power with respect
/// to the incentive.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensitivities {
    /// `grad d*`, `N x N`.
    pub demand: DMatrix<f64>,
    /// `grad v`, `N x N`.
    pub voltage: DMatrix<f64>,
    /// `grad p0`, length `N`.
    pub feeder: DVector<f64>,
}

impl Sensitivities {
    /// Exact values for the linear plant: `A`, `-(R A)^T`, `A 1`.
    pub fn exact(qp: &QpData) -> Self {
        let a = DMatrix::from_diagonal(&qp.a);
        Sensitivities {
            voltage: -(&qp.resistance * &a).transpose(),
            demand: a,
            feeder: qp.a.clone(),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        check_dim("demand sensitivity rows", n, self.demand.nrows())?;
        check_dim("demand sensitivity cols", n, self.demand.ncols())?;
        check_dim("voltage sensitivity rows", n, self.voltage.nrows())?;
        check_dim("voltage sensitivity cols", n, self.voltage.ncols())?;
        check_dim("feeder sensitivity", n, self.feeder.len())
    }
}

fn check_measurement(n: usize, meas: &Measurement) -> Result<()> {
    check_dim("measured voltages", n, meas.v.len())?;
    check_dim("measured demand", n, meas.d.len())
}

/// Multiplier terms shared by both Lagrangian forms, excluding `nu`.
fn limit_terms(state: &MultiplierState, meas: &Measurement, limits: &OperationalLimits) -> f64 {
    state.lambda_up.dot(&(&meas.v - &limits.v_max)) - state.lambda_lo.dot(&(&meas.v - &limits.v_min))
        + state.mu_up * (meas.p0 - limits.p0_max)
        - state.mu_lo * (meas.p0 - limits.p0_min)
}

/// Lagrangian of the program evaluated at the state's incentive with
/// measured voltages and substation power.
pub fn lagrangian_explicit(
    qp: &QpData,
    state: &MultiplierState,
    meas: &Measurement,
    limits: &OperationalLimits,
) -> f64 {
    let xi = &state.xi;
    let quad: f64 = qp.a.iter().zip(xi.iter()).map(|(a, x)| a * x * x).sum();
    let cost = quad + qp.b.dot(xi) + qp.c;
    let floor = qp.incentive_floor();
    cost + limit_terms(state, meas, limits) + state.nu.dot(&(floor - xi))
}

/// Lagrangian written with the measured demand in place of the prosumer
/// model: `xi^T (d - d_hat) - pi 1^T d + c' - nu^T d` plus the limit terms.
pub fn lagrangian_implicit(
    state: &MultiplierState,
    meas: &Measurement,
    market: &MarketTerms,
    limits: &OperationalLimits,
) -> f64 {
    let d = &meas.d;
    state.xi.dot(&(d - &market.d_hat)) - market.pi * d.sum() + market.c_prime + limit_terms(state, meas, limits)
        - state.nu.dot(d)
}

/// `[m + eps (v - v_max)]_+` and the other four projected updates, each from
/// its own previous value, with `xi` the incentive the measurement was taken at.
fn update_multipliers(
    state: &MultiplierState,
    xi: &DVector<f64>,
    meas: &Measurement,
    targets: &DualTargets,
    epsilon: f64,
) -> MultiplierState {
    let lim = &targets.limits;
    let plus = |x: f64| x.max(0.0);
    MultiplierState {
        xi: state.xi.clone(),
        lambda_up: (&state.lambda_up + (&meas.v - &lim.v_max) * epsilon).map(plus),
        lambda_lo: (&state.lambda_lo + (&lim.v_min - &meas.v) * epsilon).map(plus),
        mu_lo: plus(state.mu_lo + epsilon * (lim.p0_min - meas.p0)),
        mu_up: plus(state.mu_up + epsilon * (meas.p0 - lim.p0_max)),
        nu: (&state.nu + (&targets.incentive_floor - xi) * epsilon).map(plus),
        iteration: state.iteration + 1,
    }
}

/// Incentive minimizing the Lagrangian for the given multipliers,
/// `(R (lambda_up - lambda_lo) + 1 (mu_lo - mu_up) + A^{-1} nu + pi 1) / 2`.
pub fn dual_ascent_primal(qp: &QpData, state: &MultiplierState) -> DVector<f64> {
    let voltage = &qp.resistance * (&state.lambda_up - &state.lambda_lo);
    let feeder = state.mu_lo - state.mu_up + qp.pi;
    let floor = state.nu.component_div(&qp.a);
    (voltage + floor).add_scalar(feeder) / 2.0
}

/// One projected dual ascent step.
///
/// `meas` must be the grid response to `state.xi`. The multipliers climb the
/// measured constraint values, then the incentive is recovered from the new
/// multipliers, so successive calls iterate `theta <- [theta + eps grad h]_+`.
pub fn dual_ascent_step(
    state: &MultiplierState,
    qp: &QpData,
    meas: &Measurement,
    targets: &DualTargets,
    epsilon: f64,
) -> Result<MultiplierState> {
    check_measurement(state.bus_count(), meas)?;
    meas.check_finite()?;
    let mut next = update_multipliers(state, &state.xi, meas, targets, epsilon);
    next.xi = dual_ascent_primal(qp, &next);
    debug_assert!(next.all_multipliers_nonnegative());
    Ok(next)
}

/// Gradient of the measured-demand Lagrangian with respect to the incentive
/// through the supplied sensitivities.
pub fn first_order_gradient(
    state: &MultiplierState,
    meas: &Measurement,
    sens: &Sensitivities,
    market: &MarketTerms,
) -> DVector<f64> {
    let ones = DVector::from_element(state.bus_count(), 1.0);
    &meas.d - &market.d_hat + &sens.demand * &state.xi - &sens.demand * ones * market.pi
        + &sens.voltage * (&state.lambda_up - &state.lambda_lo)
        + &sens.feeder * (state.mu_up - state.mu_lo)
        - &sens.demand * &state.nu
}

/// One primal-dual gradient step: incentive down the Lagrangian gradient,
/// multipliers up the measured constraint values, both from the current state.
pub fn first_order_step(
    state: &MultiplierState,
    meas: &Measurement,
    sens: &Sensitivities,
    market: &MarketTerms,
    targets: &DualTargets,
    epsilon: f64,
) -> Result<MultiplierState> {
    let n = state.bus_count();
    sens.check(n)?;
    check_measurement(n, meas)?;
    check_dim("nominal demand", n, market.d_hat.len())?;
    meas.check_finite()?;
    let grad = first_order_gradient(state, meas, sens, market);
    let mut next = update_multipliers(state, &state.xi, meas, targets, epsilon);
    next.xi = &state.xi - grad * epsilon;
    Ok(next)
}

/// Draws a perturbation direction for iteration `iteration`.
pub fn draw_perturbation<R: Rng + ?Sized>(
    law: PerturbationLaw,
    n: usize,
    iteration: usize,
    rng: &mut R,
) -> DVector<f64> {
    match law {
        PerturbationLaw::Uniform => DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0)),
        PerturbationLaw::CoordinateCycle => {
            let mut e = DVector::zeros(n);
            e[iteration % n] = 1.0;
            e
        }
    }
}

/// Two-point estimate `zeta / (2 sigma) [L(xi + sigma zeta) - L(xi - sigma zeta)]`
/// of the Lagrangian gradient at fixed multipliers. Returns the estimate with
/// the two probe measurements.
pub fn two_point_gradient<P>(
    state: &MultiplierState,
    zeta: &DVector<f64>,
    sigma: f64,
    probe: &mut P,
    market: &MarketTerms,
    limits: &OperationalLimits,
) -> Result<(DVector<f64>, Measurement, Measurement)>
where
    P: FnMut(&DVector<f64>) -> Result<Measurement>,
{
    let n = state.bus_count();
    let mut eval = |xi: DVector<f64>| -> Result<(f64, Measurement)> {
        let meas = probe(&xi)?;
        check_measurement(n, &meas)?;
        meas.check_finite()?;
        let at = MultiplierState { xi, ..state.clone() };
        Ok((lagrangian_implicit(&at, &meas, market, limits), meas))
    };
    let (l_plus, m_plus) = eval(&state.xi + zeta * sigma)?;
    let (l_minus, m_minus) = eval(&state.xi - zeta * sigma)?;
    Ok((zeta * ((l_plus - l_minus) / (2.0 * sigma)), m_plus, m_minus))
}

/// One zero-order primal-dual step.
///
/// `probe` applies an incentive to the grid and returns what is measured;
/// it is called twice for the perturbed incentives and, under
/// [`DualFeedback::Unperturbed`], once more at `state.xi`.
pub fn zero_order_step<P, R>(
    state: &MultiplierState,
    probe: &mut P,
    config: &ControllerConfig,
    epsilon: f64,
    rng: &mut R,
    market: &MarketTerms,
    targets: &DualTargets,
) -> Result<MultiplierState>
where
    P: FnMut(&DVector<f64>) -> Result<Measurement>,
    R: Rng + ?Sized,
{
    if !(config.sigma.is_finite() && config.sigma > 0.0) {
        return Err(Error::Validation(format!("sigma must be positive, got {}", config.sigma)));
    }
    let n = state.bus_count();
    let zeta = draw_perturbation(config.perturbation, n, state.iteration, rng);
    let (grad, m_plus, m_minus) = two_point_gradient(state, &zeta, config.sigma, probe, market, &targets.limits)?;

    let dual_meas = match config.dual_feedback {
        DualFeedback::Unperturbed => {
            let meas = probe(&state.xi)?;
            check_measurement(n, &meas)?;
            meas.check_finite()?;
            meas
        }
        DualFeedback::PerturbedAverage => Measurement::average(&m_plus, &m_minus),
    };
    let mut next = update_multipliers(state, &state.xi, &dual_meas, targets, epsilon);
    next.xi = &state.xi - grad * epsilon;
    Ok(next)
}

/// The dual ascent map `f(theta) = [theta + eps grad h(theta)]_+`.
pub fn dual_ascent_map(qp: &QpData, theta: &DVector<f64>, epsilon: f64) -> DVector<f64> {
    (theta + qp.dual_gradient(theta) * epsilon).map(|t| t.max(0.0))
}

/// Checks `||f(theta) - f(theta')|| <= ||theta - theta'||` on `trials` pairs
/// of nonnegative multipliers. The first pair is separated along the top
/// eigenvector of `Phi A^{-1} Phi^T` around a point deep in the positive
/// orthant, where the projection is inactive; the rest are uniform draws.
pub fn contraction_check<R: Rng + ?Sized>(qp: &QpData, epsilon: f64, trials: usize, rng: &mut R) -> bool {
    let m = qp.constraint_count();
    let slack = 1e-12;
    let holds = |t1: &DVector<f64>, t2: &DVector<f64>| {
        let before = (t1 - t2).norm();
        let after = (dual_ascent_map(qp, t1, epsilon) - dual_ascent_map(qp, t2, epsilon)).norm();
        after <= before * (1.0 + slack) + slack
    };

    if trials == 0 {
        return true;
    }

    let top = top_dual_direction(qp);
    let offset = top.amax();
    let center = DVector::from_element(m, 10.0 + 10.0 * epsilon * offset * qp.constraint_offset.amax());
    let center = center.add_scalar(epsilon * qp.dual_gradient(&DVector::zeros(m)).amax().abs() * 10.0);
    let t1 = &center + &top * 0.5;
    let t2 = &center - &top * 0.5;
    if !holds(&t1, &t2) {
        return false;
    }

    let scale = 1.0 + qp.dual_gradient(&DVector::zeros(m)).amax();
    (1..trials).all(|_| {
        let t1 = DVector::from_fn(m, |_, _| rng.random_range(0.0..scale));
        let t2 = DVector::from_fn(m, |_, _| rng.random_range(0.0..scale));
        holds(&t1, &t2)
    })
}

/// Unit top eigenvector of `Phi A^{-1} Phi^T`, mapped from the `N x N` Gram form.
fn top_dual_direction(qp: &QpData) -> DVector<f64> {
    let n = qp.bus_count();
    let scale = qp.a.map(|a| 1.0 / a.sqrt());
    let mut scaled = qp.constraint_matrix.clone();
    for j in 0..n {
        scaled.column_mut(j).scale_mut(scale[j]);
    }
    let eig = scaled.tr_mul(&scaled).symmetric_eigen();
    let k = eig.eigenvalues.imax();
    let u = eig.eigenvectors.column(k).into_owned();
    let w = &scaled * u;
    let norm = w.norm();
    if norm == 0.0 {
        w
    } else {
        w / norm
    }
}
