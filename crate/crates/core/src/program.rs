//! The operator's incentive design problem.
//!
//! With quadratic utilities and linear incentives the operator's cost is
//! `xi^T A xi + b^T xi + c` with `A = diag(1/alpha)`, and voltages, substation
//! power and demands are affine in `xi`. Eliminating them leaves
//!
//! ```text
//! minimize   xi^T A xi + b^T xi + c
//! subject to Phi xi + phi <= 0
//! ```
//!
//! with `3N + 2` rows of `Phi` ordered as
//!
//! | rows          | constraint            | multiplier |
//! |---------------|-----------------------|------------|
//! | `0..N`        | `v <= v_max`          | `lambda_up` |
//! | `N..2N`       | `v >= v_min`          | `lambda_lo` |
//! | `2N`          | `p0 <= p0_max`        | `mu_up`     |
//! | `2N + 1`      | `p0 >= p0_min`        | `mu_lo`     |
//! | `2N+2..3N+2`  | `xi >= pi - beta`     | `nu`        |
//!
//! The dual `h(theta) = min_xi L(xi, theta)` is a concave quadratic with the
//! primal recovered in closed form, which is what [`oracle_solve`] climbs.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::feeder::SensitivityModel;
use crate::market::{nem_charge, nominal_demand, Prosumer, Tariff};

/// Voltage band per bus and the band on the power drawn from the substation.
#[derive(Debug, Clone, PartialEq)]
pub struct OperationalLimits {
    pub v_min: DVector<f64>,
    pub v_max: DVector<f64>,
    pub p0_min: f64,
    pub p0_max: f64,
}

impl OperationalLimits {
    pub fn uniform(n: usize, v_min: f64, v_max: f64, p0_min: f64, p0_max: f64) -> Self {
        OperationalLimits {
            v_min: DVector::from_element(n, v_min),
            v_max: DVector::from_element(n, v_max),
            p0_min,
            p0_max,
        }
    }

    pub fn bus_count(&self) -> usize {
        self.v_min.len()
    }

    /// Rejects limits that no operating point can satisfy on their own.
    pub fn validate(&self) -> Result<()> {
        check_dim("v_max", self.v_min.len(), self.v_max.len())?;
        for (k, (lo, hi)) in self.v_min.iter().zip(self.v_max.iter()).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo >= hi {
                return Err(Error::ContradictoryLimits(format!(
                    "voltage band at bus {} is empty ({lo} >= {hi})",
                    k + 1
                )));
            }
        }
        if self.p0_min.is_nan() || self.p0_max.is_nan() || self.p0_min > self.p0_max {
            return Err(Error::ContradictoryLimits(format!(
                "substation power band is empty ({} > {})",
                self.p0_min, self.p0_max
            )));
        }
        Ok(())
    }
}

/// Assembled incentive program for one operating condition.
#[derive(Debug, Clone)]
pub struct QpData {
    /// Diagonal of `A`, the demand sensitivities `1/alpha`.
    pub a: DVector<f64>,
    /// `b = -pi A 1`.
    pub b: DVector<f64>,
    /// `c = -sum gamma(p_hat)`: the cost at zero incentive.
    pub c: f64,
    /// `Phi`, `(3N + 2) x N`.
    pub constraint_matrix: DMatrix<f64>,
    /// `phi`, length `3N + 2`.
    pub constraint_offset: DVector<f64>,
    /// Nominal demands.
    pub d_hat: DVector<f64>,
    /// Voltages under nominal demand.
    pub v_hat: DVector<f64>,
    /// `sum (pi r - pi0)`.
    pub c_prime: f64,
    pub pi: f64,
    pub beta: DVector<f64>,
    pub generation: DVector<f64>,
    /// Voltage sensitivity to active injections, `R`.
    pub resistance: DMatrix<f64>,
    pub limits: OperationalLimits,
}

/// Compares constraint rows by role rather than index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintRow {
    VoltageMax(usize),
    VoltageMin(usize),
    FeederMax,
    FeederMin,
    DemandNonnegative(usize),
}

impl ConstraintRow {
    pub fn of(index: usize, n: usize) -> Self {
        match index {
            i if i < n => ConstraintRow::VoltageMax(i + 1),
            i if i < 2 * n => ConstraintRow::VoltageMin(i - n + 1),
            i if i == 2 * n => ConstraintRow::FeederMax,
            i if i == 2 * n + 1 => ConstraintRow::FeederMin,
            i => ConstraintRow::DemandNonnegative(i - 2 * n - 1),
        }
    }
}

impl std::fmt::Display for ConstraintRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConstraintRow::VoltageMax(b) => write!(f, "v_max@bus{b}"),
            ConstraintRow::VoltageMin(b) => write!(f, "v_min@bus{b}"),
            ConstraintRow::FeederMax => write!(f, "p0_max"),
            ConstraintRow::FeederMin => write!(f, "p0_min"),
            ConstraintRow::DemandNonnegative(b) => write!(f, "d>=0@bus{b}"),
        }
    }
}

pub fn assemble_qp(
    model: &SensitivityModel,
    prosumers: &[Prosumer],
    tariff: &Tariff,
    limits: &OperationalLimits,
) -> Result<QpData> {
    let n = model.bus_count();
    check_dim("prosumers", n, prosumers.len())?;
    check_dim("voltage limits", n, limits.bus_count())?;
    limits.validate()?;
    for (k, p) in prosumers.iter().enumerate() {
        p.validate(tariff)
            .map_err(|e| Error::Validation(format!("bus {}: {e}", k + 1)))?;
    }

    let pi = tariff.pi;
    let a = DVector::from_iterator(n, prosumers.iter().map(|p| 1.0 / p.alpha));
    let beta = DVector::from_iterator(n, prosumers.iter().map(|p| p.beta));
    let r = DVector::from_iterator(n, prosumers.iter().map(|p| p.r));
    let q = DVector::from_iterator(n, prosumers.iter().map(|p| p.q));
    let d_hat = DVector::from_iterator(n, prosumers.iter().map(|p| nominal_demand(p, tariff)));

    let b = -pi * &a;
    let c = -prosumers
        .iter()
        .zip(d_hat.iter())
        .map(|(p, dh)| nem_charge(tariff, p.r - dh))
        .sum::<f64>();
    let c_prime = prosumers.iter().map(|p| pi * p.r - tariff.pi0).sum();

    let v_hat = &model.r * (&r - &d_hat) + &model.x * &q + &model.omega;
    let net_nominal: f64 = (&d_hat - &r).sum();

    let rows = 3 * n + 2;
    let mut phi_mat = DMatrix::zeros(rows, n);
    for i in 0..n {
        for j in 0..n {
            let ra = model.r[(i, j)] * a[j];
            phi_mat[(i, j)] = -ra;
            phi_mat[(n + i, j)] = ra;
        }
    }
    for j in 0..n {
        phi_mat[(2 * n, j)] = a[j];
        phi_mat[(2 * n + 1, j)] = -a[j];
        phi_mat[(2 * n + 2 + j, j)] = -1.0;
    }

    let mut phi = DVector::zeros(rows);
    for i in 0..n {
        phi[i] = v_hat[i] - limits.v_max[i];
        phi[n + i] = limits.v_min[i] - v_hat[i];
        phi[2 * n + 2 + i] = pi - beta[i];
    }
    phi[2 * n] = net_nominal - limits.p0_max;
    phi[2 * n + 1] = limits.p0_min - net_nominal;

    Ok(QpData {
        a,
        b,
        c,
        constraint_matrix: phi_mat,
        constraint_offset: phi,
        d_hat,
        v_hat,
        c_prime,
        pi,
        beta,
        generation: r,
        resistance: model.r.clone(),
        limits: limits.clone(),
    })
}

impl QpData {
    pub fn bus_count(&self) -> usize {
        self.a.len()
    }

    pub fn constraint_count(&self) -> usize {
        self.constraint_offset.len()
    }

    /// `pi 1 - beta`.
    pub fn incentive_floor(&self) -> DVector<f64> {
        self.beta.map(|b| self.pi - b)
    }

    /// `Phi xi + phi`; nonpositive entries are satisfied constraints.
    pub fn constraint_values(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.constraint_matrix * xi + &self.constraint_offset
    }

    /// Largest constraint violation, zero when feasible.
    pub fn violation(&self, xi: &DVector<f64>) -> f64 {
        self.constraint_values(xi).iter().fold(0.0, |m, &g| m.max(g))
    }

    /// Voltages as a function of the incentive, `v_hat - R A xi`.
    pub fn voltages(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.v_hat - &self.resistance * xi.component_mul(&self.a)
    }

    /// Substation power `1^T A xi + 1^T d_hat - 1^T r`.
    pub fn feeder_power(&self, xi: &DVector<f64>) -> f64 {
        self.a.dot(xi) + self.d_hat.sum() - self.generation.sum()
    }

    /// Unconstrained minimizer `-A^{-1} b / 2`.
    pub fn unconstrained_minimizer(&self) -> DVector<f64> {
        -self.b.component_div(&self.a) / 2.0
    }

    /// Minimizer of the Lagrangian for fixed multipliers,
    /// `-(A^{-1}/2)(b + Phi^T theta)`.
    pub fn primal_of(&self, theta: &DVector<f64>) -> DVector<f64> {
        let s = &self.b + self.constraint_matrix.tr_mul(theta);
        -s.component_div(&self.a) / 2.0
    }

    /// `grad h(theta)`, the constraint values at the recovered primal.
    pub fn dual_gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.constraint_values(&self.primal_of(theta))
    }

    /// Constraint rows that hold with equality (within `tol`) or carry a
    /// positive multiplier.
    pub fn active_constraints(
        &self,
        xi: &DVector<f64>,
        theta: &DVector<f64>,
        tol: f64,
    ) -> Vec<(ConstraintRow, f64, f64)> {
        let n = self.bus_count();
        let g = self.constraint_values(xi);
        (0..self.constraint_count())
            .filter(|&i| g[i] >= -tol || theta[i] > tol)
            .map(|i| (ConstraintRow::of(i, n), g[i], theta[i]))
            .collect()
    }
}

/// `xi^T A xi + b^T xi + c`.
pub fn so_cost(qp: &QpData, xi: &DVector<f64>) -> Result<f64> {
    check_dim("incentive", qp.bus_count(), xi.len())?;
    let quad: f64 = qp.a.iter().zip(xi.iter()).map(|(a, x)| a * x * x).sum();
    Ok(quad + qp.b.dot(xi) + qp.c)
}

/// Largest of the stationarity, primal feasibility, dual feasibility and
/// complementary slackness residuals.
pub fn kkt_residual(qp: &QpData, xi: &DVector<f64>, theta: &DVector<f64>) -> f64 {
    let stationarity = 2.0 * qp.a.component_mul(xi) + &qp.b + qp.constraint_matrix.tr_mul(theta);
    let g = qp.constraint_values(xi);
    let mut res = stationarity.amax();
    for (gi, ti) in g.iter().zip(theta.iter()) {
        res = res.max(gi.max(0.0)).max((-ti).max(0.0)).max((gi * ti).abs());
    }
    res
}

/// Dual function `h(theta)`, including the constant `c` so that it equals
/// the optimal cost at the dual optimum.
pub fn dual_function(qp: &QpData, theta: &DVector<f64>) -> f64 {
    let s = qp.constraint_matrix.tr_mul(theta);
    let linear = theta.dot(&qp.constraint_offset) - s.dot(&qp.b.component_div(&qp.a)) / 2.0;
    let quadratic: f64 = s.iter().zip(qp.a.iter()).map(|(s, a)| s * s / a).sum::<f64>() / 4.0;
    let constant: f64 = qp.b.iter().zip(qp.a.iter()).map(|(b, a)| b * b / a).sum::<f64>() / 4.0;
    linear - quadratic - constant + qp.c
}

/// Largest eigenvalue of `Phi A^{-1} Phi^T`, through the `N x N` matrix
/// `A^{-1/2} Phi^T Phi A^{-1/2}` with the same nonzero spectrum.
pub fn dual_curvature(qp: &QpData) -> f64 {
    let n = qp.bus_count();
    let scale = qp.a.map(|a| 1.0 / a.sqrt());
    let mut scaled = qp.constraint_matrix.clone();
    for j in 0..n {
        scaled.column_mut(j).scale_mut(scale[j]);
    }
    let gram = scaled.tr_mul(&scaled);
    power_iteration(&gram, 1e-10)
}

/// Step-size bound `4 / ||Phi A^{-1} Phi^T||` below which projected dual
/// ascent is nonexpansive.
pub fn step_size_bound(qp: &QpData) -> f64 {
    4.0 / dual_curvature(qp)
}

/// Largest eigenvalue of a symmetric PSD matrix, from the start vector
/// `1/sqrt(N)` until the eigen-residual `||M v - rho v||` falls below `tol`
/// relative to the Rayleigh quotient `rho`.
///
/// The residual test matters when the result feeds a step bound: the
/// Rayleigh quotient approaches the top eigenvalue from below, with error of
/// order the squared residual over the spectral gap, whereas a small change
/// between iterates says nothing when convergence is slow.
pub fn power_iteration(m: &DMatrix<f64>, tol: f64) -> f64 {
    let n = m.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut rho = 0.0;
    for _ in 0..1_000_000 {
        let w = m * &v;
        rho = v.dot(&w);
        if rho <= 0.0 {
            return 0.0;
        }
        if (&w - &v * rho).norm() <= tol * rho {
            return rho;
        }
        v = &w / w.norm();
    }
    rho
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub xi: DVector<f64>,
    pub theta: DVector<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
}

const ORACLE_TOL: f64 = 1e-10;
const ORACLE_MAX_ITERS: usize = 2_000_000;
const DIVERGENCE_NORM: f64 = 1e7;

/// Unique minimizer of the program with a dual certificate.
pub fn oracle_solve(qp: &QpData) -> Result<OracleSolution> {
    oracle_solve_from(qp, &DVector::zeros(qp.constraint_count()))
}

/// Accelerated projected gradient ascent on `h`, started at `theta0`
/// (negative entries are clipped). Every few iterations the support of the
/// current multipliers is tried as the active set and the equality-constrained
/// KKT system solved exactly; the first candidate certified to `1e-10` wins.
pub fn oracle_solve_from(qp: &QpData, theta0: &DVector<f64>) -> Result<OracleSolution> {
    let m = qp.constraint_count();
    check_dim("multipliers", m, theta0.len())?;

    let free = qp.unconstrained_minimizer();
    if qp.violation(&free) == 0.0 && theta0.iter().all(|t| *t <= 0.0) {
        let theta = DVector::zeros(m);
        let kkt = kkt_residual(qp, &free, &theta);
        return Ok(OracleSolution {
            xi: free,
            theta,
            iterations: 0,
            kkt_residual: kkt,
        });
    }

    let lipschitz = dual_curvature(qp) / 2.0;
    let step = 1.0 / lipschitz;

    let mut theta = theta0.map(|t| t.max(0.0));
    let mut prev = theta.clone();
    let mut momentum = 1.0_f64;

    for it in 1..=ORACLE_MAX_ITERS {
        let next_momentum = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        let y = &theta + (&theta - &prev) * ((momentum - 1.0) / next_momentum);
        let grad = qp.dual_gradient(&y);
        let next = (&y + grad * step).map(|t| t.max(0.0));

        // Restart the momentum when it points downhill.
        let restart = (&next - &theta).dot(&(&y - &next)) > 0.0;
        prev = theta;
        theta = next;
        momentum = if restart { 1.0 } else { next_momentum };

        if it % 25 == 0 {
            let xi = qp.primal_of(&theta);
            let kkt = kkt_residual(qp, &xi, &theta);
            if kkt <= ORACLE_TOL {
                return Ok(OracleSolution {
                    xi,
                    theta,
                    iterations: it,
                    kkt_residual: kkt,
                });
            }
            if let Some(sol) = polish(qp, &theta, &xi, it) {
                return Ok(sol);
            }
            if theta.amax() > DIVERGENCE_NORM {
                if let Some(violated) = farkas_certificate(qp, &theta) {
                    return Err(Error::Infeasible { violated });
                }
            }
        }
    }

    if let Some(violated) = farkas_certificate(qp, &theta) {
        return Err(Error::Infeasible { violated });
    }
    Err(Error::Validation(format!(
        "oracle stalled after {ORACLE_MAX_ITERS} iterations (KKT residual {:e})",
        kkt_residual(qp, &qp.primal_of(&theta), &theta)
    )))
}

/// Solves the KKT system on two candidate active sets: the support of
/// `theta`, and the rows currently tight at `xi`.
fn polish(qp: &QpData, theta: &DVector<f64>, xi: &DVector<f64>, iterations: usize) -> Option<OracleSolution> {
    let g = qp.constraint_values(xi);
    let scale = theta.amax().max(1.0);
    let support: Vec<usize> = (0..theta.len()).filter(|&i| theta[i] > 1e-12 * scale).collect();
    let tight: Vec<usize> = (0..g.len()).filter(|&i| g[i] > -1e-9).collect();

    [support, tight].into_iter().find_map(|set| {
        if set.is_empty() {
            return None;
        }
        let candidate = solve_on_active_set(qp, &set)?;
        let xi = qp.primal_of(&candidate);
        let kkt = kkt_residual(qp, &xi, &candidate);
        (kkt <= ORACLE_TOL).then_some(OracleSolution {
            xi,
            theta: candidate,
            iterations,
            kkt_residual: kkt,
        })
    })
}

/// Multipliers making the rows in `set` hold with equality at the
/// recovered primal: `(Phi_J A^{-1} Phi_J^T / 2) theta_J = Phi_J xi_free + phi_J`.
fn solve_on_active_set(qp: &QpData, set: &[usize]) -> Option<DVector<f64>> {
    let n = qp.bus_count();
    let k = set.len();
    let free = qp.unconstrained_minimizer();
    let mut scaled = DMatrix::zeros(k, n);
    let mut rhs = DVector::zeros(k);
    for (r, &i) in set.iter().enumerate() {
        let row = qp.constraint_matrix.row(i);
        for j in 0..n {
            scaled[(r, j)] = row[j] / qp.a[j].sqrt();
        }
        rhs[r] = row.dot(&free.transpose()) + qp.constraint_offset[i];
    }
    let system = (&scaled * scaled.transpose()) / 2.0;
    let svd = system.svd(true, true);
    let sol = svd.solve(&rhs, 1e-13 * svd.singular_values.max()).ok()?;

    let mut theta = DVector::zeros(qp.constraint_count());
    for (r, &i) in set.iter().enumerate() {
        if sol[r] < -1e-12 {
            return None;
        }
        theta[i] = sol[r].max(0.0);
    }
    Some(theta)
}

/// A diverging dual iterate points along a ray with `Phi^T y = 0` and
/// `phi^T y > 0`, proving the constraint set empty.
fn farkas_certificate(qp: &QpData, theta: &DVector<f64>) -> Option<Vec<String>> {
    let norm = theta.amax();
    if norm < 1e3 {
        return None;
    }
    let y = theta / norm;
    let balance = qp.constraint_matrix.tr_mul(&y).amax();
    let gap = qp.constraint_offset.dot(&y);
    if balance > 1e-4 * qp.constraint_matrix.amax() || gap <= 0.0 {
        return None;
    }
    let n = qp.bus_count();
    Some(
        (0..y.len())
            .filter(|&i| y[i] > 1e-3)
            .map(|i| ConstraintRow::of(i, n).to_string())
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{build_sensitivities, Line, Network};
    use approx::assert_abs_diff_eq;

    /// One bus, r = 0.1, alpha = 2, beta = 3, pi = 1, no generation.
    fn hand_qp(limits: OperationalLimits) -> QpData {
        let net = Network::new(1, vec![Line { parent: 0, child: 1, r: 0.1, x: 0.05 }], 1.0, 1.0).unwrap();
        let model = build_sensitivities(&net).unwrap();
        let pros = [Prosumer::new(2.0, 3.0, 0.0, 0.0)];
        assemble_qp(&model, &pros, &Tariff::new(1.0, 0.0).unwrap(), &limits).unwrap()
    }

    fn slack() -> OperationalLimits {
        OperationalLimits::uniform(1, 0.5, 1.5, -10.0, 10.0)
    }

    #[test]
    fn hand_assembly() {
        let qp = hand_qp(slack());
        assert_eq!(qp.d_hat[0], 1.0);
        assert_eq!(qp.a[0], 0.5);
        assert_eq!(qp.b[0], -0.5);
        assert_eq!(qp.c, -1.0);
        let expect = [-0.05, 0.05, 0.5, -0.5, -1.0];
        for (i, e) in expect.iter().enumerate() {
            assert_abs_diff_eq!(qp.constraint_matrix[(i, 0)], *e, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(qp.v_hat[0], 0.9, epsilon = 1e-15);
        assert_eq!(qp.constraint_offset[4], -2.0);
    }

    #[test]
    fn hand_cost() {
        let qp = hand_qp(slack());
        assert_eq!(so_cost(&qp, &DVector::zeros(1)).unwrap(), qp.c);
        assert_abs_diff_eq!(so_cost(&qp, &DVector::from_element(1, 1.0)).unwrap(), -1.0, epsilon = 1e-15);
        assert!(so_cost(&qp, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn hand_dual_function() {
        let qp = hand_qp(slack());
        let zero = DVector::zeros(5);
        // -b^T A^{-1} b / 4 + c
        assert_abs_diff_eq!(dual_function(&qp, &zero), -0.125 - 1.0, epsilon = 1e-15);
        let mut theta = DVector::zeros(5);
        theta[4] = 0.1;
        // Direct evaluation: xi(theta) = 0.6, L = 0.18 - 0.3 - 1 + 0.1 (-0.6 - 2).
        assert_abs_diff_eq!(dual_function(&qp, &theta), -1.38, epsilon = 1e-14);
    }

    #[test]
    fn hand_step_bound() {
        let qp = hand_qp(slack());
        assert_abs_diff_eq!(dual_curvature(&qp), 3.01, epsilon = 1e-12);
        assert_abs_diff_eq!(step_size_bound(&qp), 4.0 / 3.01, epsilon = 1e-12);

        let mut doubled = qp.clone();
        doubled.constraint_matrix *= 2.0;
        assert_abs_diff_eq!(step_size_bound(&doubled), step_size_bound(&qp) / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn interior_optimum() {
        let qp = hand_qp(slack());
        let sol = oracle_solve(&qp).unwrap();
        assert_abs_diff_eq!(sol.xi[0], 0.5, epsilon = 1e-12);
        assert!(sol.kkt_residual <= 1e-10);
    }

    #[test]
    fn binding_voltage_floor_matches_grid_search() {
        // v(xi) = 0.9 - 0.05 xi >= 0.88 caps xi at 0.4 < pi / 2.
        let qp = hand_qp(OperationalLimits::uniform(1, 0.88, 1.5, -10.0, 10.0));
        let sol = oracle_solve(&qp).unwrap();
        assert!(sol.kkt_residual <= 1e-10);

        let (mut best_xi, mut best_cost) = (f64::NAN, f64::INFINITY);
        for k in 0..=60_000 {
            let xi = DVector::from_element(1, -3.0 + k as f64 * 1e-4);
            if qp.violation(&xi) > 0.0 {
                continue;
            }
            let cost = so_cost(&qp, &xi).unwrap();
            if cost < best_cost {
                best_cost = cost;
                best_xi = xi[0];
            }
        }
        assert!((sol.xi[0] - best_xi).abs() <= 1e-4);
        assert_abs_diff_eq!(sol.xi[0], 0.4, epsilon = 1e-9);
        let active = qp.active_constraints(&sol.xi, &sol.theta, 1e-9);
        assert_eq!(active.len(), 1);
        assert_eq!(active[0].0, ConstraintRow::VoltageMin(1));
        assert_abs_diff_eq!(dual_function(&qp, &sol.theta), so_cost(&qp, &sol.xi).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn unreachable_voltage_floor_is_infeasible() {
        // Zero demand gives v = 1.0 at best.
        let qp = hand_qp(OperationalLimits::uniform(1, 1.01, 1.5, -10.0, 10.0));
        match oracle_solve(&qp) {
            Err(Error::Infeasible { violated }) => {
                assert!(violated.contains(&"v_min@bus1".to_string()), "{violated:?}");
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn empty_bands_are_contradictory() {
        let net = Network::new(1, vec![Line { parent: 0, child: 1, r: 0.1, x: 0.05 }], 1.0, 1.0).unwrap();
        let model = build_sensitivities(&net).unwrap();
        let pros = [Prosumer::new(2.0, 3.0, 0.0, 0.0)];
        let t = Tariff::new(1.0, 0.0).unwrap();
        for limits in [
            OperationalLimits::uniform(1, 1.0, 1.0, -1.0, 1.0),
            OperationalLimits::uniform(1, 0.9, 1.1, 1.0, -1.0),
        ] {
            assert!(matches!(
                assemble_qp(&model, &pros, &t, &limits),
                Err(Error::ContradictoryLimits(_))
            ));
        }
    }

    #[test]
    fn kkt_residual_detects_missing_multiplier() {
        let qp = hand_qp(OperationalLimits::uniform(1, 0.88, 1.5, -10.0, 10.0));
        let sol = oracle_solve(&qp).unwrap();
        assert!(kkt_residual(&qp, &sol.xi, &DVector::zeros(5)) > 1e-3);
        let off = DVector::from_element(1, 0.1);
        assert!(kkt_residual(&qp, &off, &sol.theta) > 1e-3);
    }

    #[test]
    fn power_iteration_agrees_with_eigendecomposition() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0]);
        let eig = m.clone().symmetric_eigen();
        let top = eig.eigenvalues.max();
        assert_abs_diff_eq!(power_iteration(&m, 1e-12), top, epsilon = 1e-9);
    }
}
