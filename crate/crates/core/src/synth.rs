//! Random radial feeders with a nonempty, strictly feasible incentive set.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};

use crate::error::Result;
use crate::feeder::{build_sensitivities, Line, Network, SensitivityModel};
use crate::market::{Prosumer, Tariff};
use crate::program::{assemble_qp, oracle_solve, step_size_bound, OperationalLimits, QpData};

const R_LO: f64 = 0.02;
const R_HI: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct Instance {
    pub network: Network,
    pub model: SensitivityModel,
    pub prosumers: Vec<Prosumer>,
    pub tariff: Tariff,
    pub limits: OperationalLimits,
    /// An incentive satisfying every constraint strictly.
    pub anchor: DVector<f64>,
}

impl Instance {
    pub fn qp(&self) -> Result<QpData> {
        assemble_qp(&self.model, &self.prosumers, &self.tariff, &self.limits)
    }
}

/// Draws a feeder on `n` buses with `alpha` in `[0.3, 3]`, then places a
/// uniform voltage band and a substation power band around the state at a
/// random anchor incentive, so that some limits typically bind at the optimum.
pub fn random_instance<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Instance> {
    let lines: Vec<Line> = (1..=n)
        .map(|child| Line {
            parent: rng.random_range(0..child),
            child,
            r: rng.random_range(R_LO..R_HI),
            x: rng.random_range(R_LO..R_HI),
        })
        .collect();
    let network = Network::new(n, lines, 1.0, 1.0)?;
    let model = build_sensitivities(&network)?;
    let tariff = Tariff::new(1.0, rng.random_range(0.0..0.1))?;

    let prosumers: Vec<Prosumer> = (0..n)
        .map(|_| {
            let alpha = rng.random_range(0.3..3.0);
            let d_hat = rng.random_range(0.01..0.1);
            let r = rng.random_range(0.0..d_hat);
            let q = rng.random_range(0.0..0.5 * d_hat);
            Prosumer::new(alpha, tariff.pi + alpha * d_hat, r, q)
        })
        .collect();

    let anchor = DVector::from_fn(n, |k, _| {
        let p = &prosumers[k];
        p.incentive_floor(&tariff) + rng.random_range(0.1..1.2)
    });

    let mut limits = OperationalLimits::uniform(n, 0.0, 0.0, 0.0, 0.0);
    let qp0 = assemble_qp(&model, &prosumers, &tariff, &OperationalLimits::uniform(n, 0.0, 2.0, -1e9, 1e9))?;
    let v0 = qp0.voltages(&anchor);
    let lo = v0.min() - rng.random_range(0.001..0.05);
    let hi = v0.max() + rng.random_range(0.001..0.05);
    limits.v_min.fill(lo);
    limits.v_max.fill(hi);
    let p0 = qp0.feeder_power(&anchor);
    let scale = qp0.d_hat.sum();
    limits.p0_min = p0 - scale * rng.random_range(0.01..0.5);
    limits.p0_max = p0 + scale * rng.random_range(0.01..0.5);

    Ok(Instance {
        network,
        model,
        prosumers,
        tariff,
        limits,
        anchor,
    })
}

/// `lambda_min` of the Gram matrix `Phi_S A^{-1} Phi_S^T` of the rows `S`
/// active at `xi`, relative to `lambda_max` of the full matrix.
///
/// Projected dual ascent at a fixed fraction of the admissible step contracts
/// along the worst active direction at a rate proportional to this ratio.
/// It is small when active rows are nearly parallel, as for a voltage limit
/// close to the substation binding together with a substation power limit.
pub fn active_set_conditioning(qp: &QpData, xi: &DVector<f64>, tol: f64) -> f64 {
    let g = qp.constraint_values(xi);
    let rows: Vec<usize> = (0..qp.constraint_count()).filter(|&k| g[k] >= -tol).collect();
    if rows.is_empty() {
        return 1.0;
    }
    let n = qp.bus_count();
    let scaled = DMatrix::from_fn(rows.len(), n, |r, c| qp.constraint_matrix[(rows[r], c)] / qp.a[c].sqrt());
    let lambda_min = (&scaled * scaled.transpose()).symmetric_eigen().eigenvalues.min();
    lambda_min * step_size_bound(qp) / 4.0
}

/// Slack within which a row counts as active when screening instances.
///
/// Rows nearly parallel to an active row and nearly active themselves slow
/// primal-dual methods too: while both multipliers are positive the incentive
/// only sees their combination, and it stalls until the slack of the
/// inactive row drains its multiplier.
pub const NEAR_ACTIVE_SLACK: f64 = 3e-3;

/// Draws instances until one has [`active_set_conditioning`] of at least
/// `min_ratio` at its optimum, counting rows within [`NEAR_ACTIVE_SLACK`].
/// Returns it with the number of rejected draws.
pub fn well_posed_instance<R: Rng + ?Sized>(n: usize, min_ratio: f64, rng: &mut R) -> Result<(Instance, usize)> {
    let mut rejected = 0;
    loop {
        let inst = random_instance(n, rng)?;
        let sol = oracle_solve(&inst.qp()?)?;
        if active_set_conditioning(&inst.qp()?, &sol.xi, NEAR_ACTIVE_SLACK) >= min_ratio {
            return Ok((inst, rejected));
        }
        rejected += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_is_strictly_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 5, 33] {
            let inst = random_instance(n, &mut rng).unwrap();
            let qp = inst.qp().unwrap();
            assert!(qp.constraint_values(&inst.anchor).max() < 0.0);
        }
    }

    #[test]
    fn conditioning_of_single_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (inst, _) = well_posed_instance(1, 1e-3, &mut rng).unwrap();
        let qp = inst.qp().unwrap();
        let xi = oracle_solve(&qp).unwrap().xi;
        let ratio = active_set_conditioning(&qp, &xi, 1e-9);
        assert!((1e-3..=1.0).contains(&ratio));
    }
}
