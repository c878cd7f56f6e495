//! Feedback loop between an incentive controller and the linear feeder.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::controllers::{
    dual_ascent_step, first_order_step, step_epsilon, zero_order_step, Algorithm, ControllerConfig, DualTargets,
    MarketTerms, Measurement, MultiplierState, Sensitivities,
};
use crate::error::{check_dim, Error, Result};
use crate::feeder::SensitivityModel;
use crate::market::{clamped_demand, demand_response, incentive_payment, Prosumer, Tariff};
use crate::program::{assemble_qp, so_cost, OperationalLimits, QpData};

/// Default bound on `|xi|_inf` beyond which a run is declared divergent.
pub const DIVERGENCE_GUARD: f64 = 1e6;

/// Consecutive feasible iterations required by [`summarize`].
pub const FEASIBLE_WINDOW: usize = 50;

/// Consecutive iterations the stopping rule must hold for. A single
/// zero-order step can be tiny just because the perturbation was.
pub const STOP_PATIENCE: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    /// Removes `capacity` of generation at `bus` (1-based), flooring at zero.
    GeneratorOff { bus: usize, capacity: f64 },
    /// Adds `capacity` of generation at `bus`.
    GeneratorOn { bus: usize, capacity: f64 },
    SetLimits(OperationalLimits),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledEvent {
    pub iteration: usize,
    pub event: Event,
}

/// Everything a closed-loop run needs, in per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: SensitivityModel,
    pub prosumers: Vec<Prosumer>,
    pub tariff: Tariff,
    pub limits: OperationalLimits,
    pub algorithm: Algorithm,
    pub config: ControllerConfig,
    pub events: Vec<ScheduledEvent>,
    /// Project each demand onto its bounds in the plant.
    pub clamp_demand: bool,
    pub divergence_guard: f64,
}

impl Scenario {
    pub fn new(
        model: SensitivityModel,
        prosumers: Vec<Prosumer>,
        tariff: Tariff,
        limits: OperationalLimits,
        algorithm: Algorithm,
    ) -> Self {
        Scenario {
            model,
            prosumers,
            tariff,
            limits,
            algorithm,
            config: ControllerConfig::default(),
            events: Vec::new(),
            clamp_demand: false,
            divergence_guard: DIVERGENCE_GUARD,
        }
    }

    pub fn bus_count(&self) -> usize {
        self.model.bus_count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.bus_count();
        check_dim("prosumers", n, self.prosumers.len())?;
        check_dim("voltage limits", n, self.limits.bus_count())?;
        self.config.validate()?;
        self.limits.validate()?;
        for (k, p) in self.prosumers.iter().enumerate() {
            p.validate(&self.tariff)
                .map_err(|e| Error::Validation(format!("bus {}: {e}", k + 1)))?;
        }
        if self.divergence_guard.is_nan() || self.divergence_guard <= 0.0 {
            return Err(Error::Validation("divergence guard must be positive".into()));
        }
        let mut last = 0;
        for ev in &self.events {
            if ev.iteration < last {
                return Err(Error::Validation(format!(
                    "event at iteration {} follows one at {last}",
                    ev.iteration
                )));
            }
            last = ev.iteration;
            match &ev.event {
                Event::GeneratorOff { bus, capacity } | Event::GeneratorOn { bus, capacity } => {
                    if *bus == 0 || *bus > n {
                        return Err(Error::Validation(format!("event references unknown bus {bus}")));
                    }
                    if !(capacity.is_finite() && *capacity >= 0.0) {
                        return Err(Error::Validation(format!("generator capacity {capacity} is invalid")));
                    }
                }
                Event::SetLimits(lim) => {
                    check_dim("event voltage limits", n, lim.bus_count())?;
                    lim.validate()?;
                }
            }
        }
        Ok(())
    }

    /// The program seen after every event scheduled up to `iteration`.
    pub fn program_at(&self, iteration: usize) -> Result<QpData> {
        let mut plant = Plant::new(self)?;
        for ev in self.events.iter().take_while(|e| e.iteration <= iteration) {
            plant.apply(&ev.event)?;
        }
        Ok(plant.qp)
    }

    /// The program once every event has been applied.
    pub fn final_program(&self) -> Result<QpData> {
        self.program_at(usize::MAX)
    }
}

/// The linear feeder with its current generation and limits.
#[derive(Debug, Clone)]
pub struct Plant {
    model: SensitivityModel,
    prosumers: Vec<Prosumer>,
    tariff: Tariff,
    limits: OperationalLimits,
    clamp: bool,
    qp: QpData,
}

impl Plant {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        let qp = assemble_qp(&scenario.model, &scenario.prosumers, &scenario.tariff, &scenario.limits)?;
        Ok(Plant {
            model: scenario.model.clone(),
            prosumers: scenario.prosumers.clone(),
            tariff: scenario.tariff,
            limits: scenario.limits.clone(),
            clamp: scenario.clamp_demand,
            qp,
        })
    }

    pub fn qp(&self) -> &QpData {
        &self.qp
    }

    pub fn prosumers(&self) -> &[Prosumer] {
        &self.prosumers
    }

    pub fn tariff(&self) -> &Tariff {
        &self.tariff
    }

    pub fn apply(&mut self, event: &Event) -> Result<()> {
        match event {
            Event::GeneratorOff { bus, capacity } => {
                let p = &mut self.prosumers[bus - 1];
                p.r = (p.r - capacity).max(0.0);
            }
            Event::GeneratorOn { bus, capacity } => self.prosumers[bus - 1].r += capacity,
            Event::SetLimits(lim) => self.limits = lim.clone(),
        }
        self.qp = assemble_qp(&self.model, &self.prosumers, &self.tariff, &self.limits)?;
        Ok(())
    }

    /// Demand, voltages and substation power under incentive `xi`.
    pub fn respond(&self, xi: &DVector<f64>) -> Measurement {
        let n = self.prosumers.len();
        let d = DVector::from_fn(n, |k, _| {
            let p = &self.prosumers[k];
            if self.clamp {
                clamped_demand(p, &self.tariff, xi[k])
            } else {
                demand_response(p, &self.tariff, xi[k])
            }
        });
        let r = DVector::from_fn(n, |k, _| self.prosumers[k].r);
        let q = DVector::from_fn(n, |k, _| self.prosumers[k].q);
        let v = &self.model.r * (&r - &d) + &self.model.x * q + &self.model.omega;
        let p0 = (&d - &r).sum();
        Measurement { v, p0, d }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub xi: DVector<f64>,
    pub d: DVector<f64>,
    pub v: DVector<f64>,
    pub p0: f64,
    /// Sum of the prosumer payments `xi_n (d_n - d_hat_n)`.
    pub total_incentive: f64,
    pub min_voltage: f64,
    pub so_cost_value: f64,
    /// Largest positive entry of `Phi xi + phi`.
    pub constraint_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub epsilon: f64,
    pub sigma: f64,
    pub tolerance: f64,
    pub records: Vec<TraceRecord>,
    /// Final multipliers, in the convention of the controller that ran.
    pub final_state: MultiplierState,
    pub converged: bool,
    pub diverged: bool,
}

fn record(plant: &Plant, iteration: usize, xi: &DVector<f64>, meas: &Measurement) -> Result<TraceRecord> {
    let total_incentive = plant
        .prosumers()
        .iter()
        .enumerate()
        .map(|(k, p)| incentive_payment(p, plant.tariff(), xi[k], meas.d[k]))
        .sum();
    Ok(TraceRecord {
        iteration,
        xi: xi.clone(),
        d: meas.d.clone(),
        v: meas.v.clone(),
        p0: meas.p0,
        total_incentive,
        min_voltage: meas.v.min(),
        so_cost_value: so_cost(plant.qp(), xi)?,
        constraint_violation: plant.qp().violation(xi),
    })
}

/// Runs the loop until the stopping rule holds or the iteration budget is
/// spent. Events scheduled at iteration `t` take effect before the plant is
/// measured at `t`; the controller state carries over.
///
/// The run stops once, for [`STOP_PATIENCE`] consecutive iterations after
/// the last event, the incentive and multipliers change by at most the
/// tolerance per step while no constraint is violated by more than the
/// tolerance.
pub fn run(scenario: &Scenario) -> Result<Trace> {
    scenario.validate()?;
    let cfg = &scenario.config;
    let mut plant = Plant::new(scenario)?;
    let epsilon = step_epsilon(scenario.algorithm, cfg, plant.qp());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut state = MultiplierState::zeros(scenario.bus_count());
    let mut events = scenario.events.iter().peekable();

    let mut trace = Trace {
        algorithm: scenario.algorithm,
        seed: cfg.rng_seed,
        epsilon,
        sigma: cfg.sigma,
        tolerance: cfg.tolerance,
        records: Vec::new(),
        final_state: state.clone(),
        converged: false,
        diverged: false,
    };

    let mut targets = DualTargets::of(plant.qp());
    let mut market = MarketTerms::of(plant.qp());
    let mut sens = Sensitivities::exact(plant.qp());
    let mut last_change = f64::INFINITY;
    let mut quiet = 0;

    for t in 0..cfg.max_iterations {
        let mut rebuilt = false;
        while let Some(ev) = events.next_if(|e| e.iteration <= t) {
            plant.apply(&ev.event)?;
            rebuilt = true;
        }
        if rebuilt {
            targets = DualTargets::of(plant.qp());
            market = MarketTerms::of(plant.qp());
            sens = Sensitivities::exact(plant.qp());
            last_change = f64::INFINITY;
        }

        let meas = plant.respond(&state.xi);
        let rec = record(&plant, t, &state.xi, &meas)?;
        let violation = rec.constraint_violation;
        trace.records.push(rec);

        let magnitude = state.xi.amax();
        if !magnitude.is_finite() || magnitude > scenario.divergence_guard {
            trace.diverged = true;
            trace.final_state = state;
            return Err(Error::Divergence {
                iteration: t,
                magnitude,
                trace: Box::new(trace),
            });
        }
        if last_change <= cfg.tolerance && violation <= cfg.tolerance && events.peek().is_none() {
            quiet += 1;
            if quiet >= STOP_PATIENCE {
                trace.converged = true;
                break;
            }
        } else {
            quiet = 0;
        }

        let next = match scenario.algorithm {
            Algorithm::DualAscent => dual_ascent_step(&state, plant.qp(), &meas, &targets, epsilon),
            Algorithm::FirstOrder => first_order_step(&state, &meas, &sens, &market, &targets, epsilon),
            Algorithm::ZeroOrder => {
                let mut probe = |xi: &DVector<f64>| Ok(plant.respond(xi));
                zero_order_step(&state, &mut probe, cfg, epsilon, &mut rng, &market, &targets)
            }
        };
        let next = match next {
            Ok(s) => s,
            Err(Error::Measurement(_)) => {
                trace.diverged = true;
                trace.final_state = state;
                return Err(Error::Divergence {
                    iteration: t,
                    magnitude: f64::INFINITY,
                    trace: Box::new(trace),
                });
            }
            Err(e) => return Err(e),
        };
        last_change = (&next.xi - &state.xi).amax().max((next.theta() - state.theta()).amax());
        state = next;
    }
    trace.final_state = state;
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    /// First iteration from which the violation stays within tolerance for
    /// [`FEASIBLE_WINDOW`] iterations (or until the trace ends).
    pub iterations_to_feasible: Option<usize>,
    pub iterations: usize,
    pub final_cost: f64,
    pub final_min_voltage: f64,
    pub final_p0: f64,
    pub final_total_incentive: f64,
    pub converged: bool,
    pub diverged: bool,
}

pub fn summarize(trace: &Trace) -> Result<Summary> {
    let last = trace
        .records
        .last()
        .ok_or_else(|| Error::Validation("cannot summarize an empty trace".into()))?;
    Ok(Summary {
        iterations_to_feasible: iterations_to_feasible(&trace.records, trace.tolerance, FEASIBLE_WINDOW),
        iterations: trace.records.len(),
        final_cost: last.so_cost_value,
        final_min_voltage: last.min_voltage,
        final_p0: last.p0,
        final_total_incentive: last.total_incentive,
        converged: trace.converged,
        diverged: trace.diverged,
    })
}

/// First index starting a run of `window` feasible records; a run cut short
/// by the end of the trace still counts as long as it reaches the end.
pub fn iterations_to_feasible(records: &[TraceRecord], tol: f64, window: usize) -> Option<usize> {
    let mut start = None;
    for (k, r) in records.iter().enumerate() {
        if r.constraint_violation <= tol {
            let s = *start.get_or_insert(k);
            if k + 1 - s >= window {
                return Some(records[s].iteration);
            }
        } else {
            start = None;
        }
    }
    start.map(|s| records[s].iteration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{build_sensitivities, Line, Network};
    use crate::program::{kkt_residual, oracle_solve};
    use approx::assert_abs_diff_eq;

    fn hand_scenario(limits: OperationalLimits, algorithm: Algorithm) -> Scenario {
        let net = Network::new(1, vec![Line { parent: 0, child: 1, r: 0.1, x: 0.05 }], 1.0, 1.0).unwrap();
        let model = build_sensitivities(&net).unwrap();
        Scenario::new(
            model,
            vec![Prosumer::new(2.0, 3.0, 0.0, 0.0)],
            Tariff::new(1.0, 0.0).unwrap(),
            limits,
            algorithm,
        )
    }

    #[test]
    fn respond_hand_values() {
        let sc = hand_scenario(OperationalLimits::uniform(1, 0.5, 1.5, -10.0, 10.0), Algorithm::DualAscent);
        let plant = Plant::new(&sc).unwrap();
        let m0 = plant.respond(&DVector::zeros(1));
        assert_eq!(m0.d[0], 1.0);
        assert_abs_diff_eq!(m0.v[0], 0.9, epsilon = 1e-15);
        assert_eq!(m0.p0, 1.0);
        let m = plant.respond(&DVector::from_element(1, 0.5));
        assert_eq!(m.d[0], 1.25);
        assert_abs_diff_eq!(m.v[0], 0.9 - 0.025, epsilon = 1e-15);
    }

    #[test]
    fn slack_limits_converge_to_half_price() {
        for algo in [Algorithm::DualAscent, Algorithm::FirstOrder, Algorithm::ZeroOrder] {
            let mut sc = hand_scenario(OperationalLimits::uniform(1, 0.5, 1.5, -10.0, 10.0), algo);
            sc.config.tolerance = 1e-10;
            let trace = run(&sc).unwrap();
            assert!(trace.converged, "{algo:?}");
            assert_abs_diff_eq!(trace.records.last().unwrap().xi[0], 0.5, epsilon = 1e-6);
        }
    }

    #[test]
    fn binding_floor_matches_oracle() {
        let mut sc = hand_scenario(OperationalLimits::uniform(1, 0.88, 1.5, -10.0, 10.0), Algorithm::DualAscent);
        sc.config.tolerance = 1e-10;
        let trace = run(&sc).unwrap();
        let qp = sc.final_program().unwrap();
        let sol = oracle_solve(&qp).unwrap();
        let last = trace.records.last().unwrap();
        assert!((last.xi.clone() - &sol.xi).amax() <= 1e-5);
        assert!(kkt_residual(&qp, &last.xi, &trace.final_state.theta()) <= 1e-5);
    }

    #[test]
    fn runs_are_deterministic() {
        let mut sc = hand_scenario(OperationalLimits::uniform(1, 0.88, 1.5, -10.0, 10.0), Algorithm::ZeroOrder);
        sc.config.rng_seed = 11;
        assert_eq!(run(&sc).unwrap(), run(&sc).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let mut sc = hand_scenario(OperationalLimits::uniform(1, 0.88, 1.5, -10.0, 10.0), Algorithm::FirstOrder);
        sc.config.epsilon = Some(50.0);
        match run(&sc) {
            Err(Error::Divergence { trace, .. }) => {
                assert!(trace.diverged);
                assert!(summarize(&trace).unwrap().diverged);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn feasible_window() {
        let rec = |k: usize, viol: f64| TraceRecord {
            iteration: k,
            xi: DVector::zeros(1),
            d: DVector::zeros(1),
            v: DVector::zeros(1),
            p0: 0.0,
            total_incentive: 0.0,
            min_voltage: 0.0,
            so_cost_value: 0.0,
            constraint_violation: viol,
        };
        let all: Vec<_> = (0..10).map(|k| rec(k, 0.0)).collect();
        assert_eq!(iterations_to_feasible(&all, 1e-6, 50), Some(0));
        let mut mixed: Vec<_> = (0..200).map(|k| rec(k, 0.0)).collect();
        mixed[30].constraint_violation = 1.0;
        assert_eq!(iterations_to_feasible(&mixed, 1e-6, 50), Some(31));
        mixed[30].constraint_violation = 0.0;
        mixed[60].constraint_violation = 1.0;
        assert_eq!(iterations_to_feasible(&mixed, 1e-6, 50), Some(0));
        mixed[195].constraint_violation = 1.0;
        assert_eq!(iterations_to_feasible(&mixed, 1e-6, 50), Some(0));
        let tail: Vec<_> = (0..60).map(|k| rec(k, if k < 40 { 1.0 } else { 0.0 })).collect();
        assert_eq!(iterations_to_feasible(&tail, 1e-6, 50), Some(40));
        let never: Vec<_> = (0..5).map(|k| rec(k, 1.0)).collect();
        assert_eq!(iterations_to_feasible(&never, 1e-6, 50), None);
    }

    #[test]
    fn events_rebuild_program() {
        let mut sc = hand_scenario(OperationalLimits::uniform(1, 0.5, 1.5, -10.0, 10.0), Algorithm::DualAscent);
        sc.prosumers[0].r = 0.4;
        sc.events.push(ScheduledEvent {
            iteration: 3,
            event: Event::GeneratorOff { bus: 1, capacity: 0.4 },
        });
        let trace = run(&sc).unwrap();
        assert_abs_diff_eq!(trace.records[3].p0 - trace.records[2].p0, 0.4, epsilon = 1e-12);
        assert_eq!(sc.program_at(2).unwrap().generation[0], 0.4);
        assert_eq!(sc.final_program().unwrap().generation[0], 0.0);

        sc.events[0].event = Event::GeneratorOff { bus: 2, capacity: 0.4 };
        assert!(sc.validate().is_err());
    }
}
