//! Acceptance checks, one line per criterion. Runs without the test harness so
//! that every line is printed; exits nonzero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use prosumer_incentives::cli::{BUNDLED_NETWORK, BUNDLED_PROSUMERS, BUNDLED_SCENARIO};
use prosumer_incentives::controllers::{
    contraction_check, dual_ascent_step, two_point_gradient, Algorithm, DualTargets, MarketTerms, Measurement,
    MultiplierState,
};
use prosumer_incentives::io::{build_scenario_for, parse_network, parse_prosumers, parse_scenario};
use prosumer_incentives::market::{demand_response, incentive_payment};
use prosumer_incentives::program::{
    dual_function, kkt_residual, oracle_solve, so_cost, step_size_bound, OracleSolution, QpData,
};
use prosumer_incentives::sim::{run, summarize, Plant, Scenario, Summary};
use prosumer_incentives::synth::{random_instance, well_posed_instance, Instance};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZES: [usize; 4] = [1, 5, 10, 33];
const INSTANCES: usize = 100;
const MIN_CONDITIONING: f64 = 2e-4;

struct Generated {
    inst: Instance,
    qp: QpData,
    sol: OracleSolution,
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn generate() -> (Vec<Generated>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut rejected = 0;
    let set = (0..INSTANCES)
        .map(|k| {
            let (inst, r) = well_posed_instance(SIZES[k % SIZES.len()], MIN_CONDITIONING, &mut rng).unwrap();
            rejected += r;
            let qp = inst.qp().unwrap();
            let sol = oracle_solve(&qp).unwrap();
            Generated { inst, qp, sol }
        })
        .collect();
    (set, rejected)
}

fn linear_response(qp: &QpData, xi: &DVector<f64>) -> Measurement {
    Measurement {
        v: qp.voltages(xi),
        p0: qp.feeder_power(xi),
        d: &qp.d_hat + qp.a.component_mul(xi),
    }
}

fn oracle_equivalence(set: &[Generated], rejected: usize) -> Outcome {
    let mut worst_iters = 0;
    let mut worst_time = Duration::ZERO;
    let mut failures = Vec::new();
    for (k, g) in set.iter().enumerate() {
        let eps = 0.9 * step_size_bound(&g.qp);
        let targets = DualTargets::of(&g.qp);
        let mut state = MultiplierState::zeros(g.qp.bus_count());
        let start = Instant::now();
        let mut reached = None;
        for t in 0..=100_000 {
            if (&state.xi - &g.sol.xi).amax() <= 1e-6 {
                reached = Some(t);
                break;
            }
            let meas = linear_response(&g.qp, &state.xi);
            state = dual_ascent_step(&state, &g.qp, &meas, &targets, eps).unwrap();
        }
        let elapsed = start.elapsed();
        if g.qp.bus_count() == 33 {
            worst_time = worst_time.max(elapsed);
        }
        match reached {
            Some(t) => worst_iters = worst_iters.max(t),
            None => failures.push(k),
        }
    }
    let pass = failures.is_empty() && worst_time < Duration::from_secs(10);
    Outcome {
        pass,
        detail: format!(
            "{} instances (N in {SIZES:?}, {rejected} draws rejected below conditioning {MIN_CONDITIONING}), \
             worst {worst_iters} iterations, slowest N=33 run {:.3} s, failures {failures:?}",
            set.len(),
            worst_time.as_secs_f64()
        ),
    }
}

fn hand_qp() -> QpData {
    use prosumer_incentives::feeder::{build_sensitivities, Line, Network};
    use prosumer_incentives::market::{Prosumer, Tariff};
    use prosumer_incentives::program::{assemble_qp, OperationalLimits};
    let net = Network::new(1, vec![Line { parent: 0, child: 1, r: 0.1, x: 0.05 }], 1.0, 1.0).unwrap();
    let model = build_sensitivities(&net).unwrap();
    assemble_qp(
        &model,
        &[Prosumer::new(2.0, 3.0, 0.0, 0.0)],
        &Tariff::new(1.0, 0.0).unwrap(),
        &OperationalLimits::uniform(1, 0.95, 1.05, -0.5, 1.2),
    )
    .unwrap()
}

fn step_bound_validity(set: &[Generated]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let failures: Vec<usize> = set
        .iter()
        .enumerate()
        .filter(|(_, g)| !contraction_check(&g.qp, step_size_bound(&g.qp), 10_000, &mut rng))
        .map(|(k, _)| k)
        .collect();
    let hand = hand_qp();
    let counterexample = !contraction_check(&hand, 100.0 * step_size_bound(&hand), 10_000, &mut rng);
    Outcome {
        pass: failures.is_empty() && counterexample,
        detail: format!(
            "10^4 pairs at the bound on {} instances, failures {failures:?}; counterexample at 100x bound on the \
             1-bus case: {counterexample}",
            set.len()
        ),
    }
}

fn bundled(algorithm: Algorithm) -> Scenario {
    let here = Path::new("bundled");
    let net = parse_network(BUNDLED_NETWORK, here).unwrap();
    let rows = parse_prosumers(BUNDLED_PROSUMERS, here).unwrap();
    let spec = parse_scenario(BUNDLED_SCENARIO, here).unwrap();
    build_scenario_for(&net, &rows, &spec, algorithm).unwrap()
}

struct BundledRun {
    scenario: Scenario,
    summary: Option<Summary>,
    kkt: Option<f64>,
    error: Option<String>,
}

fn bundled_runs() -> Vec<BundledRun> {
    std::thread::scope(|s| {
        let handles: Vec<_> = Algorithm::ALL
            .iter()
            .map(|&algo| {
                s.spawn(move || {
                    let scenario = bundled(algo);
                    match run(&scenario) {
                        Ok(trace) => {
                            let qp = scenario.final_program().unwrap();
                            let xi = &trace.records.last().unwrap().xi;
                            let theta = trace.final_state.explicit_theta(&qp, algo.demand_weighted());
                            let kkt = trace.converged.then(|| kkt_residual(&qp, xi, &theta));
                            BundledRun { summary: Some(summarize(&trace).unwrap()), kkt, error: None, scenario }
                        }
                        Err(e) => BundledRun { summary: None, kkt: None, error: Some(e.to_string()), scenario },
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

fn kkt_certification(set: &[Generated], bundled: &[BundledRun]) -> Outcome {
    let mut converged = 0;
    let mut skipped = Vec::new();
    let mut worst: f64 = 0.0;
    for (algo, r) in Algorithm::ALL.iter().zip(bundled) {
        match r.kkt {
            Some(k) => {
                converged += 1;
                worst = worst.max(k);
            }
            None => skipped.push(format!("bundled/{algo}")),
        }
    }
    // Three instances of each size.
    let picks: Vec<&Generated> = SIZES
        .iter()
        .flat_map(|&n| set.iter().filter(move |g| g.qp.bus_count() == n).take(3))
        .collect();
    for (k, g) in picks.iter().enumerate() {
        for algo in Algorithm::ALL {
            let mut sc = Scenario::new(
                g.inst.model.clone(),
                g.inst.prosumers.clone(),
                g.inst.tariff,
                g.inst.limits.clone(),
                algo,
            );
            sc.config.tolerance = 1e-7;
            sc.config.max_iterations = 300_000;
            sc.config.rng_seed = k as u64;
            match run(&sc) {
                Ok(trace) if trace.converged => {
                    converged += 1;
                    let xi = &trace.records.last().unwrap().xi;
                    let theta = trace.final_state.explicit_theta(&g.qp, algo.demand_weighted());
                    worst = worst.max(kkt_residual(&g.qp, xi, &theta));
                }
                _ => skipped.push(format!("N={}/{algo}", g.qp.bus_count())),
            }
        }
    }
    Outcome {
        pass: converged > 0 && worst <= 1e-5,
        detail: format!("{converged} converged runs, worst residual {worst:.3e}; not converged: {skipped:?}"),
    }
}

fn constraint_satisfaction(bundled: &[BundledRun]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (algo, r) in Algorithm::ALL.iter().zip(bundled) {
        match &r.summary {
            Some(s) => {
                let lim = &r.scenario.final_program().unwrap().limits;
                let v_floor = lim.v_min.min();
                let ok = s.final_min_voltage >= v_floor - 1e-6
                    && s.final_p0 >= lim.p0_min - 1e-6
                    && s.final_p0 <= lim.p0_max + 1e-6;
                pass &= ok;
                parts.push(format!(
                    "{algo}: min v {:.6}, p0 {:.6} in [{:.6}, {:.6}] p.u.",
                    s.final_min_voltage, s.final_p0, lim.p0_min, lim.p0_max
                ));
            }
            None => {
                pass = false;
                parts.push(format!("{algo}: {}", r.error.as_deref().unwrap_or("no result")));
            }
        }
    }
    Outcome { pass, detail: parts.join("; ") }
}

fn speed_ordering(bundled: &[BundledRun]) -> Outcome {
    let itf: Vec<Option<usize>> = bundled
        .iter()
        .map(|r| r.summary.as_ref().and_then(|s| s.iterations_to_feasible))
        .collect();
    let pass = matches!(itf[..], [Some(d), Some(f), Some(z)] if d < f && f < z);
    let eps: Vec<String> = bundled
        .iter()
        .map(|r| format!("{:?}", r.scenario.config.epsilon))
        .collect();
    Outcome {
        pass,
        detail: format!("iterations to feasible dual/first/zero = {itf:?}, epsilon {eps:?}, sigma {}", bundled[2].scenario.config.sigma),
    }
}

fn zero_order_estimator() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut exact_err: f64 = 0.0;
    let mut mean_err: f64 = 0.0;
    let mut checked = Vec::new();
    for n in [1, 5] {
        let inst = random_instance(n, &mut rng).unwrap();
        let qp = inst.qp().unwrap();
        let sc = Scenario::new(inst.model.clone(), inst.prosumers.clone(), inst.tariff, inst.limits.clone(), Algorithm::ZeroOrder);
        let plant = Plant::new(&sc).unwrap();
        let mut probe = |xi: &DVector<f64>| Ok(plant.respond(xi));
        let theta = DVector::from_fn(3 * n + 2, |_, _| rng.random_range(0.0..1.0));
        let xi = DVector::from_fn(n, |_, _| rng.random_range(-0.5..1.0));
        let state = MultiplierState::from_theta(xi.clone(), &theta).unwrap();
        let market = MarketTerms::of(&qp);
        let limits = qp.limits.clone();

        // Analytic gradient of the explicit Lagrangian with the converted floor multipliers.
        let explicit = state.explicit_theta(&qp, true);
        let grad = 2.0 * qp.a.component_mul(&xi) + &qp.b + qp.constraint_matrix.tr_mul(&explicit);

        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            let (est, _, _) = two_point_gradient(&state, &e, 0.02, &mut probe, &market, &limits).unwrap();
            exact_err = exact_err.max((est[i] - grad[i]).abs());
        }

        let samples = 100_000;
        let mut sum = DVector::zeros(n);
        for _ in 0..samples {
            let zeta = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
            let (est, _, _) = two_point_gradient(&state, &zeta, 0.02, &mut probe, &market, &limits).unwrap();
            sum += est;
        }
        let mean = sum / samples as f64;
        for i in 0..n {
            let target = grad[i] / 3.0;
            mean_err = mean_err.max(((mean[i] - target) / target).abs());
        }
        checked.push(n);
    }
    Outcome {
        pass: exact_err <= 1e-9 && mean_err <= 0.02,
        detail: format!(
            "N in {checked:?}: coordinate directions max error {exact_err:.3e}, 10^5-sample uniform mean max relative \
             error {:.3}%",
            100.0 * mean_err
        ),
    }
}

fn cost_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let inst = random_instance(SIZES[k % SIZES.len()], &mut rng).unwrap();
        let qp = inst.qp().unwrap();
        let n = qp.bus_count();
        let xi = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let t = &inst.tariff;
        let payout: f64 = inst
            .prosumers
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let d = demand_response(p, t, xi[j]);
                incentive_payment(p, t, xi[j], d) - t.pi * d + t.pi * p.r - t.pi0
            })
            .sum();
        worst = worst.max((so_cost(&qp, &xi).unwrap() - payout).abs());
    }
    Outcome {
        pass: worst <= 1e-12,
        detail: format!("1000 pairs, worst |so_cost - payout sum| = {worst:.3e}"),
    }
}

fn duality_gap(set: &[Generated]) -> Outcome {
    let worst = set
        .iter()
        .map(|g| (dual_function(&g.qp, &g.sol.theta) - so_cost(&g.qp, &g.sol.xi).unwrap()).abs())
        .fold(0.0, f64::max);
    Outcome {
        pass: worst <= 1e-7,
        detail: format!("{} instances, worst gap {worst:.3e}", set.len()),
    }
}

fn main() {
    let start = Instant::now();
    let (set, rejected) = generate();
    let bundled = bundled_runs();
    let results = [
        ("1 oracle equivalence", oracle_equivalence(&set, rejected)),
        ("2 step-bound validity", step_bound_validity(&set)),
        ("3 KKT certification", kkt_certification(&set, &bundled)),
        ("4 constraint satisfaction", constraint_satisfaction(&bundled)),
        ("5 convergence-speed ordering", speed_ordering(&bundled)),
        ("6 zero-order estimator", zero_order_estimator()),
        ("7 cost identity", cost_identity()),
        ("8 zero duality gap", duality_gap(&set)),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!("criterion {name}: {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} of {} criteria pass ({:.1} s)",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
