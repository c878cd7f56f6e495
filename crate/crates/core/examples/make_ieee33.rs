//! Writes the bundled 33-bus fixture to `data/ieee33/`.
//!
//! Line impedances are the Baran-Wu 33-bus feeder converted to per-unit on a
//! 3 MVA, 12.66 kV base. Nominal demands are the feeder's spot loads scaled
//! by `LOAD_SCALE`; utility curvatures are drawn from a fixed seed. Loads
//! absorb reactive power, which enters the voltage model as a negative
//! injection. `BASE_MVA`, `LOAD_SCALE` and `ALPHA_SEED` can be overridden
//! through the environment.
//!
//! The base matters beyond bookkeeping: step sizes act on per-unit
//! quantities, and with curvatures in `[0.3, 3]` per MW the substation power
//! loop gain of dual ascent scales as `1 / S^2` while the demand floor loop
//! scales as `S^2`. A 3 MVA base keeps both tame at the usual step sizes. The
//! conventional numbering puts the substation at bus 1, so conventional bus
//! `k` is bus `k - 1` here.
//!
//! ```text
//! cargo run --example make_ieee33
//! ```

use std::fmt::Write as _;
use std::path::Path;

use prosumer_incentives::feeder::{Line, Network};
use prosumer_incentives::io::{write_network, write_prosumers, ProsumerRecord};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BASE_MVA: f64 = 3.0;
const BASE_KV: f64 = 12.66;
const LOAD_SCALE: f64 = 0.65;
const ALPHA_SEED: u64 = 33;
/// Conventional bus 31.
const GENERATOR_BUS: usize = 30;
const GENERATOR_FACTOR: f64 = 6.0;
const BAND_MW: f64 = 0.2;

/// `(from, to, r_ohm, x_ohm)` in the conventional numbering.
const LINES: [(usize, usize, f64, f64); 32] = [
    (1, 2, 0.0922, 0.0470),
    (2, 3, 0.4930, 0.2511),
    (3, 4, 0.3660, 0.1864),
    (4, 5, 0.3811, 0.1941),
    (5, 6, 0.8190, 0.7070),
    (6, 7, 0.1872, 0.6188),
    (7, 8, 0.7114, 0.2351),
    (8, 9, 1.0300, 0.7400),
    (9, 10, 1.0440, 0.7400),
    (10, 11, 0.1966, 0.0650),
    (11, 12, 0.3744, 0.1238),
    (12, 13, 1.4680, 1.1550),
    (13, 14, 0.5416, 0.7129),
    (14, 15, 0.5910, 0.5260),
    (15, 16, 0.7463, 0.5450),
    (16, 17, 1.2890, 1.7210),
    (17, 18, 0.7320, 0.5740),
    (2, 19, 0.1640, 0.1565),
    (19, 20, 1.5042, 1.3554),
    (20, 21, 0.4095, 0.4784),
    (21, 22, 0.7089, 0.9373),
    (3, 23, 0.4512, 0.3083),
    (23, 24, 0.8980, 0.7091),
    (24, 25, 0.8960, 0.7011),
    (6, 26, 0.2030, 0.1034),
    (26, 27, 0.2842, 0.1447),
    (27, 28, 1.0590, 0.9337),
    (28, 29, 0.8042, 0.7006),
    (29, 30, 0.5075, 0.2585),
    (30, 31, 0.9744, 0.9630),
    (31, 32, 0.3105, 0.3619),
    (32, 33, 0.3410, 0.5302),
];

/// `(kW, kVAr)` at conventional buses 2 to 33.
const LOADS: [(f64, f64); 32] = [
    (100.0, 60.0),
    (90.0, 40.0),
    (120.0, 80.0),
    (60.0, 30.0),
    (60.0, 20.0),
    (200.0, 100.0),
    (200.0, 100.0),
    (60.0, 20.0),
    (60.0, 20.0),
    (45.0, 30.0),
    (60.0, 35.0),
    (60.0, 35.0),
    (120.0, 80.0),
    (60.0, 10.0),
    (60.0, 20.0),
    (60.0, 20.0),
    (90.0, 40.0),
    (90.0, 40.0),
    (90.0, 40.0),
    (90.0, 40.0),
    (90.0, 40.0),
    (90.0, 50.0),
    (420.0, 200.0),
    (420.0, 200.0),
    (60.0, 25.0),
    (60.0, 25.0),
    (60.0, 20.0),
    (120.0, 70.0),
    (200.0, 600.0),
    (150.0, 70.0),
    (210.0, 100.0),
    (60.0, 40.0),
];

fn env_or(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let base_mva = env_or("BASE_MVA", BASE_MVA);
    let z_base = BASE_KV * BASE_KV / base_mva;
    let lines = LINES
        .iter()
        .map(|&(from, to, r, x)| Line {
            parent: from - 1,
            child: to - 1,
            r: r / z_base,
            x: x / z_base,
        })
        .collect();
    let net = Network::new(32, lines, base_mva, BASE_KV).expect("valid feeder");

    let scale = env_or("LOAD_SCALE", LOAD_SCALE);
    let seed = env_or("ALPHA_SEED", ALPHA_SEED as f64) as u64;
    let pi = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for (k, &(kw, kvar)) in LOADS.iter().enumerate() {
        let bus = k + 1;
        let alpha: f64 = rng.random_range(0.3..=3.0);
        let d_hat = scale * kw / 1000.0;
        let r = if bus == GENERATOR_BUS { GENERATOR_FACTOR * d_hat } else { 0.0 };
        rows.push(ProsumerRecord {
            bus,
            alpha,
            beta: pi + alpha * d_hat,
            r_mw: r,
            q_mvar: -scale * kvar / 1000.0,
            d_min_mw: 0.0,
            d_max_mw: f64::INFINITY,
        });
    }

    // Substation power at zero incentive with the generator running.
    let p0_on: f64 = rows.iter().map(|p| (p.beta - pi) / p.alpha - p.r_mw).sum();
    let capacity = rows[GENERATOR_BUS - 1].r_mw;

    let mut scenario = String::from("format,scenario,1\n");
    let _ = writeln!(
        scenario,
        "# 33-bus feeder; the generator at bus {GENERATOR_BUS} (bus {} counting the substation as bus 1)\n\
         # trips at iteration 0 and the feeder must stay within {BAND_MW} MW of its prior import.\n\
         # pi0 is not given by the protocol and is set to zero; it only shifts surpluses.",
        GENERATOR_BUS + 1
    );
    let _ = writeln!(scenario, "pi,{pi}\npi0,0\nv_min,0.95\nv_max,1.05");
    let _ = writeln!(scenario, "p0_min_mw,{}\np0_max_mw,{}", p0_on - BAND_MW, p0_on + BAND_MW);
    let _ = writeln!(
        scenario,
        "algorithm,dual\nepsilon_dual,0.5\nepsilon_first,0.3\nepsilon_zero,0.05\nsigma,0.02\nseed,42"
    );
    let _ = writeln!(scenario, "tolerance,1e-7\nmax_iterations,1000000\nperturbation,uniform");
    let _ = writeln!(scenario, "dual_feedback,unperturbed\nclamp_demand,false");
    let _ = writeln!(scenario, "event,0,generator_off,{GENERATOR_BUS},{capacity}");

    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/ieee33");
    std::fs::create_dir_all(&dir).expect("create data directory");
    let header = format!("# Baran-Wu 33-bus feeder, per-unit on {base_mva} MVA / {BASE_KV} kV.\n");
    let network = write_network(&net).replacen('\n', &format!("\n{header}"), 1);
    std::fs::write(dir.join("network.csv"), network).expect("write network");
    let header = format!(
        "# Nominal demands are the feeder's spot loads scaled by {scale}; alpha drawn uniformly in [0.3, 3].\n"
    );
    let prosumers = write_prosumers(&rows).replacen('\n', &format!("\n{header}"), 1);
    std::fs::write(dir.join("prosumers.csv"), prosumers).expect("write prosumers");
    std::fs::write(dir.join("scenario.csv"), scenario).expect("write scenario");
    println!("wrote {}", dir.display());
}
