//! Text formats for networks, prosumers, scenarios and traces.
//!
//! Every input file is comma separated, starts with a `format,<kind>,1`
//! tag, and may contain blank lines and `#` comments. Physical quantities are
//! in MW and MVAr and are converted to per-unit with the network's base power
//! by [`build_scenario`]; line impedances are already per-unit.
//!
//! Network:
//!
//! ```text
//! format,network,1
//! base_mva,10
//! base_kv,12.66
//! parent,child,r_pu,x_pu
//! 0,1,0.000575,0.000293
//! ```
//!
//! Prosumers, one row per bus, with `alpha` in currency/MW^2, `beta` in
//! currency/MW and `q_mvar` the reactive injection (negative for a load):
//!
//! ```text
//! format,prosumers,1
//! bus,alpha,beta,r_mw,q_mvar,d_min_mw,d_max_mw
//! 1,1.7,1.17,0,-0.06,0,inf
//! ```
//!
//! Scenario, as `key,value` records plus repeated `v_limits` and `event` rows:
//!
//! ```text
//! format,scenario,1
//! pi,1
//! v_min,0.95
//! p0_min_mw,3.2
//! p0_max_mw,3.6
//! algorithm,dual
//! epsilon_dual,0.5
//! v_limits,18,0.94,1.05
//! event,0,generator_off,31,1.2
//! event,500,set_limits,0.95,1.05,3.0,3.4
//! ```
//!
//! Trace files have a header row and one record per iteration; the schema
//! is given by [`TRACE_COLUMNS`] followed by `xi_k`, `d_k`, `v_k` per bus.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::controllers::{Algorithm, ControllerConfig, DualFeedback, PerturbationLaw};
use crate::error::{Error, Result};
use crate::feeder::{build_sensitivities, Line, Network};
use crate::market::{Prosumer, Tariff};
use crate::program::OperationalLimits;
use crate::sim::{Event, Scenario, ScheduledEvent, Trace, DIVERGENCE_GUARD};

const VERSION: &str = "1";

/// `(line number, fields)` of the non-empty lines after the format tag.
fn records<'a>(text: &'a str, kind: &str, path: &Path) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut out = Vec::new();
    let mut tagged = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !tagged {
            if fields != ["format", kind, VERSION] {
                return Err(parse_err(path, idx + 1, format!("expected `format,{kind},{VERSION}`")));
            }
            tagged = true;
            continue;
        }
        out.push((idx + 1, fields));
    }
    if !tagged {
        return Err(parse_err(path, 1, format!("missing `format,{kind},{VERSION}` tag")));
    }
    Ok(out)
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn field<T: FromStr>(path: &Path, line: usize, name: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| parse_err(path, line, format!("invalid {name} {raw:?}")))
}

fn arity(path: &Path, line: usize, fields: &[&str], n: usize) -> Result<()> {
    if fields.len() == n {
        Ok(())
    } else {
        Err(parse_err(
            path,
            line,
            format!("expected {n} fields, found {}", fields.len()),
        ))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn parse_network(text: &str, path: &Path) -> Result<Network> {
    let mut base_mva = None;
    let mut base_kv = None;
    let mut header = false;
    let mut lines = Vec::new();
    let mut last_line = 1;
    for (ln, f) in records(text, "network", path)? {
        last_line = ln;
        match f[0] {
            "base_mva" if !header => {
                arity(path, ln, &f, 2)?;
                base_mva = Some(field(path, ln, "base_mva", f[1])?);
            }
            "base_kv" if !header => {
                arity(path, ln, &f, 2)?;
                base_kv = Some(field(path, ln, "base_kv", f[1])?);
            }
            "parent" if !header => {
                if f != ["parent", "child", "r_pu", "x_pu"] {
                    return Err(parse_err(path, ln, "expected header `parent,child,r_pu,x_pu`"));
                }
                header = true;
            }
            _ if header => {
                arity(path, ln, &f, 4)?;
                lines.push(Line {
                    parent: field(path, ln, "parent bus", f[0])?,
                    child: field(path, ln, "child bus", f[1])?,
                    r: field(path, ln, "resistance", f[2])?,
                    x: field(path, ln, "reactance", f[3])?,
                });
            }
            other => return Err(parse_err(path, ln, format!("unexpected record {other:?}"))),
        }
    }
    let base_mva = base_mva.ok_or_else(|| parse_err(path, last_line, "missing base_mva"))?;
    let base_kv = base_kv.ok_or_else(|| parse_err(path, last_line, "missing base_kv"))?;
    if !header {
        return Err(parse_err(path, last_line, "missing line table"));
    }
    let n = lines.len();
    Network::new(n, lines, base_mva, base_kv).map_err(|e| parse_err(path, last_line, e.to_string()))
}

pub fn write_network(net: &Network) -> String {
    let mut s = format!("format,network,{VERSION}\nbase_mva,{}\nbase_kv,{}\nparent,child,r_pu,x_pu\n", net.base_mva, net.base_kv);
    for l in net.lines() {
        let _ = writeln!(s, "{},{},{},{}", l.parent, l.child, l.r, l.x);
    }
    s
}

pub fn read_network(path: &Path) -> Result<Network> {
    parse_network(&read(path)?, path)
}

/// A prosumer row in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsumerRecord {
    pub bus: usize,
    pub alpha: f64,
    pub beta: f64,
    pub r_mw: f64,
    pub q_mvar: f64,
    pub d_min_mw: f64,
    pub d_max_mw: f64,
}

const PROSUMER_HEADER: [&str; 7] = ["bus", "alpha", "beta", "r_mw", "q_mvar", "d_min_mw", "d_max_mw"];

pub fn parse_prosumers(text: &str, path: &Path) -> Result<Vec<ProsumerRecord>> {
    let mut rows = records(text, "prosumers", path)?.into_iter();
    match rows.next() {
        Some((_, f)) if f == PROSUMER_HEADER => {}
        Some((ln, _)) => return Err(parse_err(path, ln, format!("expected header `{}`", PROSUMER_HEADER.join(",")))),
        None => return Err(parse_err(path, 1, "missing prosumer table")),
    }
    let mut out: Vec<ProsumerRecord> = Vec::new();
    for (ln, f) in rows {
        arity(path, ln, &f, 7)?;
        let rec = ProsumerRecord {
            bus: field(path, ln, "bus", f[0])?,
            alpha: field(path, ln, "alpha", f[1])?,
            beta: field(path, ln, "beta", f[2])?,
            r_mw: field(path, ln, "r_mw", f[3])?,
            q_mvar: field(path, ln, "q_mvar", f[4])?,
            d_min_mw: field(path, ln, "d_min_mw", f[5])?,
            d_max_mw: field(path, ln, "d_max_mw", f[6])?,
        };
        if rec.bus != out.len() + 1 {
            return Err(parse_err(
                path,
                ln,
                format!("bus {} out of order; expected bus {}", rec.bus, out.len() + 1),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_prosumers(rows: &[ProsumerRecord]) -> String {
    let mut s = format!("format,prosumers,{VERSION}\n{}\n", PROSUMER_HEADER.join(","));
    for p in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            p.bus, p.alpha, p.beta, p.r_mw, p.q_mvar, p.d_min_mw, p.d_max_mw
        );
    }
    s
}

pub fn read_prosumers(path: &Path) -> Result<Vec<ProsumerRecord>> {
    parse_prosumers(&read(path)?, path)
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    GeneratorOff { bus: usize, mw: f64 },
    GeneratorOn { bus: usize, mw: f64 },
    SetLimits { v_min: f64, v_max: f64, p0_min_mw: f64, p0_max_mw: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventSpec {
    pub iteration: usize,
    pub kind: EventKind,
}

/// Step size per algorithm; `None` selects the algorithm default.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepSizes {
    pub dual: Option<f64>,
    pub first: Option<f64>,
    pub zero: Option<f64>,
}

impl StepSizes {
    pub fn get(&self, algorithm: Algorithm) -> Option<f64> {
        match algorithm {
            Algorithm::DualAscent => self.dual,
            Algorithm::FirstOrder => self.first,
            Algorithm::ZeroOrder => self.zero,
        }
    }

    pub fn set(&mut self, algorithm: Algorithm, epsilon: Option<f64>) {
        match algorithm {
            Algorithm::DualAscent => self.dual = epsilon,
            Algorithm::FirstOrder => self.first = epsilon,
            Algorithm::ZeroOrder => self.zero = epsilon,
        }
    }
}

/// A scenario file in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub pi: f64,
    pub pi0: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub p0_min_mw: f64,
    pub p0_max_mw: f64,
    /// Per-bus `(bus, v_min, v_max)` overrides.
    pub v_limits: Vec<(usize, f64, f64)>,
    pub algorithm: Algorithm,
    pub epsilon: StepSizes,
    pub sigma: f64,
    pub seed: u64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub perturbation: PerturbationLaw,
    pub dual_feedback: DualFeedback,
    pub clamp_demand: bool,
    pub divergence_guard: f64,
    pub events: Vec<EventSpec>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        let cfg = ControllerConfig::default();
        ScenarioSpec {
            pi: 1.0,
            pi0: 0.0,
            v_min: 0.95,
            v_max: 1.05,
            p0_min_mw: f64::NEG_INFINITY,
            p0_max_mw: f64::INFINITY,
            v_limits: Vec::new(),
            algorithm: Algorithm::DualAscent,
            epsilon: StepSizes::default(),
            sigma: cfg.sigma,
            seed: cfg.rng_seed,
            tolerance: cfg.tolerance,
            max_iterations: cfg.max_iterations,
            perturbation: cfg.perturbation,
            dual_feedback: cfg.dual_feedback,
            clamp_demand: false,
            divergence_guard: DIVERGENCE_GUARD,
            events: Vec::new(),
        }
    }
}

fn perturbation_name(p: PerturbationLaw) -> &'static str {
    match p {
        PerturbationLaw::Uniform => "uniform",
        PerturbationLaw::CoordinateCycle => "coordinate",
    }
}

fn feedback_name(f: DualFeedback) -> &'static str {
    match f {
        DualFeedback::Unperturbed => "unperturbed",
        DualFeedback::PerturbedAverage => "perturbed_average",
    }
}

pub fn parse_scenario(text: &str, path: &Path) -> Result<ScenarioSpec> {
    let mut spec = ScenarioSpec::default();
    for (ln, f) in records(text, "scenario", path)? {
        let key = f[0];
        match key {
            "v_limits" => {
                arity(path, ln, &f, 4)?;
                spec.v_limits.push((
                    field(path, ln, "bus", f[1])?,
                    field(path, ln, "v_min", f[2])?,
                    field(path, ln, "v_max", f[3])?,
                ));
                continue;
            }
            "event" => {
                spec.events.push(parse_event(path, ln, &f)?);
                continue;
            }
            _ => arity(path, ln, &f, 2)?,
        }
        let val = f[1];
        match key {
            "pi" => spec.pi = field(path, ln, key, val)?,
            "pi0" => spec.pi0 = field(path, ln, key, val)?,
            "v_min" => spec.v_min = field(path, ln, key, val)?,
            "v_max" => spec.v_max = field(path, ln, key, val)?,
            "p0_min_mw" => spec.p0_min_mw = field(path, ln, key, val)?,
            "p0_max_mw" => spec.p0_max_mw = field(path, ln, key, val)?,
            "algorithm" => spec.algorithm = val.parse().map_err(|e: Error| parse_err(path, ln, e.to_string()))?,
            "epsilon_dual" | "epsilon_first" | "epsilon_zero" => {
                let algo: Algorithm = key["epsilon_".len()..].parse()?;
                let eps = if val == "auto" { None } else { Some(field(path, ln, key, val)?) };
                spec.epsilon.set(algo, eps);
            }
            "sigma" => spec.sigma = field(path, ln, key, val)?,
            "seed" => spec.seed = field(path, ln, key, val)?,
            "tolerance" => spec.tolerance = field(path, ln, key, val)?,
            "max_iterations" => spec.max_iterations = field(path, ln, key, val)?,
            "divergence_guard" => spec.divergence_guard = field(path, ln, key, val)?,
            "clamp_demand" => spec.clamp_demand = field(path, ln, key, val)?,
            "perturbation" => {
                spec.perturbation = match val {
                    "uniform" => PerturbationLaw::Uniform,
                    "coordinate" => PerturbationLaw::CoordinateCycle,
                    _ => return Err(parse_err(path, ln, format!("unknown perturbation {val:?}"))),
                }
            }
            "dual_feedback" => {
                spec.dual_feedback = match val {
                    "unperturbed" => DualFeedback::Unperturbed,
                    "perturbed_average" => DualFeedback::PerturbedAverage,
                    _ => return Err(parse_err(path, ln, format!("unknown dual feedback {val:?}"))),
                }
            }
            _ => return Err(parse_err(path, ln, format!("unknown key {key:?}"))),
        }
    }
    let mut last = 0;
    for ev in &spec.events {
        if ev.iteration < last {
            return Err(parse_err(path, 1, format!("event at iteration {} is out of order", ev.iteration)));
        }
        last = ev.iteration;
    }
    Ok(spec)
}

fn parse_event(path: &Path, ln: usize, f: &[&str]) -> Result<EventSpec> {
    if f.len() < 3 {
        return Err(parse_err(path, ln, "incomplete event"));
    }
    let iteration = field(path, ln, "event iteration", f[1])?;
    let kind = match f[2] {
        "generator_off" | "generator_on" => {
            arity(path, ln, f, 5)?;
            let bus = field(path, ln, "bus", f[3])?;
            let mw = field(path, ln, "capacity", f[4])?;
            if f[2] == "generator_off" {
                EventKind::GeneratorOff { bus, mw }
            } else {
                EventKind::GeneratorOn { bus, mw }
            }
        }
        "set_limits" => {
            arity(path, ln, f, 7)?;
            EventKind::SetLimits {
                v_min: field(path, ln, "v_min", f[3])?,
                v_max: field(path, ln, "v_max", f[4])?,
                p0_min_mw: field(path, ln, "p0_min_mw", f[5])?,
                p0_max_mw: field(path, ln, "p0_max_mw", f[6])?,
            }
        }
        other => return Err(parse_err(path, ln, format!("unknown event {other:?}"))),
    };
    Ok(EventSpec { iteration, kind })
}

pub fn write_scenario(spec: &ScenarioSpec) -> String {
    let mut s = format!("format,scenario,{VERSION}\n");
    let _ = writeln!(s, "pi,{}\npi0,{}", spec.pi, spec.pi0);
    let _ = writeln!(s, "v_min,{}\nv_max,{}", spec.v_min, spec.v_max);
    let _ = writeln!(s, "p0_min_mw,{}\np0_max_mw,{}", spec.p0_min_mw, spec.p0_max_mw);
    let _ = writeln!(s, "algorithm,{}", spec.algorithm);
    for algo in Algorithm::ALL {
        let _ = match spec.epsilon.get(algo) {
            Some(e) => writeln!(s, "epsilon_{algo},{e}"),
            None => writeln!(s, "epsilon_{algo},auto"),
        };
    }
    let _ = writeln!(s, "sigma,{}\nseed,{}", spec.sigma, spec.seed);
    let _ = writeln!(s, "tolerance,{}\nmax_iterations,{}", spec.tolerance, spec.max_iterations);
    let _ = writeln!(s, "perturbation,{}", perturbation_name(spec.perturbation));
    let _ = writeln!(s, "dual_feedback,{}", feedback_name(spec.dual_feedback));
    let _ = writeln!(s, "clamp_demand,{}", spec.clamp_demand);
    let _ = writeln!(s, "divergence_guard,{}", spec.divergence_guard);
    for (bus, lo, hi) in &spec.v_limits {
        let _ = writeln!(s, "v_limits,{bus},{lo},{hi}");
    }
    for ev in &spec.events {
        let _ = match &ev.kind {
            EventKind::GeneratorOff { bus, mw } => writeln!(s, "event,{},generator_off,{bus},{mw}", ev.iteration),
            EventKind::GeneratorOn { bus, mw } => writeln!(s, "event,{},generator_on,{bus},{mw}", ev.iteration),
            EventKind::SetLimits {
                v_min,
                v_max,
                p0_min_mw,
                p0_max_mw,
            } => writeln!(
                s,
                "event,{},set_limits,{v_min},{v_max},{p0_min_mw},{p0_max_mw}",
                ev.iteration
            ),
        };
    }
    s
}

pub fn read_scenario(path: &Path) -> Result<ScenarioSpec> {
    parse_scenario(&read(path)?, path)
}

fn uniform_limits(n: usize, v_min: f64, v_max: f64, p0_min_mw: f64, p0_max_mw: f64, base: f64) -> OperationalLimits {
    OperationalLimits::uniform(n, v_min, v_max, p0_min_mw / base, p0_max_mw / base)
}

/// Combines the three files into a per-unit [`Scenario`] for the scenario's
/// own algorithm.
///
/// With base power `S`, powers are divided by `S`, prices per MW become
/// prices per unit (`pi S`, `beta S`) and curvatures `alpha S^2`. Step sizes
/// and perturbation magnitudes are taken as written, in per-unit terms.
pub fn build_scenario(net: &Network, rows: &[ProsumerRecord], spec: &ScenarioSpec) -> Result<Scenario> {
    build_scenario_for(net, rows, spec, spec.algorithm)
}

/// As [`build_scenario`], selecting `algorithm` and its step size.
pub fn build_scenario_for(
    net: &Network,
    rows: &[ProsumerRecord],
    spec: &ScenarioSpec,
    algorithm: Algorithm,
) -> Result<Scenario> {
    let n = net.bus_count();
    if rows.len() != n {
        return Err(Error::Validation(format!(
            "network has {n} buses but {} prosumers are listed",
            rows.len()
        )));
    }
    let s = net.base_mva;
    let model = build_sensitivities(net)?;
    let tariff = Tariff::new(spec.pi * s, spec.pi0)?;
    let prosumers: Vec<Prosumer> = rows
        .iter()
        .map(|p| Prosumer {
            alpha: p.alpha * s * s,
            beta: p.beta * s,
            r: p.r_mw / s,
            q: p.q_mvar / s,
            d_min: p.d_min_mw / s,
            d_max: p.d_max_mw / s,
        })
        .collect();
    for (p, row) in prosumers.iter().zip(rows) {
        p.validate(&tariff)
            .map_err(|e| Error::Validation(format!("bus {}: {e}", row.bus)))?;
    }

    let mut limits = uniform_limits(n, spec.v_min, spec.v_max, spec.p0_min_mw, spec.p0_max_mw, s);
    for &(bus, lo, hi) in &spec.v_limits {
        if bus == 0 || bus > n {
            return Err(Error::Validation(format!("voltage limits reference unknown bus {bus}")));
        }
        limits.v_min[bus - 1] = lo;
        limits.v_max[bus - 1] = hi;
    }

    let events = spec
        .events
        .iter()
        .map(|ev| ScheduledEvent {
            iteration: ev.iteration,
            event: match ev.kind {
                EventKind::GeneratorOff { bus, mw } => Event::GeneratorOff { bus, capacity: mw / s },
                EventKind::GeneratorOn { bus, mw } => Event::GeneratorOn { bus, capacity: mw / s },
                EventKind::SetLimits {
                    v_min,
                    v_max,
                    p0_min_mw,
                    p0_max_mw,
                } => {
                    let mut lim = uniform_limits(n, v_min, v_max, p0_min_mw, p0_max_mw, s);
                    for &(bus, lo, hi) in &spec.v_limits {
                        lim.v_min[bus - 1] = lo;
                        lim.v_max[bus - 1] = hi;
                    }
                    Event::SetLimits(lim)
                }
            },
        })
        .collect();

    let mut scenario = Scenario::new(model, prosumers, tariff, limits, algorithm);
    scenario.config = ControllerConfig {
        epsilon: spec.epsilon.get(algorithm),
        sigma: spec.sigma,
        rng_seed: spec.seed,
        perturbation: spec.perturbation,
        dual_feedback: spec.dual_feedback,
        max_iterations: spec.max_iterations,
        tolerance: spec.tolerance,
    };
    scenario.events = events;
    scenario.clamp_demand = spec.clamp_demand;
    scenario.divergence_guard = spec.divergence_guard;
    scenario.validate()?;
    Ok(scenario)
}

/// Leading trace columns; per-bus `xi_k`, `d_k`, `v_k` (per-unit) follow.
pub const TRACE_COLUMNS: [&str; 7] = [
    "iteration",
    "total_incentive",
    "min_voltage",
    "p0_pu",
    "p0_mw",
    "so_cost",
    "constraint_violation",
];

pub fn format_trace(trace: &Trace, base_mva: f64) -> String {
    let n = trace.records.first().map_or(0, |r| r.xi.len());
    let mut s = TRACE_COLUMNS.join(",");
    for prefix in ["xi", "d", "v"] {
        for k in 1..=n {
            let _ = write!(s, ",{prefix}_{k}");
        }
    }
    s.push('\n');
    for r in &trace.records {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            r.iteration,
            r.total_incentive,
            r.min_voltage,
            r.p0,
            r.p0 * base_mva,
            r.so_cost_value,
            r.constraint_violation
        );
        for x in r.xi.iter().chain(r.d.iter()).chain(r.v.iter()) {
            let _ = write!(s, ",{x}");
        }
        s.push('\n');
    }
    s
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory, so readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("test.csv")
    }

    const NET: &str = "format,network,1\n# two buses\nbase_mva,10\nbase_kv,12.66\nparent,child,r_pu,x_pu\n0,1,0.1,0.05\n1,2,0.2,0.1\n";

    #[test]
    fn network_parses() {
        let net = parse_network(NET, p()).unwrap();
        assert_eq!(net.bus_count(), 2);
        assert_eq!(net.base_mva, 10.0);
        assert_eq!(parse_network(&write_network(&net), p()).unwrap(), net);
    }

    #[test]
    fn network_errors_carry_lines() {
        let bad = NET.replace("1,2,0.2,0.1", "1,2,abc,0.1");
        match parse_network(&bad, p()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_network("format,prosumers,1\n", p()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn prosumer_bus_order() {
        let text = "format,prosumers,1\nbus,alpha,beta,r_mw,q_mvar,d_min_mw,d_max_mw\n2,1,2,0,0,0,inf\n";
        assert!(matches!(parse_prosumers(text, p()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn low_beta_names_bus() {
        let net = parse_network(NET, p()).unwrap();
        let rows = vec![
            ProsumerRecord { bus: 1, alpha: 1.0, beta: 2.0, r_mw: 0.0, q_mvar: 0.0, d_min_mw: 0.0, d_max_mw: f64::INFINITY },
            ProsumerRecord { bus: 2, alpha: 1.0, beta: 0.5, r_mw: 0.0, q_mvar: 0.0, d_min_mw: 0.0, d_max_mw: f64::INFINITY },
        ];
        let err = build_scenario(&net, &rows, &ScenarioSpec::default()).unwrap_err();
        assert!(err.to_string().contains("bus 2"), "{err}");
    }

    #[test]
    fn unit_conversion() {
        let net = parse_network(NET, p()).unwrap();
        let rows: Vec<_> = (1..=2)
            .map(|bus| ProsumerRecord { bus, alpha: 2.0, beta: 3.0, r_mw: 0.5, q_mvar: 0.1, d_min_mw: 0.0, d_max_mw: 4.0 })
            .collect();
        let spec = ScenarioSpec { p0_min_mw: 1.0, p0_max_mw: 2.0, ..Default::default() };
        let sc = build_scenario(&net, &rows, &spec).unwrap();
        let q = &sc.prosumers[0];
        assert_eq!((q.alpha, q.beta, q.r, q.d_max), (200.0, 30.0, 0.05, 0.4));
        assert_eq!(sc.tariff.pi, 10.0);
        assert_eq!((sc.limits.p0_min, sc.limits.p0_max), (0.1, 0.2));
    }

    #[test]
    fn scenario_rejects_unknown_key() {
        assert!(matches!(
            parse_scenario("format,scenario,1\nwhat,1\n", p()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![-1e6f64..1e6, -1e-6f64..1e-6]
    }

    proptest! {
        #[test]
        fn scenario_round_trip(
            pi in finite(), pi0 in finite(), v_min in finite(), v_max in finite(),
            lo in finite(), hi in finite(), eps in proptest::option::of(finite()),
            sigma in finite(), seed in any::<u64>(), tol in finite(), iters in 0usize..1_000_000,
            clamp in any::<bool>(), coord in any::<bool>(), avg in any::<bool>(),
            limits in proptest::collection::vec((1usize..40, finite(), finite()), 0..4),
            offs in proptest::collection::vec((0usize..100, 1usize..40, finite()), 0..4),
        ) {
            let mut t = 0;
            let events = offs.into_iter().map(|(dt, bus, mw)| {
                t += dt;
                let kind = match dt % 3 {
                    0 => EventKind::GeneratorOff { bus, mw },
                    1 => EventKind::GeneratorOn { bus, mw },
                    _ => EventKind::SetLimits { v_min: mw, v_max: mw * 2.0, p0_min_mw: -mw, p0_max_mw: mw / 3.0 },
                };
                EventSpec { iteration: t, kind }
            }).collect();
            let mut steps = StepSizes::default();
            steps.set(Algorithm::ALL[iters % 3], eps);
            steps.set(Algorithm::ALL[(iters + 1) % 3], Some(sigma));
            let spec = ScenarioSpec {
                pi, pi0, v_min, v_max, p0_min_mw: lo, p0_max_mw: hi, v_limits: limits,
                algorithm: Algorithm::ALL[seed as usize % 3], epsilon: steps, sigma, seed,
                tolerance: tol, max_iterations: iters,
                perturbation: if coord { PerturbationLaw::CoordinateCycle } else { PerturbationLaw::Uniform },
                dual_feedback: if avg { DualFeedback::PerturbedAverage } else { DualFeedback::Unperturbed },
                clamp_demand: clamp, divergence_guard: 1e6, events,
            };
            prop_assert_eq!(parse_scenario(&write_scenario(&spec), p()).unwrap(), spec);
        }

        #[test]
        fn prosumer_round_trip(rows in proptest::collection::vec((finite(), finite(), finite(), finite(), finite(), finite()), 1..10)) {
            let recs: Vec<_> = rows.into_iter().enumerate().map(|(k, (a, b, r, q, lo, hi))| ProsumerRecord {
                bus: k + 1, alpha: a, beta: b, r_mw: r, q_mvar: q, d_min_mw: lo, d_max_mw: hi,
            }).collect();
            prop_assert_eq!(parse_prosumers(&write_prosumers(&recs), p()).unwrap(), recs);
        }
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("out.csv");
        write_atomic(&path, "a\n").unwrap();
        write_atomic(&path, "b\n").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "b\n");
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
