//! `prosumer-incentives` command line.
//!
//! Input paths default to the bundled 33-bus fixture. Output files go to
//! `--out`, or `$PROSUMER_INCENTIVES_OUT`, or `./out`:
//!
//! * `solve`: `solution.csv` (`bus,xi,d_mw,v`) and `active.csv`
//!   (`constraint,value,multiplier`).
//! * `run`: `trace_<algo>.csv` and `summary_<algo>.csv`.
//! * `compare`: the three traces and summaries plus `compare.csv`, one row
//!   per iteration with `total_incentive`, `min_voltage` and `p0_mw` per
//!   algorithm. A controller that stopped early repeats its final values.
//!
//! Exit status: 0 success, 1 I/O failure, 2 invalid input, 3 infeasible or
//! contradictory limits, 4 divergence.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::controllers::Algorithm;
use crate::error::{Error, Result};
use crate::feeder::Network;
use crate::io::{
    build_scenario_for, format_trace, parse_network, parse_prosumers, parse_scenario, read_network, read_prosumers,
    read_scenario, write_atomic, ProsumerRecord, ScenarioSpec,
};
use crate::program::{oracle_solve, so_cost};
use crate::sim::{run, summarize, Summary, Trace};

pub const BUNDLED_NETWORK: &str = include_str!("../data/ieee33/network.csv");
pub const BUNDLED_PROSUMERS: &str = include_str!("../data/ieee33/prosumers.csv");
pub const BUNDLED_SCENARIO: &str = include_str!("../data/ieee33/scenario.csv");

pub const OUT_ENV: &str = "PROSUMER_INCENTIVES_OUT";

#[derive(Debug, Parser)]
#[command(name = "prosumer-incentives", version, about = "Incentive design for grid services from prosumers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the incentive program directly.
    Solve(Inputs),
    /// Run one feedback controller against the feeder.
    Run(RunArgs),
    /// Run all three controllers on the same scenario.
    Compare(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Inputs {
    #[arg(long)]
    pub network: Option<PathBuf>,
    #[arg(long)]
    pub prosumers: Option<PathBuf>,
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, env = OUT_ENV, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long, value_parser = ["dual", "first", "zero"])]
    pub algo: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long = "max-iters")]
    pub max_iters: Option<usize>,
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Measurement(_) => 1,
        Error::Topology(_)
        | Error::Validation(_)
        | Error::Domain(_)
        | Error::Dimension { .. }
        | Error::ConstraintViolation(_)
        | Error::Parse { .. } => 2,
        Error::Infeasible { .. } | Error::ContradictoryLimits(_) => 3,
        Error::Divergence { .. } => 4,
    }
}

/// Parses `args`, runs the command and returns the exit status, reporting
/// to `out` and `err`.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 2;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Solve(inputs) => cmd_solve(inputs, out),
        Command::Run(args) => cmd_run(args, out),
        Command::Compare(args) => cmd_compare(args, out),
    }
}

struct Loaded {
    network: Network,
    prosumers: Vec<ProsumerRecord>,
    spec: ScenarioSpec,
}

fn load(inputs: &Inputs) -> Result<Loaded> {
    let network = match &inputs.network {
        Some(p) => read_network(p)?,
        None => parse_network(BUNDLED_NETWORK, Path::new("<bundled>/network.csv"))?,
    };
    let prosumers = match &inputs.prosumers {
        Some(p) => read_prosumers(p)?,
        None => parse_prosumers(BUNDLED_PROSUMERS, Path::new("<bundled>/prosumers.csv"))?,
    };
    let spec = match &inputs.scenario {
        Some(p) => read_scenario(p)?,
        None => parse_scenario(BUNDLED_SCENARIO, Path::new("<bundled>/scenario.csv"))?,
    };
    Ok(Loaded { network, prosumers, spec })
}

fn positive(name: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !(x.is_finite() && x > 0.0) => Err(Error::Validation(format!("--{name} must be positive, got {x}"))),
        _ => Ok(()),
    }
}

/// Applies command-line overrides; `--epsilon` sets the step of `algos`.
fn apply_overrides(spec: &mut ScenarioSpec, args: &RunArgs, algos: &[Algorithm]) -> Result<()> {
    positive("epsilon", args.epsilon)?;
    positive("sigma", args.sigma)?;
    positive("tol", args.tol)?;
    if let Some(a) = &args.algo {
        spec.algorithm = a.parse()?;
    }
    if let Some(e) = args.epsilon {
        for &a in algos {
            spec.epsilon.set(a, Some(e));
        }
    }
    if let Some(s) = args.sigma {
        spec.sigma = s;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(t) = args.tol {
        spec.tolerance = t;
    }
    if let Some(m) = args.max_iters {
        spec.max_iterations = m;
    }
    Ok(())
}

fn cmd_solve(inputs: &Inputs, out: &mut dyn Write) -> Result<()> {
    let loaded = load(inputs)?;
    let scenario = build_scenario_for(&loaded.network, &loaded.prosumers, &loaded.spec, loaded.spec.algorithm)?;
    let qp = scenario.final_program()?;
    let sol = oracle_solve(&qp)?;
    let base = loaded.network.base_mva;

    let v = qp.voltages(&sol.xi);
    let d = &qp.d_hat + qp.a.component_mul(&sol.xi);
    let mut table = String::from("bus,xi,d_mw,v\n");
    for k in 0..qp.bus_count() {
        let _ = writeln!(table, "{},{},{},{}", k + 1, sol.xi[k], d[k] * base, v[k]);
    }
    write_atomic(&inputs.out.join("solution.csv"), &table)?;

    let mut active = String::from("constraint,value,multiplier\n");
    let rows = qp.active_constraints(&sol.xi, &sol.theta, 1e-8);
    for (row, g, t) in &rows {
        let _ = writeln!(active, "{row},{g},{t}");
    }
    write_atomic(&inputs.out.join("active.csv"), &active)?;

    let cost = so_cost(&qp, &sol.xi)?;
    writeln!(out, "cost {cost}")?;
    writeln!(out, "p0_mw {}", qp.feeder_power(&sol.xi) * base)?;
    writeln!(out, "min_voltage {}", v.min())?;
    writeln!(out, "kkt_residual {:e}", sol.kkt_residual)?;
    let names: Vec<String> = rows.iter().map(|(r, _, _)| r.to_string()).collect();
    writeln!(out, "active {}", if names.is_empty() { "none".into() } else { names.join(" ") })?;
    Ok(())
}

fn summary_csv(s: &Summary, trace: &Trace, base: f64) -> String {
    let itf = s.iterations_to_feasible.map_or("none".to_string(), |k| k.to_string());
    format!(
        "key,value\nalgorithm,{}\nseed,{}\nepsilon,{}\nsigma,{}\niterations,{}\niterations_to_feasible,{itf}\n\
         final_cost,{}\nfinal_min_voltage,{}\nfinal_p0_mw,{}\nfinal_total_incentive,{}\nconverged,{}\ndiverged,{}\n",
        trace.algorithm,
        trace.seed,
        trace.epsilon,
        trace.sigma,
        s.iterations,
        s.final_cost,
        s.final_min_voltage,
        s.final_p0 * base,
        s.final_total_incentive,
        s.converged,
        s.diverged,
    )
}

/// Writes the trace and summary whether or not the run diverged.
fn finish_run(result: Result<Trace>, dir: &Path, base: f64, out: &mut dyn Write) -> Result<Trace> {
    let (trace, failure) = match result {
        Ok(t) => (t, None),
        Err(Error::Divergence { iteration, magnitude, trace }) => {
            let t = (*trace).clone();
            (t, Some(Error::Divergence { iteration, magnitude, trace }))
        }
        Err(e) => return Err(e),
    };
    let algo = trace.algorithm;
    write_atomic(&dir.join(format!("trace_{algo}.csv")), &format_trace(&trace, base))?;
    let summary = summarize(&trace)?;
    write_atomic(&dir.join(format!("summary_{algo}.csv")), &summary_csv(&summary, &trace, base))?;
    let itf = summary.iterations_to_feasible.map_or("none".to_string(), |k| k.to_string());
    writeln!(
        out,
        "{algo}: seed {} epsilon {} iterations {} iterations_to_feasible {itf} final_cost {} converged {}",
        trace.seed, trace.epsilon, summary.iterations, summary.final_cost, summary.converged
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(trace),
    }
}

fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let mut loaded = load(&args.inputs)?;
    let algo = match &args.algo {
        Some(a) => a.parse()?,
        None => loaded.spec.algorithm,
    };
    apply_overrides(&mut loaded.spec, args, &[algo])?;
    let scenario = build_scenario_for(&loaded.network, &loaded.prosumers, &loaded.spec, algo)?;
    finish_run(run(&scenario), &args.inputs.out, loaded.network.base_mva, out).map(|_| ())
}

fn cmd_compare(args: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let mut loaded = load(&args.inputs)?;
    apply_overrides(&mut loaded.spec, args, &Algorithm::ALL)?;
    let scenarios = Algorithm::ALL
        .iter()
        .map(|&a| build_scenario_for(&loaded.network, &loaded.prosumers, &loaded.spec, a))
        .collect::<Result<Vec<_>>>()?;

    let results: Vec<Result<Trace>> = std::thread::scope(|s| {
        let handles: Vec<_> = scenarios.iter().map(|sc| s.spawn(move || run(sc))).collect();
        handles.into_iter().map(|h| h.join().expect("controller thread panicked")).collect()
    });

    let base = loaded.network.base_mva;
    let mut traces = Vec::new();
    let mut first_error = None;
    for (algo, res) in Algorithm::ALL.iter().zip(results) {
        match finish_run(res, &args.inputs.out, base, out) {
            Ok(t) => traces.push(t),
            Err(e) => {
                writeln!(out, "{algo}: failed: {e}")?;
                if let Error::Divergence { trace, .. } = &e {
                    traces.push((**trace).clone());
                }
                first_error.get_or_insert(e);
            }
        }
    }
    write_atomic(&args.inputs.out.join("compare.csv"), &compare_table(&traces, base))?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Aligned per-iteration table; traces that ended early hold their last row.
pub fn compare_table(traces: &[Trace], base_mva: f64) -> String {
    let mut s = String::from("iteration");
    for t in traces {
        let a = t.algorithm;
        let _ = write!(s, ",{a}_total_incentive,{a}_min_voltage,{a}_p0_mw");
    }
    s.push('\n');
    let len = traces.iter().map(|t| t.records.len()).max().unwrap_or(0);
    for k in 0..len {
        let _ = write!(s, "{k}");
        for t in traces {
            match t.records.get(k).or(t.records.last()) {
                Some(r) => {
                    let _ = write!(s, ",{},{},{}", r.total_incentive, r.min_voltage, r.p0 * base_mva);
                }
                None => s.push_str(",,,"),
            }
        }
        s.push('\n');
    }
    s
}

impl From<std::fmt::Error> for Error {
    fn from(e: std::fmt::Error) -> Self {
        Error::Io(std::io::Error::other(e))
    }
}
