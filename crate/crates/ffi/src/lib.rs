//! C interface to `prosumer-incentives`.
//!
//! Problems and traces are opaque handles owned by the caller and released
//! with their `_free` function. Every function returns a [`PiStatus`]; the
//! message of the last failure on the calling thread is available through
//! [`pi_last_error_message`]. Powers cross the boundary in MW, voltages in
//! per-unit.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use prosumer_incentives::cli::{exit_code, BUNDLED_NETWORK, BUNDLED_PROSUMERS, BUNDLED_SCENARIO};
use prosumer_incentives::controllers::Algorithm;
use prosumer_incentives::feeder::Network;
use prosumer_incentives::io::{
    build_scenario_for, parse_network, parse_prosumers, parse_scenario, read_network, read_prosumers, read_scenario,
    ProsumerRecord, ScenarioSpec,
};
use prosumer_incentives::program::{oracle_solve, so_cost};
use prosumer_incentives::sim::{iterations_to_feasible, run, Trace, FEASIBLE_WINDOW};
use prosumer_incentives::Error;

/// Outcome of a call. The first five values match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiStatus {
    Ok = 0,
    Io = 1,
    InvalidInput = 2,
    Infeasible = 3,
    Diverged = 4,
    NullPointer = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiAlgorithm {
    DualAscent = 0,
    FirstOrder = 1,
    ZeroOrder = 2,
}

fn algorithm_of(code: u32) -> Option<Algorithm> {
    [
        (PiAlgorithm::DualAscent, Algorithm::DualAscent),
        (PiAlgorithm::FirstOrder, Algorithm::FirstOrder),
        (PiAlgorithm::ZeroOrder, Algorithm::ZeroOrder),
    ]
    .into_iter()
    .find(|(c, _)| *c as u32 == code)
    .map(|(_, a)| a)
}

/// Overrides for a run. NaN fields and a zero `max_iterations` keep the
/// scenario's value; `seed` applies only when `override_seed` is set.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiRunOptions {
    pub epsilon: f64,
    pub sigma: f64,
    pub tolerance: f64,
    pub max_iterations: u64,
    pub seed: u64,
    pub override_seed: bool,
}

/// Scalar fields of one trace record.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PiRecord {
    pub iteration: u64,
    pub total_incentive: f64,
    pub min_voltage: f64,
    pub p0_mw: f64,
    pub so_cost: f64,
    pub constraint_violation: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PiSolution {
    pub cost: f64,
    pub p0_mw: f64,
    pub min_voltage: f64,
    pub kkt_residual: f64,
}

/// A feeder, its prosumers and a scenario, as loaded from files.
pub struct PiProblem {
    network: Network,
    prosumers: Vec<ProsumerRecord>,
    spec: ScenarioSpec,
}

/// The record of one closed-loop run.
pub struct PiTrace {
    trace: Trace,
    base_mva: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = message);
}

fn status_of(err: &Error) -> PiStatus {
    match exit_code(err) {
        1 => PiStatus::Io,
        3 => PiStatus::Infeasible,
        4 => PiStatus::Diverged,
        _ => PiStatus::InvalidInput,
    }
}

fn fail(err: Error) -> PiStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

fn null(what: &str) -> PiStatus {
    set_error(format!("{what} is null"));
    PiStatus::NullPointer
}

fn guard(f: impl FnOnce() -> PiStatus) -> PiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == PiStatus::Ok {
                set_error(String::new());
            }
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PiStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn path_arg<'a>(p: *const c_char) -> Result<Option<&'a Path>, PiStatus> {
    if p.is_null() {
        return Ok(None);
    }
    match unsafe { CStr::from_ptr(p) }.to_str() {
        Ok(s) => Ok(Some(Path::new(s))),
        Err(_) => {
            set_error("path is not valid UTF-8".into());
            Err(PiStatus::InvalidInput)
        }
    }
}

/// Options that keep every scenario value.
#[no_mangle]
pub extern "C" fn pi_run_options_default() -> PiRunOptions {
    PiRunOptions {
        epsilon: f64::NAN,
        sigma: f64::NAN,
        tolerance: f64::NAN,
        max_iterations: 0,
        seed: 0,
        override_seed: false,
    }
}

/// Loads a problem. A null path selects the corresponding bundled 33-bus file.
///
/// # Safety
/// Each path must be null or a NUL-terminated string; `out` must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn pi_problem_load(
    network: *const c_char,
    prosumers: *const c_char,
    scenario: *const c_char,
    out: *mut *mut PiProblem,
) -> PiStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        unsafe { *out = ptr::null_mut() };
        let (network, prosumers, scenario) =
            match unsafe { (path_arg(network), path_arg(prosumers), path_arg(scenario)) } {
                (Ok(a), Ok(b), Ok(c)) => (a, b, c),
                (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
            };
        let loaded = (|| -> prosumer_incentives::Result<PiProblem> {
            let network = match network {
                Some(p) => read_network(p)?,
                None => parse_network(BUNDLED_NETWORK, Path::new("<bundled>/network.csv"))?,
            };
            let prosumers = match prosumers {
                Some(p) => read_prosumers(p)?,
                None => parse_prosumers(BUNDLED_PROSUMERS, Path::new("<bundled>/prosumers.csv"))?,
            };
            let spec = match scenario {
                Some(p) => read_scenario(p)?,
                None => parse_scenario(BUNDLED_SCENARIO, Path::new("<bundled>/scenario.csv"))?,
            };
            // Surface inconsistencies now rather than at the first run.
            build_scenario_for(&network, &prosumers, &spec, spec.algorithm)?;
            Ok(PiProblem { network, prosumers, spec })
        })();
        match loaded {
            Ok(p) => {
                unsafe { *out = Box::into_raw(Box::new(p)) };
                PiStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `problem` must be null or a handle from [`pi_problem_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pi_problem_free(problem: *mut PiProblem) {
    if !problem.is_null() {
        drop(unsafe { Box::from_raw(problem) });
    }
}

/// Number of buses excluding the substation; zero for a null handle.
///
/// # Safety
/// `problem` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pi_problem_bus_count(problem: *const PiProblem) -> usize {
    unsafe { problem.as_ref() }.map_or(0, |p| p.network.bus_count())
}

/// Solves the incentive program directly. `xi` receives the optimal
/// incentive and must hold `len` values, `len` equal to the bus count; it may
/// be null when only the summary is wanted.
///
/// # Safety
/// `problem` must be a live handle; `xi` must be null or valid for `len`
/// writes; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pi_solve(
    problem: *const PiProblem,
    xi: *mut f64,
    len: usize,
    out: *mut PiSolution,
) -> PiStatus {
    guard(|| {
        let Some(p) = (unsafe { problem.as_ref() }) else {
            return null("problem");
        };
        if out.is_null() {
            return null("out");
        }
        let n = p.network.bus_count();
        if !xi.is_null() && len != n {
            set_error(format!("incentive buffer holds {len} values, the feeder has {n} buses"));
            return PiStatus::InvalidInput;
        }
        let solved = (|| -> prosumer_incentives::Result<(PiSolution, Vec<f64>)> {
            let scenario = build_scenario_for(&p.network, &p.prosumers, &p.spec, p.spec.algorithm)?;
            let qp = scenario.final_program()?;
            let sol = oracle_solve(&qp)?;
            let summary = PiSolution {
                cost: so_cost(&qp, &sol.xi)?,
                p0_mw: qp.feeder_power(&sol.xi) * p.network.base_mva,
                min_voltage: qp.voltages(&sol.xi).min(),
                kkt_residual: sol.kkt_residual,
            };
            Ok((summary, sol.xi.iter().copied().collect()))
        })();
        match solved {
            Ok((summary, values)) => {
                unsafe {
                    *out = summary;
                    if !xi.is_null() {
                        ptr::copy_nonoverlapping(values.as_ptr(), xi, n);
                    }
                }
                PiStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Runs one controller, `algorithm` being a [`PiAlgorithm`] value. On
/// [`PiStatus::Diverged`] the partial trace is still returned through `out`.
///
/// # Safety
/// `problem` must be a live handle; `options` must be null or valid for
/// reads; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pi_run(
    problem: *const PiProblem,
    algorithm: u32,
    options: *const PiRunOptions,
    out: *mut *mut PiTrace,
) -> PiStatus {
    guard(|| {
        let Some(p) = (unsafe { problem.as_ref() }) else {
            return null("problem");
        };
        if out.is_null() {
            return null("out");
        }
        unsafe { *out = ptr::null_mut() };
        let opts = unsafe { options.as_ref() }.copied().unwrap_or_else(|| pi_run_options_default());
        let Some(algorithm) = algorithm_of(algorithm) else {
            set_error(format!("unknown algorithm {algorithm}"));
            return PiStatus::InvalidInput;
        };
        let mut spec = p.spec.clone();
        for (name, v) in [("epsilon", opts.epsilon), ("sigma", opts.sigma), ("tolerance", opts.tolerance)] {
            if !v.is_nan() && !(v.is_finite() && v > 0.0) {
                set_error(format!("{name} must be positive, got {v}"));
                return PiStatus::InvalidInput;
            }
        }
        if !opts.epsilon.is_nan() {
            spec.epsilon.set(algorithm, Some(opts.epsilon));
        }
        if !opts.sigma.is_nan() {
            spec.sigma = opts.sigma;
        }
        if !opts.tolerance.is_nan() {
            spec.tolerance = opts.tolerance;
        }
        if opts.max_iterations > 0 {
            spec.max_iterations = usize::try_from(opts.max_iterations).unwrap_or(usize::MAX);
        }
        if opts.override_seed {
            spec.seed = opts.seed;
        }
        let scenario = match build_scenario_for(&p.network, &p.prosumers, &spec, algorithm) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        let base_mva = p.network.base_mva;
        let (trace, status) = match run(&scenario) {
            Ok(t) => (t, PiStatus::Ok),
            Err(Error::Divergence { iteration, magnitude, trace }) => {
                let status = fail(Error::Divergence { iteration, magnitude, trace: trace.clone() });
                (*trace, status)
            }
            Err(e) => return fail(e),
        };
        unsafe { *out = Box::into_raw(Box::new(PiTrace { trace, base_mva })) };
        status
    })
}

/// # Safety
/// `trace` must be null or a handle from [`pi_run`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pi_trace_free(trace: *mut PiTrace) {
    if !trace.is_null() {
        drop(unsafe { Box::from_raw(trace) });
    }
}

/// Number of records; zero for a null handle.
///
/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pi_trace_len(trace: *const PiTrace) -> usize {
    unsafe { trace.as_ref() }.map_or(0, |t| t.trace.records.len())
}

/// Whether the run met its stopping rule.
///
/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pi_trace_converged(trace: *const PiTrace) -> bool {
    unsafe { trace.as_ref() }.is_some_and(|t| t.trace.converged)
}

/// First iteration of a lasting feasible stretch, or -1 if there is none.
///
/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pi_trace_iterations_to_feasible(trace: *const PiTrace) -> i64 {
    unsafe { trace.as_ref() }
        .and_then(|t| iterations_to_feasible(&t.trace.records, t.trace.tolerance, FEASIBLE_WINDOW))
        .map_or(-1, |k| k as i64)
}

/// # Safety
/// `trace` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pi_trace_record(trace: *const PiTrace, index: usize, out: *mut PiRecord) -> PiStatus {
    guard(|| {
        let Some(t) = (unsafe { trace.as_ref() }) else {
            return null("trace");
        };
        if out.is_null() {
            return null("out");
        }
        let Some(r) = t.trace.records.get(index) else {
            set_error(format!("record {index} is past the end of a {}-record trace", t.trace.records.len()));
            return PiStatus::InvalidInput;
        };
        unsafe {
            *out = PiRecord {
                iteration: r.iteration as u64,
                total_incentive: r.total_incentive,
                min_voltage: r.min_voltage,
                p0_mw: r.p0 * t.base_mva,
                so_cost: r.so_cost_value,
                constraint_violation: r.constraint_violation,
            }
        };
        PiStatus::Ok
    })
}

/// Copies the incentive of record `index` into `xi`, which holds `len`
/// values, `len` equal to the bus count.
///
/// # Safety
/// `trace` must be a live handle; `xi` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pi_trace_xi(trace: *const PiTrace, index: usize, xi: *mut f64, len: usize) -> PiStatus {
    guard(|| {
        let Some(t) = (unsafe { trace.as_ref() }) else {
            return null("trace");
        };
        if xi.is_null() {
            return null("xi");
        }
        let Some(r) = t.trace.records.get(index) else {
            set_error(format!("record {index} is past the end of a {}-record trace", t.trace.records.len()));
            return PiStatus::InvalidInput;
        };
        if len != r.xi.len() {
            set_error(format!("incentive buffer holds {len} values, the feeder has {} buses", r.xi.len()));
            return PiStatus::InvalidInput;
        }
        unsafe { ptr::copy_nonoverlapping(r.xi.as_ptr(), xi, len) };
        PiStatus::Ok
    })
}

/// Copies the last failure message on this thread into `buf` as a
/// NUL-terminated string, truncating to `len` bytes, and returns the size
/// needed including the terminator. Pass a null `buf` to query the size.
///
/// # Safety
/// `buf` must be null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pi_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len() + 1
    })
}
