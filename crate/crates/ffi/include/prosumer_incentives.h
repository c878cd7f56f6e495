#ifndef PROSUMER_INCENTIVES_H
#define PROSUMER_INCENTIVES_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a call. The first five values match the command-line exit codes.
 */
typedef enum PiStatus {
  PI_STATUS_OK = 0,
  PI_STATUS_IO = 1,
  PI_STATUS_INVALID_INPUT = 2,
  PI_STATUS_INFEASIBLE = 3,
  PI_STATUS_DIVERGED = 4,
  PI_STATUS_NULL_POINTER = 5,
  PI_STATUS_PANIC = 6,
} PiStatus;

typedef enum PiAlgorithm {
  PI_ALGORITHM_DUAL_ASCENT = 0,
  PI_ALGORITHM_FIRST_ORDER = 1,
  PI_ALGORITHM_ZERO_ORDER = 2,
} PiAlgorithm;

/**
 * A feeder, its prosumers and a scenario, as loaded from files.
 */
typedef struct PiProblem PiProblem;

/**
 * The record of one closed-loop run.
 */
typedef struct PiTrace PiTrace;

/**
 * Overrides for a run. NaN fields and a zero `max_iterations` keep the
 * scenario's value; `seed` applies only when `override_seed` is set.
 */
typedef struct PiRunOptions {
  double epsilon;
  double sigma;
  double tolerance;
  uint64_t max_iterations;
  uint64_t seed;
  bool override_seed;
} PiRunOptions;

typedef struct PiSolution {
  double cost;
  double p0_mw;
  double min_voltage;
  double kkt_residual;
} PiSolution;

/**
 * Scalar fields of one trace record.
 */
typedef struct PiRecord {
  uint64_t iteration;
  double total_incentive;
  double min_voltage;
  double p0_mw;
  double so_cost;
  double constraint_violation;
} PiRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Options that keep every scenario value.
 */
struct PiRunOptions pi_run_options_default(void);

/**
 * Loads a problem. A null path selects the corresponding bundled 33-bus file.
 *
 * # Safety
 * Each path must be null or a NUL-terminated string; `out` must be valid
 * for writes.
 */
enum PiStatus pi_problem_load(const char *network,
                              const char *prosumers,
                              const char *scenario,
                              struct PiProblem **out);

/**
 * # Safety
 * `problem` must be null or a handle from [`pi_problem_load`] not yet freed.
 */
void pi_problem_free(struct PiProblem *problem);

/**
 * Number of buses excluding the substation; zero for a null handle.
 *
 * # Safety
 * `problem` must be null or a live handle.
 */
size_t pi_problem_bus_count(const struct PiProblem *problem);

/**
 * Solves the incentive program directly. `xi` receives the optimal
 * incentive and must hold `len` values, `len` equal to the bus count; it may
 * be null when only the summary is wanted.
 *
 * # Safety
 * `problem` must be a live handle; `xi` must be null or valid for `len`
 * writes; `out` must be valid for writes.
 */
enum PiStatus pi_solve(const struct PiProblem *problem,
                       double *xi,
                       size_t len,
                       struct PiSolution *out);

/**
 * Runs one controller, `algorithm` being a [`PiAlgorithm`] value. On
 * [`PiStatus::Diverged`] the partial trace is still returned through `out`.
 *
 * # Safety
 * `problem` must be a live handle; `options` must be null or valid for
 * reads; `out` must be valid for writes.
 */
enum PiStatus pi_run(const struct PiProblem *problem,
                     uint32_t algorithm,
                     const struct PiRunOptions *options,
                     struct PiTrace **out);

/**
 * # Safety
 * `trace` must be null or a handle from [`pi_run`] not yet freed.
 */
void pi_trace_free(struct PiTrace *trace);

/**
 * Number of records; zero for a null handle.
 *
 * # Safety
 * `trace` must be null or a live handle.
 */
size_t pi_trace_len(const struct PiTrace *trace);

/**
 * Whether the run met its stopping rule.
 *
 * # Safety
 * `trace` must be null or a live handle.
 */
bool pi_trace_converged(const struct PiTrace *trace);

/**
 * First iteration of a lasting feasible stretch, or -1 if there is none.
 *
 * # Safety
 * `trace` must be null or a live handle.
 */
int64_t pi_trace_iterations_to_feasible(const struct PiTrace *trace);

/**
 * # Safety
 * `trace` must be a live handle; `out` must be valid for writes.
 */
enum PiStatus pi_trace_record(const struct PiTrace *trace, size_t index, struct PiRecord *out);

/**
 * Copies the incentive of record `index` into `xi`, which holds `len`
 * values, `len` equal to the bus count.
 *
 * # Safety
 * `trace` must be a live handle; `xi` must be valid for `len` writes.
 */
enum PiStatus pi_trace_xi(const struct PiTrace *trace, size_t index, double *xi, size_t len);

/**
 * Copies the last failure message on this thread into `buf` as a
 * NUL-terminated string, truncating to `len` bytes, and returns the size
 * needed including the terminator. Pass a null `buf` to query the size.
 *
 * # Safety
 * `buf` must be null or valid for `len` writes.
 */
size_t pi_last_error_message(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROSUMER_INCENTIVES_H */
