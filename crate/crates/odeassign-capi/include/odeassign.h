#ifndef ODEASSIGN_H
#define ODEASSIGN_H

/* Generated from the odeassign-capi crate by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call. Zero is success; anything else is an error whose
// message [`odeassign_last_error`] returns.
typedef enum {
  ODEASSIGN_STATUS_OK = 0,
  // A required pointer argument was null.
  ODEASSIGN_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  ODEASSIGN_STATUS_UTF8 = 2,
  // Input text (config, problem JSON, setting name) failed to parse.
  ODEASSIGN_STATUS_PARSE = 3,
  // The configuration or problem is structurally invalid.
  ODEASSIGN_STATUS_CONFIG = 4,
  // Numerical failure: non-finite values, step-size underflow, step
  // budget exhausted, or training divergence.
  ODEASSIGN_STATUS_NUMERIC = 5,
  // A file could not be read or written.
  ODEASSIGN_STATUS_IO = 6,
  // An internal invariant failed; the library caught the panic at the
  // boundary instead of unwinding into the caller.
  ODEASSIGN_STATUS_PANIC = 7,
} OdeassignStatus;

// An opaque, mutable run configuration. Create with [`odeassign_run_new`],
// adjust with [`odeassign_run_set`], destroy with [`odeassign_run_free`].
typedef struct OdeassignRun OdeassignRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// The library version as a borrowed, static string.
const char *odeassign_version(void);

// The message of the most recent failure on this thread. Borrowed; valid
// until the next library call from the same thread. Empty before any
// failure.
const char *odeassign_last_error(void);

// Create a run handle. `config_text` may be null (defaults) or hold the
// same `key = value` lines a config file would.
//
// # Safety
// `config_text` must be null or NUL-terminated; `out` must be a valid
// pointer to receive the handle.
OdeassignStatus odeassign_run_new(const char *config_text, OdeassignRun **out);

// Destroy a handle from [`odeassign_run_new`]. Null is ignored.
//
// # Safety
// `run` must be null or a handle not yet freed.
void odeassign_run_free(OdeassignRun *run);

// Assign one configuration key, e.g. `("lr", "0.0001")`. Keys and value
// spellings match the config file format exactly.
//
// # Safety
// `run` must be a live handle; `key` and `value` must be NUL-terminated.
OdeassignStatus odeassign_run_set(OdeassignRun *run, const char *key, const char *value);

// The handle's complete configuration as config-file text (caller frees).
//
// # Safety
// `run` must be a live handle; `out` must be valid to receive the string.
OdeassignStatus odeassign_run_resolved(const OdeassignRun *run, char **out);

// Generate the dataset described by the configuration into its `dataset`
// directory. On success, `out_manifest_json` (if non-null) receives the
// manifest as JSON (caller frees).
//
// # Safety
// `run` must be a live handle; `out_manifest_json` may be null.
OdeassignStatus odeassign_run_generate(const OdeassignRun *run, char **out_manifest_json);

// Train per the configuration: reads the dataset directory, resumes from
// `checkpoint` when set, writes `train_log.csv` and `checkpoints/last`
// under the output directory. `out_final_epoch` (if non-null) receives the
// epoch count reached.
//
// # Safety
// `run` must be a live handle; `out_final_epoch` may be null.
OdeassignStatus odeassign_run_train(const OdeassignRun *run, uint64_t *out_final_epoch);

// Evaluate the configured checkpoint on the configured split. `setting` is
// `"predcls"` or `"sgcls"`. Writes `report_<setting>.json` under the
// output directory and (if `out_report_json` is non-null) returns the same
// JSON (caller frees).
//
// # Safety
// `run` must be a live handle; `setting` must be NUL-terminated;
// `out_report_json` may be null.
OdeassignStatus odeassign_run_evaluate(const OdeassignRun *run,
                                       const char *setting,
                                       char **out_report_json);

// Solve one assignment problem exactly. `problem_json` and the returned
// string use the same JSON schema as the CLI's `ilp` subcommand: the
// problem carries node/label counts, a row-major unary score table, sparse
// `[u, v, l_u, l_v, score]` pairwise entries, the pairwise weight, and the
// per-node cap; the solution carries the chosen label sets and the
// objective. Caller frees the output via [`odeassign_string_free`].
//
// # Safety
// `problem_json` must be NUL-terminated; `out_solution_json` must be valid
// to receive the string.
OdeassignStatus odeassign_ilp_solve(const char *problem_json, char **out_solution_json);

// Release a string previously handed out through a `char **` parameter.
// Null is ignored.
//
// # Safety
// `s` must be null or a string from this library not yet freed.
void odeassign_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ODEASSIGN_H */
