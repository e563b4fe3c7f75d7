#ifndef ROMI_FFI_H
#define ROMI_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum RomiStatus {
  ROMI_STATUS_OK = 0,
  ROMI_STATUS_NULL_ARGUMENT = 1,
  ROMI_STATUS_CONFIG = 2,
  ROMI_STATUS_DIVERGENCE = 3,
  ROMI_STATUS_ORACLE = 4,
  ROMI_STATUS_IO = 5,
  ROMI_STATUS_INVALID_UTF8 = 6,
  ROMI_STATUS_NOT_FOUND = 7,
  ROMI_STATUS_BUFFER_TOO_SMALL = 8,
  ROMI_STATUS_INTERNAL = 9,
  ROMI_STATUS_PANIC = 10,
} RomiStatus;

// Experiment configuration.
typedef struct RomiConfig RomiConfig;

// Offline dataset.
typedef struct RomiDataset RomiDataset;

// Finished training run: policy, critics, ensemble and metrics.
typedef struct RomiRun RomiRun;

// Outcome of one Wasserstein-ball sandwich check.
typedef struct RomiSandwich {
  double robust_min;
  double surrogate;
  double nominal;
  double gap;
} RomiSandwich;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *romi_version(void);

// Copies the calling thread's last error message into `buf` and returns the
// buffer size required (1 when there is no error).
//
// # Safety
// `buf` must be null or point to `buf_len` writable bytes.
uintptr_t romi_last_error_message(char *buf, uintptr_t buf_len);

// Default configuration.
//
// # Safety
// `out_config` must be a valid pointer.
enum RomiStatus romi_config_default(struct RomiConfig **out_config);

// Parses and validates a JSON configuration document.
//
// # Safety
// `json` must be a NUL-terminated string and `out_config` a valid pointer.
enum RomiStatus romi_config_from_json(const char *json, struct RomiConfig **out_config);

// Writes the 16-character configuration hash; see [`romi_last_error_message`]
// for the buffer convention. Fails with `BufferTooSmall` below 17 bytes.
//
// # Safety
// `config` must come from this library; `buf` must hold `buf_len` bytes.
enum RomiStatus romi_config_hash(const struct RomiConfig *config, char *buf, uintptr_t buf_len);

// Sets the number of training epochs.
//
// # Safety
// `config` must come from this library.
enum RomiStatus romi_config_set_epochs(struct RomiConfig *config, uintptr_t epochs);

// # Safety
// `config` must be null or come from this library, and not be used again.
void romi_config_free(struct RomiConfig *config);

// Generates (or loads, when the configuration names a file) the dataset for `seed`.
//
// # Safety
// `config` must come from this library and `out_dataset` be a valid pointer.
enum RomiStatus romi_dataset_generate(const struct RomiConfig *config,
                                      uint64_t seed,
                                      struct RomiDataset **out_dataset);

// Number of transitions, or 0 for a null handle.
//
// # Safety
// `dataset` must be null or come from this library.
uintptr_t romi_dataset_len(const struct RomiDataset *dataset);

// # Safety
// `dataset` must be null or come from this library, and not be used again.
void romi_dataset_free(struct RomiDataset *dataset);

// Pretrains the ensemble and trains one seed. With a non-null `out_dir` the
// run directory (config, manifest, metrics, checkpoints) is written there.
// A run that diverged still yields a handle and returns `Divergence`.
//
// # Safety
// Handles must come from this library; `out_dir` must be null or a
// NUL-terminated path; `out_run` must be a valid pointer.
enum RomiStatus romi_train(const struct RomiConfig *config,
                           const struct RomiDataset *dataset,
                           uint64_t seed,
                           const char *out_dir,
                           struct RomiRun **out_run);

// Number of recorded epochs, or 0 for a null handle.
//
// # Safety
// `run` must be null or come from this library.
uintptr_t romi_run_epochs(const struct RomiRun *run);

// Latest recorded value of a named metric, such as `q_mean` or `return`.
//
// # Safety
// `run` must come from this library, `key` be NUL-terminated and `out_value` valid.
enum RomiStatus romi_run_final_metric(const struct RomiRun *run,
                                      const char *key,
                                      double *out_value);

// Deterministic action of the trained policy at one state.
//
// # Safety
// `state` must hold `state_len` doubles and `action` `action_len` writable doubles.
enum RomiStatus romi_run_policy_action(const struct RomiRun *run,
                                       const double *state,
                                       uintptr_t state_len,
                                       double *action,
                                       uintptr_t action_len);

// # Safety
// `run` must be null or come from this library, and not be used again.
void romi_run_free(struct RomiRun *run);

// Exact worst case over a Wasserstein ball against the ball surrogate and the
// nominal expectation. `metric` is row-major `n * n`.
//
// # Safety
// `nominal` and `values` must hold `n` doubles, `metric` `n * n`, and
// `out_report` must be valid.
enum RomiStatus romi_sandwich_check(const double *nominal,
                                    const double *values,
                                    const double *metric,
                                    uintptr_t n,
                                    double xi,
                                    struct RomiSandwich *out_report);

// Runs the oracle suite; `Oracle` is returned when any check fails.
//
// # Safety
// `out_passed` must be null or valid.
enum RomiStatus romi_verify(uintptr_t sandwich_instances,
                            uintptr_t q_bound_instances,
                            uint64_t seed,
                            bool *out_passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ROMI_FFI_H */
