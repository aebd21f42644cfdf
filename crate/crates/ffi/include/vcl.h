#ifndef VCL_H
#define VCL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VclMetric {
  VCL_METRIC_ACCURACY = 0,
  VCL_METRIC_AVG_ACCURACY = 1,
  VCL_METRIC_TEST_LL = 2,
  VCL_METRIC_CLASSIFIER_UNCERTAINTY = 3,
  VCL_METRIC_ORACLE_MEAN_ERROR = 4,
  VCL_METRIC_ORACLE_PRECISION_ERROR = 5,
} VclMetric;

typedef enum VclStatus {
  VCL_STATUS_OK = 0,
  VCL_STATUS_NULL_POINTER = 1,
  VCL_STATUS_INVALID_ARGUMENT = 2,
  VCL_STATUS_CONFIG = 3,
  VCL_STATUS_MISSING_DATA = 4,
  VCL_STATUS_IO = 5,
  VCL_STATUS_NUMERICAL = 6,
  VCL_STATUS_FORMAT = 7,
  VCL_STATUS_PANIC = 8,
} VclStatus;

/**
 * A resolved experiment configuration.
 */
typedef struct VclConfig VclConfig;

/**
 * Online diagonal posterior for Bayesian linear regression.
 */
typedef struct VclOracle VclOracle;

/**
 * Metrics of a finished or interrupted run.
 */
typedef struct VclRunResult VclRunResult;

/**
 * One metrics row. `eval_task` is −1 for aggregate metrics.
 */
typedef struct VclRecord {
  uint64_t seed;
  uint64_t tasks_seen;
  int64_t eval_task;
  enum VclMetric metric;
  double value;
} VclRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *vcl_version(void);

/**
 * Copies the calling thread's last error message into `buf` and returns
 * its full length (0 when the last call succeeded). Pass a null `buf` to
 * query the length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t vcl_last_error_message(char *buf, size_t len);

/**
 * Resolves a configuration: the experiment/method preset, then the TOML
 * file at `path` (may be null), then the non-null arguments. The data
 * directory defaults to `$VCL_DATA_DIR`.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum VclStatus vcl_config_resolve(const char *path,
                                  const char *experiment,
                                  const char *method,
                                  const char *out_dir,
                                  struct VclConfig **out);

/**
 * Replaces the seed list.
 *
 * # Safety
 * `cfg` must come from [`vcl_config_resolve`]; `seeds` must hold `n` values.
 */
enum VclStatus vcl_config_set_seeds(struct VclConfig *cfg, const uint64_t *seeds, size_t n);

/**
 * Sets the epoch count per task.
 *
 * # Safety
 * `cfg` must come from [`vcl_config_resolve`].
 */
enum VclStatus vcl_config_set_epochs(struct VclConfig *cfg, size_t epochs);

/**
 * Sets λ; rejected for methods without one.
 *
 * # Safety
 * `cfg` must come from [`vcl_config_resolve`].
 */
enum VclStatus vcl_config_set_lambda(struct VclConfig *cfg, double lambda);

/**
 * Writes the configuration hash (64 hex digits) into `buf` and returns
 * its length.
 *
 * # Safety
 * `cfg` must come from [`vcl_config_resolve`]; `buf` must be null or hold
 * `len` bytes.
 */
size_t vcl_config_hash(const struct VclConfig *cfg, char *buf, size_t len);

/**
 * # Safety
 * `cfg` must be null or come from [`vcl_config_resolve`], and not be used
 * afterwards.
 */
void vcl_config_free(struct VclConfig *cfg);

/**
 * Runs (or resumes) the experiment in the configured output directory.
 * `stop_after` > 0 stops after that many further tasks; the result then
 * reports itself incomplete and a later call resumes.
 *
 * # Safety
 * `cfg` must come from [`vcl_config_resolve`]; `out` must be writable.
 */
enum VclStatus vcl_run(const struct VclConfig *cfg, size_t stop_after, struct VclRunResult **out);

/**
 * # Safety
 * `result` must come from [`vcl_run`].
 */
size_t vcl_result_len(const struct VclRunResult *result);

/**
 * # Safety
 * `result` must come from [`vcl_run`].
 */
bool vcl_result_complete(const struct VclRunResult *result);

/**
 * Copies record `index` into `out`.
 *
 * # Safety
 * `result` must come from [`vcl_run`]; `out` must be writable.
 */
enum VclStatus vcl_result_get(const struct VclRunResult *result,
                              size_t index,
                              struct VclRecord *out);

/**
 * # Safety
 * `result` must be null or come from [`vcl_run`], and not be used afterwards.
 */
void vcl_result_free(struct VclRunResult *result);

/**
 * A zero-mean isotropic prior with the given precision.
 *
 * # Safety
 * `out` must be writable.
 */
enum VclStatus vcl_oracle_new(size_t dim,
                              double prior_precision,
                              double noise_sd,
                              struct VclOracle **out);

/**
 * Absorbs one observation `(x, y)`; `x` holds `dim` values.
 *
 * # Safety
 * `oracle` must come from [`vcl_oracle_new`]; `x` must hold `dim` values.
 */
enum VclStatus vcl_oracle_update(struct VclOracle *oracle, const double *x, size_t dim, double y);

/**
 * # Safety
 * `oracle` must come from [`vcl_oracle_new`].
 */
size_t vcl_oracle_dim(const struct VclOracle *oracle);

/**
 * Writes the posterior mean into `out[0..dim]`.
 *
 * # Safety
 * `oracle` must come from [`vcl_oracle_new`]; `out` must hold `dim` values.
 */
enum VclStatus vcl_oracle_mean(const struct VclOracle *oracle, double *out, size_t dim);

/**
 * Writes the posterior precisions into `out[0..dim]`.
 *
 * # Safety
 * `oracle` must come from [`vcl_oracle_new`]; `out` must hold `dim` values.
 */
enum VclStatus vcl_oracle_precision(const struct VclOracle *oracle, double *out, size_t dim);

/**
 * # Safety
 * `oracle` must be null or come from [`vcl_oracle_new`], and not be used
 * afterwards.
 */
void vcl_oracle_free(struct VclOracle *oracle);

/**
 * Runs the oracle and finite-difference suites. `total` and `failed`
 * (either may be null) receive the check counts.
 *
 * # Safety
 * `total` and `failed` must be null or writable.
 */
enum VclStatus vcl_verify_oracles(uint64_t seed, size_t *total, size_t *failed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VCL_H */
