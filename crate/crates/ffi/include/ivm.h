#ifndef IVM_H
#define IVM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum IvmStatus {
  IVM_STATUS_OK = 0,
  IVM_STATUS_NULL_POINTER = 1,
  IVM_STATUS_INVALID_ARGUMENT = 2,
  IVM_STATUS_NUMERICAL_FAILURE = 3,
  IVM_STATUS_INITIALIZATION = 4,
  IVM_STATUS_PARSE = 5,
  IVM_STATUS_OUT_OF_ORDER = 6,
  IVM_STATUS_CONFIG = 7,
  IVM_STATUS_IO = 8,
  IVM_STATUS_OUT_OF_RANGE = 9,
  IVM_STATUS_PANIC = 10,
} IvmStatus;

/**
 * Opaque pipeline handle.
 */
typedef struct IvmPipeline IvmPipeline;

/**
 * Estimate after one epoch.
 */
typedef struct IvmEpochResult {
  double time;
  double x;
  double y;
  double z;
  double phi;
  double delta;
  double delta_dot;
  /**
   * Components of the pseudorange error model.
   */
  uint32_t k;
  double runtime_s;
} IvmEpochResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *ivm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ivm_version(void);

/**
 * Create a pipeline from a TOML configuration (NULL for defaults).
 *
 * # Safety
 * `config_toml` must be NULL or a valid NUL-terminated string; `out` must
 * be a valid pointer.
 */
enum IvmStatus ivm_pipeline_new(const char *config_toml, struct IvmPipeline **out);

/**
 * Release a pipeline. NULL is ignored.
 *
 * # Safety
 * `pipeline` must be NULL or a handle from [`ivm_pipeline_new`] that has
 * not been freed.
 */
void ivm_pipeline_free(struct IvmPipeline *pipeline);

/**
 * Queue a pseudorange for the next [`ivm_pipeline_process_epoch`].
 *
 * # Safety
 * `pipeline` must be a live handle.
 */
enum IvmStatus ivm_pipeline_add_pseudorange(struct IvmPipeline *pipeline,
                                            double time,
                                            uint32_t sat_id,
                                            double sat_x,
                                            double sat_y,
                                            double sat_z,
                                            double range,
                                            double std);

/**
 * Queue an odometry increment from `time` to the next epoch, with a
 * diagonal information matrix `info_diag[4]`.
 *
 * # Safety
 * `pipeline` must be a live handle and `info_diag` must point to 4 doubles.
 */
enum IvmStatus ivm_pipeline_add_odometry(struct IvmPipeline *pipeline,
                                         double time,
                                         double dt,
                                         double forward,
                                         double lateral,
                                         double vertical,
                                         double dyaw,
                                         const double *info_diag);

/**
 * Process all queued measurements as one epoch. They must share one
 * timestamp, later than the previous epoch. The queue is cleared whether
 * or not the step succeeds.
 *
 * # Safety
 * `pipeline` must be a live handle; `out` must be NULL or valid.
 */
enum IvmStatus ivm_pipeline_process_epoch(struct IvmPipeline *pipeline, struct IvmEpochResult *out);

/**
 * Number of components of the current pseudorange mixture (0 for
 * non-mixture models).
 *
 * # Safety
 * `pipeline` must be a live handle; `out` must be valid.
 */
enum IvmStatus ivm_pipeline_mixture_len(const struct IvmPipeline *pipeline, uint32_t *out);

/**
 * Weight, mean and information of one scalar mixture component.
 *
 * # Safety
 * `pipeline` must be a live handle; the output pointers must be valid.
 */
enum IvmStatus ivm_pipeline_mixture_component(const struct IvmPipeline *pipeline,
                                              uint32_t index,
                                              double *weight,
                                              double *mean,
                                              double *info);

/**
 * Generate a scenario (TOML text) and write the measurement stream with
 * ground truth to `out_path`.
 *
 * # Safety
 * Both arguments must be valid NUL-terminated strings.
 */
enum IvmStatus ivm_simulate(const char *spec_toml, const char *out_path);

/**
 * Run a stream file through a pipeline and write the estimates CSV.
 *
 * # Safety
 * `stream_path` and `out_csv` must be valid NUL-terminated strings;
 * `config_toml` may be NULL.
 */
enum IvmStatus ivm_run_stream(const char *stream_path,
                              const char *config_toml,
                              const char *out_csv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IVM_H */
