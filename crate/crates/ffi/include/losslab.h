#ifndef LOSSLAB_H
#define LOSSLAB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum LlActivation {
  LL_ACTIVATION_RELU = 0,
  LL_ACTIVATION_LINEAR = 1,
} LlActivation;

typedef enum LlLoss {
  LL_LOSS_CROSS_ENTROPY = 0,
  LL_LOSS_MSE = 1,
} LlLoss;

typedef enum LlStatus {
  LL_STATUS_OK = 0,
  LL_STATUS_NULL_POINTER = 1,
  LL_STATUS_INVALID_ARGUMENT = 2,
  LL_STATUS_DIMENSION_MISMATCH = 3,
  LL_STATUS_NON_FINITE = 4,
  LL_STATUS_CAPACITY_EXCEEDED = 5,
  LL_STATUS_CONFIG = 6,
  LL_STATUS_RUNTIME = 7,
  LL_STATUS_PANIC = 8,
  /**
   * The quadratic theorem suite ran but some check failed.
   */
  LL_STATUS_CHECK_FAILED = 9,
} LlStatus;

/**
 * Labelled samples.
 */
typedef struct LlDataset LlDataset;

/**
 * Network spec and parameter vector.
 */
typedef struct LlModel LlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *ll_last_error(void);

/**
 * Builds a network with He-initialized weights and zero biases.
 *
 * # Safety
 * `widths` must point to `n_widths` values; `out` must be writable.
 */
enum LlStatus ll_model_new(const size_t *widths,
                           size_t n_widths,
                           enum LlActivation activation,
                           bool use_bias,
                           enum LlLoss loss,
                           uint64_t seed,
                           struct LlModel **out);

/**
 * # Safety
 * `m` must come from [`ll_model_new`] and not be used afterwards.
 */
void ll_model_free(struct LlModel *m);

/**
 * Parameter count `P`, or 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live model.
 */
size_t ll_model_param_count(const struct LlModel *m);

/**
 * # Safety
 * `out` must hold `len` values.
 */
enum LlStatus ll_model_get_params(const struct LlModel *m, double *out, size_t len);

/**
 * # Safety
 * `values` must hold `len` values.
 */
enum LlStatus ll_model_set_params(struct LlModel *m, const double *values, size_t len);

/**
 * Dataset from `n` samples of dimension `d`, row-major `n × d`.
 *
 * # Safety
 * `inputs` must hold `n·d` values and `labels` `n` values.
 */
enum LlStatus ll_dataset_new(const double *inputs,
                             size_t n,
                             size_t d,
                             const size_t *labels,
                             struct LlDataset **out);

/**
 * # Safety
 * `d` must come from [`ll_dataset_new`] and not be used afterwards.
 */
void ll_dataset_free(struct LlDataset *d);

/**
 * Mean loss over the dataset.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum LlStatus ll_loss(const struct LlModel *m, const struct LlDataset *d, double *out);

/**
 * Mean gradient, `len = P`.
 *
 * # Safety
 * Handles must be live; `out` must hold `len` values.
 */
enum LlStatus ll_grad(const struct LlModel *m, const struct LlDataset *d, double *out, size_t len);

/**
 * Hessian-vector product `H v`, `len = P`.
 *
 * # Safety
 * Handles must be live; `v` and `out` must hold `len` values.
 */
enum LlStatus ll_hvp(const struct LlModel *m,
                     const struct LlDataset *d,
                     const double *v,
                     double *out,
                     size_t len);

/**
 * Dense Hessian, row-major `P × P`, `len = P²`. Fails with
 * `CapacityExceeded` above `cap` parameters.
 *
 * # Safety
 * Handles must be live; `out` must hold `len` values.
 */
enum LlStatus ll_hessian(const struct LlModel *m,
                         const struct LlDataset *d,
                         size_t cap,
                         double *out,
                         size_t len);

/**
 * Leading `k` eigenpairs by deflated power iteration. `values` holds
 * `k` entries, `vectors` is row-major `k × P` (one eigenvector per
 * row), `converged` holds `k` flags.
 *
 * # Safety
 * Handles must be live; buffers must have the stated sizes.
 */
enum LlStatus ll_top_k_eigs(const struct LlModel *m,
                            const struct LlDataset *d,
                            size_t k,
                            double tol,
                            size_t max_iter,
                            uint64_t seed,
                            double *values,
                            double *vectors,
                            bool *converged);

/**
 * Runs the quadratic theorem suite on a JSON scenario (null for the
 * built-in one). Writes the number of checks and of failures; returns
 * `CheckFailed` when any check fails.
 *
 * # Safety
 * `scenario_json` must be null or a NUL-terminated string; the outputs
 * must be writable.
 */
enum LlStatus ll_quadsim_suite(const char *scenario_json, size_t *n_checks, size_t *n_failed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOSSLAB_H */
