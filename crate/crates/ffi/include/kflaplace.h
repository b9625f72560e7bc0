#ifndef KFLAPLACE_H
#define KFLAPLACE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KflStatus {
  KFL_STATUS_OK = 0,
  KFL_STATUS_NULL_POINTER = 1,
  KFL_STATUS_INVALID_ARGUMENT = 2,
  KFL_STATUS_CONTRACT = 3,
  KFL_STATUS_FORMAT = 4,
  KFL_STATUS_IO = 5,
  KFL_STATUS_DIVERGENCE = 6,
  KFL_STATUS_CONFIG = 7,
  KFL_STATUS_PANIC = 8,
} KflStatus;

typedef enum KflCurvature {
  KFL_CURVATURE_DIAGONAL = 0,
  KFL_CURVATURE_KRONECKER_FISHER = 1,
  KFL_CURVATURE_KRONECKER_GAUSS_NEWTON = 2,
} KflCurvature;

typedef enum KflVariant {
  KFL_VARIANT_ONLINE = 0,
  KFL_VARIANT_PER_TASK = 1,
  KFL_VARIANT_APPROXIMATE = 2,
} KflVariant;

// Per-layer curvature estimate.
typedef struct KflCurvatureSet KflCurvatureSet;

// Labeled images with pixels in [0, 1].
typedef struct KflDataset KflDataset;

// Network parameters.
typedef struct KflParams KflParams;

// Gaussian posterior carried between tasks.
typedef struct KflPosterior KflPosterior;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *kfl_last_error(void);

// He-initialized ReLU network with layer widths `sizes[0..n_sizes]`
// (input first, classes last).
//
// # Safety
// `sizes` must point to `n_sizes` readable values; `out` must be writable.
enum KflStatus kfl_params_init(const size_t *sizes,
                               size_t n_sizes,
                               uint64_t seed,
                               struct KflParams **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum KflStatus kfl_params_load(const char *path, struct KflParams **out);

// # Safety
// `params` must be a live handle and `path` a NUL-terminated string.
enum KflStatus kfl_params_save(const struct KflParams *params, const char *path);

// Total number of scalars, biases included; 0 for a null handle.
//
// # Safety
// `params` must be null or a live handle.
size_t kfl_params_len(const struct KflParams *params);

// Copies all parameters, layer by layer, each layer's `n_out × (n_in+1)`
// weight matrix column-stacked with the bias as the last column.
//
// # Safety
// `buf` must have room for `len` doubles.
enum KflStatus kfl_params_get(const struct KflParams *params, double *buf, size_t len);

// Inverse of [`kfl_params_get`].
//
// # Safety
// `params` must be a live handle and `buf` hold `len` doubles.
enum KflStatus kfl_params_set(struct KflParams *params, const double *buf, size_t len);

// # Safety
// `params` must be null or a handle not yet freed.
void kfl_params_free(struct KflParams *params);

// Reads an IDX image file and its label file.
//
// # Safety
// Paths must be NUL-terminated strings; `out` must be writable.
enum KflStatus kfl_dataset_load_idx(const char *images,
                                    const char *labels,
                                    struct KflDataset **out);

// Dataset from `n` row-major images of `dim` pixels in [0, 1] and labels in 0..10.
//
// # Safety
// `pixels` must hold `n·dim` doubles and `labels` `n` bytes.
enum KflStatus kfl_dataset_from_arrays(const double *pixels,
                                       const uint8_t *labels,
                                       size_t n,
                                       size_t dim,
                                       struct KflDataset **out);

// # Safety
// `set` must be null or a live handle.
size_t kfl_dataset_len(const struct KflDataset *set);

// # Safety
// `set` must be null or a handle not yet freed.
void kfl_dataset_free(struct KflDataset *set);

// Fraction of examples classified correctly.
//
// # Safety
// Handles must be live; `out` must be writable.
enum KflStatus kfl_accuracy(const struct KflParams *params,
                            const struct KflDataset *set,
                            double *out);

// Curvature of the NLL on `set` at `params`. `samples` model labels are
// drawn per example for the Fisher methods; 0 takes the exact expectation.
//
// # Safety
// Handles must be live; `out` must be writable.
enum KflStatus kfl_curvature_estimate(const struct KflParams *params,
                                      const struct KflDataset *set,
                                      enum KflCurvature method,
                                      uint32_t samples,
                                      uint64_t seed,
                                      struct KflCurvatureSet **out);

// # Safety
// `c` must be a live handle and `path` a NUL-terminated string.
enum KflStatus kfl_curvature_save(const struct KflCurvatureSet *c, const char *path);

// # Safety
// `c` must be null or a handle not yet freed.
void kfl_curvature_free(struct KflCurvatureSet *c);

// Empty posterior (isotropic prior of precision `prior_precision`) shaped
// like `params`.
//
// # Safety
// `params` must be a live handle; `out` must be writable.
enum KflStatus kfl_posterior_new(enum KflVariant variant,
                                 double prior_precision,
                                 const struct KflParams *params,
                                 struct KflPosterior **out);

// Incorporates a finished task whose mode is `mode`. Online and per-task
// posteriors take one curvature set; approximate posteriors take one per
// task seen so far, all evaluated at `mode`.
//
// # Safety
// `curvatures` must point to `n_curvatures` live handles.
enum KflStatus kfl_posterior_update(struct KflPosterior *post,
                                    const struct KflParams *mode,
                                    const struct KflCurvatureSet *const *curvatures,
                                    size_t n_curvatures,
                                    double lambda);

// Penalty `½(θ−μ)ᵀΛ(θ−μ)` at `params`. When `grad` is non-null it receives
// the gradient in the [`kfl_params_get`] layout (`grad_len` values).
//
// # Safety
// Handles must be live; `value` writable; `grad` null or `grad_len` doubles.
enum KflStatus kfl_posterior_penalty(const struct KflPosterior *post,
                                     const struct KflParams *params,
                                     double *value,
                                     double *grad,
                                     size_t grad_len);

// # Safety
// `post` must be a live handle and `path` a NUL-terminated string.
enum KflStatus kfl_posterior_save(const struct KflPosterior *post, const char *path);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum KflStatus kfl_posterior_load(const char *path, struct KflPosterior **out);

// # Safety
// `post` must be null or a handle not yet freed.
void kfl_posterior_free(struct KflPosterior *post);

// Runs a whole experiment described by a TOML or JSON config file and
// writes its results to the config's output directory.
//
// # Safety
// `config_path` must be a NUL-terminated string.
enum KflStatus kfl_run_experiment(const char *config_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KFLAPLACE_H */
