#ifndef VAEVE_H
#define VAEVE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VaeveStatus {
  VAEVE_STATUS_OK = 0,
  VAEVE_STATUS_NULL_ARGUMENT = 1,
  VAEVE_STATUS_INVALID_ARGUMENT = 2,
  VAEVE_STATUS_IO = 3,
  VAEVE_STATUS_FORMAT = 4,
  VAEVE_STATUS_DIMENSION = 5,
  VAEVE_STATUS_CONFIG = 6,
  VAEVE_STATUS_FINGERPRINT = 7,
  VAEVE_STATUS_NUMERICAL = 8,
  VAEVE_STATUS_PANIC = 9,
} VaeveStatus;

/**
 * A loaded encoder. Opaque to C.
 */
typedef struct VaeveModel VaeveModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *vaeve_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into the library on the same thread.
 */
const char *vaeve_last_error(void);

/**
 * Loads the encoder described by the `[vaeve]` and `[train]` sections of
 * a run configuration from a training checkpoint. The checkpoint
 * fingerprint must match the configuration.
 *
 * # Safety
 * `config_path` and `ckpt_path` must be NUL-terminated strings; `out`
 * must point to writable storage for one pointer.
 */
enum VaeveStatus vaeve_model_load(const char *config_path,
                                  const char *ckpt_path,
                                  struct VaeveModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`vaeve_model_load`] and not be used afterwards.
 */
void vaeve_model_free(struct VaeveModel *model);

/**
 * Feature, latent and phoneme dimensions. Any output pointer may be NULL.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be writable.
 */
enum VaeveStatus vaeve_model_dims(const struct VaeveModel *model,
                                  size_t *feature_dim,
                                  size_t *latent_dim,
                                  size_t *phoneme_count);

/**
 * Posterior means for one utterance. `features` is row-major
 * `frames × feature_dim`; `out` receives row-major `frames × latent_dim`.
 *
 * # Safety
 * `features` must hold `frames * feature_dim` values and `out` at least
 * `out_len` writable values.
 */
enum VaeveStatus vaeve_model_encode_mean(const struct VaeveModel *model,
                                         const double *features,
                                         size_t frames,
                                         size_t feature_dim,
                                         double *out,
                                         size_t out_len);

/**
 * Posterior means and standard deviations, both `frames × latent_dim`.
 *
 * # Safety
 * As [`vaeve_model_encode_mean`], for both `mean` and `sd`.
 */
enum VaeveStatus vaeve_model_encode(const struct VaeveModel *model,
                                    const double *features,
                                    size_t frames,
                                    size_t feature_dim,
                                    double *mean,
                                    double *sd,
                                    size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VAEVE_H */
