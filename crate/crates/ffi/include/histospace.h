#ifndef HISTOSPACE_H
#define HISTOSPACE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum HsStatus {
  HS_STATUS_OK = 0,
  HS_STATUS_NULL_POINTER = 1,
  HS_STATUS_INVALID_ARGUMENT = 2,
  HS_STATUS_SHAPE = 3,
  HS_STATUS_IO = 4,
  HS_STATUS_PARSE = 5,
  HS_STATUS_CHECKPOINT = 6,
  HS_STATUS_INTERNAL = 7,
} HsStatus;

/**
 * A loaded autoencoder or expression model.
 */
typedef struct HsModel HsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next call into this library from the same thread.
 */
const char *hs_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hs_version(void);

/**
 * Loads a checkpoint directory into `*out`.
 *
 * # Safety
 * `dir` must be a NUL-terminated UTF-8 path and `out` a valid pointer.
 */
enum HsStatus hs_model_load(const char *dir, struct HsModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`hs_model_load`] and not be used afterwards.
 */
void hs_model_free(struct HsModel *model);

/**
 * Edge length of the square tiles the model expects, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t hs_model_input_size(const struct HsModel *model);

/**
 * Number of predicted genes, or 0 for an autoencoder or null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t hs_model_n_outputs(const struct HsModel *model);

/**
 * Predicts expression for `n_tiles` channel-planar tiles (`[N, 3, S, S]`,
 * values in [0, 1]) into `out`, which must hold `n_tiles * n_outputs` values.
 *
 * # Safety
 * `model` must be a live handle; buffers must have the stated lengths.
 */
enum HsStatus hs_model_predict(const struct HsModel *model,
                               const double *tiles,
                               size_t n_tiles,
                               double *out,
                               size_t out_len);

/**
 * Reconstructs tiles through an autoencoder; `out` has the input's length.
 *
 * # Safety
 * `model` must be a live handle; buffers must hold `n_tiles * 3 * S * S`
 * values.
 */
enum HsStatus hs_model_reconstruct(const struct HsModel *model,
                                   const double *tiles,
                                   size_t n_tiles,
                                   double *out);

/**
 * Pearson correlation of two length-`n` vectors. A zero-variance input
 * yields NaN with status `Ok`.
 *
 * # Safety
 * `x` and `y` must hold `n` values; `out` must be valid.
 */
enum HsStatus hs_pearson_r(const double *x, const double *y, size_t n, double *out);

/**
 * Seeded k-means on `n × d` row-major points; writes one label per point.
 *
 * # Safety
 * `points` must hold `n * d` values and `labels_out` `n` slots.
 */
enum HsStatus hs_kmeans(const double *points,
                        size_t n,
                        size_t d,
                        size_t k,
                        uint64_t seed,
                        size_t max_iter,
                        uint32_t *labels_out);

/**
 * Best-permutation agreement between cluster ids and class ids. Classes
 * are non-negative integers; a negative class marks an unlabeled item that
 * is left out. Writes the matched and scored counts.
 *
 * # Safety
 * `clusters` and `classes` must hold `n` values; outputs must be valid.
 */
enum HsStatus hs_contingency(const uint32_t *clusters,
                             const int32_t *classes,
                             size_t n,
                             size_t *matched_out,
                             size_t *total_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HISTOSPACE_H */
