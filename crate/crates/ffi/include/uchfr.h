#ifndef UCHFR_H
#define UCHFR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UchfrStatus {
  UCHFR_STATUS_OK = 0,
  UCHFR_STATUS_NULL_POINTER = 1,
  UCHFR_STATUS_INVALID_ARGUMENT = 2,
  UCHFR_STATUS_IO = 3,
  UCHFR_STATUS_FORMAT = 4,
  UCHFR_STATUS_STAGE = 5,
  /**
   * The requested quantity is not defined for this input.
   */
  UCHFR_STATUS_UNDEFINED = 6,
  UCHFR_STATUS_PANIC = 7,
} UchfrStatus;

/**
 * Opaque handle to a joint-stage network.
 */
typedef struct UchfrModel UchfrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *uchfr_last_error(void);

/**
 * Loads a joint-stage checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum UchfrStatus uchfr_model_load(const char *path, struct UchfrModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`uchfr_model_load`] and not be used afterwards.
 */
void uchfr_model_free(struct UchfrModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum UchfrStatus uchfr_model_input_dim(const struct UchfrModel *model, size_t *out);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum UchfrStatus uchfr_model_embedding_dim(const struct UchfrModel *model, size_t *out);

/**
 * Writes 1 if the model carries the pair discriminator, else 0.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum UchfrStatus uchfr_model_has_cmd(const struct UchfrModel *model, uint8_t *out);

/**
 * Embeds `rows` row-major inputs of width `cols` into `out`
 * (`rows * embedding_dim` values).
 *
 * # Safety
 * `x` must hold `rows * cols` values and `out` have room for `out_len`.
 */
enum UchfrStatus uchfr_model_embed(const struct UchfrModel *model,
                                   const double *x,
                                   size_t rows,
                                   size_t cols,
                                   double *out,
                                   size_t out_len);

/**
 * Order-independent discriminator probability that two embeddings share an
 * identity. Models trained without the discriminator return `Undefined`.
 *
 * # Safety
 * `e1` and `e2` must each hold `dim` values; `out` must be writable.
 */
enum UchfrStatus uchfr_model_cmd_score(const struct UchfrModel *model,
                                       const double *e1,
                                       const double *e2,
                                       size_t dim,
                                       double *out);

/**
 * Maps a cosine similarity to `[0, 1]`.
 */
double uchfr_embd_score(double cos);

/**
 * Averages an embedding score (already in `[0, 1]`) with a discriminator probability.
 */
double uchfr_fuse(double embd, double cmd_prob);

/**
 * Rank-1 identification rate of a row-major `n_probes x n_gallery` score matrix.
 *
 * # Safety
 * Arrays must hold the stated number of elements; `out` must be writable.
 */
enum UchfrStatus uchfr_rank1(const double *scores,
                             size_t n_probes,
                             size_t n_gallery,
                             const uint32_t *probe_classes,
                             const uint32_t *gallery_classes,
                             double *out);

/**
 * True-positive rate at false-accept rate `target` over `n` scored pairs,
 * `genuine[i] != 0` marking same-identity pairs. Returns `Undefined` when
 * there are too few imposter pairs to resolve `target`.
 *
 * # Safety
 * `scores` and `genuine` must hold `n` elements; `out` must be writable.
 */
enum UchfrStatus uchfr_tpr_at_far(const double *scores,
                                  const uint8_t *genuine,
                                  size_t n,
                                  double target,
                                  double *out);

/**
 * Library version as a static NUL-terminated string.
 */
const char *uchfr_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UCHFR_H */
