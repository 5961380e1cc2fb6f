#ifndef LSVT_H
#define LSVT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum LsvtStatus {
  LSVT_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  LSVT_STATUS_NULL_ARGUMENT = 1,
  /**
   * Sizes or values out of range, or an output buffer of the wrong length.
   */
  LSVT_STATUS_INVALID_ARGUMENT = 2,
  LSVT_STATUS_IO = 3,
  /**
   * Malformed checkpoint or image data.
   */
  LSVT_STATUS_FORMAT = 4,
  /**
   * A computation produced NaN or infinity.
   */
  LSVT_STATUS_NON_FINITE = 5,
  /**
   * Internal failure; the library caught a panic.
   */
  LSVT_STATUS_INTERNAL = 6,
} LsvtStatus;

/**
 * Opaque model handle.
 */
typedef struct LsvtModel LsvtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *lsvt_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next library call on the same thread.
 */
const char *lsvt_last_error(void);

/**
 * Loads the teacher of the checkpoint at `path` into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum LsvtStatus lsvt_model_load(const char *path, struct LsvtModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from `lsvt_model_load` and not be freed twice.
 */
void lsvt_model_free(struct LsvtModel *model);

/**
 * Input side length, channel count and embedding width of the model.
 *
 * # Safety
 * All pointers must be valid; `model` must be a live handle.
 */
enum LsvtStatus lsvt_model_info(const struct LsvtModel *model,
                                uint32_t *image_size,
                                uint32_t *channels,
                                uint32_t *embed_dim);

/**
 * Class-token embedding of one image, `embed_dim` floats.
 *
 * # Safety
 * `pixels` must hold `height * width * channels` bytes and `out` `out_len`
 * floats.
 */
enum LsvtStatus lsvt_model_embed(const struct LsvtModel *model,
                                 const uint8_t *pixels,
                                 uint32_t height,
                                 uint32_t width,
                                 uint32_t channels,
                                 float *out,
                                 size_t out_len);

/**
 * Final-layer attention heatmap, `image_size * image_size` values in
 * `[0, 1]`, row-major.
 *
 * # Safety
 * As for `lsvt_model_embed`, with `out` holding `out_len` doubles.
 */
enum LsvtStatus lsvt_model_attention_map(const struct LsvtModel *model,
                                         const uint8_t *pixels,
                                         uint32_t height,
                                         uint32_t width,
                                         uint32_t channels,
                                         double *out,
                                         size_t out_len);

/**
 * Rank-based ROC AUC of `scores` against 0/1 `labels` (nonzero means
 * positive). Both classes must be present.
 *
 * # Safety
 * `scores` and `labels` must hold `n` values each.
 */
enum LsvtStatus lsvt_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LSVT_H */
