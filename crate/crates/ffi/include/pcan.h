#ifndef PCAN_H
#define PCAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PcanStatus {
  PCAN_STATUS_OK = 0,
  PCAN_STATUS_NULL_POINTER = 1,
  PCAN_STATUS_INVALID_ARGUMENT = 2,
  PCAN_STATUS_SHAPE_MISMATCH = 3,
  PCAN_STATUS_IO = 4,
  PCAN_STATUS_CHECKPOINT = 5,
  PCAN_STATUS_OUT_OF_VOCABULARY = 6,
  PCAN_STATUS_PANIC = 7,
  PCAN_STATUS_INTERNAL = 8,
} PcanStatus;

/**
 * Loaded model, inference path only.
 */
typedef struct PcanModel PcanModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *pcan_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pcan_version(void);

/**
 * Load a checkpoint written by `pcan train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PcanStatus pcan_model_load(const char *path, struct PcanModel **out);

/**
 * Release a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`pcan_model_load`] and not be used afterwards.
 */
void pcan_model_free(struct PcanModel *model);

/**
 * Number of scalar parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t pcan_model_param_count(const struct PcanModel *model);

/**
 * Segment the object described by `tokens` in an `height x width x 3`
 * row-major float image in `[0, 1]`.
 *
 * `out_mask` receives `height * width` bytes (0 or 1). `out_box` (4 doubles,
 * center-size normalized) and `out_score` may be null.
 *
 * # Safety
 * All non-null pointers must reference buffers of the stated sizes.
 */
enum PcanStatus pcan_model_infer(const struct PcanModel *model,
                                 const float *image,
                                 size_t height,
                                 size_t width,
                                 const uint32_t *tokens,
                                 size_t n_tokens,
                                 uint8_t *out_mask,
                                 double *out_box,
                                 double *out_score);

/**
 * Vocabulary id of a lower-case word.
 *
 * # Safety
 * `word` must be NUL-terminated and `out` valid.
 */
enum PcanStatus pcan_token_id(const char *word, uint32_t *out);

/**
 * IoU of two normalized corner boxes `[x1, y1, x2, y2]`.
 *
 * # Safety
 * `a` and `b` must point to 4 doubles, `out` must be valid.
 */
enum PcanStatus pcan_iou(const double *a, const double *b, double *out);

/**
 * Generalized IoU of two normalized corner boxes.
 *
 * # Safety
 * As [`pcan_iou`].
 */
enum PcanStatus pcan_giou(const double *a, const double *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PCAN_H */
