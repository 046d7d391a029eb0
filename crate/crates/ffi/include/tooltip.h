#ifndef TOOLTIP_H
#define TOOLTIP_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum TtStatus {
  TT_STATUS_OK = 0,
  TT_STATUS_NULL_POINTER = 1,
  TT_STATUS_INVALID_ARGUMENT = 2,
  TT_STATUS_IO = 3,
  TT_STATUS_FORMAT = 4,
  TT_STATUS_BASELINE = 5,
  TT_STATUS_MODEL = 6,
  TT_STATUS_PANIC = 7,
} TtStatus;

/**
 * Opaque part-label mask.
 */
typedef struct TtMask TtMask;

/**
 * Opaque trained model.
 */
typedef struct TtModel TtModel;

/**
 * Tip coordinates in pixels, `x` to the right and `y` down.
 */
typedef struct TtTips {
  double left_x;
  double left_y;
  double right_x;
  double right_y;
} TtTips;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failing call on this thread; empty if none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *tt_last_error(void);

/**
 * Reads a binary PGM label mask.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TtStatus tt_mask_read(const char *path, struct TtMask **out);

/**
 * Builds a mask from `width * height` row-major labels in `0..=3`.
 *
 * # Safety
 * `labels` must point to `width * height` bytes and `out` be valid.
 */
enum TtStatus tt_mask_new(const uint8_t *labels,
                          uintptr_t width,
                          uintptr_t height,
                          struct TtMask **out);

/**
 * # Safety
 * `mask` must come from this library and not be used afterwards. Null is ignored.
 */
void tt_mask_free(struct TtMask *mask);

/**
 * Width in pixels, or 0 for null.
 *
 * # Safety
 * `mask` must be null or a live handle.
 */
uintptr_t tt_mask_width(const struct TtMask *mask);

/**
 * Height in pixels, or 0 for null.
 *
 * # Safety
 * `mask` must be null or a live handle.
 */
uintptr_t tt_mask_height(const struct TtMask *mask);

/**
 * Principal-axis baseline. `degenerate` (optional) receives 1 when fewer
 * than two jaw components were found and both tips coincide.
 *
 * # Safety
 * `mask` must be a live handle; `out` valid; `degenerate` null or valid.
 */
enum TtStatus tt_baseline_detect(const struct TtMask *mask,
                                 struct TtTips *out,
                                 int32_t *degenerate);

/**
 * Loads a checkpoint written by the trainer.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid.
 */
enum TtStatus tt_model_load(const char *path, struct TtModel **out);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null is ignored.
 */
void tt_model_free(struct TtModel *model);

/**
 * Soft-argmax tip prediction for one mask.
 *
 * # Safety
 * `model` and `mask` must be live handles and `out` valid.
 */
enum TtStatus tt_model_predict(const struct TtModel *model,
                               const struct TtMask *mask,
                               struct TtTips *out);

/**
 * Swap-invariant RMSE between two tip pairs; NaN if either is null.
 *
 * # Safety
 * Pointers must be null or valid.
 */
double tt_frame_rmse(const struct TtTips *pred, const struct TtTips *gt);

/**
 * Static description of a status code.
 */
const char *tt_status_str(enum TtStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TOOLTIP_H */
