#ifndef DEFOG2REFOG_H
#define DEFOG2REFOG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of an FFI call.
 */
typedef enum D2rStatus {
  D2R_STATUS_OK = 0,
  D2R_STATUS_NULL_POINTER = 1,
  D2R_STATUS_INVALID_ARGUMENT = 2,
  D2R_STATUS_SHAPE = 3,
  D2R_STATUS_NON_FINITE = 4,
  D2R_STATUS_IO = 5,
  D2R_STATUS_IMAGE = 6,
  D2R_STATUS_FORMAT = 7,
  D2R_STATUS_INTEGRITY = 8,
  D2R_STATUS_SPEC_HASH_MISMATCH = 9,
  D2R_STATUS_CONFIG = 10,
  D2R_STATUS_PANIC = 11,
} D2rStatus;

/**
 * Trained defog generator.
 */
typedef struct D2rModel D2rModel;

/**
 * Blind restoration indicators of an image pair.
 */
typedef struct D2rBave {
  double e;
  double r_bar;
  double delta;
} D2rBave;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failed call on this thread; empty after a
 * successful call. Valid until the next call on the same thread.
 */
const char *d2r_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *d2r_version(void);

/**
 * Loads the defog generator from a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
 */
enum D2rStatus d2r_model_load(const char *path, struct D2rModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`d2r_model_load`] and not be used afterwards.
 */
void d2r_model_free(struct D2rModel *model);

/**
 * Side length the model was trained at.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum D2rStatus d2r_model_image_size(const struct D2rModel *model, size_t *out);

/**
 * Removes fog from one image. The output has the input's size.
 *
 * # Safety
 * `input` and `output` must each hold `3 * height * width` floats.
 */
enum D2rStatus d2r_defog(const struct D2rModel *model,
                         const float *input,
                         size_t height,
                         size_t width,
                         float *output);

/**
 * Applies `I = J·T + A·(1 − T)`.
 *
 * # Safety
 * `clear` and `output` must hold `3 * height * width` floats, `transmission`
 * `height * width` floats and `airlight` three floats.
 */
enum D2rStatus d2r_synthesize_fog(const float *clear,
                                  const float *transmission,
                                  size_t height,
                                  size_t width,
                                  const float *airlight,
                                  float *output);

/**
 * Visible-edge gain, mean gradient ratio and newly saturated fraction of
 * `after` relative to `before`.
 *
 * # Safety
 * Both images must hold `3 * height * width` floats; `out` must be valid.
 */
enum D2rStatus d2r_bave(const float *before,
                        const float *after,
                        size_t height,
                        size_t width,
                        struct D2rBave *out);

/**
 * Dark-channel fog density; higher means foggier.
 *
 * # Safety
 * `image` must hold `3 * height * width` floats; `out` must be valid.
 */
enum D2rStatus d2r_fog_density(const float *image, size_t height, size_t width, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEFOG2REFOG_H */
