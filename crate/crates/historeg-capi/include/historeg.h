#ifndef HISTOREG_H
#define HISTOREG_H

/* Generated from the Rust sources by the build script; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a call. Anything other than `Ok` means output arguments were
 * left untouched.
 */
typedef enum HrStatus {
  HrStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  HrStatus_NullPointer = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  HrStatus_InvalidUtf8 = 2,
  /**
   * Malformed transform JSON.
   */
  HrStatus_ParseError = 3,
  /**
   * Dimensions, parameter shapes, or argument values out of contract.
   */
  HrStatus_InvalidArgument = 4,
  /**
   * A mask without foreground where foreground is required.
   */
  HrStatus_EmptyMask = 5,
  /**
   * Non-finite values or a failed numerical solve.
   */
  HrStatus_NumericalError = 6,
} HrStatus;

/**
 * Opaque transform handle; create with `hr_transform_identity` or
 * `hr_transform_from_json`, release with `hr_transform_free`.
 */
typedef struct HrTransform HrTransform;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or an empty string.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *hr_last_error_message(void);

/**
 * Creates the identity transform.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one pointer.
 */
enum HrStatus hr_transform_identity(struct HrTransform **out);

/**
 * Parses a transform from its JSON form.
 *
 * # Safety
 * `json` must be a valid NUL-terminated C string; `out` must point to
 * writable storage for one pointer.
 */
enum HrStatus hr_transform_from_json(const char *json, struct HrTransform **out);

/**
 * Serializes a transform to JSON. The returned string must be released with
 * `hr_string_free`.
 *
 * # Safety
 * `transform` must be a live handle from this library; `out` must point to
 * writable storage for one pointer.
 */
enum HrStatus hr_transform_to_json(const struct HrTransform *transform, char **out);

/**
 * Releases a string returned by `hr_transform_to_json`.
 *
 * # Safety
 * `s` must be a pointer previously returned by this library and not yet
 * freed; null is ignored.
 */
void hr_string_free(char *s);

/**
 * Releases a transform handle.
 *
 * # Safety
 * `transform` must be a handle from this library that has not been freed;
 * null is ignored.
 */
void hr_transform_free(struct HrTransform *transform);

/**
 * Evaluates the transform at a point of the normalized domain, writing the
 * mapped point to `out_x`/`out_y`.
 *
 * # Safety
 * `transform` must be a live handle; `out_x` and `out_y` must point to
 * writable doubles.
 */
enum HrStatus hr_transform_eval(const struct HrTransform *transform,
                                double x,
                                double y,
                                double *out_x,
                                double *out_y);

/**
 * Minimum finite-difference Jacobian determinant over an `n x n` probe grid;
 * positive means no folding at the probed scale.
 *
 * # Safety
 * `transform` must be a live handle; `out` must point to a writable double.
 */
enum HrStatus hr_transform_min_jacobian_det(const struct HrTransform *transform,
                                            size_t n,
                                            double step,
                                            double *out);

/**
 * Warps an intensity image: for every output pixel the transform maps its
 * normalized position into the source, which is sampled bilinearly with
 * zero padding. Buffers are row-major.
 *
 * # Safety
 * `transform` must be a live handle. `src` must point to `src_h * src_w`
 * readable doubles and `dst` to `dst_h * dst_w` writable doubles; the
 * buffers must not overlap.
 */
enum HrStatus hr_warp_image(const struct HrTransform *transform,
                            const double *src,
                            size_t src_h,
                            size_t src_w,
                            double *dst,
                            size_t dst_h,
                            size_t dst_w);

/**
 * Mask variant of `hr_warp_image`: nearest-neighbor sampling, nonzero bytes
 * are foreground, the output holds 0 or 1.
 *
 * # Safety
 * Same contracts as `hr_warp_image`, with byte buffers.
 */
enum HrStatus hr_warp_mask(const struct HrTransform *transform,
                           const uint8_t *src,
                           size_t src_h,
                           size_t src_w,
                           uint8_t *dst,
                           size_t dst_h,
                           size_t dst_w);

/**
 * Dice overlap of two masks on the same raster. Nonzero bytes are
 * foreground; an all-background mask on either side yields `EmptyMask`.
 *
 * # Safety
 * `a` and `b` must each point to `h * w` readable bytes; `out` must point
 * to a writable double.
 */
enum HrStatus hr_dice(const uint8_t *a, const uint8_t *b, size_t h, size_t w, double *out);

/**
 * Symmetric Hausdorff distance between mask boundaries, in mm, with pixel
 * pitches `sx` (column) and `sy` (row).
 *
 * # Safety
 * Same buffer contracts as `hr_dice`.
 */
enum HrStatus hr_hausdorff_mm(const uint8_t *a,
                              const uint8_t *b,
                              size_t h,
                              size_t w,
                              double sx,
                              double sy,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HISTOREG_H */
