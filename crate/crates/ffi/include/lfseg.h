#ifndef LFSEG_H
#define LFSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Grid a projection is snapped onto.
 */
enum LfsegPlane
#ifdef __cplusplus
  : uint32_t
#endif // __cplusplus
 {
  LFSEG_PLANE_IMAGE = 0,
  LFSEG_PLANE_FEATURE = 1,
};
#ifndef __cplusplus
typedef uint32_t LfsegPlane;
#endif // __cplusplus

typedef enum LfsegStatus {
  LFSEG_STATUS_OK = 0,
  LFSEG_STATUS_NULL_POINTER = 1,
  LFSEG_STATUS_INVALID_ARGUMENT = 2,
  LFSEG_STATUS_SHAPE = 3,
  LFSEG_STATUS_IO = 4,
  LFSEG_STATUS_FORMAT = 5,
  LFSEG_STATUS_NON_FINITE = 6,
  LFSEG_STATUS_EMPTY = 7,
  LFSEG_STATUS_PANIC = 8,
} LfsegStatus;

typedef struct LfsegCamera LfsegCamera;

typedef struct LfsegCloud LfsegCloud;

typedef struct LfsegGrid LfsegGrid;

/**
 * Inclusive cell rectangle; `x` is the column and `y` the row.
 */
typedef struct LfsegRect {
  size_t x_min;
  size_t x_max;
  size_t y_min;
  size_t y_max;
} LfsegRect;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * successful call. Valid until the next call into the library.
 */
const char *lfseg_last_error(void);

/**
 * Static, null-terminated library version.
 */
const char *lfseg_version(void);

/**
 * Axis-aligned pinhole camera at `position` (3 doubles, LiDAR frame).
 *
 * # Safety
 * `position` must point to 3 doubles and `camera` to writable storage.
 */
enum LfsegStatus lfseg_camera_pinhole(double fx,
                                      double fy,
                                      double cx,
                                      double cy,
                                      size_t image_height,
                                      size_t image_width,
                                      size_t feature_height,
                                      size_t feature_width,
                                      const double *position,
                                      struct LfsegCamera **camera);

/**
 * Camera from a row-major 3x4 intrinsic matrix and a row-major 4x4
 * LiDAR-to-camera transform.
 *
 * # Safety
 * `intrinsics` must point to 12 doubles, `extrinsics` to 16.
 */
enum LfsegStatus lfseg_camera_new(const double *intrinsics,
                                  const double *extrinsics,
                                  size_t image_height,
                                  size_t image_width,
                                  size_t feature_height,
                                  size_t feature_width,
                                  struct LfsegCamera **camera);

/**
 * Reads a calibration text file.
 *
 * # Safety
 * `file` must be a null-terminated string.
 */
enum LfsegStatus lfseg_camera_load(const char *file, struct LfsegCamera **camera);

/**
 * # Safety
 * `camera` must be null or a handle from this library, not yet freed.
 */
void lfseg_camera_free(struct LfsegCamera *camera);

/**
 * Cloud from `len` points of `x, y, z, reflectance`.
 *
 * # Safety
 * `points` must point to `4 * len` doubles.
 */
enum LfsegStatus lfseg_cloud_new(const double *points, size_t len, struct LfsegCloud **cloud);

/**
 * Reads a binary point cloud file.
 *
 * # Safety
 * `file` must be a null-terminated string.
 */
enum LfsegStatus lfseg_cloud_load(const char *file, struct LfsegCloud **cloud);

/**
 * Number of points, 0 for a null handle.
 *
 * # Safety
 * `cloud` must be null or a live handle.
 */
size_t lfseg_cloud_len(const struct LfsegCloud *cloud);

/**
 * # Safety
 * `cloud` must be null or a handle from this library, not yet freed.
 */
void lfseg_cloud_free(struct LfsegCloud *cloud);

/**
 * Sparse depth map of the cloud as seen by the camera; the nearest point
 * wins each cell. `grid_plane` is an `LfsegPlane` value.
 *
 * # Safety
 * Handles must be live; `grid` must be writable.
 */
enum LfsegStatus lfseg_sparse_depth(const struct LfsegCamera *camera,
                                    const struct LfsegCloud *cloud,
                                    uint32_t grid_plane,
                                    struct LfsegGrid **grid);

/**
 * Smallest feature-grid rectangle covering every projected point. Fails
 * with `EMPTY` when nothing projects.
 *
 * # Safety
 * Handles must be live; `rect` must be writable.
 */
enum LfsegStatus lfseg_bounding_rect(const struct LfsegCamera *camera,
                                     const struct LfsegCloud *cloud,
                                     struct LfsegRect *rect);

/**
 * Sparse grid from dense values and a byte mask (non-zero = assigned).
 *
 * # Safety
 * `values` and `mask` must each hold `height * width` elements.
 */
enum LfsegStatus lfseg_grid_new(size_t height,
                                size_t width,
                                const double *values,
                                const uint8_t *mask,
                                struct LfsegGrid **grid);

/**
 * # Safety
 * `grid` must be live; `height` and `width` writable.
 */
enum LfsegStatus lfseg_grid_dims(const struct LfsegGrid *grid, size_t *height, size_t *width);

/**
 * Number of assigned cells, 0 for a null handle.
 *
 * # Safety
 * `grid` must be null or a live handle.
 */
size_t lfseg_grid_valid_count(const struct LfsegGrid *grid);

/**
 * Copies the dense values (0 where unassigned) and the mask out. Either
 * buffer may be null to skip it; `len` must equal `height * width`.
 *
 * # Safety
 * Non-null buffers must hold `len` elements.
 */
enum LfsegStatus lfseg_grid_copy(const struct LfsegGrid *grid,
                                 double *values,
                                 uint8_t *mask,
                                 size_t len);

/**
 * # Safety
 * `grid` must be null or a handle from this library, not yet freed.
 */
void lfseg_grid_free(struct LfsegGrid *grid);

/**
 * `log(pred + 1e-8) - log(lidar + 1e-8)` on the cells assigned in `sparse`.
 * `predicted` is a dense map of the same size as the grid.
 *
 * # Safety
 * `predicted` must hold `height * width` doubles of the grid.
 */
enum LfsegStatus lfseg_log_depth_difference(const double *predicted,
                                            const struct LfsegGrid *sparse,
                                            struct LfsegGrid **diff);

/**
 * Fills the unassigned cells of `features` (`channels x height x width`)
 * inside `rect` from their three nearest assigned cells, writing the result
 * to `output`. A null `rect` means the whole grid.
 *
 * # Safety
 * `features` and `output` must hold `channels * height * width` doubles; the
 * mask grid must be `height x width`.
 */
enum LfsegStatus lfseg_interpolate_missing(const double *features,
                                           size_t channels,
                                           size_t height,
                                           size_t width,
                                           const struct LfsegGrid *mask,
                                           const struct LfsegRect *rect,
                                           double *output);

/**
 * Mean cross-entropy of class-major `classes x len` logits; label 255 is
 * ignored.
 *
 * # Safety
 * `logits` must hold `classes * len` doubles and `labels` `len` bytes.
 */
enum LfsegStatus lfseg_cross_entropy(const double *logits,
                                     size_t classes,
                                     size_t len,
                                     const uint8_t *labels,
                                     double *loss);

/**
 * Lovász-softmax loss of class-major logits (softmax is applied here).
 *
 * # Safety
 * As for [`lfseg_cross_entropy`].
 */
enum LfsegStatus lfseg_lovasz_softmax(const double *logits,
                                      size_t classes,
                                      size_t len,
                                      const uint8_t *labels,
                                      double *loss);

/**
 * Per-class IoU and their mean over classes present in either input.
 * Absent classes are written as NaN. `per_class` may be null.
 *
 * # Safety
 * `predictions` and `labels` must hold `len` bytes, `per_class` (if
 * non-null) `classes` doubles.
 */
enum LfsegStatus lfseg_mean_iou(const uint8_t *predictions,
                                const uint8_t *labels,
                                size_t len,
                                size_t classes,
                                double *per_class,
                                double *miou);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LFSEG_H */
