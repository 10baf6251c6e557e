#ifndef SSACNN_H
#define SSACNN_H

/* Generated by cbindgen from the ssacnn-ffi sources. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SsaStatus {
  SSA_STATUS_OK = 0,
  SSA_STATUS_NULL_POINTER = 1,
  SSA_STATUS_INVALID_ARGUMENT = 2,
  SSA_STATUS_IO = 3,
  SSA_STATUS_CHECKPOINT = 4,
  SSA_STATUS_CONFIG = 5,
  SSA_STATUS_NUMERIC = 6,
  SSA_STATUS_BUFFER_TOO_SMALL = 7,
  SSA_STATUS_INTERNAL = 8,
} SsaStatus;

/**
 * Opaque detector handle.
 */
typedef struct SsaDetector SsaDetector;

typedef struct SsaDetection {
  double x;
  double y;
  double w;
  double h;
  double score;
} SsaDetection;

typedef struct SsaBox {
  double x;
  double y;
  double w;
  double h;
} SsaBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint directory holding `rpn.ckpt` and `rcnn.ckpt`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SsaStatus ssa_detector_load(const char *path, struct SsaDetector **out);

/**
 * # Safety
 * `detector` must come from [`ssa_detector_load`] and not be used afterwards.
 */
void ssa_detector_free(struct SsaDetector *detector);

/**
 * Runs both stages on one planar RGB image (`3 × height × width` floats in
 * [0, 1], channel-major). Writes up to `capacity` detections in descending
 * score order and stores the total count in `out_len`; returns
 * `BUFFER_TOO_SMALL` when that count exceeds `capacity`.
 *
 * # Safety
 * `pixels` must hold `3 * width * height` floats; `out` must hold
 * `capacity` entries (it may be null when `capacity` is 0).
 */
enum SsaStatus ssa_detector_detect(const struct SsaDetector *detector,
                                   const float *pixels,
                                   size_t width,
                                   size_t height,
                                   struct SsaDetection *out,
                                   size_t capacity,
                                   size_t *out_len);

/**
 * # Safety
 * All pointers must be valid.
 */
enum SsaStatus ssa_iou(const struct SsaBox *a, const struct SsaBox *b, double *out);

/**
 * Greedy non-maximum suppression. Writes kept indices, by descending score,
 * into `keep` (room for `n`) and their count into `out_len`.
 *
 * # Safety
 * `boxes` and `scores` must hold `n` entries, `keep` room for `n` indices.
 */
enum SsaStatus ssa_nms(const struct SsaBox *boxes,
                       const double *scores,
                       size_t n,
                       double iou_threshold,
                       size_t *keep,
                       size_t *out_len);

/**
 * Log-average of `n` miss rates (floored at 1e-10).
 *
 * # Safety
 * `miss_rates` must hold `n` values.
 */
enum SsaStatus ssa_log_average_miss_rate(const double *miss_rates, size_t n, double *out);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes) and returns its full length in bytes.
 *
 * # Safety
 * `buf` must hold `len` bytes, or be null with `len` 0.
 */
size_t ssa_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ssa_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSACNN_H */
