#ifndef MRET_H
#define MRET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define MRET_MODE_MRET 0

#define MRET_MODE_RANDOM 1

#define MRET_MODE_HIGHRES_LAST 2

#define MRET_MODE_FIXED 3

#define MRET_STRATEGY_UNIFORM 0

#define MRET_STRATEGY_FRONT 1

#define MRET_STRATEGY_CENTER 2

typedef enum MretStatus {
  MRET_STATUS_OK = 0,
  MRET_STATUS_NULL_POINTER = 1,
  MRET_STATUS_INVALID_ARGUMENT = 2,
  MRET_STATUS_IO = 3,
  MRET_STATUS_CONFIG = 4,
  MRET_STATUS_SHAPE = 5,
  MRET_STATUS_NON_FINITE = 6,
  MRET_STATUS_UNDEFINED_CORRELATION = 7,
  MRET_STATUS_FORMAT = 8,
  MRET_STATUS_PANIC = 9,
  MRET_STATUS_INTERNAL = 10,
} MretStatus;

/**
 * A loaded checkpoint.
 */
typedef struct MretModel MretModel;

/**
 * A decoded frame sequence.
 */
typedef struct MretVideo MretVideo;

/**
 * Scoring options. Zero-initialized options select the defaults.
 */
typedef struct MretScoreOptions {
  /**
   * Clip length in frames; 0 uses the model's full clip.
   */
  size_t frames;
  /**
   * One of the `MRET_MODE_*` constants.
   */
  int32_t mode;
  /**
   * One of the `MRET_STRATEGY_*` constants.
   */
  int32_t strategy;
  /**
   * Seed for the random sampling mode.
   */
  uint64_t seed;
} MretScoreOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint manifest (and its sibling blob) into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MretStatus mret_model_load(const char *path, struct MretModel **out);

/**
 * # Safety
 * `model` must come from [`mret_model_load`] and not be freed twice.
 */
void mret_model_free(struct MretModel *model);

/**
 * Loads a frame directory or raw video into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MretStatus mret_video_load(const char *path, struct MretVideo **out);

/**
 * Builds a video from `frames × height × width × 3` interleaved RGB bytes.
 *
 * # Safety
 * `data` must point to `frames·height·width·3` readable bytes.
 */
enum MretStatus mret_video_from_rgb8(const uint8_t *data,
                                     size_t frames,
                                     size_t height,
                                     size_t width,
                                     struct MretVideo **out);

/**
 * # Safety
 * `video` must come from a `mret_video_*` constructor and not be freed twice.
 */
void mret_video_free(struct MretVideo *video);

/**
 * Scores `video`; `options` may be null for defaults.
 *
 * # Safety
 * `model` and `video` must be live handles, `options` null or valid, and
 * `out` a valid pointer.
 */
enum MretStatus mret_model_score(const struct MretModel *model,
                                 const struct MretVideo *video,
                                 const struct MretScoreOptions *options,
                                 double *out);

/**
 * Analytic parameter count and GFLOPs for a clip of `frames` frames
 * (0 = the model's full clip).
 *
 * # Safety
 * `model` must be a live handle; `params` and `gflops` valid pointers.
 */
enum MretStatus mret_model_counts(const struct MretModel *model,
                                  size_t frames,
                                  uint64_t *params,
                                  double *gflops);

/**
 * Spearman rank correlation of two length-`n` arrays.
 *
 * # Safety
 * `a` and `b` must point to `n` readable doubles; `out` must be valid.
 */
enum MretStatus mret_srcc(const double *a, const double *b, size_t n, double *out);

/**
 * Pearson linear correlation of two length-`n` arrays.
 *
 * # Safety
 * `a` and `b` must point to `n` readable doubles; `out` must be valid.
 */
enum MretStatus mret_plcc(const double *a, const double *b, size_t n, double *out);

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *mret_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mret_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MRET_H */
