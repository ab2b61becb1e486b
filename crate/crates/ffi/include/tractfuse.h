#ifndef TRACTFUSE_H
#define TRACTFUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  TF_STATUS_OK = 0,
  TF_STATUS_INVALID_ARGUMENT = 1,
  TF_STATUS_NULL_POINTER = 2,
  TF_STATUS_MISSING_FILE = 3,
  TF_STATUS_IO = 4,
  TF_STATUS_DECODE = 5,
  TF_STATUS_RUNTIME = 6,
  TF_STATUS_PANIC = 7,
} TfStatus;

/**
 * Opaque phantom handle.
 */
typedef struct TfPhantom TfPhantom;

/**
 * Opaque policy handle.
 */
typedef struct TfPolicy TfPolicy;

/**
 * Opaque streamline set handle.
 */
typedef struct TfStreamlines TfStreamlines;

typedef struct {
  double dice;
  double ol;
  double or_;
} TfScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated, truncated to
 * `len`). Returns the full message length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t tf_last_error(char *buf, size_t len);

/**
 * Generate a built-in phantom: `preset` is `straight_tube`, `crossing` or `curved`.
 *
 * # Safety
 * `preset` must be a NUL-terminated string and `out_handle` a writable handle slot.
 */
TfStatus tf_phantom_generate(const char *preset, uint64_t seed, TfPhantom **out_handle);

/**
 * Load a `PHN1` phantom file.
 *
 * # Safety
 * `file` must be a NUL-terminated path and `out_handle` a writable handle slot.
 */
TfStatus tf_phantom_load(const char *file, TfPhantom **out_handle);

/**
 * # Safety
 * `p` must be null or a handle from `tf_phantom_generate`/`tf_phantom_load` not yet freed.
 */
void tf_phantom_free(TfPhantom *p);

/**
 * Number of bundles and the grid dimensions.
 *
 * # Safety
 * `p` must be a live handle; the outputs must be writable (`dims` holds 3 values).
 */
TfStatus tf_phantom_info(const TfPhantom *p, size_t *bundles, size_t *dims);

/**
 * Alignment reward of `action` (3 values) given an optional previous direction (null for
 * none) and `n_peaks` peak directions (3 values each).
 *
 * # Safety
 * Pointers must reference the stated number of readable floats; `out_reward` must be writable.
 */
TfStatus tf_reward(const double *action,
                   const double *prev_dir,
                   const double *peaks,
                   size_t n_peaks,
                   double *out_reward);

/**
 * MDF distance in mm between two streamlines with equal point counts (`n` points of 3
 * floats each).
 *
 * # Safety
 * `a` and `b` must each hold `3 * n` readable floats; `out_mm` must be writable.
 */
TfStatus tf_mdf(const float *a, const float *b, size_t n, double voxel_size, double *out_mm);

/**
 * Dice/OL/OR of two binary masks of `n` voxels (nonzero = set).
 *
 * # Safety
 * `candidate` and `truth` must each hold `n` readable bytes; `out_score` must be writable.
 */
TfStatus tf_score(const uint8_t *candidate, const uint8_t *truth, size_t n, TfScore *out_score);

/**
 * Load a policy checkpoint written by `tractfuse train-rl`.
 *
 * # Safety
 * `file` must be a NUL-terminated path and `out_handle` a writable handle slot.
 */
TfStatus tf_policy_load(const char *file, TfPolicy **out_handle);

/**
 * # Safety
 * `p` must be null or a live policy handle.
 */
void tf_policy_free(TfPolicy *p);

/**
 * Track one bundle with a policy's deterministic actions, bidirectionally from
 * `seeds_per_voxel` seeds per mask voxel.
 *
 * # Safety
 * Handles must be live; `out_handle` must be a writable handle slot.
 */
TfStatus tf_track_policy(const TfPolicy *policy,
                         const TfPhantom *phantom,
                         size_t bundle,
                         size_t seeds_per_voxel,
                         uint64_t seed,
                         TfStreamlines **out_handle);

/**
 * Load an `STL1` streamline file.
 *
 * # Safety
 * `file` must be a NUL-terminated path and `out_handle` a writable handle slot.
 */
TfStatus tf_streamlines_load(const char *file, TfStreamlines **out_handle);

/**
 * Write a streamline set as `STL1`.
 *
 * # Safety
 * `s` must be a live handle and `file` a NUL-terminated path.
 */
TfStatus tf_streamlines_save(const TfStreamlines *s, const char *file);

/**
 * # Safety
 * `s` must be null or a live streamline handle.
 */
void tf_streamlines_free(TfStreamlines *s);

/**
 * Number of streamlines in a set.
 *
 * # Safety
 * `s` must be a live handle and `count` writable.
 */
TfStatus tf_streamlines_count(const TfStreamlines *s, size_t *count);

/**
 * Borrow the points of streamline `i`: `*pts` receives `3 * *n` floats that stay valid
 * until the set is freed.
 *
 * # Safety
 * `s` must be a live handle; `pts` and `n` must be writable.
 */
TfStatus tf_streamline_points(const TfStreamlines *s, size_t i, const float **pts, size_t *n);

/**
 * Post-filter a streamline set against the bundle's ground truth (`threshold_mm` MDF), then
 * voxelize and score it against the bundle mask.
 *
 * # Safety
 * Handles must be live and `out_score` writable.
 */
TfStatus tf_evaluate(const TfStreamlines *s,
                     const TfPhantom *phantom,
                     size_t bundle,
                     double threshold_mm,
                     TfScore *out_score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRACTFUSE_H */
