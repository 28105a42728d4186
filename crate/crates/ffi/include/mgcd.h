#ifndef MGCD_H
#define MGCD_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum MgcdStatus {
  MGCD_STATUS_OK = 0,
  MGCD_STATUS_NULL_POINTER = 1,
  MGCD_STATUS_INVALID_ARGUMENT = 2,
  MGCD_STATUS_CONFIG = 3,
  MGCD_STATUS_FORMAT = 4,
  MGCD_STATUS_IO = 5,
  MGCD_STATUS_UNTRAINED = 6,
  MGCD_STATUS_RUNTIME = 7,
  MGCD_STATUS_PANIC = 8,
} MgcdStatus;

/**
 * Opaque trained model.
 */
typedef struct MgcdModel MgcdModel;

/**
 * Static facts about a model.
 */
typedef struct MgcdModelInfo {
  /**
   * Number of networks (one per grid, or one for single-model methods).
   */
  size_t models;
  size_t grids;
  size_t scale_factor;
  size_t channels;
  /**
   * Side of the full-resolution images.
   */
  size_t image_side;
  /**
   * Completed training iterations.
   */
  size_t iteration;
} MgcdModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *mgcd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mgcd_version(void);

/**
 * Loads a checkpoint. On success `*out` owns a new model.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MgcdStatus mgcd_model_load(const char *path, struct MgcdModel **out);

/**
 * Writes the model as a checkpoint.
 *
 * # Safety
 * `model` must come from [`mgcd_model_load`]; `path` must be NUL-terminated.
 */
enum MgcdStatus mgcd_model_save(const struct MgcdModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`mgcd_model_load`] and not be used afterwards.
 */
void mgcd_model_free(struct MgcdModel *model);

/**
 * # Safety
 * `model` must be a live handle and `info` a valid pointer.
 */
enum MgcdStatus mgcd_model_info(const struct MgcdModel *model, struct MgcdModelInfo *info);

/**
 * Scores `n` full-resolution images under every network. `out` receives
 * `models * n` values, network-major, coarsest grid first.
 *
 * # Safety
 * `images` must hold `n * channels * side * side` floats and `out`
 * room for `models * n`.
 */
enum MgcdStatus mgcd_model_score(const struct MgcdModel *model,
                                 const float *images,
                                 size_t n,
                                 float *out);

/**
 * Generates `n` images from scratch; `out` receives the finest grid,
 * `n * channels * side * side` floats.
 *
 * # Safety
 * `model` must be a live handle and `out` large enough.
 */
enum MgcdStatus mgcd_model_sample(const struct MgcdModel *model,
                                  size_t n,
                                  uint64_t seed,
                                  float *out);

/**
 * Fills the masked pixels of `n` images. `masks` holds one
 * `side * side` plane per image, 1 marking a missing pixel; unmasked
 * pixels are copied unchanged.
 *
 * # Safety
 * `images` and `out` must hold `n * channels * side * side` floats,
 * `masks` `n * side * side`.
 */
enum MgcdStatus mgcd_model_inpaint(const struct MgcdModel *model,
                                   const float *images,
                                   const float *masks,
                                   size_t n,
                                   uint64_t seed,
                                   float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MGCD_H */
