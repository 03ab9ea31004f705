#ifndef VESSELFORGE_H
#define VESSELFORGE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum VfStatus {
  VF_OK = 0,
  VF_NULL_ARGUMENT = 1,
  VF_INVALID_ARGUMENT = 2,
  VF_IO = 3,
  VF_DATA = 4,
  VF_SHAPE = 5,
  VF_NUMERIC = 6,
  VF_CHECKPOINT = 7,
  VF_PANIC = 8,
  VF_INTERNAL = 9,
} VfStatus;

/**
 * Trained pipeline loaded from a checkpoint.
 */
typedef struct VfModel VfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *vf_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into the library on the same thread.
 */
const char *vf_last_error(void);

/**
 * Loads a checkpoint manifest written by `vesselforge train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VfStatus vf_model_load(const char *path, struct VfModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`vf_model_load`] and not be used afterwards.
 */
void vf_model_free(struct VfModel *model);

/**
 * Training step stored in the checkpoint.
 *
 * # Safety
 * `model` must be a live handle and `step` a valid pointer.
 */
enum VfStatus vf_model_step(const struct VfModel *model, uint64_t *step);

/**
 * OCT-A intensity transform `out[i] = -min(in[i], 4) + 0.5`. `input` and
 * `output` may alias.
 *
 * # Safety
 * Both pointers must address `len` doubles.
 */
enum VfStatus vf_octa_transform(const double *input, double *output, size_t len);

/**
 * Preprocessing U-Net alone on a `width x height` image of any size.
 *
 * # Safety
 * `image` and `output` must address `width * height` doubles.
 */
enum VfStatus vf_unet_forward(const struct VfModel *model,
                              const double *image,
                              size_t width,
                              size_t height,
                              double *output);

/**
 * Transform, U-Net and 50/50 blend of a raw OCT-A projection. Any of the
 * three outputs may be null to skip it.
 *
 * # Safety
 * `raw` and every non-null output must address `width * height` doubles.
 */
enum VfStatus vf_octa_enhance(const struct VfModel *model,
                              const double *raw,
                              size_t width,
                              size_t height,
                              double *transformed,
                              double *output,
                              double *blend);

/**
 * Full pipeline on a preprocessed fundus image: enhanced image and vessel
 * probability. Either output may be null.
 *
 * # Safety
 * `image` and every non-null output must address `width * height` doubles.
 */
enum VfStatus vf_infer(const struct VfModel *model,
                       const double *image,
                       size_t width,
                       size_t height,
                       double *enhanced,
                       double *vessel_prob);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VESSELFORGE_H */
