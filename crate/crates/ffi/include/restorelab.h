#ifndef RESTORELAB_H
#define RESTORELAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum RlStatus {
  RL_STATUS_OK = 0,
  RL_STATUS_NULL_POINTER = 1,
  RL_STATUS_INVALID_ARGUMENT = 2,
  RL_STATUS_CONFIG = 3,
  RL_STATUS_SHAPE = 4,
  RL_STATUS_IO = 5,
  RL_STATUS_RUNTIME = 6,
  RL_STATUS_PANIC = 7,
} RlStatus;

/**
 * Opaque frozen backbone handle.
 */
typedef struct RlBackbone RlBackbone;

/**
 * Opaque image handle.
 */
typedef struct RlImage RlImage;

/**
 * Opaque restoration model handle.
 */
typedef struct RlModel RlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library on the same thread.
 */
const char *rl_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rl_version(void);

/**
 * Copy `height*width*channels` floats into a new image.
 *
 * # Safety
 * `data` must point to that many readable floats; `out` must be writable.
 */
enum RlStatus rl_image_new(size_t height,
                           size_t width,
                           size_t channels,
                           const float *data,
                           struct RlImage **out);

/**
 * Load a PNG as an RGB image.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum RlStatus rl_image_load_png(const char *path, struct RlImage **out);

/**
 * Save as an 8-bit PNG.
 *
 * # Safety
 * `image` must be a live handle; `path` a NUL-terminated string.
 */
enum RlStatus rl_image_save_png(const struct RlImage *image, const char *path);

/**
 * # Safety
 * `image` must be a live handle; the out pointers must be writable.
 */
enum RlStatus rl_image_dims(const struct RlImage *image,
                            size_t *height,
                            size_t *width,
                            size_t *channels);

/**
 * Copy the pixels into `out`, which holds `len` floats (must equal the element count).
 *
 * # Safety
 * `image` must be a live handle; `out` must have room for `len` floats.
 */
enum RlStatus rl_image_read(const struct RlImage *image, float *out, size_t len);

/**
 * # Safety
 * `image` must be NULL or a handle not yet freed.
 */
void rl_image_free(struct RlImage *image);

/**
 * Apply a degradation described by a JSON spec, e.g.
 * `{"kind":"noise","noise_sigma":25}`. Missing fields take their defaults.
 *
 * # Safety
 * `image` must be a live handle, `spec_json` a NUL-terminated string, `out` writable.
 */
enum RlStatus rl_degrade(const struct RlImage *image,
                         const char *spec_json,
                         uint64_t seed,
                         struct RlImage **out);

/**
 * PSNR in dB (peak 1), capped at 100 for identical images.
 *
 * # Safety
 * Both handles must be live; `out` writable.
 */
enum RlStatus rl_psnr(const struct RlImage *a, const struct RlImage *b, double *out);

/**
 * # Safety
 * Both handles must be live; `out` writable.
 */
enum RlStatus rl_ssim(const struct RlImage *a, const struct RlImage *b, double *out);

/**
 * Build a backbone from a JSON config (NULL = default toy ViT). A
 * pretrained config reads its weights path from the config or the
 * `RESTORELAB_BACKBONE_WEIGHTS` environment variable.
 *
 * # Safety
 * `config_json` must be NULL or a NUL-terminated string; `out` writable.
 */
enum RlStatus rl_backbone_new(const char *config_json, struct RlBackbone **out);

/**
 * Feature width of the backbone (the `guidance_channels` a guided model needs).
 *
 * # Safety
 * `backbone` must be a live handle; `out` writable.
 */
enum RlStatus rl_backbone_width(const struct RlBackbone *backbone, size_t *out);

/**
 * # Safety
 * `backbone` must be NULL or a handle not yet freed.
 */
void rl_backbone_free(struct RlBackbone *backbone);

/**
 * Fresh model from a JSON network config (NULL = defaults). A fresh model
 * has a zero output head and returns its input unchanged.
 *
 * # Safety
 * `config_json` must be NULL or a NUL-terminated string; `out` writable.
 */
enum RlStatus rl_model_new(const char *config_json,
                           size_t guidance_channels,
                           uint64_t seed,
                           struct RlModel **out);

/**
 * Load a `.safetensors` checkpoint with its `.json` sidecar.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
enum RlStatus rl_model_load(const char *path, struct RlModel **out);

/**
 * # Safety
 * `model` must be a live handle; `out` writable.
 */
enum RlStatus rl_model_num_parameters(const struct RlModel *model, size_t *out);

/**
 * Restore a 3-channel image; output is clipped to `[0, 1]`. `backbone` may
 * be NULL for unguided models.
 *
 * # Safety
 * `model` and `image` must be live handles, `backbone` NULL or live, `out` writable.
 */
enum RlStatus rl_model_restore(const struct RlModel *model,
                               const struct RlBackbone *backbone,
                               const struct RlImage *image,
                               struct RlImage **out);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void rl_model_free(struct RlModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RESTORELAB_H */
