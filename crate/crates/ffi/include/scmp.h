#ifndef SCMP_H
#define SCMP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes shared by every fallible call.
 */
typedef enum ScmpStatus {
  ScmpStatus_Ok = 0,
  /**
   * Invalid arguments or configuration.
   */
  ScmpStatus_Usage = 1,
  /**
   * Missing tools or files.
   */
  ScmpStatus_Environment = 2,
  /**
   * Non-finite numerics during model execution.
   */
  ScmpStatus_Numeric = 3,
  /**
   * Malformed bitstream or checkpoint.
   */
  ScmpStatus_Format = 4,
  /**
   * Null pointer where one is not allowed.
   */
  ScmpStatus_NullPointer = 5,
} ScmpStatus;

/**
 * Opaque compression model handle.
 */
typedef struct ScmpGenerator ScmpGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message from the most recent failing call on this thread. Valid until
 * the next failing call; never null.
 */
const char *scmp_last_error_message(void);

/**
 * Create a model with `feature_maps` latent channels and `levels`
 * quantizer levels. `tiny_schedule` selects the desk-scale channel widths.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum ScmpStatus scmp_generator_new(uintptr_t feature_maps,
                                   uintptr_t levels,
                                   uint64_t seed,
                                   bool tiny_schedule,
                                   struct ScmpGenerator **out);

/**
 * Load a model from a checkpoint file produced by the trainer.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ScmpStatus scmp_generator_load(const char *path, struct ScmpGenerator **out);

/**
 * Save a model to a checkpoint file.
 *
 * # Safety
 * `handle` must come from a `scmp_generator_*` constructor; `path` must be
 * a NUL-terminated string.
 */
enum ScmpStatus scmp_generator_save(struct ScmpGenerator *handle, const char *path);

/**
 * Destroy a generator handle. Null is a no-op.
 *
 * # Safety
 * `handle` must come from a `scmp_generator_*` constructor and must not be
 * used afterwards.
 */
void scmp_generator_free(struct ScmpGenerator *handle);

/**
 * Nominal bitrate of a generator in bits per pixel.
 *
 * # Safety
 * `handle` must come from a `scmp_generator_*` constructor.
 */
double scmp_generator_bitrate_bpp(const struct ScmpGenerator *handle);

/**
 * Bitrate in bits per pixel for `feature_maps` latent channels, `levels`
 * quantizer levels, and spatial downsampling factor `d`.
 */
double scmp_bitrate_bpp(uintptr_t feature_maps, uintptr_t levels, uintptr_t d);

/**
 * Total information content in bits of one latent code for an `h` x `w`
 * image. Fails if the dims are not divisible by `d`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum ScmpStatus scmp_latent_information_bits(uintptr_t h,
                                             uintptr_t w,
                                             uintptr_t feature_maps,
                                             uintptr_t levels,
                                             uintptr_t d,
                                             double *out);

/**
 * Free a buffer returned by `scmp_compress` or `scmp_decompress`.
 *
 * # Safety
 * `ptr`/`len` must be exactly the pair returned by this library.
 */
void scmp_buffer_free(uint8_t *ptr, uintptr_t len);

/**
 * Compress an 8-bit interleaved RGB image (row-major, `h*w*3` bytes) into
 * a bitstream allocated by the library (free with `scmp_buffer_free`).
 *
 * # Safety
 * `rgb` must point to `h*w*3` readable bytes; `out_ptr`/`out_len` must be
 * valid pointers; `handle` must come from a `scmp_generator_*` constructor.
 */
enum ScmpStatus scmp_compress(struct ScmpGenerator *handle,
                              const uint8_t *rgb,
                              uintptr_t h,
                              uintptr_t w,
                              uint8_t **out_ptr,
                              uintptr_t *out_len);

/**
 * Decompress a bitstream into an 8-bit interleaved RGB buffer allocated by
 * the library (free with `scmp_buffer_free`); writes the image dims too.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out_ptr`, `out_len`,
 * `out_h`, `out_w` must be valid pointers; `handle` must come from a
 * `scmp_generator_*` constructor.
 */
enum ScmpStatus scmp_decompress(struct ScmpGenerator *handle,
                                const uint8_t *data,
                                uintptr_t len,
                                uint8_t **out_ptr,
                                uintptr_t *out_len,
                                uintptr_t *out_h,
                                uintptr_t *out_w);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCMP_H */
