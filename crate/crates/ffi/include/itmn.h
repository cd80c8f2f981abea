#ifndef ITMN_H
#define ITMN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum ItmnStatus {
  ITMN_STATUS_OK = 0,
  ITMN_STATUS_NULL_POINTER = 1,
  ITMN_STATUS_INVALID_ARGUMENT = 2,
  ITMN_STATUS_SHAPE = 3,
  ITMN_STATUS_IO = 4,
  ITMN_STATUS_CODEC = 5,
  ITMN_STATUS_PARAM_FILE = 6,
  ITMN_STATUS_NON_FINITE = 7,
  ITMN_STATUS_PANIC = 8,
  ITMN_STATUS_OTHER = 9,
} ItmnStatus;

/**
 * A loaded generator. Create with [`itmn_generator_load`], release with
 * [`itmn_generator_free`].
 */
typedef struct ItmnGenerator ItmnGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *itmn_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *itmn_version(void);

/**
 * Width and height of generator inputs must be multiples of this.
 */
size_t itmn_generator_divisor(void);

/**
 * Loads a generator parameter file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ItmnStatus itmn_generator_load(const char *path, struct ItmnGenerator **out);

/**
 * Releases a generator. NULL is ignored.
 *
 * # Safety
 * `g` must come from [`itmn_generator_load`] and not be used afterwards.
 */
void itmn_generator_free(struct ItmnGenerator *g);

/**
 * Maps an LDR image in `[0, 1]` to a normalized HDR image of the same size.
 * With `pad_reflect_flag` nonzero, sizes not divisible by
 * [`itmn_generator_divisor`] are reflect-padded and cropped back.
 *
 * # Safety
 * `ldr` and `out` must each hold `3 * width * height` floats.
 */
enum ItmnStatus itmn_generator_infer(const struct ItmnGenerator *g,
                                     const float *ldr,
                                     size_t width,
                                     size_t height,
                                     int pad_reflect_flag,
                                     float *out);

/**
 * Multi-exposure PSNR in dB over `n_stops` exposure stops.
 *
 * # Safety
 * `pred` and `reference` must hold `3 * width * height` floats, `stops`
 * `n_stops` ints, and `out` must be valid.
 */
enum ItmnStatus itmn_mpsnr(const float *pred,
                           const float *reference,
                           size_t width,
                           size_t height,
                           const int *stops,
                           size_t n_stops,
                           double gamma,
                           double *out);

/**
 * Gaussian-window SSIM on luma, or averaged over R, G, B when `per_channel` is nonzero.
 *
 * # Safety
 * `pred` and `reference` must hold `3 * width * height` floats and `out` must be valid.
 */
enum ItmnStatus itmn_ssim(const float *pred,
                          const float *reference,
                          size_t width,
                          size_t height,
                          int per_channel,
                          double *out);

/**
 * PSNR of log2 luminance in dB with luminance floored at `floor`.
 *
 * # Safety
 * `pred` and `reference` must hold `3 * width * height` floats and `out` must be valid.
 */
enum ItmnStatus itmn_log_psnr(const float *pred,
                              const float *reference,
                              size_t width,
                              size_t height,
                              double floor,
                              double *out);

/**
 * Reinhard's global operator. A non-positive `l_white` uses the image's
 * largest scaled luminance.
 *
 * # Safety
 * `hdr` and `out` must each hold `3 * width * height` floats.
 */
enum ItmnStatus itmn_reinhard(const float *hdr,
                              size_t width,
                              size_t height,
                              double key,
                              double l_white,
                              float *out);

/**
 * Encodes one linear RGB triple as Radiance RGBE bytes.
 *
 * # Safety
 * `out` must point to 4 writable bytes.
 */
enum ItmnStatus itmn_rgbe_encode(float r, float g, float b, uint8_t *out);

/**
 * Decodes Radiance RGBE bytes into a linear RGB triple.
 *
 * # Safety
 * `rgbe` must point to 4 readable bytes and `out` to 3 writable floats.
 */
enum ItmnStatus itmn_rgbe_decode(const uint8_t *rgbe, float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ITMN_H */
