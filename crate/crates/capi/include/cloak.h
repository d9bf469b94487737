/* C interface to the cloak anonymization engine. */

#ifndef CLOAK_H
#define CLOAK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every API call.
 */
typedef enum {
  CLOAK_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CLOAK_STATUS_NULL_ARGUMENT = 1,
  /**
   * A value or buffer shape was rejected; see `cloak_last_error`.
   */
  CLOAK_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The filesystem said no; see `cloak_last_error`.
   */
  CLOAK_STATUS_IO = 3,
  /**
   * A checkpoint was missing, malformed, or mismatched.
   */
  CLOAK_STATUS_BAD_CHECKPOINT = 4,
  /**
   * Optimization produced a non-finite value and was aborted.
   */
  CLOAK_STATUS_NON_FINITE = 5,
  /**
   * An unexpected internal failure (including caught panics).
   */
  CLOAK_STATUS_INTERNAL = 6,
} CloakStatus;

/**
 * Opaque bundle of the encoder, generator, and embedder networks.
 */
typedef struct CloakEngine CloakEngine;

/**
 * Knobs for one anonymization call; get defaults from
 * `cloak_anon_options_default`.
 */
typedef struct {
  /**
   * Apply the utility-preservation loss.
   */
  bool use_ut;
  /**
   * Apply the identity-removal loss.
   */
  bool use_id;
  /**
   * Hinge margin on the identity cosine.
   */
  double margin;
  /**
   * Weight of the identity loss.
   */
  double alpha_id;
  /**
   * Weight of the utility loss.
   */
  double alpha_ut;
  /**
   * Optimization steps.
   */
  size_t steps;
  /**
   * Adam learning rate.
   */
  double lr;
} CloakAnonOptions;

/**
 * What one anonymization run achieved.
 */
typedef struct {
  /**
   * Cosine between the original and anonymized identity embeddings.
   */
  double identity_cosine;
  /**
   * L2 distance between the original and anonymized utility embeddings.
   */
  double utility_distance;
  /**
   * Final optimization objective (NaN when zero steps were run).
   */
  double final_loss;
} CloakAnonInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cloak_version(void);

/**
 * Copies the most recent error message on this thread into `buf`
 * (truncating if needed) and returns the full message length in bytes,
 * excluding the NUL terminator. Passing a null/empty buffer just queries
 * the length.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes, or be null with `cap == 0`.
 */
size_t cloak_last_error(char *buf, size_t cap);

/**
 * Loads the four checkpoints into a new engine. On success writes the
 * handle into `out`; free it with `cloak_engine_free`.
 *
 * # Safety
 * The path arguments must be valid NUL-terminated strings and `out` must
 * be a valid pointer.
 */
CloakStatus cloak_engine_open(const char *encoder,
                              const char *generator,
                              const char *identity,
                              const char *utility,
                              CloakEngine **out);

/**
 * Releases an engine handle. Null is a no-op.
 *
 * # Safety
 * `engine` must be a handle from `cloak_engine_open` not yet freed.
 */
void cloak_engine_free(CloakEngine *engine);

/**
 * Side length of the square images the engine works on, or 0 for null.
 *
 * # Safety
 * `engine` must be a live handle or null.
 */
size_t cloak_engine_resolution(const CloakEngine *engine);

/**
 * Dimension of the latent codes the engine optimizes, or 0 for null.
 *
 * # Safety
 * `engine` must be a live handle or null.
 */
size_t cloak_engine_latent_dim(const CloakEngine *engine);

/**
 * Fills `out` with the default anonymization options (both losses on).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
CloakStatus cloak_anon_options_default(CloakAnonOptions *out);

/**
 * Projects `pixels` into latent space and decodes it straight back,
 * writing the reconstruction into `out_pixels`.
 *
 * # Safety
 * `engine` must be a live handle; `pixels` and `out_pixels` must point to
 * `len` and `out_len` readable/writable floats respectively.
 */
CloakStatus cloak_reconstruct(const CloakEngine *engine,
                              const float *pixels,
                              size_t len,
                              float *out_pixels,
                              size_t out_len);

/**
 * Anonymizes one image: projects it, optimizes the latent code under the
 * selected losses, and writes the decoded result into `out_pixels`.
 * `info` may be null if the achieved losses are not needed.
 *
 * # Safety
 * `engine` must be a live handle; `pixels`/`out_pixels` must point to
 * `len`/`out_len` floats; `opts` and `info` must be valid or null.
 */
CloakStatus cloak_anonymize(const CloakEngine *engine,
                            const float *pixels,
                            size_t len,
                            const CloakAnonOptions *opts,
                            float *out_pixels,
                            size_t out_len,
                            CloakAnonInfo *info);

/**
 * PSNR in dB between two same-length grayscale buffers in `[0, 1]`.
 *
 * # Safety
 * `a`/`b` must point to `len` floats shaped `side * side`; `out` must be
 * a valid pointer.
 */
CloakStatus cloak_psnr(const double *a, const double *b, size_t len, size_t side, double *out);

/**
 * Mean SSIM between two same-length grayscale buffers in `[0, 1]`.
 *
 * # Safety
 * `a`/`b` must point to `len` floats shaped `side * side`; `out` must be
 * a valid pointer.
 */
CloakStatus cloak_ssim(const double *a, const double *b, size_t len, size_t side, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLOAK_H */
