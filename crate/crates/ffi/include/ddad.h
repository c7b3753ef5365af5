#ifndef DDAD_H
#define DDAD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum DdadStatus {
  DDAD_STATUS_OK = 0,
  DDAD_STATUS_NULL_POINTER = 1,
  DDAD_STATUS_INVALID_ARGUMENT = 2,
  DDAD_STATUS_IO = 3,
  DDAD_STATUS_PARSE = 4,
  DDAD_STATUS_VALIDATION = 5,
  DDAD_STATUS_CONTRACT = 6,
  DDAD_STATUS_DIVERGENCE = 7,
  DDAD_STATUS_PANIC = 8,
} DdadStatus;

/**
 * Score kinds, mirroring the library's.
 */
typedef enum DdadScoreKind {
  DDAD_SCORE_KIND_A_REC = 0,
  DDAD_SCORE_KIND_A_REC_ENSEMBLE = 1,
  DDAD_SCORE_KIND_A_INTRA = 2,
  DDAD_SCORE_KIND_A_INTER = 3,
  DDAD_SCORE_KIND_R_INTRA = 4,
  DDAD_SCORE_KIND_R_DUAL = 5,
} DdadScoreKind;

/**
 * Opaque stage-1 ensemble.
 */
typedef struct DdadEnsemble DdadEnsemble;

/**
 * Opaque set of trained models loaded from a run directory.
 */
typedef struct DdadModels DdadModels;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ddad_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the next call into the
 * library from the same thread.
 */
const char *ddad_last_error(void);

/**
 * Load every model found under a run directory (the NDM is required).
 */
enum DdadStatus ddad_models_load(const char *run_dir, struct DdadModels **out);

void ddad_models_free(struct DdadModels *models);

/**
 * Image side the models expect, or 0 for a null handle.
 */
size_t ddad_models_side(const struct DdadModels *models);

/**
 * Whether the loaded models can produce `kind` (1) or not (0).
 */
int32_t ddad_models_supports(const struct DdadModels *models, enum DdadScoreKind kind);

/**
 * Image-level score of a row-major `side × side` grayscale image with values in [0, 1].
 */
enum DdadStatus ddad_score_image(const struct DdadModels *models,
                                 enum DdadScoreKind kind,
                                 const float *pixels,
                                 size_t n_pixels,
                                 double *out_score);

/**
 * Per-pixel score map written into `out_map` (capacity `n_pixels`).
 */
enum DdadStatus ddad_score_map(const struct DdadModels *models,
                               enum DdadScoreKind kind,
                               const float *pixels,
                               size_t n_pixels,
                               float *out_map);

/**
 * Load a single stage-1 ensemble directory.
 */
enum DdadStatus ddad_ensemble_load(const char *dir, struct DdadEnsemble **out);

void ddad_ensemble_free(struct DdadEnsemble *ensemble);

/**
 * Number of members, or 0 for a null handle.
 */
size_t ddad_ensemble_size(const struct DdadEnsemble *ensemble);

/**
 * Reconstruct one image with every member; `out_recons` receives `K × n_pixels` values,
 * member-major.
 */
enum DdadStatus ddad_ensemble_reconstruct(const struct DdadEnsemble *ensemble,
                                          const float *pixels,
                                          size_t n_pixels,
                                          float *out_recons);

/**
 * ROC AUC of `n` scores with binary labels (1 = abnormal).
 */
enum DdadStatus ddad_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Average precision; equal scores are ranked by input position.
 */
enum DdadStatus ddad_ap(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Mean focal loss of `n` probabilities against binary targets.
 */
enum DdadStatus ddad_focal_loss(const float *pred,
                                const uint8_t *target,
                                size_t n,
                                double gamma,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DDAD_H */
