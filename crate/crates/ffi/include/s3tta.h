#ifndef S3TTA_H
#define S3TTA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Prediction strategy.
 */
typedef enum S3ttaMethod {
  /**
   * Plain forward pass of the reference segmenter.
   */
  S3TTA_METHOD_BASELINE = 0,
  /**
   * Average of every policy and rotation.
   */
  S3TTA_METHOD_AGGREGATE_ALL = 1,
  /**
   * Most rotation-consistent policy only.
   */
  S3TTA_METHOD_S3TTA = 2,
} S3ttaMethod;

/**
 * Result of every fallible call.
 */
typedef enum S3ttaStatus {
  S3TTA_STATUS_OK = 0,
  S3TTA_STATUS_NULL_POINTER = 1,
  S3TTA_STATUS_INVALID_ARGUMENT = 2,
  S3TTA_STATUS_MISSING_ARTIFACT = 3,
  S3TTA_STATUS_FORMAT = 4,
  S3TTA_STATUS_RUNTIME = 5,
  S3TTA_STATUS_PANIC = 6,
} S3ttaStatus;

/**
 * Trained models plus their policy space.
 */
typedef struct S3ttaModel S3ttaModel;

/**
 * Weights of the segmentation, content and style loss terms.
 */
typedef struct S3ttaLossWeights {
  double content;
  double style;
  double seg;
} S3ttaLossWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *s3tta_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *s3tta_version(void);

/**
 * Loads a model directory written by the `train` command.
 *
 * # Safety
 * `dir` must be a NUL-terminated UTF-8 path and `out` a valid pointer.
 */
enum S3ttaStatus s3tta_model_load(const char *dir, struct S3ttaModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`s3tta_model_load`] and not be used afterwards.
 */
void s3tta_model_free(struct S3ttaModel *model);

/**
 * Number of image channels the model expects.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum S3ttaStatus s3tta_model_channels(const struct S3ttaModel *model, size_t *out);

/**
 * Number of augmentation policies the selector chooses from.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum S3ttaStatus s3tta_model_policy_count(const struct S3ttaModel *model, size_t *out);

/**
 * Predicts an instance label map.
 *
 * `labels` receives `height * width` ids numbered `1..=count` in raster
 * order of first appearance. For [`S3ttaMethod::S3tta`] the winning policy
 * is written to `selected_scale` and `selected_style` (-1 for no style)
 * when those pointers are non-null.
 *
 * # Safety
 * `image` must hold `channels * height * width` floats and `labels`
 * `height * width` slots; the other pointers must be valid or null where
 * allowed.
 */
enum S3ttaStatus s3tta_predict(const struct S3ttaModel *model,
                               enum S3ttaMethod method,
                               const float *image,
                               size_t channels,
                               size_t height,
                               size_t width,
                               uint32_t *labels,
                               size_t *count,
                               double *selected_scale,
                               int64_t *selected_style);

/**
 * Picks the most rotation-consistent policy from precomputed variants.
 *
 * Policy `p` has scale `scales[p]`, style code `styles[p]` (negative for
 * none) and upright variant size `heights[p] x widths[p]`. `variants` holds,
 * policy by policy and angle by angle, the planar variant produced from the
 * input rotated by `quarter_turns[a]`; odd turns swap height and width.
 * `winner` receives the chosen index and, when non-null, `scores` receives
 * one consistency score per policy.
 *
 * # Safety
 * Every array must hold the number of elements described above.
 */
enum S3ttaStatus s3tta_select(const float *variants,
                              size_t channels,
                              size_t n_policies,
                              const size_t *heights,
                              const size_t *widths,
                              const double *scales,
                              const int64_t *styles,
                              const uint8_t *quarter_turns,
                              size_t n_angles,
                              size_t *winner,
                              double *scores);

/**
 * Instance F1 at IoU threshold `tau` with optimal one-to-one matching.
 * Label ids may be arbitrary; 0 is background.
 *
 * # Safety
 * `pred` and `gt` must hold `height * width` values; `out` must be valid.
 */
enum S3ttaStatus s3tta_f1(const uint32_t *pred,
                          const uint32_t *gt,
                          size_t height,
                          size_t width,
                          double tau,
                          double *out);

/**
 * Dice and Jaccard of two binary masks (nonzero is foreground).
 *
 * # Safety
 * `a` and `b` must hold `len` bytes; `dice` and `jaccard` must be valid.
 */
enum S3ttaStatus s3tta_dice_jaccard(const uint8_t *a,
                                    const uint8_t *b,
                                    size_t len,
                                    double *dice,
                                    double *jaccard);

/**
 * Default loss weights.
 */
struct S3ttaLossWeights s3tta_default_loss_weights(void);

/**
 * Weighted training objective. Null `weights` means the defaults.
 *
 * # Safety
 * `weights` must be valid or null; `out` must be valid.
 */
enum S3ttaStatus s3tta_total_loss(double seg,
                                  double content,
                                  double style,
                                  const struct S3ttaLossWeights *weights,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* S3TTA_H */
