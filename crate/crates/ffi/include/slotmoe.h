#ifndef SLOTMOE_H
#define SLOTMOE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SlotmoeStatus {
  SLOTMOE_STATUS_OK = 0,
  SLOTMOE_STATUS_NULL_POINTER = 1,
  SLOTMOE_STATUS_INVALID_ARGUMENT = 2,
  SLOTMOE_STATUS_SHAPE = 3,
  SLOTMOE_STATUS_DOMAIN = 4,
  SLOTMOE_STATUS_CONFIG = 5,
  SLOTMOE_STATUS_UNDEFINED_METRIC = 6,
  SLOTMOE_STATUS_NON_FINITE = 7,
  SLOTMOE_STATUS_IO = 8,
  SLOTMOE_STATUS_PANIC = 9,
} SlotmoeStatus;

/**
 * A trained model loaded from a checkpoint directory.
 */
typedef struct SlotmoeModel SlotmoeModel;

/**
 * Dense row-major `f64` tensor.
 */
typedef struct SlotmoeTensor SlotmoeTensor;

/**
 * Dynamic task-weighting state (loss averages per task).
 */
typedef struct SlotmoeWeighting SlotmoeWeighting;

/**
 * Image-quality scores of one `C×H×W` prediction against its reference.
 */
typedef struct SlotmoeScores {
  double psnr;
  double ssim;
  /**
   * Mean spectral angle in radians.
   */
  double sam;
  double ergas;
} SlotmoeScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *slotmoe_last_error(void);

/**
 * Creates a tensor by copying `len` values; `len` must equal the product of the shape.
 *
 * # Safety
 * `shape` must point to `ndim` values and `data` to `len` values.
 */
enum SlotmoeStatus slotmoe_tensor_new(const size_t *shape,
                                      size_t ndim,
                                      const double *data,
                                      size_t len,
                                      struct SlotmoeTensor **out);

/**
 * # Safety
 * `tensor` must come from this library and not be freed twice. Null is ignored.
 */
void slotmoe_tensor_free(struct SlotmoeTensor *tensor);

/**
 * Number of dimensions, or 0 for a null handle.
 *
 * # Safety
 * `tensor` must be null or a live handle.
 */
size_t slotmoe_tensor_ndim(const struct SlotmoeTensor *tensor);

/**
 * Number of elements, or 0 for a null handle.
 *
 * # Safety
 * `tensor` must be null or a live handle.
 */
size_t slotmoe_tensor_len(const struct SlotmoeTensor *tensor);

/**
 * Copies the shape into `shape_out`, which must hold at least `ndim` values.
 *
 * # Safety
 * `shape_out` must point to `capacity` writable values.
 */
enum SlotmoeStatus slotmoe_tensor_shape(const struct SlotmoeTensor *tensor,
                                        size_t *shape_out,
                                        size_t capacity);

/**
 * Copies the values into `data_out`, which must hold at least `len` values.
 *
 * # Safety
 * `data_out` must point to `capacity` writable values.
 */
enum SlotmoeStatus slotmoe_tensor_data(const struct SlotmoeTensor *tensor,
                                       double *data_out,
                                       size_t capacity);

/**
 * Log-domain Sinkhorn plan for an `S×C` logit matrix with uniform marginals,
 * running exactly `iterations` row/column updates at temperature `tau`.
 *
 * # Safety
 * `logits` must be a live handle and `out` writable.
 */
enum SlotmoeStatus slotmoe_sinkhorn(const struct SlotmoeTensor *logits,
                                    double tau,
                                    size_t iterations,
                                    struct SlotmoeTensor **out);

/**
 * # Safety
 * `out` must be writable.
 */
enum SlotmoeStatus slotmoe_weighting_new(double gamma,
                                         double temperature,
                                         struct SlotmoeWeighting **out);

/**
 * # Safety
 * `state` must come from this library and not be freed twice. Null is ignored.
 */
void slotmoe_weighting_free(struct SlotmoeWeighting *state);

/**
 * One weighting step over `count` tasks: updates each task's loss average and
 * writes the task weights (summing to `count`) into `weights_out`. On failure
 * the state is unchanged.
 *
 * # Safety
 * `tasks` must point to `count` NUL-terminated strings, `losses` to `count`
 * values and `weights_out` to `count` writable values.
 */
enum SlotmoeStatus slotmoe_weighting_step(struct SlotmoeWeighting *state,
                                          const char *const *tasks,
                                          const double *losses,
                                          size_t count,
                                          double *weights_out);

/**
 * Current loss average of `task`, or NaN when the task has not been seen.
 *
 * # Safety
 * `state` must be a live handle and `task` a NUL-terminated string.
 */
double slotmoe_weighting_ema(const struct SlotmoeWeighting *state, const char *task);

/**
 * PSNR (peak 1), SSIM, SAM and ERGAS (ratio 1) of `pred` against `reference`.
 *
 * # Safety
 * Both tensors must be live handles and `out` writable.
 */
enum SlotmoeStatus slotmoe_metrics(const struct SlotmoeTensor *pred,
                                   const struct SlotmoeTensor *reference,
                                   struct SlotmoeScores *out);

/**
 * Seeded training sample of `task` (a task id such as `"denoise"`) with the
 * built-in prompt pool. Writes new clean and degraded tensors.
 *
 * # Safety
 * `task` must be a NUL-terminated string and both outputs writable.
 */
enum SlotmoeStatus slotmoe_make_sample(const char *task,
                                       uint64_t seed,
                                       size_t channels,
                                       size_t size,
                                       struct SlotmoeTensor **clean_out,
                                       struct SlotmoeTensor **degraded_out);

/**
 * Loads a checkpoint directory written by training.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum SlotmoeStatus slotmoe_model_load(const char *path, struct SlotmoeModel **out);

/**
 * # Safety
 * `model` must come from this library and not be freed twice. Null is ignored.
 */
void slotmoe_model_free(struct SlotmoeModel *model);

/**
 * Restores a `C'×H×W` image under a text prompt.
 *
 * # Safety
 * `model` and `input` must be live handles, `prompt` a NUL-terminated string
 * and `out` writable.
 */
enum SlotmoeStatus slotmoe_model_predict(const struct SlotmoeModel *model,
                                         const struct SlotmoeTensor *input,
                                         const char *prompt,
                                         struct SlotmoeTensor **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLOTMOE_H */
