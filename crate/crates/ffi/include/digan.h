#ifndef DIGAN_H
#define DIGAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DiganStatus {
  DIGAN_STATUS_OK = 0,
  DIGAN_STATUS_NULL_POINTER = 1,
  DIGAN_STATUS_INVALID_ARGUMENT = 2,
  DIGAN_STATUS_IO = 3,
  DIGAN_STATUS_INTEGRITY = 4,
  DIGAN_STATUS_DIMENSION = 5,
  DIGAN_STATUS_NUMERIC = 6,
  DIGAN_STATUS_CONTRACT = 7,
  DIGAN_STATUS_PANIC = 8,
} DiganStatus;

/**
 * Trained classifier plus its window normalizer.
 */
typedef struct DiganModel DiganModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *digan_last_error(void);

/**
 * Static, nul-terminated library version.
 */
const char *digan_version(void);

/**
 * Loads `sacnet.json`/`sacnet.bin` and `window_normalizer.json` from a
 * checkpoint directory. On success `*out` owns a model to be released with
 * [`digan_model_free`].
 *
 * # Safety
 * `checkpoint_dir` must be a nul-terminated string and `out` writable.
 */
enum DiganStatus digan_model_load(const char *checkpoint_dir, struct DiganModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`digan_model_load`] and not be used afterwards.
 */
void digan_model_free(struct DiganModel *model);

/**
 * Window length L and feature count p the model expects.
 *
 * # Safety
 * `model` must be a live model; `window` and `n_features` writable.
 */
enum DiganStatus digan_model_shape(const struct DiganModel *model,
                                   uintptr_t *window,
                                   uintptr_t *n_features);

/**
 * Probability that one window of raw (unnormalized) visits is impaired.
 * `features` is row-major `[n_time × n_features]`.
 *
 * # Safety
 * `features` must hold `n_time * n_features` values; `out_prob` writable.
 */
enum DiganStatus digan_model_predict_window(const struct DiganModel *model,
                                            const double *features,
                                            uintptr_t n_time,
                                            uintptr_t n_features,
                                            double *out_prob);

/**
 * Scores one subject from its raw visit sequence (row-major
 * `[n_visits × n_features]`): every window of length L is scored, the
 * subject probability is their maximum, and the label is 1 iff it reaches
 * `threshold`.
 *
 * # Safety
 * `visits` must hold `n_visits * n_features` values; outputs writable.
 */
enum DiganStatus digan_model_classify_subject(const struct DiganModel *model,
                                              const double *visits,
                                              uintptr_t n_visits,
                                              uintptr_t n_features,
                                              double threshold,
                                              double *out_prob,
                                              uint8_t *out_label);

/**
 * Max-pool of window probabilities.
 *
 * # Safety
 * `probs` must hold `n` values; `out` writable.
 */
enum DiganStatus digan_subject_probability(const double *probs, uintptr_t n, double *out);

/**
 * Trapezoid ROC AUC of `scores` against 0/1 `labels`.
 *
 * # Safety
 * `scores` and `labels` must hold `n` values; `out_auc` writable.
 */
enum DiganStatus digan_roc_auc(const double *scores,
                               const uint8_t *labels,
                               uintptr_t n,
                               double *out_auc);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIGAN_H */
