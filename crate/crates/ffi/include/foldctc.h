#ifndef FOLDCTC_H
#define FOLDCTC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FoldctcStatus {
  FOLDCTC_STATUS_OK = 0,
  FOLDCTC_STATUS_NULL_POINTER = 1,
  FOLDCTC_STATUS_INVALID_ARGUMENT = 2,
  FOLDCTC_STATUS_CONFIG = 3,
  FOLDCTC_STATUS_DATA = 4,
  FOLDCTC_STATUS_FORMAT = 5,
  FOLDCTC_STATUS_IO = 6,
  FOLDCTC_STATUS_NUMERICAL = 7,
  FOLDCTC_STATUS_INFEASIBLE_TARGET = 8,
  FOLDCTC_STATUS_BUFFER_TOO_SMALL = 9,
  FOLDCTC_STATUS_PANIC = 10,
} FoldctcStatus;

/**
 * Opaque loaded model.
 */
typedef struct FoldctcModel FoldctcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load a checkpoint file. On success `*out` owns a model that must be
 * released with [`foldctc_model_free`].
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum FoldctcStatus foldctc_model_load(const char *path, struct FoldctcModel **out);

/**
 * Release a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`foldctc_model_load`] and not be used afterwards.
 */
void foldctc_model_free(struct FoldctcModel *model);

/**
 * Trainable scalars, each shared parameter counted once.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum FoldctcStatus foldctc_model_param_count(const struct FoldctcModel *model, uint64_t *out);

/**
 * Input feature dimension and output class count (blank included).
 *
 * # Safety
 * `model`, `feat_dim` and `classes` must be valid pointers.
 */
enum FoldctcStatus foldctc_model_dims(const struct FoldctcModel *model,
                                      size_t *feat_dim,
                                      size_t *classes);

/**
 * Best-path transcript of a row-major `frames × feat_dim` feature matrix.
 * `n_repeat == 0` selects the training repeat count; baselines ignore it.
 *
 * # Safety
 * `features` must hold `frames * feat_dim` values; `out_tokens` must hold
 * `capacity` values; `model` and `out_len` must be valid.
 */
enum FoldctcStatus foldctc_model_decode(const struct FoldctcModel *model,
                                        const double *features,
                                        size_t frames,
                                        size_t feat_dim,
                                        uint32_t n_repeat,
                                        uint32_t *out_tokens,
                                        size_t capacity,
                                        size_t *out_len);

/**
 * Negative log-likelihood of `labels` under a `frames × classes`
 * row-major log-probability matrix; class 0 is the blank.
 *
 * # Safety
 * `log_probs` must hold `frames * classes` values, `labels` `n_labels`
 * values, and `out` must be valid.
 */
enum FoldctcStatus foldctc_ctc_loss(const double *log_probs,
                                    size_t frames,
                                    size_t classes,
                                    const uint32_t *labels,
                                    size_t n_labels,
                                    double *out);

/**
 * Per-frame argmax then collapse.
 *
 * # Safety
 * As for [`foldctc_ctc_loss`]; `out_tokens` must hold `capacity` values.
 */
enum FoldctcStatus foldctc_best_path(const double *log_probs,
                                     size_t frames,
                                     size_t classes,
                                     uint32_t *out_tokens,
                                     size_t capacity,
                                     size_t *out_len);

/**
 * Message for the last failure on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *foldctc_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FOLDCTC_H */
