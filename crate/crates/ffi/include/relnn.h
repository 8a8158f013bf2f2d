#ifndef RELNN_H
#define RELNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum RelnnStatus {
  RELNN_STATUS_OK = 0,
  RELNN_STATUS_NULL_POINTER = 1,
  RELNN_STATUS_INVALID_UTF8 = 2,
  RELNN_STATUS_IO = 3,
  RELNN_STATUS_CORRUPT = 4,
  RELNN_STATUS_INVALID_INPUT = 5,
  RELNN_STATUS_NON_FINITE = 6,
  RELNN_STATUS_SHAPE = 7,
  /**
   * The requested value is undefined for this input, e.g. AUC of one class.
   */
  RELNN_STATUS_UNDEFINED = 8,
  RELNN_STATUS_PANIC = 9,
} RelnnStatus;

/**
 * Scoring mode of a loaded model.
 */
typedef enum RelnnMode {
  RELNN_MODE_CLICK_ONLY = 0,
  RELNN_MODE_POINTWISE_SIMPLE = 1,
  RELNN_MODE_POINTWISE_ENSEMBLE = 2,
  RELNN_MODE_PAIRWISE_ENSEMBLE = 3,
} RelnnMode;

/**
 * Opaque model handle.
 */
typedef struct RelnnModel RelnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a model file. On success `*out` receives a handle to free with
 * [`relnn_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum RelnnStatus relnn_model_load(const char *path, struct RelnnModel **out);

/**
 * Loads a model from an in-memory copy of a model file.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` be writable.
 */
enum RelnnStatus relnn_model_load_bytes(const uint8_t *data, size_t len, struct RelnnModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void relnn_model_free(struct RelnnModel *model);

/**
 * Writes the model to `path` in the model file format.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum RelnnStatus relnn_model_save(const struct RelnnModel *model, const char *path);

/**
 * Scores one pair under the model's mode.
 *
 * # Safety
 * `model` must be a live handle, `query` and `title` NUL-terminated
 * strings, and `out` writable.
 */
enum RelnnStatus relnn_model_score(const struct RelnnModel *model,
                                   const char *query,
                                   const char *title,
                                   float *out);

/**
 * Scores `n` pairs; `out` receives `n` scores.
 *
 * # Safety
 * `queries` and `titles` must each point to `n` NUL-terminated strings and
 * `out` to `n` writable floats.
 */
enum RelnnStatus relnn_model_score_batch(const struct RelnnModel *model,
                                         const char *const *queries,
                                         const char *const *titles,
                                         size_t n,
                                         float *out);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum RelnnStatus relnn_model_mode(const struct RelnnModel *model, enum RelnnMode *out);

/**
 * Number of vocabulary terms, `<OOV>` included.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum RelnnStatus relnn_model_vocab_size(const struct RelnnModel *model, size_t *out);

/**
 * ROC-AUC of `n` scores against 0/1 labels (any non-zero byte is 1).
 * Returns `Undefined` when only one class is present.
 *
 * # Safety
 * `scores` and `labels` must point to `n` readable values, `out` writable.
 */
enum RelnnStatus relnn_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into this library on the thread.
 */
const char *relnn_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *relnn_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RELNN_H */
