#ifndef FGBOOT_H
#define FGBOOT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FgbStatus {
  FGB_STATUS_OK = 0,
  FGB_STATUS_NULL_POINTER = 1,
  FGB_STATUS_INVALID_ARGUMENT = 2,
  FGB_STATUS_IO = 3,
  FGB_STATUS_PARSE = 4,
  FGB_STATUS_CHECKPOINT = 5,
  FGB_STATUS_BUFFER_TOO_SMALL = 6,
  FGB_STATUS_OUT_OF_RANGE = 7,
  FGB_STATUS_INTERNAL = 8,
} FgbStatus;

/**
 * A dataset loaded from the text format.
 */
typedef struct FgbDataset FgbDataset;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct FgbModel FgbModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next fgboot call on the same thread.
 */
const char *fgb_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fgb_version(void);

/**
 * Loads a checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum FgbStatus fgb_model_load(const char *path, struct FgbModel **out);

/**
 * # Safety
 * `model` must come from [`fgb_model_load`] and not be freed twice. Null is
 * ignored.
 */
void fgb_model_free(struct FgbModel *model);

/**
 * Feature dimension the model expects, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fgb_model_input_dim(const struct FgbModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fgb_model_embed_dim(const struct FgbModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fgb_model_n_categories(const struct FgbModel *model);

/**
 * Writes the unit-norm embedding of `x` into `out[0..embed_dim]`.
 *
 * # Safety
 * `x` must hold `x_len` doubles and `out` have room for `out_len`.
 */
enum FgbStatus fgb_model_embed(const struct FgbModel *model,
                               const double *x,
                               size_t x_len,
                               double *out,
                               size_t out_len);

/**
 * Writes per-category confidences of `x` into `out[0..n_categories]`.
 *
 * # Safety
 * As for [`fgb_model_embed`].
 */
enum FgbStatus fgb_model_score(const struct FgbModel *model,
                               const double *x,
                               size_t x_len,
                               double *out,
                               size_t out_len);

/**
 * Most confident category of `x`; ties go to the lowest index.
 *
 * # Safety
 * `x` must hold `x_len` doubles and `category` be writable.
 */
enum FgbStatus fgb_model_predict(const struct FgbModel *model,
                                 const double *x,
                                 size_t x_len,
                                 size_t *category);

/**
 * Mean per-class accuracy over the labeled samples of `dataset`.
 *
 * # Safety
 * Handles must be live and `accuracy` writable.
 */
enum FgbStatus fgb_model_evaluate(const struct FgbModel *model,
                                  const struct FgbDataset *dataset,
                                  double *accuracy);

/**
 * Loads a dataset file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum FgbStatus fgb_dataset_load(const char *path, struct FgbDataset **out);

/**
 * # Safety
 * `dataset` must come from [`fgb_dataset_load`] and not be freed twice.
 * Null is ignored.
 */
void fgb_dataset_free(struct FgbDataset *dataset);

/**
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t fgb_dataset_len(const struct FgbDataset *dataset);

/**
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t fgb_dataset_dim(const struct FgbDataset *dataset);

/**
 * Copies the features of sample `index` and its label (-1 when
 * unlabeled). `label` may be null.
 *
 * # Safety
 * `out` must have room for `out_len` doubles; `label` must be null or
 * writable.
 */
enum FgbStatus fgb_dataset_sample(const struct FgbDataset *dataset,
                                  size_t index,
                                  double *out,
                                  size_t out_len,
                                  int64_t *label);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FGBOOT_H */
