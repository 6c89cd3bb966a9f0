#ifndef OPENVIEWER_H
#define OPENVIEWER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OvStatus {
  OV_STATUS_OK = 0,
  OV_STATUS_NULL_POINTER = 1,
  OV_STATUS_INVALID_ARGUMENT = 2,
  OV_STATUS_IO = 3,
  OV_STATUS_PARSE = 4,
  OV_STATUS_DIMENSION = 5,
  OV_STATUS_NUMERIC = 6,
  /**
   * Any other library error; see the message.
   */
  OV_STATUS_FAILED = 7,
  OV_STATUS_PANIC = 8,
} OvStatus;

/**
 * A loaded multi-view dataset.
 */
typedef struct OvDataset OvDataset;

/**
 * A trained checkpoint.
 */
typedef struct OvModel OvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version string with the checkpoint schema; valid for the process lifetime.
 */
const char *ov_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length plus one,
 * or 0 when there is no error.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ov_last_error_message(char *buf, size_t len);

/**
 * # Safety
 * `manifest_path` must be a NUL-terminated string and `out` writable.
 */
enum OvStatus ov_dataset_load(const char *manifest_path, struct OvDataset **out);

/**
 * # Safety
 * `ds` must come from `ov_dataset_load` and not be used afterwards.
 */
void ov_dataset_free(struct OvDataset *ds);

/**
 * Number of samples; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t ov_dataset_len(const struct OvDataset *ds);

/**
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t ov_dataset_view_count(const struct OvDataset *ds);

/**
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t ov_dataset_class_count(const struct OvDataset *ds);

/**
 * # Safety
 * `ds` must be a live handle and `out` writable.
 */
enum OvStatus ov_dataset_view_dim(const struct OvDataset *ds, size_t view, size_t *out);

/**
 * # Safety
 * `ds` must be a live handle and `out` writable.
 */
enum OvStatus ov_dataset_label(const struct OvDataset *ds, size_t index, size_t *out);

/**
 * # Safety
 * `checkpoint_path` must be a NUL-terminated string and `out` writable.
 */
enum OvStatus ov_model_load(const char *checkpoint_path, struct OvModel **out);

/**
 * # Safety
 * `model` must come from `ov_model_load` and not be used afterwards.
 */
void ov_model_free(struct OvModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ov_model_known_class_count(const struct OvModel *model);

/**
 * Scores every sample of `ds`. Writes the predicted original class label
 * and the max-softmax confidence per sample; `n` must equal the dataset
 * length.
 *
 * # Safety
 * Handles must be live; `labels` and `confidence` must hold `n` entries.
 */
enum OvStatus ov_model_predict(const struct OvModel *model,
                               const struct OvDataset *ds,
                               size_t *labels,
                               double *confidence,
                               size_t n);

/**
 * Elementwise `sign(x) · max(|x| − θ, 0)`. `input` and `output` may alias.
 *
 * # Safety
 * Both pointers must hold `n` doubles.
 */
enum OvStatus ov_soft_threshold(const double *input, double *output, size_t n, double theta);

/**
 * CCR at a false-positive-rate budget from per-sample confidences. Known
 * samples have `is_unknown[i] == 0`; `correct[i]` is ignored for unknowns.
 *
 * # Safety
 * Array pointers must hold `n` entries and `out` must be writable.
 */
enum OvStatus ov_oscr_ccr_at_fpr(const double *confidence,
                                 const uint8_t *correct,
                                 const uint8_t *is_unknown,
                                 size_t n,
                                 double target_fpr,
                                 double *out);

/**
 * Runs the ADMM solver on one row-major view `x` (`rows × cols`). Writes the
 * relative reconstruction error and the iteration count.
 *
 * # Safety
 * `x` must hold `rows * cols` doubles; outputs must be writable.
 */
enum OvStatus ov_admm_solve(const double *x,
                            size_t rows,
                            size_t cols,
                            size_t atoms,
                            double alpha,
                            double beta,
                            double gamma,
                            size_t max_iter,
                            uint64_t seed,
                            double *rel_error,
                            size_t *iterations);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPENVIEWER_H */
