#ifndef CMSA_VQA_H
#define CMSA_VQA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum CmsaStatus {
  CMSA_STATUS_OK = 0,
  CMSA_STATUS_NULL_ARGUMENT = 1,
  CMSA_STATUS_INVALID_ARGUMENT = 2,
  CMSA_STATUS_IO = 3,
  CMSA_STATUS_CONFIG = 4,
  CMSA_STATUS_BUNDLE = 5,
  CMSA_STATUS_SHAPE = 6,
  CMSA_STATUS_NON_FINITE = 7,
  CMSA_STATUS_CHECK_FAILED = 8,
  CMSA_STATUS_BUFFER_TOO_SMALL = 9,
  CMSA_STATUS_PANIC = 10,
} CmsaStatus;

/**
 * A tensor bundle opened for reading.
 */
typedef struct CmsaBundle CmsaBundle;

/**
 * A trained VQA model.
 */
typedef struct CmsaModel CmsaModel;

/**
 * Model input and output sizes.
 */
typedef struct CmsaModelInfo {
  size_t image_size;
  size_t in_channels;
  size_t question_len;
  size_t vocab_size;
  size_t num_answers;
  size_t grid;
} CmsaModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message (NUL-terminated, truncated
 * to fit) into `buf`. Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t cmsa_last_error_message(char *buf, size_t len);

/**
 * Loads a VQA checkpoint written by the training run.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum CmsaStatus cmsa_model_load(const char *path, struct CmsaModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`cmsa_model_load`] and not be used afterwards.
 */
void cmsa_model_free(struct CmsaModel *model);

/**
 * # Safety
 * `model` must be a live handle; `info` must be valid for writes.
 */
enum CmsaStatus cmsa_model_info(const struct CmsaModel *model, struct CmsaModelInfo *info);

/**
 * Forward pass on one image (`[H×W×C]` row-major) and `question_len` token
 * ids. Writes answer logits and the three type-gate weights.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum CmsaStatus cmsa_model_predict(const struct CmsaModel *model,
                                   const double *image,
                                   size_t image_len,
                                   const uint32_t *tokens,
                                   size_t tokens_len,
                                   double *answer_logits,
                                   size_t answer_logits_len,
                                   double *gate,
                                   size_t gate_len);

/**
 * Answer id and predicted image type for one sample.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; outputs valid for writes.
 */
enum CmsaStatus cmsa_model_predict_class(const struct CmsaModel *model,
                                         const double *image,
                                         size_t image_len,
                                         const uint32_t *tokens,
                                         size_t tokens_len,
                                         uint32_t *answer,
                                         uint32_t *image_type);

/**
 * Writes the `[grid×grid×8]` spatial map.
 *
 * # Safety
 * `out` must be valid for `out_len` doubles.
 */
enum CmsaStatus cmsa_spatial_map(size_t grid, double *out, size_t out_len);

/**
 * Runs the finite-difference check described by a config file. Returns
 * `CheckFailed` if any parameter exceeds the tolerance.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `worst_rel_err` null or
 * valid for writes.
 */
enum CmsaStatus cmsa_gradcheck(const char *config_path, double *worst_rel_err);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum CmsaStatus cmsa_bundle_read(const char *path, struct CmsaBundle **out);

/**
 * # Safety
 * `bundle` must come from [`cmsa_bundle_read`] and not be used afterwards.
 */
void cmsa_bundle_free(struct CmsaBundle *bundle);

/**
 * Number of entries, or 0 for a null handle.
 *
 * # Safety
 * `bundle` must be null or a live handle.
 */
size_t cmsa_bundle_len(const struct CmsaBundle *bundle);

/**
 * Copies the NUL-terminated name of entry `index` into `buf`.
 *
 * # Safety
 * `bundle` must be a live handle; `buf` valid for `len` bytes.
 */
enum CmsaStatus cmsa_bundle_entry_name(const struct CmsaBundle *bundle,
                                       size_t index,
                                       char *buf,
                                       size_t len);

/**
 * Writes the rank of an f64 entry and up to `dims_len` of its extents.
 *
 * # Safety
 * `bundle` live; `name` NUL-terminated; `dims` valid for `dims_len`;
 * `rank` valid for writes.
 */
enum CmsaStatus cmsa_bundle_tensor_shape(const struct CmsaBundle *bundle,
                                         const char *name,
                                         size_t *dims,
                                         size_t dims_len,
                                         size_t *rank);

/**
 * Copies the values of an f64 entry.
 *
 * # Safety
 * `bundle` live; `name` NUL-terminated; `out` valid for `out_len` doubles.
 */
enum CmsaStatus cmsa_bundle_tensor_data(const struct CmsaBundle *bundle,
                                        const char *name,
                                        double *out,
                                        size_t out_len);

/**
 * Number of words a question is padded to by the synthetic corpus.
 */
size_t cmsa_question_len(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CMSA_VQA_H */
