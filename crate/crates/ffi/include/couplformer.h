#ifndef COUPLFORMER_H
#define COUPLFORMER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum CplStatus {
  CPL_STATUS_OK = 0,
  CPL_STATUS_NULL_POINTER = 1,
  CPL_STATUS_INVALID_ARGUMENT = 2,
  CPL_STATUS_SHAPE = 3,
  CPL_STATUS_NON_FINITE = 4,
  CPL_STATUS_FORMAT = 5,
  CPL_STATUS_CONFIG = 6,
  CPL_STATUS_IO = 7,
  CPL_STATUS_INTERNAL = 8,
  CPL_STATUS_PANIC = 9,
} CplStatus;

typedef enum CplMechanism {
  CPL_MECHANISM_STANDARD = 0,
  CPL_MECHANISM_COUPLED = 1,
} CplMechanism;

/**
 * Opaque trained model.
 */
typedef struct CplModel CplModel;

/**
 * Opaque `f64` tensor.
 */
typedef struct CplTensor CplTensor;

/**
 * Per-layer attention cost.
 */
typedef struct CplCost {
  uint64_t score_elements;
  uint64_t flops_scores;
  uint64_t flops_apply;
  uint64_t params;
} CplCost;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *cpl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cpl_version(void);

/**
 * Copies `len` values from `data` into a new tensor of the given shape.
 *
 * # Safety
 * `shape` must point to `rank` readable values (or be null with rank 0),
 * `data` to `len` readable values, and `out` must be writable.
 */
enum CplStatus cpl_tensor_new(const size_t *shape,
                              size_t rank,
                              const double *data,
                              size_t len,
                              struct CplTensor **out);

/**
 * Releases a tensor. Null is a no-op.
 *
 * # Safety
 * `t` must come from this library and not be used afterwards.
 */
void cpl_tensor_free(struct CplTensor *t);

/**
 * Number of axes, or 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
size_t cpl_tensor_rank(const struct CplTensor *t);

/**
 * Number of elements, or 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
size_t cpl_tensor_numel(const struct CplTensor *t);

/**
 * Writes the extents into `out`, which holds `cap` values.
 *
 * # Safety
 * `t` must be a live tensor handle and `out` must hold `cap` writable values.
 */
enum CplStatus cpl_tensor_shape(const struct CplTensor *t, size_t *out, size_t cap);

/**
 * Row-major elements, borrowed for the lifetime of the handle. Null for a
 * null handle.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
const double *cpl_tensor_data(const struct CplTensor *t);

/**
 * Writes the tensor to `path` in the CPLT binary format.
 *
 * # Safety
 * `t` must be a live tensor handle and `path` a NUL-terminated string.
 */
enum CplStatus cpl_tensor_save(const struct CplTensor *t, const char *path);

/**
 * Reads a CPLT file into a new tensor.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum CplStatus cpl_tensor_load(const char *path, struct CplTensor **out);

/**
 * Kronecker product of two matrices.
 *
 * # Safety
 * `a`, `b` must be live tensor handles and `out` writable.
 */
enum CplStatus cpl_kron(const struct CplTensor *a,
                        const struct CplTensor *b,
                        struct CplTensor **out);

/**
 * Matrix product of two matrices.
 *
 * # Safety
 * `a`, `b` must be live tensor handles and `out` writable.
 */
enum CplStatus cpl_matmul(const struct CplTensor *a,
                          const struct CplTensor *b,
                          struct CplTensor **out);

/**
 * Softmax over the last axis.
 *
 * # Safety
 * `a` must be a live tensor handle and `out` writable.
 */
enum CplStatus cpl_softmax_rows(const struct CplTensor *a, struct CplTensor **out);

/**
 * `A·X·Bᵀ` for square `A` (h×h), `B` (w×w) and `X` (h×w): the action of
 * `A⊗B` on the row-major flattening of `X`.
 *
 * # Safety
 * All handles must be live and `out` writable.
 */
enum CplStatus cpl_kron_apply(const struct CplTensor *a,
                              const struct CplTensor *b,
                              const struct CplTensor *x,
                              struct CplTensor **out);

/**
 * Coupled score matrices from queries and keys shaped `[heads, h, w, d_head]`:
 * the row scores `[heads, h, h]` and column scores `[heads, w, w]`.
 *
 * # Safety
 * `q`, `k` must be live tensor handles; `out_rows` and `out_cols` writable.
 */
enum CplStatus cpl_coupling_scores(const struct CplTensor *q,
                                   const struct CplTensor *k,
                                   struct CplTensor **out_rows,
                                   struct CplTensor **out_cols);

/**
 * Closed-form cost of one attention layer on an `h×w` token grid.
 *
 * # Safety
 * `out` must be writable.
 */
enum CplStatus cpl_analytic_cost(enum CplMechanism mechanism,
                                 size_t h,
                                 size_t w,
                                 size_t d,
                                 size_t heads,
                                 struct CplCost *out);

/**
 * Loads a checkpoint directory written by `couplformer train`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` writable.
 */
enum CplStatus cpl_model_load(const char *dir, struct CplModel **out);

/**
 * Writes the expected input shape `[channels, height, width]` to `out`.
 *
 * # Safety
 * `model` must be a live model handle and `out` hold 3 writable values.
 */
enum CplStatus cpl_model_input_shape(const struct CplModel *model, size_t *out);

/**
 * Class logits for one `[channels, height, width]` image.
 *
 * # Safety
 * `model` and `image` must be live handles and `out` writable.
 */
enum CplStatus cpl_model_predict(const struct CplModel *model,
                                 const struct CplTensor *image,
                                 struct CplTensor **out);

/**
 * Releases a model. Null is a no-op.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void cpl_model_free(struct CplModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COUPLFORMER_H */
