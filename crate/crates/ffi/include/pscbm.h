#ifndef PSCBM_H
#define PSCBM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum PscbmStatus {
  PSCBM_STATUS_OK = 0,
  // Bad arguments or configuration.
  PSCBM_STATUS_INVALID = 1,
  // A computation failed on valid input.
  PSCBM_STATUS_RUNTIME = 2,
  // Missing, unreadable or malformed file.
  PSCBM_STATUS_IO = 3,
  // A required pointer was NULL.
  PSCBM_STATUS_NULL_POINTER = 4,
  // Internal panic; the library state is unchanged.
  PSCBM_STATUS_PANIC = 5,
} PscbmStatus;

// Row-major matrix of embeddings.
typedef struct PscbmEmbeddings PscbmEmbeddings;

// Trained bottleneck, normalization and final layer.
typedef struct PscbmModel PscbmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *pscbm_version(void);

// Message for the last failed call on this thread, or NULL. The pointer
// stays valid until the next failing call on the same thread.
const char *pscbm_last_error(void);

void pscbm_clear_error(void);

// Loads an EMB1 file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum PscbmStatus pscbm_embeddings_load(const char *path, struct PscbmEmbeddings **out);

// Copies `rows * cols` row-major values into a new handle.
//
// # Safety
// `data` must hold `rows * cols` doubles; `out` must be writable.
enum PscbmStatus pscbm_embeddings_from_data(size_t rows,
                                            size_t cols,
                                            const double *data,
                                            struct PscbmEmbeddings **out);

// Writes the matrix to an EMB1 file.
//
// # Safety
// `emb` must be a live handle; `path` a NUL-terminated string.
enum PscbmStatus pscbm_embeddings_save(const struct PscbmEmbeddings *emb, const char *path);

// New handle with every row scaled to unit L2 norm.
//
// # Safety
// `emb` must be a live handle; `out` must be writable.
enum PscbmStatus pscbm_embeddings_normalize(const struct PscbmEmbeddings *emb,
                                            struct PscbmEmbeddings **out);

// Row count, or 0 for NULL.
//
// # Safety
// `emb` must be NULL or a live handle.
size_t pscbm_embeddings_rows(const struct PscbmEmbeddings *emb);

// Column count, or 0 for NULL.
//
// # Safety
// `emb` must be NULL or a live handle.
size_t pscbm_embeddings_cols(const struct PscbmEmbeddings *emb);

// Copies row `row` into `out`, which must hold exactly `cols` values.
//
// # Safety
// `emb` must be a live handle; `out` must hold `len` doubles.
enum PscbmStatus pscbm_embeddings_row(const struct PscbmEmbeddings *emb,
                                      size_t row,
                                      double *out,
                                      size_t len);

// # Safety
// `emb` must be NULL or a handle not yet freed.
void pscbm_embeddings_free(struct PscbmEmbeddings *emb);

// Loads a `model.json` written by the training stages.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum PscbmStatus pscbm_model_load(const char *path, struct PscbmModel **out);

// Embedding width, concept count and class count. Any output may be NULL.
//
// # Safety
// `model` must be a live handle; non-NULL outputs must be writable.
enum PscbmStatus pscbm_model_dims(const struct PscbmModel *model,
                                  size_t *embedding_dim,
                                  size_t *num_concepts,
                                  size_t *num_classes);

// Predicted class per row of `emb`; `out` must hold one entry per row.
//
// # Safety
// Handles must be live; `out` must hold `len` values.
enum PscbmStatus pscbm_model_predict(const struct PscbmModel *model,
                                     const struct PscbmEmbeddings *emb,
                                     uint32_t *out,
                                     size_t len);

// Normalized concept activations for one embedding of width
// `embedding_dim`; `out` must hold `num_concepts` values.
//
// # Safety
// `model` must be live; buffers must hold the stated lengths.
enum PscbmStatus pscbm_model_activations(const struct PscbmModel *model,
                                         const double *z,
                                         size_t z_len,
                                         double *out,
                                         size_t out_len);

// # Safety
// `model` must be NULL or a handle not yet freed.
void pscbm_model_free(struct PscbmModel *model);

// Concept-efficient accuracy of a model with `num_concepts` concepts over
// `num_classes` classes.
//
// # Safety
// `out` must be writable.
enum PscbmStatus pscbm_cea(double acc,
                           size_t num_concepts,
                           size_t num_classes,
                           double beta,
                           double *out);

// Greedy merge over an `m x m` row-major correlation matrix. Writes the
// representative of each concept to `merged_into` (survivors map to
// themselves) and the survivor count to `num_survivors`.
//
// # Safety
// `q` must hold `m * m` doubles, `merged_into` `m` values; `num_survivors`
// must be writable.
enum PscbmStatus pscbm_greedy_merge(const double *q,
                                    size_t m,
                                    double tau_merge,
                                    size_t *merged_into,
                                    size_t *num_survivors);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PSCBM_H */
