#ifndef PAIRWISE_CL_H
#define PAIRWISE_CL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PclStatus {
  PCL_STATUS_OK = 0,
  PCL_STATUS_NULL_POINTER = 1,
  PCL_STATUS_INVALID_ARGUMENT = 2,
  PCL_STATUS_SHAPE = 3,
  PCL_STATUS_FORMAT = 4,
  PCL_STATUS_IO = 5,
  PCL_STATUS_DEGENERATE = 6,
  PCL_STATUS_UNSUPPORTED = 7,
  PCL_STATUS_PANIC = 8,
} PclStatus;

/**
 * Loaded pre-training or classifier checkpoint.
 */
typedef struct PclCheckpoint PclCheckpoint;

/**
 * Owned row-major `f32` matrix returned by the library.
 */
typedef struct PclMatrix PclMatrix;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library from the same thread.
 */
const char *pcl_last_error(void);

/**
 * Two-view contrastive loss of `n x d` embeddings `zi`, `zj` (row k of
 * each is a positive pair): NT-Xent in both directions, summed, averaged
 * over rows.
 *
 * # Safety
 * `zi` and `zj` must each hold `n * d` doubles; `out` must be writable.
 */
enum PclStatus pcl_pair_loss(const double *zi,
                             const double *zj,
                             size_t n,
                             size_t d,
                             double tau,
                             double *out_loss);

/**
 * Multi-view loss over `k` views packed as `[k, n, d]`: pair losses summed
 * over ordered view pairs, divided by the number of unordered pairs.
 *
 * # Safety
 * `views` must hold `k * n * d` doubles; `out` must be writable.
 */
enum PclStatus pcl_multiview_loss(const double *views,
                                  size_t k,
                                  size_t n,
                                  size_t d,
                                  double tau,
                                  double *out_loss);

/**
 * Projection-weighted CCA between `x` (`n x dx`, the weighting side) and
 * `y` (`n x dy`).
 *
 * # Safety
 * `x` and `y` must hold `n * dx` and `n * dy` doubles.
 */
enum PclStatus pcl_pwcca(const double *x,
                         size_t n,
                         size_t dx,
                         const double *y,
                         size_t dy,
                         double *out_score);

/**
 * Two-sided Mann-Whitney U test. `out_exact` receives 1 when the exact
 * null distribution was used, 0 for the normal approximation.
 *
 * # Safety
 * `a` and `b` must hold `na` and `nb` doubles; outputs may be null except `out_p`.
 */
enum PclStatus pcl_mann_whitney(const double *a,
                                size_t na,
                                const double *b,
                                size_t nb,
                                double *out_u,
                                double *out_p,
                                int32_t *out_exact);

/**
 * Natural-log mel spectrogram (`n_mels x frames`) of a mono waveform.
 *
 * # Safety
 * `samples` must hold `len` floats; `out_matrix` must be writable.
 */
enum PclStatus pcl_mel_spectrogram(const float *samples,
                                   size_t len,
                                   uint32_t sample_rate,
                                   struct PclMatrix **out_matrix);

/**
 * # Safety
 * `m` must be a live handle or null.
 */
size_t pcl_matrix_rows(const struct PclMatrix *m);

/**
 * # Safety
 * `m` must be a live handle or null.
 */
size_t pcl_matrix_cols(const struct PclMatrix *m);

/**
 * Borrowed pointer to `rows * cols` values, valid until the matrix is freed.
 *
 * # Safety
 * `m` must be a live handle or null.
 */
const float *pcl_matrix_data(const struct PclMatrix *m);

/**
 * # Safety
 * `m` must come from this library and not be freed twice. Null is a no-op.
 */
void pcl_matrix_free(struct PclMatrix *m);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out_ckpt` must be writable.
 */
enum PclStatus pcl_checkpoint_load(const char *path, struct PclCheckpoint **out_ckpt);

/**
 * # Safety
 * `c` must be a live handle or null.
 */
size_t pcl_checkpoint_view_count(const struct PclCheckpoint *c);

/**
 * View name `i`, or null when out of range. Borrowed from the handle.
 *
 * # Safety
 * `c` must be a live handle or null.
 */
const char *pcl_checkpoint_view_name(const struct PclCheckpoint *c, size_t i);

/**
 * 1 for a fine-tuned classifier, 0 for a pre-training checkpoint.
 *
 * # Safety
 * `c` must be a live handle or null.
 */
int32_t pcl_checkpoint_is_classifier(const struct PclCheckpoint *c);

/**
 * Encoder representations (`rows x 128`) for `rows` inputs of view `view`,
 * each flattened to the view's declared input size.
 *
 * # Safety
 * `c` must be a live handle, `view` NUL-terminated, `inputs` valid for
 * `rows * input_len` floats and `out_matrix` writable.
 */
enum PclStatus pcl_checkpoint_encode(const struct PclCheckpoint *c,
                                     const char *view_name,
                                     const float *inputs,
                                     size_t rows,
                                     size_t input_len,
                                     struct PclMatrix **out_matrix);

/**
 * # Safety
 * `c` must come from [`pcl_checkpoint_load`] and not be freed twice. Null is a no-op.
 */
void pcl_checkpoint_free(struct PclCheckpoint *c);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PAIRWISE_CL_H */
