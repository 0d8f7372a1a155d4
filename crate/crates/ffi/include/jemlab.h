#ifndef JEMLAB_H
#define JEMLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by all entry points.
 */
typedef enum JemStatus {
  JEM_STATUS_OK = 0,
  JEM_STATUS_NULL_POINTER = 1,
  JEM_STATUS_INVALID_ARGUMENT = 2,
  JEM_STATUS_IO = 3,
  JEM_STATUS_FORMAT = 4,
  JEM_STATUS_SHAPE = 5,
  JEM_STATUS_DIVERGENCE = 6,
  JEM_STATUS_PANIC = 7,
} JemStatus;

/**
 * A trained model together with its SGLD init distribution and data range.
 */
typedef struct JemModel JemModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *jem_version(void);

/**
 * Message for the most recent failure on this thread, or null if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *jem_last_error(void);

/**
 * Loads a checkpoint (f32 or f64) into a new handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for one write.
 */
enum JemStatus jem_model_load(const char *path, struct JemModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `m` must be null or a handle from [`jem_model_load`] not yet freed.
 */
void jem_model_free(struct JemModel *m);

/**
 * Number of values in one input sample (product of the sample shape).
 *
 * # Safety
 * `m` must be null or a live handle; null yields 0.
 */
size_t jem_model_input_len(const struct JemModel *m);

/**
 * Number of classes; 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
size_t jem_model_classes(const struct JemModel *m);

/**
 * Logits for `n` samples: reads `n·input_len` values, writes `n·classes`.
 *
 * # Safety
 * Buffers must be valid for the stated lengths.
 */
enum JemStatus jem_model_logits(const struct JemModel *m, const double *x, size_t n, double *out);

/**
 * Energies `E(x) = -logsumexp f(x)` for `n` samples, written to `out[n]`.
 *
 * # Safety
 * Buffers must be valid for the stated lengths.
 */
enum JemStatus jem_model_energy(const struct JemModel *m, const double *x, size_t n, double *out);

/**
 * Draws `n` fresh SGLD samples into `out[n·input_len]`.
 *
 * Chains start from the checkpoint's informative init and stay inside its
 * data range. `class < 0` samples from p(x), otherwise from p(x | class).
 *
 * # Safety
 * `out` must be valid for `n·input_len` writes.
 */
enum JemStatus jem_model_sample(const struct JemModel *m,
                                size_t n,
                                size_t steps,
                                double step_size,
                                double noise,
                                int64_t class_,
                                uint64_t seed,
                                double *out);

/**
 * AUROC of in-distribution scores against OOD scores (higher = more in-distribution).
 *
 * # Safety
 * Score buffers must be valid for their lengths; `result` for one write.
 */
enum JemStatus jem_auroc(const double *scores_in,
                         size_t n_in,
                         const double *scores_out,
                         size_t n_out,
                         double *result);

/**
 * Expected calibration error over `bins` equal-width confidence bins.
 * `correct[i]` is nonzero when prediction `i` was right.
 *
 * # Safety
 * Input buffers must be valid for `n` reads; `result` for one write.
 */
enum JemStatus jem_ece(const double *confidence,
                       const uint8_t *correct,
                       size_t n,
                       size_t bins,
                       double *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* JEMLAB_H */
