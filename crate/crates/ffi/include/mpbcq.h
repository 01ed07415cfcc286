/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef MPBCQ_H
#define MPBCQ_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum MpbcqStatus {
  MPBCQ_STATUS_OK = 0,
  MPBCQ_STATUS_NULL_POINTER = 1,
  MPBCQ_STATUS_INVALID_ARGUMENT = 2,
  MPBCQ_STATUS_SHAPE = 3,
  MPBCQ_STATUS_PRECISION_OUT_OF_RANGE = 4,
  MPBCQ_STATUS_IO = 5,
  MPBCQ_STATUS_BAD_MAGIC = 6,
  MPBCQ_STATUS_UNSUPPORTED_VERSION = 7,
  MPBCQ_STATUS_TRUNCATED = 8,
  MPBCQ_STATUS_CHECKSUM = 9,
  MPBCQ_STATUS_FORMAT = 10,
  MPBCQ_STATUS_NON_FINITE = 11,
  MPBCQ_STATUS_PANIC = 12,
} MpbcqStatus;

typedef enum MpbcqSolver {
  MPBCQ_SOLVER_EXACT = 0,
  MPBCQ_SOLVER_GRADIENT_DESCENT = 1,
} MpbcqSolver;

typedef enum MpbcqPath {
  MPBCQ_PATH_LUT = 0,
  MPBCQ_PATH_NAIVE = 1,
} MpbcqPath;

/**
 * Dense row-major `f32` matrix.
 */
typedef struct MpbcqMatrix MpbcqMatrix;

/**
 * Shared bit-planes plus one scale set per supported precision.
 */
typedef struct MpbcqModel MpbcqModel;

typedef struct MpbcqModelInfo {
  size_t rows;
  size_t cols;
  size_t group_size;
  bool asymmetric;
  size_t cycles;
  size_t p_low;
  size_t p_high;
} MpbcqModelInfo;

typedef struct MpbcqGemvStats {
  uint64_t plane_bytes_fetched;
  uint64_t scale_bytes_fetched;
  uint64_t lut_build_count;
  uint64_t elapsed_ns;
} MpbcqGemvStats;

typedef struct MpbcqFootprint {
  uint64_t shared_binary_bytes;
  uint64_t shared_scale_bytes;
  uint64_t shared_total_bytes;
  uint64_t multi_model_binary_bytes;
  uint64_t multi_model_scale_bytes;
  uint64_t multi_model_total_bytes;
} MpbcqFootprint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next `mpbcq_*` call on the same thread.
 */
const char *mpbcq_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mpbcq_version(void);

/**
 * # Safety
 * `data` must point to `rows * cols` readable floats; `out` must be writable.
 */
enum MpbcqStatus mpbcq_matrix_from_data(size_t rows,
                                        size_t cols,
                                        const float *data,
                                        struct MpbcqMatrix **out);

/**
 * Seeded standard-normal matrix.
 *
 * # Safety
 * `out` must be writable.
 */
enum MpbcqStatus mpbcq_matrix_random(size_t rows,
                                     size_t cols,
                                     uint64_t seed,
                                     struct MpbcqMatrix **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MpbcqStatus mpbcq_matrix_load(const char *path, struct MpbcqMatrix **out);

/**
 * # Safety
 * `m` must be a live handle; `path` a NUL-terminated string.
 */
enum MpbcqStatus mpbcq_matrix_save(const struct MpbcqMatrix *m, const char *path);

/**
 * # Safety
 * `m` must be NULL or a handle not yet freed.
 */
void mpbcq_matrix_free(struct MpbcqMatrix *m);

/**
 * # Safety
 * `m` must be a live handle; `rows`/`cols` may be NULL.
 */
enum MpbcqStatus mpbcq_matrix_shape(const struct MpbcqMatrix *m, size_t *rows, size_t *cols);

/**
 * Copies the row-major values into `out`, which must hold exactly `len = rows * cols` floats.
 *
 * # Safety
 * `m` must be a live handle; `out` must point to `len` writable floats.
 */
enum MpbcqStatus mpbcq_matrix_copy(const struct MpbcqMatrix *m, float *out, size_t len);

/**
 * Fits shared planes for precisions `p_low..=p_high`. `group_size` 0 means
 * one group per row.
 *
 * # Safety
 * `weights` must be a live handle; `out` must be writable.
 */
enum MpbcqStatus mpbcq_model_build(const struct MpbcqMatrix *weights,
                                   size_t p_low,
                                   size_t p_high,
                                   size_t group_size,
                                   bool asymmetric,
                                   size_t cycles,
                                   struct MpbcqModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MpbcqStatus mpbcq_model_load(const char *path, struct MpbcqModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum MpbcqStatus mpbcq_model_save(const struct MpbcqModel *model, const char *path);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void mpbcq_model_free(struct MpbcqModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum MpbcqStatus mpbcq_model_info(const struct MpbcqModel *model, struct MpbcqModelInfo *out);

/**
 * `‖W − Ŵ_p‖² / ‖W‖²`.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum MpbcqStatus mpbcq_model_relative_error(const struct MpbcqModel *model,
                                            const struct MpbcqMatrix *weights,
                                            size_t p,
                                            double *out);

/**
 * Writes `Ŵ_p` row-major into `out` (`len` must equal rows * cols).
 *
 * # Safety
 * `model` must be a live handle; `out` must point to `len` writable floats.
 */
enum MpbcqStatus mpbcq_model_dequantize(const struct MpbcqModel *model,
                                        size_t p,
                                        float *out,
                                        size_t len);

/**
 * Replaces the scales of precision `p` with ones refitted to calibration
 * activations `x` (samples × cols). `loss_before`/`loss_after` may be NULL.
 *
 * # Safety
 * Handles must be live; the loss pointers must be NULL or writable.
 */
enum MpbcqStatus mpbcq_model_refine(struct MpbcqModel *model,
                                    const struct MpbcqMatrix *weights,
                                    const struct MpbcqMatrix *x,
                                    size_t p,
                                    enum MpbcqSolver solver,
                                    double *loss_before,
                                    double *loss_after);

/**
 * `y = Ŵ_p · x` on the packed planes. `x` holds `cols` floats and `y` holds
 * `rows` floats. `stats` may be NULL.
 *
 * # Safety
 * `model` must be a live handle; `x`/`y` must be valid for the given lengths.
 */
enum MpbcqStatus mpbcq_gemv(const struct MpbcqModel *model,
                            size_t p,
                            enum MpbcqPath path,
                            const float *x,
                            size_t x_len,
                            float *y,
                            size_t y_len,
                            struct MpbcqGemvStats *stats);

/**
 * Footprint of a shared-plane model versus separate per-precision models.
 *
 * # Safety
 * `out` must be writable.
 */
enum MpbcqStatus mpbcq_footprint(uint64_t rows,
                                 uint64_t cols,
                                 uint64_t group_size,
                                 size_t p_low,
                                 size_t p_high,
                                 bool asymmetric,
                                 uint64_t scale_width,
                                 struct MpbcqFootprint *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MPBCQ_H */
