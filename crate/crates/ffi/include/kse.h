#ifndef KSE_H
#define KSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum KseStatus {
  KSE_STATUS_OK = 0,
  KSE_STATUS_NULL_ARGUMENT = 1,
  KSE_STATUS_INVALID_ARGUMENT = 2,
  KSE_STATUS_IO = 3,
  KSE_STATUS_FORMAT = 4,
  KSE_STATUS_STAGE = 5,
  KSE_STATUS_SHAPE = 6,
  KSE_STATUS_NUMERIC = 7,
  KSE_STATUS_BUFFER_TOO_SMALL = 8,
  KSE_STATUS_PANIC = 9,
} KseStatus;

/**
 * Opaque model handle.
 */
typedef struct KseModel KseModel;

/**
 * Opaque handle to per-layer channel reports.
 */
typedef struct KseReports KseReports;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length
 * without the terminator, or 0 when no error has been recorded.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
uintptr_t kse_last_error_message(char *buf, uintptr_t len);

/**
 * Loads a dense or compressed model from a manifest path or file stem.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum KseStatus kse_model_load(const char *path, struct KseModel **out);

/**
 * Saves a model in the format matching its stage.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum KseStatus kse_model_save(const struct KseModel *model, const char *path);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void kse_model_free(struct KseModel *model);

/**
 * Input shape as channels, height, width.
 *
 * # Safety
 * All pointers must be valid.
 */
enum KseStatus kse_model_input_shape(const struct KseModel *model,
                                     uintptr_t *channels,
                                     uintptr_t *height,
                                     uintptr_t *width);

/**
 * Number of values produced by [`kse_model_forward`].
 *
 * # Safety
 * All pointers must be valid.
 */
enum KseStatus kse_model_output_len(const struct KseModel *model, uintptr_t *len);

/**
 * 1 when any layer holds clustered kernels, 0 when the model is dense,
 * -1 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
int32_t kse_model_is_compressed(const struct KseModel *model);

/**
 * Runs one image (`C*H*W` floats, channel-major) through the model.
 *
 * # Safety
 * `input` must hold `input_len` floats and `output` room for `output_len`.
 */
enum KseStatus kse_model_forward(const struct KseModel *model,
                                 const float *input,
                                 uintptr_t input_len,
                                 float *output,
                                 uintptr_t output_len);

/**
 * Channel analysis of every compressible layer of a dense model.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum KseStatus kse_analyze(const struct KseModel *model,
                           uintptr_t k_neighbors,
                           double alpha,
                           struct KseReports **out);

/**
 * Releases a report handle. Null is ignored.
 *
 * # Safety
 * `reports` must be null or a handle not yet freed.
 */
void kse_reports_free(struct KseReports *reports);

/**
 * Number of layer reports.
 *
 * # Safety
 * `reports` must be null or a live handle.
 */
uintptr_t kse_reports_len(const struct KseReports *reports);

/**
 * Layer index and channel indicators of report `i`. `channels` receives
 * the channel count; at most `len` indicators are copied into `values`.
 *
 * # Safety
 * Pointers must be valid; `values` may be null when `len` is 0.
 */
enum KseStatus kse_reports_indicator(const struct KseReports *reports,
                                     uintptr_t i,
                                     uintptr_t *layer,
                                     uintptr_t *channels,
                                     double *values,
                                     uintptr_t len);

/**
 * Compresses a dense model. `reports` may be null, in which case the
 * analysis runs with `k_neighbors` and `alpha`.
 *
 * # Safety
 * Handles must be live or null as documented; `out` must be writable.
 */
enum KseStatus kse_compress(const struct KseModel *model,
                            const struct KseReports *reports,
                            uint32_t granularity,
                            int32_t shift,
                            uintptr_t k_neighbors,
                            double alpha,
                            uint64_t seed,
                            struct KseModel **out);

/**
 * Model-wide compression and acceleration ratios of `compressed`
 * against its dense source.
 *
 * # Safety
 * Handles must be live; outputs writable.
 */
enum KseStatus kse_ratios(const struct KseModel *dense,
                          const struct KseModel *compressed,
                          double *r_comp,
                          double *r_acce);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KSE_H */
