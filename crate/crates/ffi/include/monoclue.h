#ifndef MONOCLUE_H
#define MONOCLUE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define MC_SUITE_ORACLES 1

#define MC_SUITE_GRADIENTS 2

#define MC_SUITE_ABLATION 4

typedef enum McStatus {
  MC_STATUS_OK = 0,
  MC_STATUS_NULL_POINTER = 1,
  MC_STATUS_INVALID_UTF8 = 2,
  MC_STATUS_CONFIG = 3,
  MC_STATUS_IO = 4,
  MC_STATUS_FORMAT = 5,
  MC_STATUS_SHAPE = 6,
  MC_STATUS_INVALID_INPUT = 7,
  MC_STATUS_BUFFER_TOO_SMALL = 8,
  MC_STATUS_OUT_OF_RANGE = 9,
  MC_STATUS_PANIC = 10,
} McStatus;

/**
 * Opaque pipeline configuration.
 */
typedef struct McConfig McConfig;

/**
 * Opaque result of one pipeline run.
 */
typedef struct McRun McRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next call into the library on this thread.
 */
const char *mc_last_error(void);

/**
 * Static version string.
 */
const char *mc_version(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void mc_string_free(char *s);

/**
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum McStatus mc_config_default(struct McConfig **out);

/**
 * Parses and validates a JSON configuration; absent fields take defaults.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` valid for a pointer write.
 */
enum McStatus mc_config_from_json(const char *json, struct McConfig **out);

/**
 * Applies `MONOCLUE_SEED` from the environment, if set.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum McStatus mc_config_apply_env(struct McConfig *cfg);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum McStatus mc_config_set_seed(struct McConfig *cfg, uint64_t seed);

/**
 * Pretty JSON; free with [`mc_string_free`].
 *
 * # Safety
 * `cfg` must be a live handle; `out` valid for a pointer write.
 */
enum McStatus mc_config_to_json(const struct McConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be NULL or a handle not yet freed.
 */
void mc_config_free(struct McConfig *cfg);

/**
 * Runs the pipeline at the configured precision. `input_dir` may be NULL,
 * in which case the configured synthetic scene is used.
 *
 * # Safety
 * `cfg` must be a live handle; `input_dir` NULL or NUL-terminated; `out`
 * valid for a pointer write.
 */
enum McStatus mc_run_pipeline(const struct McConfig *cfg,
                              const char *input_dir,
                              struct McRun **out);

/**
 * Writes every artifact of the run under `out_dir`.
 *
 * # Safety
 * `run` must be a live handle; `out_dir` NUL-terminated.
 */
enum McStatus mc_run_write(const struct McRun *run, const char *out_dir);

/**
 * The run report as JSON; free with [`mc_string_free`].
 *
 * # Safety
 * `run` must be a live handle; `out` valid for a pointer write.
 */
enum McStatus mc_run_report_json(const struct McRun *run, char **out);

/**
 * Number of pyramid levels in the run, or 0 for NULL.
 *
 * # Safety
 * `run` must be NULL or a live handle.
 */
size_t mc_run_level_count(const struct McRun *run);

/**
 * Copies the similarity map of `level` (row-major) into `buf`. `height`
 * and `width` are written even when the buffer is too small, so a NULL
 * buffer can be used to query the size.
 *
 * # Safety
 * `run` must be a live handle; `buf` NULL or valid for `cap` doubles;
 * `height` and `width` valid for writes.
 */
enum McStatus mc_run_similarity(const struct McRun *run,
                                size_t level,
                                double *buf,
                                size_t cap,
                                size_t *height,
                                size_t *width);

/**
 * Copies the decoded `N_q × C` query matrix into `buf`, sizes as in
 * [`mc_run_similarity`].
 *
 * # Safety
 * As for [`mc_run_similarity`].
 */
enum McStatus mc_run_queries(const struct McRun *run,
                             double *buf,
                             size_t cap,
                             size_t *rows,
                             size_t *cols);

/**
 * Copies the `N_q` query confidences into `buf`.
 *
 * # Safety
 * `run` must be a live handle; `buf` NULL or valid for `cap` doubles;
 * `count` valid for a write.
 */
enum McStatus mc_run_confidences(const struct McRun *run, double *buf, size_t cap, size_t *count);

/**
 * # Safety
 * `run` must be NULL or a handle not yet freed.
 */
void mc_run_free(struct McRun *run);

/**
 * Runs the suites selected by `MC_SUITE_*` bits. `passed` receives the
 * verdict; `json`, when not NULL, receives the full report (free with
 * [`mc_string_free`]). A failing suite is not an error status.
 *
 * # Safety
 * `passed` valid for a write; `json` NULL or valid for a pointer write.
 */
enum McStatus mc_suite_run(uint32_t suites, uint64_t oracle_seeds, bool *passed, char **json);

/**
 * Reads an MCT1 header. `dtype` receives 0 for f32 and 1 for f64; `rank`
 * is always written; extents go to `dims` when `cap ≥ rank`.
 *
 * # Safety
 * `path` NUL-terminated; `dtype` and `rank` valid for writes; `dims` NULL
 * or valid for `cap` elements.
 */
enum McStatus mc_tensor_header(const char *path,
                               uint8_t *dtype,
                               uint32_t *dims,
                               size_t cap,
                               size_t *rank);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MONOCLUE_H */
