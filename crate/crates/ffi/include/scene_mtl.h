#ifndef SCENE_MTL_H
#define SCENE_MTL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SmtlStatus {
  SMTL_STATUS_OK = 0,
  SMTL_STATUS_NULL_POINTER = 1,
  SMTL_STATUS_INVALID_ARGUMENT = 2,
  SMTL_STATUS_CONFIG = 3,
  SMTL_STATUS_IO = 4,
  SMTL_STATUS_CORRUPT = 5,
  SMTL_STATUS_NON_FINITE = 6,
  SMTL_STATUS_LOCKED = 7,
  SMTL_STATUS_ARCHITECTURE_MISMATCH = 8,
  SMTL_STATUS_INTERNAL = 9,
  SMTL_STATUS_NOT_FOUND = 10,
  SMTL_STATUS_PANIC = 11,
} SmtlStatus;

typedef enum SmtlCheckpoint {
  SMTL_CHECKPOINT_BEST_GRAPH = 0,
  SMTL_CHECKPOINT_BEST_CAPTION = 1,
} SmtlCheckpoint;

typedef enum SmtlSplit {
  SMTL_SPLIT_SD = 0,
  SMTL_SPLIT_TD = 1,
} SmtlSplit;

/**
 * Experiment configuration.
 */
typedef struct SmtlConfig SmtlConfig;

/**
 * Manifest of a finished run.
 */
typedef struct SmtlManifest SmtlManifest;

/**
 * One evaluation: caption scores, then interaction scores.
 */
typedef struct SmtlMetrics {
  /**
   * 0 for the source domain, 1 for the target domain.
   */
  uint32_t split;
  uint64_t n_samples;
  double bleu4;
  double cider;
  double acc;
  double map;
  double recall;
} SmtlMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *smtl_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void smtl_string_free(char *s);

/**
 * Writes the zero-sum LoG kernel of `sigma` and `radius` row-major into `out`,
 * which must hold `(2 * radius + 1)^2` values.
 *
 * # Safety
 * `out` must point to `out_len` writable doubles.
 */
enum SmtlStatus smtl_log_kernel(double sigma, size_t radius, double *out, size_t out_len);

/**
 * Default configuration. `profile` is "desk" or "paper", `regime` one of MTL_FT,
 * MTL_V, MTL_KD, MTL_KD_FT and `protocol` UDA or FEW.
 *
 * # Safety
 * String arguments must be valid NUL-terminated strings; `out` must be writable.
 */
enum SmtlStatus smtl_config_new(const char *profile,
                                const char *regime,
                                const char *protocol,
                                struct SmtlConfig **out);

/**
 * Parses `key=value` text. Unknown keys fail with `SMTL_STATUS_CONFIG`.
 *
 * # Safety
 * `text` must be a valid NUL-terminated string; `out` must be writable.
 */
enum SmtlStatus smtl_config_parse(const char *text, struct SmtlConfig **out);

/**
 * Serialises the configuration as `key=value` text. Free with `smtl_string_free`.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
enum SmtlStatus smtl_config_to_text(const struct SmtlConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be a live handle; `dir` a valid NUL-terminated string.
 */
enum SmtlStatus smtl_config_set_output_dir(struct SmtlConfig *cfg, const char *dir);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum SmtlStatus smtl_config_set_seed(struct SmtlConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` must be null or a handle from this library not freed already.
 */
void smtl_config_free(struct SmtlConfig *cfg);

/**
 * Runs the configured experiment in its output directory. A failed run writes
 * its manifest to disk but returns an error status and no handle.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
enum SmtlStatus smtl_run(const struct SmtlConfig *cfg, struct SmtlManifest **out);

/**
 * Reads `manifest.json` from a run directory, checking it against the stored config.
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string; `out` must be writable.
 */
enum SmtlStatus smtl_manifest_read(const char *dir, struct SmtlManifest **out);

/**
 * # Safety
 * `m` must be a live handle.
 */
bool smtl_manifest_is_success(const struct SmtlManifest *m);

/**
 * Final report of the BG or BC checkpoint on one split. `SMTL_STATUS_NOT_FOUND`
 * if the run has no such report.
 *
 * # Safety
 * `m` must be a live handle; `out` must be writable.
 */
enum SmtlStatus smtl_manifest_report(const struct SmtlManifest *m,
                                     enum SmtlCheckpoint checkpoint,
                                     enum SmtlSplit split,
                                     struct SmtlMetrics *out);

/**
 * The manifest as JSON. Free with `smtl_string_free`.
 *
 * # Safety
 * `m` must be a live handle; `out` must be writable.
 */
enum SmtlStatus smtl_manifest_to_json(const struct SmtlManifest *m, char **out);

/**
 * # Safety
 * `m` must be null or a handle from this library not freed already.
 */
void smtl_manifest_free(struct SmtlManifest *m);

/**
 * Scores a saved checkpoint on the validation split of a saved dataset without
 * modifying either.
 *
 * # Safety
 * Paths must be valid NUL-terminated strings; `out` must be writable.
 */
enum SmtlStatus smtl_evaluate(const char *checkpoint, const char *dataset, struct SmtlMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCENE_MTL_H */
