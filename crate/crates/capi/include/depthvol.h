#ifndef DEPTHVOL_H
#define DEPTHVOL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every fallible call.
 */
typedef enum DvStatus {
  DvStatus_Ok = 0,
  DvStatus_NullArgument = 1,
  DvStatus_InvalidArgument = 2,
  DvStatus_Io = 3,
  DvStatus_Parse = 4,
  DvStatus_NonFinite = 5,
  DvStatus_BufferTooSmall = 6,
  DvStatus_Panic = 7,
} DvStatus;

/**
 * Opaque experiment configuration.
 */
typedef struct DvConfig DvConfig;

/**
 * Opaque frame pair.
 */
typedef struct DvPair DvPair;

/**
 * Opaque fit report.
 */
typedef struct DvReport DvReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes, or be null (then only the
 * length is returned).
 */
uintptr_t dv_last_error_message(char *buf, uintptr_t cap);

/**
 * A configuration filled with the built-in defaults. Never fails.
 */
struct DvConfig *dv_config_default(void);

/**
 * Loads a configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum DvStatus dv_config_load(const char *path, struct DvConfig **out);

/**
 * Sets one configuration key, same keys as the configuration file.
 *
 * # Safety
 * `cfg` must be a live handle from this library; `key`/`value` must be
 * NUL-terminated strings.
 */
enum DvStatus dv_config_set(struct DvConfig *cfg, const char *key, const char *value);

/**
 * # Safety
 * `cfg` must be a handle from this library, not yet freed.
 */
void dv_config_free(struct DvConfig *cfg);

/**
 * Generates or ingests the pair the configuration describes.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be valid.
 */
enum DvStatus dv_pair_from_config(const struct DvConfig *cfg, struct DvPair **out);

/**
 * # Safety
 * `pair` must be a live handle or null.
 */
void dv_pair_free(struct DvPair *pair);

/**
 * Image width of a pair; zero on a null handle.
 *
 * # Safety
 * `pair` must be a live handle or null.
 */
uintptr_t dv_pair_width(const struct DvPair *pair);

/**
 * Image height of a pair; zero on a null handle.
 *
 * # Safety
 * `pair` must be a live handle or null.
 */
uintptr_t dv_pair_height(const struct DvPair *pair);

/**
 * Fits the pair under the configuration.
 *
 * # Safety
 * `cfg` and `pair` must be live handles; `out` must be valid.
 */
enum DvStatus dv_fit(const struct DvConfig *cfg, const struct DvPair *pair, struct DvReport **out);

/**
 * # Safety
 * `report` must be a live handle or null.
 */
void dv_report_free(struct DvReport *report);

/**
 * Number of optimization steps the report covers.
 *
 * # Safety
 * `report` must be a live handle or null.
 */
uintptr_t dv_report_steps(const struct DvReport *report);

/**
 * Copies the total-loss trace into `buf`.
 *
 * # Safety
 * `report` must be live; `buf` must hold `len` doubles.
 */
enum DvStatus dv_report_loss_trace(const struct DvReport *report, double *buf, uintptr_t len);

/**
 * Writes the loss breakdown of one step as five doubles: photometric,
 * smoothness, depth consistency, brightness prior, total.
 *
 * # Safety
 * `report` must be live; `out5` must hold five doubles.
 */
enum DvStatus dv_report_breakdown_at(const struct DvReport *report, uintptr_t step, double *out5);

/**
 * Writes the final target-frame depth metrics as seven doubles: abs_rel,
 * sq_rel, rmse, rmse_log, d1, d2, d3. Fails when the pair carried no
 * ground-truth depth.
 *
 * # Safety
 * `report` must be live; `out7` must hold seven doubles.
 */
enum DvStatus dv_report_final_metrics(const struct DvReport *report, double *out7);

/**
 * Writes the final pose error as two doubles: translation distance and
 * rotation angle in degrees.
 *
 * # Safety
 * `report` must be live; `out2` must hold two doubles.
 */
enum DvStatus dv_report_pose_error(const struct DvReport *report, double *out2);

/**
 * Renders the fitted depth of one frame (0 = target, 1 = source) into
 * `buf`, row-major. `out_width`/`out_height` receive the image shape and
 * may be null. Call with `buf == NULL` to query the needed length.
 *
 * # Safety
 * `report` must be live; `buf`, when non-null, must hold `len` doubles.
 */
enum DvStatus dv_report_depth(const struct DvReport *report,
                              int frame,
                              double *buf,
                              uintptr_t len,
                              uintptr_t *out_width,
                              uintptr_t *out_height);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEPTHVOL_H */
