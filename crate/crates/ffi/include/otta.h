#ifndef OTTA_H
#define OTTA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Pipeline preset for [`otta_run_stream`].
 */
typedef enum OttaMode {
  OTTA_MODE_NONE = 0,
  OTTA_MODE_SINGLE = 1,
  OTTA_MODE_PER_VIDEO = 2,
  OTTA_MODE_FULL = 3,
} OttaMode;

typedef enum OttaSplit {
  OTTA_SPLIT_ALL = 0,
  OTTA_SPLIT_CONFIDENT = 1,
  OTTA_SPLIT_NON_CONFIDENT = 2,
} OttaSplit;

typedef enum OttaStatus {
  OTTA_STATUS_OK = 0,
  OTTA_STATUS_NULL_POINTER = 1,
  OTTA_STATUS_INVALID_ARGUMENT = 2,
  OTTA_STATUS_DIMENSION_MISMATCH = 3,
  OTTA_STATUS_MISSING_INPUT = 4,
  OTTA_STATUS_IO = 5,
  OTTA_STATUS_PARSE = 6,
  OTTA_STATUS_CONFIG = 7,
  OTTA_STATUS_NUMERIC = 8,
  OTTA_STATUS_BUFFER_TOO_SMALL = 9,
  OTTA_STATUS_PANIC = 10,
} OttaStatus;

/*
 Opaque regressor handle.
 */
typedef struct OttaModel OttaModel;

/*
 Opaque run-report handle.
 */
typedef struct OttaReport OttaReport;

/*
 Aggregate metrics over one split of a run.
 */
typedef struct OttaSplitStats {
  size_t frames;
  double mpjpe_mm;
  double pa_mpjpe_mm;
  double epe2d_px;
} OttaSplitStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copy the last error message on this thread into `buf` (NUL-terminated,
 truncated to `len`). Returns the full message length excluding the NUL.

 # Safety
 `buf` must be null or point to `len` writable bytes.
 */
size_t otta_last_error_message(char *buf, size_t len);

/*
 Number of skeleton joints J.
 */
size_t otta_joint_count(void);

/*
 Length of a flat pose-parameter vector: 3J angles, 10 bone scales, 3 translation.
 */
size_t otta_param_dim(void);

/*
 Load a checkpoint written by `otta pretrain`.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum OttaStatus otta_model_load(const char *path, struct OttaModel **out);

/*
 # Safety
 `model` must be null or a handle from [`otta_model_load`] not yet freed.
 */
void otta_model_free(struct OttaModel *model);

/*
 # Safety
 `model` must be a live handle.
 */
size_t otta_model_input_dim(const struct OttaModel *model);

/*
 Predict flat pose parameters for one feature vector.

 # Safety
 `features` must hold `n_features` values and `out_params` `out_len` values.
 */
enum OttaStatus otta_model_predict(const struct OttaModel *model,
                                   const double *features,
                                   size_t n_features,
                                   double *out_params,
                                   size_t out_len);

/*
 Joint positions (meters, `x0,y0,z0,...`) of flat pose parameters.

 # Safety
 `params` must hold `n_params` values and `out_joints` `out_len` values.
 */
enum OttaStatus otta_forward_kinematics(const double *params,
                                        size_t n_params,
                                        double *out_joints,
                                        size_t out_len);

/*
 Root-relative mean per-joint position error in millimeters.

 # Safety
 `pred` and `gt` must hold `3 * n_joints` values; `out` must be writable.
 */
enum OttaStatus otta_mpjpe(const double *pred, const double *gt, size_t n_joints, double *out);

/*
 MPJPE after similarity alignment of `pred` onto `gt`.

 # Safety
 As [`otta_mpjpe`].
 */
enum OttaStatus otta_pa_mpjpe(const double *pred, const double *gt, size_t n_joints, double *out);

/*
 Adapt `model` (left unchanged) over the stream file at `streams_path`.
 `config_path` may be null for the default engine settings.

 # Safety
 Paths must be null or NUL-terminated strings; `out` must be writable.
 */
enum OttaStatus otta_run_stream(const struct OttaModel *model,
                                const char *streams_path,
                                const char *config_path,
                                enum OttaMode mode,
                                uint64_t seed,
                                struct OttaReport **out);

/*
 # Safety
 `report` must be null or a handle from [`otta_run_stream`] not yet freed.
 */
void otta_report_free(struct OttaReport *report);

/*
 Number of scored frames.

 # Safety
 `report` must be a live handle.
 */
size_t otta_report_frame_count(const struct OttaReport *report);

/*
 # Safety
 `report` must be a live handle; `out` must be writable.
 */
enum OttaStatus otta_report_split(const struct OttaReport *report,
                                  enum OttaSplit split,
                                  struct OttaSplitStats *out);

/*
 Write the per-frame CSV (same format as `otta run`'s `frames.csv`).

 # Safety
 `report` must be a live handle; `path` a NUL-terminated string.
 */
enum OttaStatus otta_report_write_frames_csv(const struct OttaReport *report, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OTTA_H */
