#ifndef FUSEPOSE_H
#define FUSEPOSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum FpStatus {
  FP_STATUS_OK = 0,
  FP_STATUS_NULL_POINTER = 1,
  FP_STATUS_INVALID_ARGUMENT = 2,
  FP_STATUS_TOO_FEW_POINTS = 3,
  FP_STATUS_SOLVER_FAILURE = 4,
  FP_STATUS_IO = 5,
  FP_STATUS_OUT_OF_RANGE = 6,
  FP_STATUS_PANIC = 7,
} FpStatus;

// Channel chosen for a pose.
typedef enum FpMode {
  FP_MODE_FUSED = 0,
  FP_MODE_RGB_ONLY = 1,
  FP_MODE_EVENT_ONLY = 2,
} FpMode;

typedef enum FpProvenance {
  FP_PROVENANCE_CONSISTENT = 0,
  FP_PROVENANCE_GATE_FIRED = 1,
  FP_PROVENANCE_UNDEFINED_CMKD = 2,
  FP_PROVENANCE_GATE_DISABLED = 3,
  FP_PROVENANCE_FORCED = 4,
} FpProvenance;

// Pipeline variant for [`fp_bundle_run`].
typedef enum FpPipelineMode {
  FP_PIPELINE_MODE_FUSION = 0,
  FP_PIPELINE_MODE_FUSION_NO_GATE = 1,
  FP_PIPELINE_MODE_RGB_ONLY = 2,
  FP_PIPELINE_MODE_EVENT_ONLY = 3,
} FpPipelineMode;

// Opaque sequence bundle loaded from disk.
typedef struct FpBundle FpBundle;

// Opaque camera intrinsics.
typedef struct FpCamera FpCamera;

// Opaque 3D landmark set.
typedef struct FpLandmarks FpLandmarks;

// Opaque per-frame outputs of one pipeline run.
typedef struct FpRun FpRun;

typedef struct FpRansacConfig {
  uint32_t iterations;
  double reproj_threshold_px;
  uint32_t min_inliers;
  uint64_t seed;
} FpRansacConfig;

typedef struct FpFusionConfig {
  struct FpRansacConfig ransac;
  double alpha;
  // Zero disables the CMKD gate.
  uint8_t gate;
  // Zero aggregates per-landmark spread by mean, non-zero by median.
  uint8_t median;
} FpFusionConfig;

typedef struct FpPose {
  // `w, x, y, z`, unit norm, `w >= 0`.
  double q[4];
  // Meters.
  double t[3];
} FpPose;

typedef struct FpBox {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
} FpBox;

// Outcome of one fusion call. Optional quantities are NaN when undefined.
typedef struct FpFusionResult {
  struct FpPose pose;
  uint8_t degenerate;
  uint8_t fallback;
  enum FpMode mode;
  enum FpProvenance provenance;
  double cmkd;
  double threshold_e;
  double u_rgb;
  double u_event;
} FpFusionResult;

// Per-frame record of a pipeline run.
typedef struct FpFrameResult {
  uint32_t frame;
  struct FpFusionResult result;
  double omega_m;
  double theta_deg;
} FpFrameResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *fp_version(void);

// Message of the last failed call on this thread, or null. Valid until the
// next call into the library on the same thread.
const char *fp_last_error_message(void);

struct FpRansacConfig fp_ransac_config_default(void);

struct FpFusionConfig fp_fusion_config_default(void);

// Creates camera intrinsics. `dist` is null or 5 coefficients `k1 k2 p1 p2 k3`.
//
// # Safety
// `dist` must be null or point to 5 doubles; `out` must be writable.
enum FpStatus fp_camera_new(double fx,
                            double fy,
                            double cx,
                            double cy,
                            const double *dist,
                            struct FpCamera **out);

// # Safety
// `cam` must be null or a handle from [`fp_camera_new`] not yet freed.
void fp_camera_free(struct FpCamera *cam);

// Creates a landmark set from `n` interleaved `x, y, z` points in meters.
//
// # Safety
// `xyz` must point to `3 * n` doubles; `out` must be writable.
enum FpStatus fp_landmarks_new(const double *xyz, size_t n, struct FpLandmarks **out);

// # Safety
// `lm` must be null or a handle from [`fp_landmarks_new`] not yet freed.
void fp_landmarks_free(struct FpLandmarks *lm);

// # Safety
// `lm` must be a live landmark handle.
size_t fp_landmarks_len(const struct FpLandmarks *lm);

// Non-iterative pose from `n >= 4` 2D-3D correspondences.
//
// # Safety
// `p3` must hold `3 * n` doubles, `p2` `2 * n` doubles.
enum FpStatus fp_epnp_solve(const struct FpCamera *cam,
                            const double *p3,
                            const double *p2,
                            size_t n,
                            struct FpPose *pose);

// Robust pose from `n` correspondences. `inlier_mask`, if not null, receives
// one byte per correspondence. A degenerate outcome is `FpStatus::Ok` with
// `*degenerate = 1` and the identity pose.
//
// # Safety
// Arrays as in [`fp_epnp_solve`]; `inlier_mask` null or `n` bytes.
enum FpStatus fp_ransac_pnp(const struct FpCamera *cam,
                            const double *p3,
                            const double *p2,
                            size_t n,
                            const struct FpRansacConfig *cfg,
                            struct FpPose *pose,
                            uint8_t *inlier_mask,
                            uint8_t *degenerate);

// Per-frame fusion. Keypoints are `z` interleaved points in RGB pixels (the
// event channel already warped); `*_samples` hold `q` stacked keypoint sets
// of `2 * z` doubles each, all points valid, with `q >= 2`.
//
// # Safety
// Each pointer must reference the documented number of elements.
enum FpStatus fp_estimate_pose(const struct FpCamera *cam,
                               const struct FpLandmarks *landmarks,
                               const double *rgb_xy,
                               const uint8_t *rgb_valid,
                               const double *event_xy,
                               const uint8_t *event_valid,
                               const double *rgb_samples,
                               const double *event_samples,
                               size_t q,
                               const struct FpBox *bbox,
                               const struct FpFusionConfig *cfg,
                               struct FpFusionResult *result);

// Rotation angle in degrees between two `w, x, y, z` quaternions.
//
// # Safety
// `a` and `b` must point to 4 doubles.
enum FpStatus fp_quat_angle(const double *a, const double *b, double *degrees);

// Intersection over union; 0 when either box is null or has no area.
//
// # Safety
// `a` and `b` must be null or valid pointers.
double fp_iou(const struct FpBox *a, const struct FpBox *b);

// Loads a sequence bundle directory.
//
// # Safety
// `dir` must be a NUL-terminated path; `out` must be writable.
enum FpStatus fp_bundle_open(const char *dir, struct FpBundle **out);

// # Safety
// `b` must be null or a handle from [`fp_bundle_open`] not yet freed.
void fp_bundle_free(struct FpBundle *b);

// # Safety
// `b` must be a live bundle handle.
size_t fp_bundle_frame_count(const struct FpBundle *b);

// Runs one pipeline variant over every frame of a bundle. `cfg.ransac.seed`
// is the base seed; per-frame seeds are derived from it.
//
// # Safety
// `b` must be a live bundle handle; `cfg` and `out` valid pointers.
enum FpStatus fp_bundle_run(const struct FpBundle *b,
                            enum FpPipelineMode mode,
                            const struct FpFusionConfig *cfg,
                            struct FpRun **out);

// # Safety
// `r` must be null or a handle from [`fp_bundle_run`] not yet freed.
void fp_run_free(struct FpRun *r);

// # Safety
// `r` must be a live run handle.
size_t fp_run_len(const struct FpRun *r);

// Copies the record at zero-based `index`.
//
// # Safety
// `r` must be a live run handle and `frame` writable.
enum FpStatus fp_run_frame(const struct FpRun *r, size_t index, struct FpFrameResult *frame);

// Writes `<dir>/<sequence>/<mode>.errors.csv` and `.results.jsonl`.
//
// # Safety
// `r` and `b` must be live handles, `dir` a NUL-terminated path.
enum FpStatus fp_run_write(const struct FpRun *r, const struct FpBundle *b, const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FUSEPOSE_H */
