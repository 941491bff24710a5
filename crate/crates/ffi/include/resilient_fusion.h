#ifndef RESILIENT_FUSION_H
#define RESILIENT_FUSION_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Mirrors the CLI exit-code classes where they overlap.
 */
typedef enum RfStatus {
  RF_STATUS_OK = 0,
  RF_STATUS_NULL_POINTER = 1,
  RF_STATUS_INVALID_ARGUMENT = 2,
  RF_STATUS_DATA = 3,
  RF_STATUS_NUMERIC = 4,
  RF_STATUS_PANIC = 5,
} RfStatus;

/**
 * Growing set of LIO/VIO pose pairs for a frame alignment solve.
 */
typedef struct RfAlignmentWindow RfAlignmentWindow;

/**
 * Timestamped trajectory.
 */
typedef struct RfTrajectory RfTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty after success.
 * The pointer stays valid until the next call into this library.
 */
const char *rf_last_error_message(void);

/**
 * SE(3) exponential of `twist[6]` into `pose_out[7]`.
 *
 * # Safety
 * `twist` must point to 6 readable doubles and `pose_out` to 7 writable ones.
 */
enum RfStatus rf_se3_exp(const double *twist, double *pose_out);

/**
 * SE(3) logarithm of `pose[7]` into `twist_out[6]`.
 *
 * # Safety
 * `pose` must point to 7 readable doubles and `twist_out` to 6 writable ones.
 */
enum RfStatus rf_se3_log(const double *pose, double *twist_out);

/**
 * # Safety
 * `out` must be a valid pointer; the handle is released with [`rf_window_free`].
 */
enum RfStatus rf_window_new(struct RfAlignmentWindow **out);

/**
 * # Safety
 * `window` must come from [`rf_window_new`] and not be used afterwards.
 */
void rf_window_free(struct RfAlignmentWindow *window);

/**
 * Appends one time-matched pair with the default pose covariance.
 *
 * # Safety
 * `window` must be a live handle; `lio` and `vio` must point to 7 doubles.
 */
enum RfStatus rf_window_push(struct RfAlignmentWindow *window,
                             double timestamp,
                             const double *lio,
                             const double *vio);

/**
 * Number of pairs in the window.
 *
 * # Safety
 * `window` must be a live handle or null (which yields 0).
 */
size_t rf_window_len(const struct RfAlignmentWindow *window);

/**
 * Robust alignment solve with Cauchy scale `kernel_c`. Writes the VIO-to-LIO
 * transform to `pose_out[7]`; `cost_out` and `converged_out` may be null.
 *
 * # Safety
 * `window` must be a live handle and `pose_out` must point to 7 writable doubles.
 */
enum RfStatus rf_window_solve(const struct RfAlignmentWindow *window,
                              double kernel_c,
                              double *pose_out,
                              double *cost_out,
                              bool *converged_out);

/**
 * Loads a TUM trajectory file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RfStatus rf_trajectory_load(const char *path, struct RfTrajectory **out);

/**
 * Builds a trajectory from `n` timestamps and `n` poses packed as `7 * n` doubles.
 *
 * # Safety
 * `stamps` must hold `n` doubles, `poses` `7 * n` doubles, and `out` must be valid.
 */
enum RfStatus rf_trajectory_from_poses(const double *stamps,
                                       const double *poses,
                                       size_t n,
                                       struct RfTrajectory **out);

/**
 * # Safety
 * `trajectory` must be a live handle or null.
 */
size_t rf_trajectory_len(const struct RfTrajectory *trajectory);

/**
 * # Safety
 * `trajectory` must come from this library and not be used afterwards.
 */
void rf_trajectory_free(struct RfTrajectory *trajectory);

/**
 * Absolute trajectory error RMSE (m). `rigid` selects a least-squares rigid
 * pre-alignment; poses are associated within `tolerance` seconds.
 *
 * # Safety
 * Both handles must be live and `rmse_out` writable.
 */
enum RfStatus rf_ate_rmse(const struct RfTrajectory *est,
                          const struct RfTrajectory *reference,
                          bool rigid,
                          double tolerance,
                          double *rmse_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RESILIENT_FUSION_H */
