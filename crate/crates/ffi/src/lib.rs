//! C ABI over the resilient-fusion core.
//!
//! Poses cross the boundary as `double[7]` in TUM order
//! (`tx ty tz qx qy qz qw`), twists as `double[6]` (`rho` then `phi`).
//! Every function returns an [`RfStatus`]; on failure the message is
//! available from [`rf_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use resilient_fusion::align::{solve_alignment, AlignOptions, AlignmentWindow, PosePair, RobustKernel};
use resilient_fusion::eval::{ate, Alignment, Trajectory};
use resilient_fusion::geom::{exp_se3, log_se3, Vec3, Vec6};
use resilient_fusion::{Covariance6, Error, Rotation, Transform, Twist};

/// Result codes. Mirrors the CLI exit-code classes where they overlap.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Data = 3,
    Numeric = 4,
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> RfStatus {
    match e {
        Error::InvalidArgument(_) | Error::InvalidCovariance(_) | Error::Stream(_) => RfStatus::InvalidArgument,
        Error::Data { .. } | Error::Io { .. } => RfStatus::Data,
        Error::Numeric(_) | Error::DegenerateGeometry(_) => RfStatus::Numeric,
    }
}

struct Fail(RfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(RfStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RfStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RfStatus::Panic
        }
    }
}

unsafe fn read<const N: usize>(ptr: *const f64, what: &str) -> Result<[f64; N], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let mut out = [0.0; N];
    out.copy_from_slice(std::slice::from_raw_parts(ptr, N));
    Ok(out)
}

unsafe fn write<const N: usize>(ptr: *mut f64, values: [f64; N], what: &str) -> Result<(), Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    std::slice::from_raw_parts_mut(ptr, N).copy_from_slice(&values);
    Ok(())
}

fn pose_from(p: [f64; 7]) -> Result<Transform, Fail> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Fail(RfStatus::InvalidArgument, "pose contains non-finite values".into()));
    }
    let r = Rotation::from_quaternion(p[3], p[4], p[5], p[6])?;
    Ok(Transform::new(r, Vec3::new(p[0], p[1], p[2])))
}

fn pose_to(t: &Transform) -> [f64; 7] {
    let q = t.rotation.to_quaternion();
    [t.translation.x, t.translation.y, t.translation.z, q[0], q[1], q[2], q[3]]
}

/// Message for the most recent failure on this thread; empty after success.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn rf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// SE(3) exponential of `twist[6]` into `pose_out[7]`.
///
/// # Safety
/// `twist` must point to 6 readable doubles and `pose_out` to 7 writable ones.
#[no_mangle]
pub unsafe extern "C" fn rf_se3_exp(twist: *const f64, pose_out: *mut f64) -> RfStatus {
    guard(|| {
        let v = read::<6>(twist, "twist")?;
        let xi = Twist::from_vector(&Vec6::from_row_slice(&v));
        write(pose_out, pose_to(&exp_se3(&xi)), "pose_out")
    })
}

/// SE(3) logarithm of `pose[7]` into `twist_out[6]`.
///
/// # Safety
/// `pose` must point to 7 readable doubles and `twist_out` to 6 writable ones.
#[no_mangle]
pub unsafe extern "C" fn rf_se3_log(pose: *const f64, twist_out: *mut f64) -> RfStatus {
    guard(|| {
        let t = pose_from(read::<7>(pose, "pose")?)?;
        let v = log_se3(&t).to_vector();
        let mut out = [0.0; 6];
        out.copy_from_slice(v.as_slice());
        write(twist_out, out, "twist_out")
    })
}

/// Growing set of LIO/VIO pose pairs for a frame alignment solve.
pub struct RfAlignmentWindow {
    pairs: Vec<PosePair>,
}

/// # Safety
/// `out` must be a valid pointer; the handle is released with [`rf_window_free`].
#[no_mangle]
pub unsafe extern "C" fn rf_window_new(out: *mut *mut RfAlignmentWindow) -> RfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(RfAlignmentWindow { pairs: Vec::new() }));
        Ok(())
    })
}

/// # Safety
/// `window` must come from [`rf_window_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rf_window_free(window: *mut RfAlignmentWindow) {
    if !window.is_null() {
        drop(Box::from_raw(window));
    }
}

/// Appends one time-matched pair with the default pose covariance.
///
/// # Safety
/// `window` must be a live handle; `lio` and `vio` must point to 7 doubles.
#[no_mangle]
pub unsafe extern "C" fn rf_window_push(
    window: *mut RfAlignmentWindow,
    timestamp: f64,
    lio: *const f64,
    vio: *const f64,
) -> RfStatus {
    guard(|| {
        let w = window.as_mut().ok_or_else(|| null("window"))?;
        let t_lio = pose_from(read::<7>(lio, "lio")?)?;
        let t_vio = pose_from(read::<7>(vio, "vio")?)?;
        w.pairs.push(PosePair {
            timestamp,
            t_lio,
            t_vio,
            sigma: Covariance6::default_pose(),
        });
        Ok(())
    })
}

/// Number of pairs in the window.
///
/// # Safety
/// `window` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn rf_window_len(window: *const RfAlignmentWindow) -> usize {
    window.as_ref().map_or(0, |w| w.pairs.len())
}

/// Robust alignment solve with Cauchy scale `kernel_c`. Writes the VIO-to-LIO
/// transform to `pose_out[7]`; `cost_out` and `converged_out` may be null.
///
/// # Safety
/// `window` must be a live handle and `pose_out` must point to 7 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rf_window_solve(
    window: *const RfAlignmentWindow,
    kernel_c: f64,
    pose_out: *mut f64,
    cost_out: *mut f64,
    converged_out: *mut bool,
) -> RfStatus {
    guard(|| {
        let w = window.as_ref().ok_or_else(|| null("window"))?;
        let opts = AlignOptions::default();
        let kernel = RobustKernel::new(kernel_c)?;
        let aw = AlignmentWindow::new(w.pairs.clone(), opts.k_min)?;
        let r = solve_alignment(&aw, &kernel, &opts)?;
        write(pose_out, pose_to(&r.t_align), "pose_out")?;
        if !cost_out.is_null() {
            *cost_out = r.final_cost;
        }
        if !converged_out.is_null() {
            *converged_out = r.converged;
        }
        Ok(())
    })
}

/// Timestamped trajectory.
pub struct RfTrajectory {
    inner: Trajectory,
}

fn box_trajectory(out: *mut *mut RfTrajectory, inner: Trajectory) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    // SAFETY: checked non-null; caller guarantees it is writable
    unsafe { *out = Box::into_raw(Box::new(RfTrajectory { inner })) };
    Ok(())
}

/// Loads a TUM trajectory file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rf_trajectory_load(path: *const c_char, out: *mut *mut RfTrajectory) -> RfStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let s = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(RfStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
        box_trajectory(out, Trajectory::load(Path::new(s))?)
    })
}

/// Builds a trajectory from `n` timestamps and `n` poses packed as `7 * n` doubles.
///
/// # Safety
/// `stamps` must hold `n` doubles, `poses` `7 * n` doubles, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rf_trajectory_from_poses(
    stamps: *const f64,
    poses: *const f64,
    n: usize,
    out: *mut *mut RfTrajectory,
) -> RfStatus {
    guard(|| {
        if stamps.is_null() {
            return Err(null("stamps"));
        }
        if poses.is_null() {
            return Err(null("poses"));
        }
        let stamps = std::slice::from_raw_parts(stamps, n);
        let stamped = (0..n)
            .map(|i| Ok((stamps[i], pose_from(read::<7>(poses.add(7 * i), "poses")?)?)))
            .collect::<Result<Vec<_>, Fail>>()?;
        box_trajectory(out, Trajectory::new(stamped)?)
    })
}

/// # Safety
/// `trajectory` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn rf_trajectory_len(trajectory: *const RfTrajectory) -> usize {
    trajectory.as_ref().map_or(0, |t| t.inner.len())
}

/// # Safety
/// `trajectory` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rf_trajectory_free(trajectory: *mut RfTrajectory) {
    if !trajectory.is_null() {
        drop(Box::from_raw(trajectory));
    }
}

/// Absolute trajectory error RMSE (m). `rigid` selects a least-squares rigid
/// pre-alignment; poses are associated within `tolerance` seconds.
///
/// # Safety
/// Both handles must be live and `rmse_out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_ate_rmse(
    est: *const RfTrajectory,
    reference: *const RfTrajectory,
    rigid: bool,
    tolerance: f64,
    rmse_out: *mut f64,
) -> RfStatus {
    guard(|| {
        let e = est.as_ref().ok_or_else(|| null("est"))?;
        let r = reference.as_ref().ok_or_else(|| null("reference"))?;
        if rmse_out.is_null() {
            return Err(null("rmse_out"));
        }
        let mode = if rigid { Alignment::Rigid } else { Alignment::None };
        *rmse_out = ate(&e.inner, &r.inner, mode, tolerance)?.rmse;
        Ok(())
    })
}
