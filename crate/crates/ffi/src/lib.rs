//! C ABI over `fusepose`.
//!
//! Every function returns an [`FpStatus`]; on failure a message is kept per
//! thread and can be read with [`fp_last_error_message`]. Objects crossing the
//! boundary are opaque handles created by `*_new`/`*_open` and released by the
//! matching `*_free`. Arrays are caller-owned and never retained.
//!
//! Conventions: 2D points are interleaved `x, y` doubles, 3D points `x, y, z`,
//! quaternions `w, x, y, z`. Validity masks are one byte per landmark (non-zero
//! means valid); a null mask means all valid.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use fusepose::detection::{iou, BoundingBox};
use fusepose::fusion::{self, ChannelPrediction, FusionConfig, FusionMode, Provenance};
use fusepose::geometry::{quat_angle, CameraIntrinsics, KeypointSet, LandmarkSet, Point2, Point3, Pose};
use fusepose::io::{self, FrameOutput, PipelineConfig, PipelineMode, SequenceBundle};
use fusepose::pnp::{self, Channel, Correspondence, PnpError, RansacConfig};
use nalgebra::Quaternion;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    TooFewPoints = 3,
    SolverFailure = 4,
    Io = 5,
    OutOfRange = 6,
    Panic = 7,
}

/// Channel chosen for a pose.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpMode {
    Fused = 0,
    RgbOnly = 1,
    EventOnly = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpProvenance {
    Consistent = 0,
    GateFired = 1,
    UndefinedCmkd = 2,
    GateDisabled = 3,
    Forced = 4,
}

/// Pipeline variant for [`fp_bundle_run`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpPipelineMode {
    Fusion = 0,
    FusionNoGate = 1,
    RgbOnly = 2,
    EventOnly = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FpPose {
    /// `w, x, y, z`, unit norm, `w >= 0`.
    pub q: [f64; 4],
    /// Meters.
    pub t: [f64; 3],
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FpBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpRansacConfig {
    pub iterations: u32,
    pub reproj_threshold_px: f64,
    pub min_inliers: u32,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpFusionConfig {
    pub ransac: FpRansacConfig,
    pub alpha: f64,
    /// Zero disables the CMKD gate.
    pub gate: u8,
    /// Zero aggregates per-landmark spread by mean, non-zero by median.
    pub median: u8,
}

/// Outcome of one fusion call. Optional quantities are NaN when undefined.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpFusionResult {
    pub pose: FpPose,
    pub degenerate: u8,
    pub fallback: u8,
    pub mode: FpMode,
    pub provenance: FpProvenance,
    pub cmkd: f64,
    pub threshold_e: f64,
    pub u_rgb: f64,
    pub u_event: f64,
}

/// Per-frame record of a pipeline run.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpFrameResult {
    pub frame: u32,
    pub result: FpFusionResult,
    pub omega_m: f64,
    pub theta_deg: f64,
}

/// Opaque camera intrinsics.
pub struct FpCamera(CameraIntrinsics);
/// Opaque 3D landmark set.
pub struct FpLandmarks(LandmarkSet);
/// Opaque sequence bundle loaded from disk.
pub struct FpBundle(SequenceBundle);
/// Opaque per-frame outputs of one pipeline run.
pub struct FpRun {
    mode: PipelineMode,
    frames: Vec<FrameOutput>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

struct Fail(FpStatus, String);

impl Fail {
    fn null(what: &str) -> Self {
        Fail(FpStatus::NullPointer, format!("{what} is null"))
    }

    fn arg(msg: impl Into<String>) -> Self {
        Fail(FpStatus::InvalidArgument, msg.into())
    }
}

impl From<PnpError> for Fail {
    fn from(e: PnpError) -> Self {
        let code = match e {
            PnpError::TooFewPoints(_) | PnpError::NotEnoughCorrespondences { .. } => FpStatus::TooFewPoints,
            PnpError::SolverFailure(_) => FpStatus::SolverFailure,
            _ => FpStatus::InvalidArgument,
        };
        Fail(code, e.to_string())
    }
}

impl From<fusion::FusionError> for Fail {
    fn from(e: fusion::FusionError) -> Self {
        match e {
            fusion::FusionError::Pnp(p) => p.into(),
            e => Fail::arg(e.to_string()),
        }
    }
}

impl From<io::IoError> for Fail {
    fn from(e: io::IoError) -> Self {
        match e {
            io::IoError::Fusion(f) => f.into(),
            e => Fail(FpStatus::Io, e.to_string()),
        }
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FpStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            FpStatus::Panic
        }
    }
}

unsafe fn array<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail::null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail::null(what))
}

fn points2(xy: &[f64]) -> Vec<Point2> {
    xy.chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect()
}

fn points3(xyz: &[f64]) -> Vec<Point3> {
    xyz.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect()
}

unsafe fn keypoints(xy: *const f64, valid: *const u8, z: usize, what: &str) -> Result<KeypointSet, Fail> {
    let pts = points2(array(xy, 2 * z, what)?);
    let mask = if valid.is_null() {
        vec![true; z]
    } else {
        array(valid, z, what)?.iter().map(|&v| v != 0).collect()
    };
    KeypointSet::new(pts, mask).map_err(|e| Fail::arg(e.to_string()))
}

fn to_pose(p: &Pose) -> FpPose {
    FpPose {
        q: p.wxyz(),
        t: [p.t.x, p.t.y, p.t.z],
    }
}

fn to_ransac(c: &FpRansacConfig) -> RansacConfig {
    RansacConfig {
        iterations: c.iterations as usize,
        reproj_threshold: c.reproj_threshold_px,
        min_inliers: c.min_inliers as usize,
        seed: c.seed,
        ..RansacConfig::default()
    }
}

fn to_fusion(c: &FpFusionConfig) -> FusionConfig {
    FusionConfig {
        ransac: to_ransac(&c.ransac),
        alpha: c.alpha,
        gate: c.gate != 0,
        aggregation: if c.median != 0 {
            fusion::Aggregation::Median
        } else {
            fusion::Aggregation::Mean
        },
    }
}

fn to_result(r: &fusion::FusionResult) -> FpFusionResult {
    FpFusionResult {
        pose: to_pose(&r.pose),
        degenerate: r.degenerate as u8,
        fallback: r.fallback as u8,
        mode: match r.mode {
            FusionMode::Fused => FpMode::Fused,
            FusionMode::RgbOnly => FpMode::RgbOnly,
            FusionMode::EventOnly => FpMode::EventOnly,
        },
        provenance: match r.provenance {
            Provenance::Consistent => FpProvenance::Consistent,
            Provenance::GateFired => FpProvenance::GateFired,
            Provenance::UndefinedCmkd => FpProvenance::UndefinedCmkd,
            Provenance::GateDisabled => FpProvenance::GateDisabled,
            Provenance::Forced => FpProvenance::Forced,
        },
        cmkd: r.cmkd.unwrap_or(f64::NAN),
        threshold_e: r.threshold_e,
        u_rgb: r.u_rgb.unwrap_or(f64::NAN),
        u_event: r.u_event.unwrap_or(f64::NAN),
    }
}

unsafe fn c_path(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail::arg(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn fp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn fp_ransac_config_default() -> FpRansacConfig {
    let d = RansacConfig::default();
    FpRansacConfig {
        iterations: d.iterations as u32,
        reproj_threshold_px: d.reproj_threshold,
        min_inliers: d.min_inliers as u32,
        seed: d.seed,
    }
}

#[no_mangle]
pub extern "C" fn fp_fusion_config_default() -> FpFusionConfig {
    FpFusionConfig {
        ransac: fp_ransac_config_default(),
        alpha: fusion::DEFAULT_ALPHA,
        gate: 1,
        median: 0,
    }
}

/// Creates camera intrinsics. `dist` is null or 5 coefficients `k1 k2 p1 p2 k3`.
///
/// # Safety
/// `dist` must be null or point to 5 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fp_camera_new(fx: f64, fy: f64, cx: f64, cy: f64, dist: *const f64, out: *mut *mut FpCamera) -> FpStatus {
    guard(|| {
        let out = unsafe { self::out(out, "out") }?;
        let k = if dist.is_null() {
            CameraIntrinsics::new(fx, fy, cx, cy)
        } else {
            let d = unsafe { array(dist, 5, "dist") }?;
            CameraIntrinsics::with_distortion(fx, fy, cx, cy, [d[0], d[1], d[2], d[3], d[4]])
        }
        .map_err(|e| Fail::arg(e.to_string()))?;
        *out = Box::into_raw(Box::new(FpCamera(k)));
        Ok(())
    })
}

/// # Safety
/// `cam` must be null or a handle from [`fp_camera_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_camera_free(cam: *mut FpCamera) {
    if !cam.is_null() {
        drop(Box::from_raw(cam));
    }
}

/// Creates a landmark set from `n` interleaved `x, y, z` points in meters.
///
/// # Safety
/// `xyz` must point to `3 * n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fp_landmarks_new(xyz: *const f64, n: usize, out: *mut *mut FpLandmarks) -> FpStatus {
    guard(|| {
        let out = unsafe { self::out(out, "out") }?;
        let pts = points3(unsafe { array(xyz, 3 * n, "xyz") }?);
        let lm = LandmarkSet::new(pts).map_err(|e| Fail::arg(e.to_string()))?;
        *out = Box::into_raw(Box::new(FpLandmarks(lm)));
        Ok(())
    })
}

/// # Safety
/// `lm` must be null or a handle from [`fp_landmarks_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_landmarks_free(lm: *mut FpLandmarks) {
    if !lm.is_null() {
        drop(Box::from_raw(lm));
    }
}

/// # Safety
/// `lm` must be a live landmark handle.
#[no_mangle]
pub unsafe extern "C" fn fp_landmarks_len(lm: *const FpLandmarks) -> usize {
    lm.as_ref().map_or(0, |l| l.0.len())
}

unsafe fn correspondences(p3: *const f64, p2: *const f64, n: usize) -> Result<Vec<Correspondence>, Fail> {
    let p3 = points3(array(p3, 3 * n, "p3")?);
    let p2 = points2(array(p2, 2 * n, "p2")?);
    Ok(p3
        .into_iter()
        .zip(p2)
        .enumerate()
        .map(|(i, (p3, p2))| Correspondence {
            p3,
            p2,
            channel: Channel::Rgb,
            landmark_id: i,
        })
        .collect())
}

/// Non-iterative pose from `n >= 4` 2D-3D correspondences.
///
/// # Safety
/// `p3` must hold `3 * n` doubles, `p2` `2 * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn fp_epnp_solve(cam: *const FpCamera, p3: *const f64, p2: *const f64, n: usize, pose: *mut FpPose) -> FpStatus {
    guard(|| {
        let k = unsafe { handle(cam, "cam") }?;
        let pose = unsafe { out(pose, "pose") }?;
        let c = unsafe { correspondences(p3, p2, n) }?;
        *pose = to_pose(&pnp::epnp_solve(&c, &k.0)?);
        Ok(())
    })
}

/// Robust pose from `n` correspondences. `inlier_mask`, if not null, receives
/// one byte per correspondence. A degenerate outcome is `FpStatus::Ok` with
/// `*degenerate = 1` and the identity pose.
///
/// # Safety
/// Arrays as in [`fp_epnp_solve`]; `inlier_mask` null or `n` bytes.
#[no_mangle]
pub unsafe extern "C" fn fp_ransac_pnp(
    cam: *const FpCamera,
    p3: *const f64,
    p2: *const f64,
    n: usize,
    cfg: *const FpRansacConfig,
    pose: *mut FpPose,
    inlier_mask: *mut u8,
    degenerate: *mut u8,
) -> FpStatus {
    guard(|| {
        let k = unsafe { handle(cam, "cam") }?;
        let cfg = unsafe { handle(cfg, "cfg") }?;
        let pose = unsafe { out(pose, "pose") }?;
        let degenerate = unsafe { out(degenerate, "degenerate") }?;
        let c = unsafe { correspondences(p3, p2, n) }?;
        let r = pnp::ransac_pnp(&c, &k.0, &to_ransac(cfg))?;
        *pose = to_pose(&r.pose);
        *degenerate = r.degenerate as u8;
        if !inlier_mask.is_null() {
            let mask = unsafe { slice::from_raw_parts_mut(inlier_mask, n) };
            mask.fill(0);
            for &i in &r.inliers {
                mask[i] = 1;
            }
        }
        Ok(())
    })
}

/// Per-frame fusion. Keypoints are `z` interleaved points in RGB pixels (the
/// event channel already warped); `*_samples` hold `q` stacked keypoint sets
/// of `2 * z` doubles each, all points valid, with `q >= 2`.
///
/// # Safety
/// Each pointer must reference the documented number of elements.
#[no_mangle]
pub unsafe extern "C" fn fp_estimate_pose(
    cam: *const FpCamera,
    landmarks: *const FpLandmarks,
    rgb_xy: *const f64,
    rgb_valid: *const u8,
    event_xy: *const f64,
    event_valid: *const u8,
    rgb_samples: *const f64,
    event_samples: *const f64,
    q: usize,
    bbox: *const FpBox,
    cfg: *const FpFusionConfig,
    result: *mut FpFusionResult,
) -> FpStatus {
    guard(|| {
        let k = unsafe { handle(cam, "cam") }?;
        let lm = unsafe { handle(landmarks, "landmarks") }?;
        let b = unsafe { handle(bbox, "bbox") }?;
        let cfg = unsafe { handle(cfg, "cfg") }?;
        let result = unsafe { out(result, "result") }?;
        let z = lm.0.len();
        let samples = |p: *const f64, what: &str| -> Result<Vec<KeypointSet>, Fail> {
            let all = unsafe { array(p, 2 * z * q, what) }?;
            Ok(all.chunks_exact(2 * z).map(|c| KeypointSet::all_valid(points2(c))).collect())
        };
        let rgb = ChannelPrediction {
            channel: Channel::Rgb,
            keypoints: unsafe { keypoints(rgb_xy, rgb_valid, z, "rgb_xy") }?,
            mc_samples: samples(rgb_samples, "rgb_samples")?,
        };
        let event = ChannelPrediction {
            channel: Channel::Event,
            keypoints: unsafe { keypoints(event_xy, event_valid, z, "event_xy") }?,
            mc_samples: samples(event_samples, "event_samples")?,
        };
        let bbox = BoundingBox::new(b.x_min, b.y_min, b.x_max, b.y_max).map_err(|e| Fail::arg(e.to_string()))?;
        let r = fusion::estimate_pose(&rgb, &event, &lm.0, &bbox, &k.0, &to_fusion(cfg))?;
        *result = to_result(&r);
        Ok(())
    })
}

/// Rotation angle in degrees between two `w, x, y, z` quaternions.
///
/// # Safety
/// `a` and `b` must point to 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn fp_quat_angle(a: *const f64, b: *const f64, degrees: *mut f64) -> FpStatus {
    guard(|| {
        let a = unsafe { array(a, 4, "a") }?;
        let b = unsafe { array(b, 4, "b") }?;
        let degrees = unsafe { out(degrees, "degrees") }?;
        let qa = Quaternion::new(a[0], a[1], a[2], a[3]);
        let qb = Quaternion::new(b[0], b[1], b[2], b[3]);
        *degrees = quat_angle(&qa, &qb).map_err(|e| Fail::arg(e.to_string()))?;
        Ok(())
    })
}

/// Intersection over union; 0 when either box is null or has no area.
///
/// # Safety
/// `a` and `b` must be null or valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fp_iou(a: *const FpBox, b: *const FpBox) -> f64 {
    match (a.as_ref(), b.as_ref()) {
        (Some(a), Some(b)) => {
            let conv = |x: &FpBox| BoundingBox {
                x_min: x.x_min,
                y_min: x.y_min,
                x_max: x.x_max,
                y_max: x.y_max,
            };
            iou(&conv(a), &conv(b))
        }
        _ => 0.0,
    }
}

/// Loads a sequence bundle directory.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fp_bundle_open(dir: *const c_char, out: *mut *mut FpBundle) -> FpStatus {
    guard(|| {
        let out = unsafe { self::out(out, "out") }?;
        let path = unsafe { c_path(dir, "dir") }?;
        *out = Box::into_raw(Box::new(FpBundle(io::read_bundle(&path)?)));
        Ok(())
    })
}

/// # Safety
/// `b` must be null or a handle from [`fp_bundle_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_bundle_free(b: *mut FpBundle) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// # Safety
/// `b` must be a live bundle handle.
#[no_mangle]
pub unsafe extern "C" fn fp_bundle_frame_count(b: *const FpBundle) -> usize {
    b.as_ref().map_or(0, |b| b.0.meta.n_frames)
}

/// Runs one pipeline variant over every frame of a bundle. `cfg.ransac.seed`
/// is the base seed; per-frame seeds are derived from it.
///
/// # Safety
/// `b` must be a live bundle handle; `cfg` and `out` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fp_bundle_run(b: *const FpBundle, mode: FpPipelineMode, cfg: *const FpFusionConfig, out: *mut *mut FpRun) -> FpStatus {
    guard(|| {
        let b = unsafe { handle(b, "bundle") }?;
        let cfg = unsafe { handle(cfg, "cfg") }?;
        let out = unsafe { self::out(out, "out") }?;
        let mode = match mode {
            FpPipelineMode::Fusion => PipelineMode::Fusion,
            FpPipelineMode::FusionNoGate => PipelineMode::FusionNoGate,
            FpPipelineMode::RgbOnly => PipelineMode::RgbOnly,
            FpPipelineMode::EventOnly => PipelineMode::EventOnly,
        };
        let pc = PipelineConfig {
            fusion: to_fusion(cfg),
            seed: cfg.ransac.seed,
            seed_score_min: None,
        };
        let frames = io::run_pipeline(&b.0, mode, &pc)?;
        *out = Box::into_raw(Box::new(FpRun { mode, frames }));
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a handle from [`fp_bundle_run`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_run_free(r: *mut FpRun) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// # Safety
/// `r` must be a live run handle.
#[no_mangle]
pub unsafe extern "C" fn fp_run_len(r: *const FpRun) -> usize {
    r.as_ref().map_or(0, |r| r.frames.len())
}

/// Copies the record at zero-based `index`.
///
/// # Safety
/// `r` must be a live run handle and `frame` writable.
#[no_mangle]
pub unsafe extern "C" fn fp_run_frame(r: *const FpRun, index: usize, frame: *mut FpFrameResult) -> FpStatus {
    guard(|| {
        let r = unsafe { handle(r, "run") }?;
        let frame = unsafe { out(frame, "frame") }?;
        let f = r
            .frames
            .get(index)
            .ok_or_else(|| Fail(FpStatus::OutOfRange, format!("index {index} >= {}", r.frames.len())))?;
        *frame = FpFrameResult {
            frame: f.frame as u32,
            result: to_result(&f.result),
            omega_m: f.error.omega,
            theta_deg: f.error.theta,
        };
        Ok(())
    })
}

/// Writes `<dir>/<sequence>/<mode>.errors.csv` and `.results.jsonl`.
///
/// # Safety
/// `r` and `b` must be live handles, `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn fp_run_write(r: *const FpRun, b: *const FpBundle, dir: *const c_char) -> FpStatus {
    guard(|| {
        let r = unsafe { handle(r, "run") }?;
        let b = unsafe { handle(b, "bundle") }?;
        let dir = unsafe { c_path(dir, "dir") }?;
        io::write_run(&dir, &b.0.meta, r.mode, &r.frames)?;
        Ok(())
    })
}
