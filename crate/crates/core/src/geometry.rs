//! Camera model, projection, lens distortion, the event-to-RGB affine warp and
//! rotation distances.
//!
//! Conventions: a [`Pose`] maps model-frame points into the camera frame,
//! `X_cam = R * X_model + t`, with `t` in meters. Pixel coordinates follow the
//! OpenCV convention (pixel `(i, j)` centred at `(i, j)`).

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::event::EventFrame;

pub type Point2 = Vector2<f64>;
pub type Point3 = Vector3<f64>;

/// Iteration cap for distortion inversion.
pub const UNDISTORT_MAX_ITERS: usize = 20;
/// Convergence tolerance for distortion inversion, in pixels.
pub const UNDISTORT_TOL_PX: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("focal lengths must be positive, got fx={fx}, fy={fy}")]
    BadIntrinsics { fx: f64, fy: f64 },
    #[error("warp scales must be positive, got sx={sx}, sy={sy}")]
    BadWarp { sx: f64, sy: f64 },
    #[error("landmark set needs at least 4 points, got {0}")]
    TooFewLandmarks(usize),
    #[error("alignment needs >= {needed} correspondences with matching counts (src {src}, dst {dst})")]
    AlignmentInput { needed: usize, src: usize, dst: usize },
    #[error("singular alignment fit: source points have no spread in {0}")]
    SingularFit(&'static str),
    #[error("zero quaternion")]
    ZeroQuaternion,
    #[error("keypoint and validity arrays differ in length ({points} vs {valid})")]
    KeypointLayout { points: usize, valid: usize },
}

/// Pinhole intrinsics with Brown-Conrady coefficients `[k1, k2, k3, p1, p2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub dist: [f64; 5],
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        Self::with_distortion(fx, fy, cx, cy, [0.0; 5])
    }

    pub fn with_distortion(fx: f64, fy: f64, cx: f64, cy: f64, dist: [f64; 5]) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, dist };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.fx > 0.0 && self.fy > 0.0 {
            Ok(())
        } else {
            Err(GeometryError::BadIntrinsics { fx: self.fx, fy: self.fy })
        }
    }

    pub fn has_distortion(&self) -> bool {
        self.dist.iter().any(|&d| d != 0.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Normalized image coordinates to pixels, no distortion.
    #[inline]
    pub fn to_pixel(&self, xn: f64, yn: f64) -> Point2 {
        Point2::new(self.fx * xn + self.cx, self.fy * yn + self.cy)
    }

    #[inline]
    pub fn to_normalized(&self, p: &Point2) -> (f64, f64) {
        ((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy)
    }

    /// Applies the Brown-Conrady model to normalized coordinates.
    pub fn distort_normalized(&self, x: f64, y: f64) -> (f64, f64) {
        let [k1, k2, k3, p1, p2] = self.dist;
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        let xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
        (xd, yd)
    }

    /// Jacobian of [`Self::distort_normalized`] at `(x, y)`.
    fn distortion_jacobian(&self, x: f64, y: f64) -> [[f64; 2]; 2] {
        let [k1, k2, k3, p1, p2] = self.dist;
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        let dradial = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2); // d radial / d r2
        let dxdx = radial + x * dradial * 2.0 * x + 2.0 * p1 * y + p2 * 6.0 * x;
        let dxdy = x * dradial * 2.0 * y + 2.0 * p1 * x + p2 * 2.0 * y;
        let dydx = y * dradial * 2.0 * x + p1 * 2.0 * x + 2.0 * p2 * y;
        let dydy = radial + y * dradial * 2.0 * y + p1 * 6.0 * y + 2.0 * p2 * x;
        [[dxdx, dxdy], [dydx, dydy]]
    }

    /// Distorts an ideal pixel location.
    pub fn distort_pixel(&self, p: &Point2) -> Point2 {
        let (x, y) = self.to_normalized(p);
        let (xd, yd) = self.distort_normalized(x, y);
        self.to_pixel(xd, yd)
    }

    /// Inverts the distortion model for one pixel; `None` if it does not converge.
    ///
    /// Fixed-point initial guess followed by Newton steps, capped at
    /// [`UNDISTORT_MAX_ITERS`] iterations in total.
    pub fn undistort_pixel(&self, p: &Point2) -> Option<Point2> {
        if !self.has_distortion() {
            return Some(*p);
        }
        let (xd, yd) = self.to_normalized(p);
        let tol_x = UNDISTORT_TOL_PX / self.fx;
        let tol_y = UNDISTORT_TOL_PX / self.fy;
        let (mut x, mut y) = (xd, yd);
        for _ in 0..UNDISTORT_MAX_ITERS {
            let (fx, fy) = self.distort_normalized(x, y);
            let (ex, ey) = (fx - xd, fy - yd);
            if !(ex.is_finite() && ey.is_finite()) {
                return None;
            }
            if ex.abs() < tol_x && ey.abs() < tol_y {
                return Some(self.to_pixel(x, y));
            }
            let [[a, b], [c, d]] = self.distortion_jacobian(x, y);
            let det = a * d - b * c;
            if det.abs() < 1e-12 {
                return None;
            }
            x -= (d * ex - b * ey) / det;
            y -= (-c * ex + a * ey) / det;
        }
        let (fx, fy) = self.distort_normalized(x, y);
        ((fx - xd).abs() < tol_x && (fy - yd).abs() < tol_y).then(|| self.to_pixel(x, y))
    }
}

/// Rigid object pose in the camera frame.
///
/// The quaternion is stored unit-norm with `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    q: UnitQuaternion<f64>,
    pub t: Point3,
}

impl Pose {
    pub fn new(q: UnitQuaternion<f64>, t: Point3) -> Self {
        let q = if q.w < 0.0 {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        };
        Self { q, t }
    }

    pub fn from_quaternion(q: Quaternion<f64>, t: Point3) -> Result<Self, GeometryError> {
        let n = q.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(GeometryError::ZeroQuaternion);
        }
        Ok(Self::new(UnitQuaternion::new_normalize(q), t))
    }

    pub fn from_rotation(r: &Matrix3<f64>, t: Point3) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*r);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), t)
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Point3::zeros())
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.q
    }

    /// `[w, x, y, z]`.
    pub fn wxyz(&self) -> [f64; 4] {
        [self.q.w, self.q.i, self.q.j, self.q.k]
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    #[inline]
    pub fn transform(&self, p: &Point3) -> Point3 {
        self.q * p + self.t
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(self.q * other.q, self.q * other.t + self.t)
    }

    pub fn inverse(&self) -> Pose {
        let qi = self.q.inverse();
        Pose::new(qi, -(qi * self.t))
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    q: [f64; 4],
    t: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRepr {
            q: self.wxyz(),
            t: [self.t.x, self.t.y, self.t.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PoseRepr::deserialize(d)?;
        Pose::from_quaternion(
            Quaternion::new(r.q[0], r.q[1], r.q[2], r.q[3]),
            Point3::new(r.t[0], r.t[1], r.t[2]),
        )
        .map_err(serde::de::Error::custom)
    }
}

/// Event-to-RGB alignment: per-axis scale plus translation, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineWarp {
    pub sx: f64,
    pub sy: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for AffineWarp {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineWarp {
    pub fn new(sx: f64, sy: f64, tx: f64, ty: f64) -> Result<Self, GeometryError> {
        let w = Self { sx, sy, tx, ty };
        w.validate()?;
        Ok(w)
    }

    pub fn identity() -> Self {
        Self { sx: 1.0, sy: 1.0, tx: 0.0, ty: 0.0 }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.sx > 0.0 && self.sy > 0.0 {
            Ok(())
        } else {
            Err(GeometryError::BadWarp { sx: self.sx, sy: self.sy })
        }
    }

    #[inline]
    pub fn apply(&self, p: &Point2) -> Point2 {
        Point2::new(self.sx * p.x + self.tx, self.sy * p.y + self.ty)
    }

    pub fn inverse(&self) -> AffineWarp {
        AffineWarp {
            sx: 1.0 / self.sx,
            sy: 1.0 / self.sy,
            tx: -self.tx / self.sx,
            ty: -self.ty / self.sy,
        }
    }
}

/// Unconstrained 2x3 affine map `[a b c; d e f]`, for robustness studies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralAffine {
    pub m: [[f64; 3]; 2],
}

impl GeneralAffine {
    pub fn apply(&self, p: &Point2) -> Point2 {
        let m = &self.m;
        Point2::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentFit<W> {
    pub warp: W,
    pub rms: f64,
}

/// 3D model landmarks, in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<Point3>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point3>) -> Result<Self, GeometryError> {
        if points.len() < 4 {
            return Err(GeometryError::TooFewLandmarks(points.len()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-landmark 2D observations with validity flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Point2>,
    pub valid: Vec<bool>,
}

impl KeypointSet {
    pub fn new(points: Vec<Point2>, valid: Vec<bool>) -> Result<Self, GeometryError> {
        if points.len() != valid.len() {
            return Err(GeometryError::KeypointLayout {
                points: points.len(),
                valid: valid.len(),
            });
        }
        Ok(Self { points, valid })
    }

    pub fn all_valid(points: Vec<Point2>) -> Self {
        let valid = vec![true; points.len()];
        Self { points, valid }
    }

    pub fn invalid(n: usize) -> Self {
        Self {
            points: vec![Point2::zeros(); n],
            valid: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn invalid_count(&self) -> usize {
        self.len() - self.valid_count()
    }

    /// `(index, point)` for valid entries.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, &Point2)> {
        self.points
            .iter()
            .zip(&self.valid)
            .enumerate()
            .filter_map(|(i, (p, &v))| v.then_some((i, p)))
    }

    /// Applies `f` to valid points only.
    pub fn map_valid(&self, mut f: impl FnMut(&Point2) -> Option<Point2>) -> KeypointSet {
        let mut out = self.clone();
        for (p, v) in out.points.iter_mut().zip(out.valid.iter_mut()) {
            if *v {
                match f(p) {
                    Some(q) => *p = q,
                    None => *v = false,
                }
            }
        }
        out
    }
}

/// Pinhole projection of landmarks through `pose`.
///
/// Points with non-positive depth are marked invalid; use
/// [`KeypointSet::invalid_count`] for the count.
pub fn project(landmarks: &LandmarkSet, pose: &Pose, k: &CameraIntrinsics, apply_distortion: bool) -> KeypointSet {
    let mut points = Vec::with_capacity(landmarks.len());
    let mut valid = Vec::with_capacity(landmarks.len());
    for p in &landmarks.points {
        match project_point(p, pose, k, apply_distortion) {
            Some(uv) => {
                points.push(uv);
                valid.push(true);
            }
            None => {
                points.push(Point2::zeros());
                valid.push(false);
            }
        }
    }
    KeypointSet { points, valid }
}

#[inline]
pub fn project_point(p: &Point3, pose: &Pose, k: &CameraIntrinsics, apply_distortion: bool) -> Option<Point2> {
    let c = pose.transform(p);
    if c.z <= 0.0 {
        return None;
    }
    let (mut x, mut y) = (c.x / c.z, c.y / c.z);
    if apply_distortion {
        (x, y) = k.distort_normalized(x, y);
    }
    Some(k.to_pixel(x, y))
}

/// Iteratively removes lens distortion; non-converging points become invalid.
pub fn undistort_points(kps: &KeypointSet, k: &CameraIntrinsics) -> KeypointSet {
    if !k.has_distortion() {
        return kps.clone();
    }
    kps.map_valid(|p| k.undistort_pixel(p))
}

/// Least-squares fit of `dst ≈ (sx·x + tx, sy·y + ty)`.
///
/// The axes decouple, so each is an ordinary 1D linear regression.
pub fn fit_alignment(src: &[Point2], dst: &[Point2]) -> Result<AlignmentFit<AffineWarp>, GeometryError> {
    if src.len() != dst.len() || src.len() < 2 {
        return Err(GeometryError::AlignmentInput {
            needed: 2,
            src: src.len(),
            dst: dst.len(),
        });
    }
    let (sx, tx) = fit_axis(src.iter().map(|p| p.x), dst.iter().map(|p| p.x), "x")?;
    let (sy, ty) = fit_axis(src.iter().map(|p| p.y), dst.iter().map(|p| p.y), "y")?;
    let warp = AffineWarp::new(sx, sy, tx, ty)?;
    let rms = rms_residual(src, dst, |p| warp.apply(p));
    Ok(AlignmentFit { warp, rms })
}

fn fit_axis(
    src: impl Iterator<Item = f64> + Clone,
    dst: impl Iterator<Item = f64> + Clone,
    axis: &'static str,
) -> Result<(f64, f64), GeometryError> {
    let n = src.clone().count() as f64;
    let ms = src.clone().sum::<f64>() / n;
    let md = dst.clone().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (s, d) in src.zip(dst) {
        sxx += (s - ms) * (s - ms);
        sxy += (s - ms) * (d - md);
    }
    if sxx <= f64::EPSILON * n * (1.0 + ms * ms) {
        return Err(GeometryError::SingularFit(axis));
    }
    let scale = sxy / sxx;
    Ok((scale, md - scale * ms))
}

/// Least-squares fit of a full 6-DOF affine map.
pub fn fit_affine_general(src: &[Point2], dst: &[Point2]) -> Result<AlignmentFit<GeneralAffine>, GeometryError> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(GeometryError::AlignmentInput {
            needed: 3,
            src: src.len(),
            dst: dst.len(),
        });
    }
    let mut ata = Matrix3::<f64>::zeros();
    let mut atbx = Vector3::<f64>::zeros();
    let mut atby = Vector3::<f64>::zeros();
    for (s, d) in src.iter().zip(dst) {
        let row = Vector3::new(s.x, s.y, 1.0);
        ata += row * row.transpose();
        atbx += row * d.x;
        atby += row * d.y;
    }
    let chol = ata.cholesky().ok_or(GeometryError::SingularFit("x/y"))?;
    let rx = chol.solve(&atbx);
    let ry = chol.solve(&atby);
    let warp = GeneralAffine {
        m: [[rx[0], rx[1], rx[2]], [ry[0], ry[1], ry[2]]],
    };
    let rms = rms_residual(src, dst, |p| warp.apply(p));
    Ok(AlignmentFit { warp, rms })
}

fn rms_residual(src: &[Point2], dst: &[Point2], f: impl Fn(&Point2) -> Point2) -> f64 {
    let sum: f64 = src.iter().zip(dst).map(|(s, d)| (f(s) - d).norm_squared()).sum();
    (sum / src.len() as f64).sqrt()
}

pub fn warp_points(kps: &KeypointSet, w: &AffineWarp) -> KeypointSet {
    kps.map_valid(|p| Some(w.apply(p)))
}

/// Resamples `frame` under `w` with bilinear interpolation; cells whose
/// preimage falls outside the source grid are zero.
pub fn warp_frame(frame: &EventFrame, w: &AffineWarp) -> EventFrame {
    let inv = w.inverse();
    let mut out = frame.clone();
    let (wd, ht) = (frame.width as usize, frame.height as usize);
    let max_x = (wd - 1) as f64;
    let max_y = (ht - 1) as f64;
    for y in 0..ht {
        for x in 0..wd {
            let src = inv.apply(&Point2::new(x as f64, y as f64));
            let v = if src.x < 0.0 || src.y < 0.0 || src.x > max_x || src.y > max_y {
                0.0
            } else {
                bilinear(frame, src.x, src.y)
            };
            out.values[y * wd + x] = v.clamp(0.0, 1.0);
        }
    }
    out.refresh_empty();
    out
}

fn bilinear(f: &EventFrame, x: f64, y: f64) -> f64 {
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(f.width - 1);
    let y1 = (y0 + 1).min(f.height - 1);
    let ax = x - x0 as f64;
    let ay = y - y0 as f64;
    let top = f.get(x0, y0) * (1.0 - ax) + f.get(x1, y0) * ax;
    let bottom = f.get(x0, y1) * (1.0 - ax) + f.get(x1, y1) * ax;
    top * (1.0 - ay) + bottom * ay
}

/// Geodesic angle in degrees between two rotations given as quaternions,
/// `2·acos(|<a, b>|)`. Inputs are renormalized; the result is sign-invariant.
///
/// Evaluated as `4·atan2(|a - s·b|, |a + s·b|)` with `s = sign(<a, b>)`,
/// which is exact for `b = ±a` and well conditioned near zero.
pub fn quat_angle(a: &Quaternion<f64>, b: &Quaternion<f64>) -> Result<f64, GeometryError> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(GeometryError::ZeroQuaternion);
    }
    let (ua, mut ub) = (a.coords / na, b.coords / nb);
    if ua.dot(&ub) < 0.0 {
        ub = -ub;
    }
    Ok(4.0 * (ua - ub).norm().atan2((ua + ub).norm()).to_degrees())
}

/// [`quat_angle`] for two poses.
pub fn rotation_error_deg(a: &Pose, b: &Pose) -> f64 {
    quat_angle(a.quaternion().quaternion(), b.quaternion().quaternion()).expect("poses hold unit quaternions")
}

pub fn axis_angle(axis: Vector3<f64>, degrees: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), degrees.to_radians())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::FrameEncoding;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap()
    }

    #[test]
    fn projection_hand_values() {
        let lm = LandmarkSet::new(vec![
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(0.1, 0.0, 1.0),
            Point3::new(0.0, 0.0, -1.0),
            Point3::new(0.0, 0.1, 2.0),
        ])
        .unwrap();
        let kp = project(&lm, &Pose::identity(), &k100(), false);
        assert_eq!(kp.points[0], Point2::new(50.0, 50.0));
        assert!((kp.points[1] - Point2::new(60.0, 50.0)).norm() < 1e-12);
        assert!(!kp.valid[2]);
        assert_eq!(kp.invalid_count(), 1);
        assert!((kp.points[3] - Point2::new(50.0, 55.0)).norm() < 1e-12);
    }

    #[test]
    fn bad_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(AffineWarp::new(1.0, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn alignment_recovers_generators() {
        let src: Vec<Point2> = (0..11)
            .flat_map(|i| (0..6).map(move |j| Point2::new(i as f64 * 30.0, j as f64 * 25.0)))
            .collect();
        let same = fit_alignment(&src, &src).unwrap();
        assert!((same.warp.sx - 1.0).abs() < 1e-12 && (same.warp.sy - 1.0).abs() < 1e-12);
        assert!(same.warp.tx.abs() < 1e-9 && same.warp.ty.abs() < 1e-9);

        let dst: Vec<Point2> = src.iter().map(|p| Point2::new(2.0 * p.x + 10.0, 2.0 * p.y - 5.0)).collect();
        let fit = fit_alignment(&src, &dst).unwrap();
        assert!((fit.warp.sx - 2.0).abs() < 1e-12);
        assert!((fit.warp.sy - 2.0).abs() < 1e-12);
        assert!((fit.warp.tx - 10.0).abs() < 1e-9);
        assert!((fit.warp.ty + 5.0).abs() < 1e-9);
        assert!(fit.rms < 1e-9);
    }

    #[test]
    fn alignment_with_checkerboard_noise() {
        // 11x6 corners, sigma 0.5 px on the destination.
        let mut rng = crate::rng::stream_rng(11, 0);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let src: Vec<Point2> = (0..11)
            .flat_map(|i| (0..6).map(move |j| Point2::new(100.0 + i as f64 * 40.0, 80.0 + j as f64 * 40.0)))
            .collect();
        let dst: Vec<Point2> = src
            .iter()
            .map(|p| {
                Point2::new(
                    1.05 * p.x - 12.0 + noise.sample(&mut rng),
                    0.98 * p.y + 7.0 + noise.sample(&mut rng),
                )
            })
            .collect();
        let fit = fit_alignment(&src, &dst).unwrap();
        assert!(fit.rms <= 1.0, "rms {}", fit.rms);
        assert!((fit.warp.sx - 1.05).abs() < 0.01);
    }

    #[test]
    fn degenerate_alignment_is_singular() {
        let src = vec![Point2::new(1.0, 2.0), Point2::new(1.0, 5.0)];
        assert_eq!(fit_alignment(&src, &src).unwrap_err(), GeometryError::SingularFit("x"));
        assert!(fit_alignment(&src[..1], &src[..1]).is_err());
    }

    #[test]
    fn general_affine_recovers_shear() {
        let src: Vec<Point2> = (0..20).map(|i| Point2::new((i * 7 % 13) as f64, (i * 5 % 11) as f64)).collect();
        let m = [[1.1, 0.2, 3.0], [-0.1, 0.9, -2.0]];
        let dst: Vec<Point2> = src.iter().map(|p| GeneralAffine { m }.apply(p)).collect();
        let fit = fit_affine_general(&src, &dst).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((fit.warp.m[r][c] - m[r][c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn warp_points_round_trip() {
        let w = AffineWarp::new(1.3, 0.7, -4.0, 12.5).unwrap();
        let kps = KeypointSet::new(
            vec![Point2::new(1.0, 2.0), Point2::new(-300.0, 17.25), Point2::new(5.0, 5.0)],
            vec![true, true, false],
        )
        .unwrap();
        let back = warp_points(&warp_points(&kps, &w), &w.inverse());
        for (a, b) in kps.points.iter().zip(&back.points) {
            assert!((a - b).norm() < 1e-9);
        }
        assert_eq!(back.valid, kps.valid);
        assert_eq!(warp_points(&kps, &AffineWarp::identity()), kps);
    }

    fn test_frame() -> EventFrame {
        let mut f = EventFrame::zeros(12, 9, FrameEncoding::Count);
        for y in 3..6 {
            for x in 4..8 {
                f.set(x, y, ((x + y) % 4) as f64 / 3.0);
            }
        }
        f.refresh_empty();
        f
    }

    #[test]
    fn identity_warp_preserves_frame() {
        let f = test_frame();
        let g = warp_frame(&f, &AffineWarp::identity());
        for (a, b) in f.values.iter().zip(&g.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn integer_translation_shifts_and_conserves_mass() {
        let f = test_frame();
        let g = warp_frame(&f, &AffineWarp::new(1.0, 1.0, 2.0, -1.0).unwrap());
        for y in 0..9u32 {
            for x in 0..12u32 {
                let sx = x as i64 - 2;
                let sy = y as i64 + 1;
                if (0..12).contains(&sx) && (0..9).contains(&sy) {
                    assert!((g.get(x, y) - f.get(sx as u32, sy as u32)).abs() < 1e-12);
                }
            }
        }
        assert!((g.sum() - f.sum()).abs() <= 0.01 * f.sum());
    }

    #[test]
    fn undistort_edge_cases() {
        let plain = k100();
        let p = Point2::new(13.0, 77.0);
        assert_eq!(plain.undistort_pixel(&p), Some(p));
        let k = CameraIntrinsics::with_distortion(100.0, 100.0, 50.0, 50.0, [-0.1, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let c = Point2::new(50.0, 50.0);
        assert_eq!(k.undistort_pixel(&c), Some(c));
    }

    #[test]
    fn undistort_round_trip_random_points() {
        // 800x720 sensor; sample within 1.5x the image extent around the centre.
        let k = CameraIntrinsics::with_distortion(900.0, 900.0, 400.0, 360.0, [-0.1, 0.01, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = crate::rng::stream_rng(3, 1);
        let mut worst: f64 = 0.0;
        for _ in 0..2000 {
            let p = Point2::new(400.0 + rng.random_range(-600.0..600.0), 360.0 + rng.random_range(-540.0..540.0));
            let u = k.undistort_pixel(&p).expect("converges");
            worst = worst.max((k.distort_pixel(&u) - p).norm());
        }
        assert!(worst < 1e-6, "worst round-trip {worst}");
    }

    #[test]
    fn quat_angle_examples() {
        let id = Quaternion::identity();
        assert_eq!(quat_angle(&id, &id).unwrap(), 0.0);
        let z90 = *axis_angle(Vector3::z(), 90.0).quaternion();
        assert!((quat_angle(&id, &z90).unwrap() - 90.0).abs() < 1e-9);
        assert!(quat_angle(&z90, &(-z90)).unwrap().abs() < 1e-6);
        assert_eq!(quat_angle(&Quaternion::new(0.0, 0.0, 0.0, 0.0), &id), Err(GeometryError::ZeroQuaternion));
    }

    #[test]
    fn pose_canonical_sign_and_serde() {
        let q = Quaternion::new(-0.5, 0.5, 0.5, 0.5);
        let p = Pose::from_quaternion(q, Point3::new(1.0, 2.0, 3.0)).unwrap();
        assert!(p.quaternion().w >= 0.0);
        assert!((p.quaternion().norm() - 1.0).abs() < 1e-12);
        let s = serde_json::to_string(&p).unwrap();
        let back: Pose = serde_json::from_str(&s).unwrap();
        assert!(rotation_error_deg(&p, &back) < 1e-9);
        assert_eq!(back.t, p.t);
    }

    fn arb_quat() -> impl Strategy<Value = UnitQuaternion<f64>> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("non-zero", |(a, b, c, d)| a * a + b * b + c * c + d * d > 1e-3)
            .prop_map(|(a, b, c, d)| UnitQuaternion::new_normalize(Quaternion::new(a, b, c, d)))
    }

    proptest! {
        #[test]
        fn quat_angle_is_a_metric(a in arb_quat(), b in arb_quat(), c in arb_quat()) {
            let (qa, qb, qc) = (a.quaternion(), b.quaternion(), c.quaternion());
            let ab = quat_angle(qa, qb).unwrap();
            let ba = quat_angle(qb, qa).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&ab));
            prop_assert!(quat_angle(qa, qa).unwrap() < 1e-5);
            prop_assert!((quat_angle(&(-qa), qb).unwrap() - ab).abs() < 1e-9);
            let ac = quat_angle(qa, qc).unwrap();
            let cb = quat_angle(qc, qb).unwrap();
            prop_assert!(ab <= ac + cb + 1e-6);
        }

        #[test]
        fn projection_respects_composition(a in arb_quat(), b in arb_quat(),
                                            tx in -0.2f64..0.2, ty in -0.2f64..0.2) {
            let inner = Pose::new(a, Point3::new(tx, ty, 0.1));
            let outer = Pose::new(b, Point3::new(0.0, 0.0, 3.0));
            let lm = LandmarkSet::new(vec![
                Point3::new(0.1, 0.0, 0.0), Point3::new(0.0, 0.1, 0.0),
                Point3::new(0.0, 0.0, 0.1), Point3::new(-0.1, -0.1, 0.05),
            ]).unwrap();
            let k = k100();
            let moved = LandmarkSet::new(lm.points.iter().map(|p| inner.transform(p)).collect()).unwrap();
            let direct = project(&moved, &outer, &k, false);
            let composed = project(&lm, &outer.compose(&inner), &k, false);
            for (p, q) in direct.points.iter().zip(&composed.points) {
                prop_assert!((p - q).norm() < 1e-9);
            }
        }

        #[test]
        fn alignment_exact_on_noiseless(sx in 0.2f64..4.0, sy in 0.2f64..4.0,
                                        tx in -100.0f64..100.0, ty in -100.0f64..100.0) {
            let src: Vec<Point2> = (0..10).map(|i| Point2::new(i as f64 * 13.0, (i * i) as f64)).collect();
            let w = AffineWarp::new(sx, sy, tx, ty).unwrap();
            let dst: Vec<Point2> = src.iter().map(|p| w.apply(p)).collect();
            let fit = fit_alignment(&src, &dst).unwrap();
            prop_assert!(fit.rms < 1e-9);
        }
    }
}
