//! EPnP and seeded RANSAC over (possibly cross-modal) 2D-3D correspondences.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, KeypointSet, LandmarkSet, Point2, Point3, Pose};
use crate::rng::stream_rng;

type Vector6 = SVector<f64, 6>;
type Matrix6x4 = SMatrix<f64, 6, 4>;
type Matrix6x10 = SMatrix<f64, 6, 10>;
type Matrix12 = SMatrix<f64, 12, 12>;
type Vector12 = SVector<f64, 12>;

/// Gauss-Newton iterations applied to every EPnP β candidate.
pub const EPNP_GAUSS_NEWTON_ITERS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum PnpError {
    #[error("EPnP needs at least 4 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("EPnP solver failure: {0}")]
    SolverFailure(&'static str),
    #[error("RANSAC needs at least {needed} correspondences, got {got}")]
    NotEnoughCorrespondences { needed: usize, got: usize },
    #[error("invalid RANSAC configuration: {0}")]
    BadConfig(&'static str),
    #[error("keypoint sets have {rgb} and {event} entries but there are {landmarks} landmarks")]
    LandmarkMismatch { rgb: usize, event: usize, landmarks: usize },
}

/// Which sensor produced an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Rgb,
    Event,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub p3: Point3,
    pub p2: Point2,
    pub channel: Channel,
    pub landmark_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    pub reproj_threshold: f64,
    pub min_inliers: usize,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            reproj_threshold: 20.0,
            min_inliers: 4,
            sample_size: 4,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), PnpError> {
        if self.sample_size < 4 {
            return Err(PnpError::BadConfig("sample_size must be >= 4"));
        }
        if self.min_inliers < 4 {
            return Err(PnpError::BadConfig("min_inliers must be >= 4"));
        }
        if self.iterations == 0 {
            return Err(PnpError::BadConfig("iterations must be > 0"));
        }
        if !(self.reproj_threshold > 0.0) {
            return Err(PnpError::BadConfig("reproj_threshold must be > 0"));
        }
        Ok(())
    }
}

/// Outcome of [`ransac_pnp`].
///
/// A degenerate result carries the zero-rotation, zero-translation pose that
/// an EPnP backend reports when consensus fails.
#[derive(Debug, Clone, PartialEq)]
pub struct PnPResult {
    pub pose: Pose,
    pub inliers: Vec<usize>,
    pub degenerate: bool,
    pub mean_reproj_error: f64,
}

impl PnPResult {
    pub fn degenerate(inliers: Vec<usize>) -> Self {
        Self {
            pose: Pose::identity(),
            inliers,
            degenerate: true,
            mean_reproj_error: f64::INFINITY,
        }
    }
}

/// Pixel distance between the projection of `c.p3` and `c.p2`; `+inf` behind the camera.
pub fn reprojection_error(pose: &Pose, c: &Correspondence, k: &CameraIntrinsics) -> f64 {
    residual(&pose.rotation(), &pose.t, &c.p3, &c.p2, k)
}

#[inline]
fn residual(r: &Matrix3<f64>, t: &Vector3<f64>, p3: &Point3, p2: &Point2, k: &CameraIntrinsics) -> f64 {
    let c = r * p3 + t;
    if c.z <= 0.0 {
        return f64::INFINITY;
    }
    let u = k.fx * c.x / c.z + k.cx - p2.x;
    let v = k.fy * c.y / c.z + k.cy - p2.y;
    (u * u + v * v).sqrt()
}

/// Correspondences from one channel's valid keypoints.
pub fn channel_correspondences(kps: &KeypointSet, landmarks: &LandmarkSet, channel: Channel) -> Vec<Correspondence> {
    kps.iter_valid()
        .filter(|(i, _)| *i < landmarks.len())
        .map(|(i, p)| Correspondence {
            p3: landmarks.points[i],
            p2: *p,
            channel,
            landmark_id: i,
        })
        .collect()
}

/// Concatenates RGB then event correspondences over the same landmark set,
/// dropping invalid keypoints. Each landmark may appear once per channel.
pub fn fuse_correspondences(
    m_rgb: &KeypointSet,
    m_event: &KeypointSet,
    landmarks: &LandmarkSet,
) -> Result<Vec<Correspondence>, PnpError> {
    if m_rgb.len() != landmarks.len() || m_event.len() != landmarks.len() {
        return Err(PnpError::LandmarkMismatch {
            rgb: m_rgb.len(),
            event: m_event.len(),
            landmarks: landmarks.len(),
        });
    }
    let mut out = channel_correspondences(m_rgb, landmarks, Channel::Rgb);
    out.extend(channel_correspondences(m_event, landmarks, Channel::Event));
    Ok(out)
}

/// EPnP pose from at least 4 undistorted correspondences.
pub fn epnp_solve(corrs: &[Correspondence], k: &CameraIntrinsics) -> Result<Pose, PnpError> {
    let p3: Vec<Point3> = corrs.iter().map(|c| c.p3).collect();
    let p2: Vec<Point2> = corrs.iter().map(|c| c.p2).collect();
    Epnp::solve(&p3, &p2, k).map(|(pose, _)| pose)
}

/// EPnP (Lepetit, Moreno-Noguer, Fua): the pose is expressed through four
/// virtual control points whose camera coordinates lie in the null space of a
/// 2n x 12 system; the null-space weights β are found for N = 1..4 and
/// refined by Gauss-Newton, and the candidate with the lowest reprojection RMS
/// wins.
pub struct Epnp;

impl Epnp {
    /// Returns the pose and its reprojection RMS over the inputs.
    pub fn solve(p3: &[Point3], p2: &[Point2], k: &CameraIntrinsics) -> Result<(Pose, f64), PnpError> {
        let n = p3.len();
        if n < 4 || p2.len() != n {
            return Err(PnpError::TooFewPoints(n.min(p2.len())));
        }

        let cws = control_points(p3)?;
        let alphas = barycentric(p3, &cws)?;

        let v = if n == 4 {
            null_space_minimal(&alphas, p2, k)?
        } else {
            null_space_least_squares(&alphas, p2, k)
        };

        let l = l_6x10(&v);
        let rho = rho(&cws);

        let mut best: Option<(Pose, f64)> = None;
        let mut consider = |betas: Vector4<f64>| {
            let betas = gauss_newton(&l, &rho, betas);
            if let Some(cand) = pose_from_betas(&v, &betas, &alphas, p3, p2, k) {
                if best.as_ref().is_none_or(|b| cand.1 < b.1) {
                    best = Some(cand);
                }
            }
        };
        // For a minimal sample the null space has no preferred direction.
        if n > 4 {
            consider(betas_n1(&v[0], &cws));
        }
        if let Some(b) = betas_approx_n2(&l, &rho) {
            consider(b);
        }
        if let Some(b) = betas_approx_n3(&l, &rho) {
            consider(b);
        }
        if let Some(b) = betas_approx_n4(&l, &rho) {
            consider(b);
        }
        best.ok_or(PnpError::SolverFailure("no finite EPnP candidate"))
    }
}

/// The two rows of M contributed by one correspondence.
#[inline]
fn m_rows(a: &Vector4<f64>, uv: &Point2, k: &CameraIntrinsics) -> (Vector12, Vector12) {
    let mut r1 = Vector12::zeros();
    let mut r2 = Vector12::zeros();
    for j in 0..4 {
        r1[3 * j] = a[j] * k.fx;
        r1[3 * j + 2] = a[j] * (k.cx - uv.x);
        r2[3 * j + 1] = a[j] * k.fy;
        r2[3 * j + 2] = a[j] * (k.cy - uv.y);
    }
    (r1, r2)
}

/// Eigenvectors of MᵀM for the four smallest eigenvalues, smallest first.
fn null_space_least_squares(alphas: &[Vector4<f64>], p2: &[Point2], k: &CameraIntrinsics) -> [Vector12; 4] {
    let mut mtm = Matrix12::zeros();
    for (a, uv) in alphas.iter().zip(p2) {
        let (r1, r2) = m_rows(a, uv, k);
        mtm += r1 * r1.transpose() + r2 * r2.transpose();
    }
    let eig = mtm.symmetric_eigen();
    let mut order: [usize; 12] = std::array::from_fn(|i| i);
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    std::array::from_fn(|i| eig.eigenvectors.column(order[i]).into_owned())
}

/// Exact null space of the 8 x 12 system of a minimal sample, by
/// Gauss-Jordan elimination with full pivoting and Gram-Schmidt.
fn null_space_minimal(alphas: &[Vector4<f64>], p2: &[Point2], k: &CameraIntrinsics) -> Result<[Vector12; 4], PnpError> {
    let mut m = SMatrix::<f64, 8, 12>::zeros();
    for (i, (a, uv)) in alphas.iter().zip(p2).enumerate() {
        let (r1, r2) = m_rows(a, uv, k);
        m.set_row(2 * i, &r1.transpose());
        m.set_row(2 * i + 1, &r2.transpose());
    }
    let scale = m.amax();
    let mut is_pivot = [false; 12];
    let mut pivot_col = [0usize; 8];
    for r in 0..8 {
        let (mut bi, mut bj, mut bv) = (r, 0, -1.0);
        for i in r..8 {
            for j in 0..12 {
                if !is_pivot[j] && m[(i, j)].abs() > bv {
                    (bi, bj, bv) = (i, j, m[(i, j)].abs());
                }
            }
        }
        if !(bv > 1e-12 * scale) {
            return Err(PnpError::SolverFailure("rank-deficient minimal sample"));
        }
        m.swap_rows(r, bi);
        let inv = 1.0 / m[(r, bj)];
        for j in 0..12 {
            m[(r, j)] *= inv;
        }
        for i in 0..8 {
            if i != r {
                let f = m[(i, bj)];
                if f != 0.0 {
                    for j in 0..12 {
                        m[(i, j)] -= f * m[(r, j)];
                    }
                }
            }
        }
        is_pivot[bj] = true;
        pivot_col[r] = bj;
    }
    let mut basis = [Vector12::zeros(); 4];
    let mut b = 0;
    for f in (0..12).filter(|&j| !is_pivot[j]) {
        let mut v = Vector12::zeros();
        v[f] = 1.0;
        for r in 0..8 {
            v[pivot_col[r]] = -m[(r, f)];
        }
        for prev in &basis[..b] {
            v -= prev * prev.dot(&v);
        }
        basis[b] = v.normalize();
        b += 1;
    }
    Ok(basis)
}

fn control_points(p3: &[Point3]) -> Result<[Point3; 4], PnpError> {
    let n = p3.len() as f64;
    let c0 = p3.iter().sum::<Point3>() / n;
    let mut cov = Matrix3::zeros();
    for p in p3 {
        let d = p - c0;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if !(lmax > 0.0) || lmin <= 1e-12 * lmax {
        return Err(PnpError::SolverFailure("landmarks are coplanar or collinear"));
    }
    let mut cws = [c0; 4];
    for i in 0..3 {
        let s = (eig.eigenvalues[i] / n).sqrt();
        let mut axis: Vector3<f64> = eig.eigenvectors.column(i).into_owned();
        // Orient each axis by the sign of the third moment so the control
        // points move with the landmarks under rigid transforms.
        let skew: f64 = p3.iter().map(|p| (p - c0).dot(&axis).powi(3)).sum();
        if skew < 0.0 {
            axis = -axis;
        }
        cws[i + 1] = c0 + axis * s;
    }
    Ok(cws)
}

fn barycentric(p3: &[Point3], cws: &[Point3; 4]) -> Result<Vec<Vector4<f64>>, PnpError> {
    let cc = Matrix3::from_columns(&[cws[1] - cws[0], cws[2] - cws[0], cws[3] - cws[0]]);
    let inv = cc
        .try_inverse()
        .ok_or(PnpError::SolverFailure("singular control-point basis"))?;
    Ok(p3
        .iter()
        .map(|p| {
            let a = inv * (p - cws[0]);
            Vector4::new(1.0 - a.x - a.y - a.z, a.x, a.y, a.z)
        })
        .collect())
}

const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

#[inline]
fn block(v: &Vector12, i: usize) -> Vector3<f64> {
    Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2])
}

/// Rows: control-point pairs. Columns: β products
/// `[b11 b12 b22 b13 b23 b33 b14 b24 b34 b44]`.
fn l_6x10(v: &[Vector12; 4]) -> Matrix6x10 {
    let mut l = Matrix6x10::zeros();
    for (row, &(a, b)) in PAIRS.iter().enumerate() {
        let dv: [Vector3<f64>; 4] = std::array::from_fn(|i| block(&v[i], a) - block(&v[i], b));
        l[(row, 0)] = dv[0].dot(&dv[0]);
        l[(row, 1)] = 2.0 * dv[0].dot(&dv[1]);
        l[(row, 2)] = dv[1].dot(&dv[1]);
        l[(row, 3)] = 2.0 * dv[0].dot(&dv[2]);
        l[(row, 4)] = 2.0 * dv[1].dot(&dv[2]);
        l[(row, 5)] = dv[2].dot(&dv[2]);
        l[(row, 6)] = 2.0 * dv[0].dot(&dv[3]);
        l[(row, 7)] = 2.0 * dv[1].dot(&dv[3]);
        l[(row, 8)] = 2.0 * dv[2].dot(&dv[3]);
        l[(row, 9)] = dv[3].dot(&dv[3]);
    }
    l
}

fn rho(cws: &[Point3; 4]) -> Vector6 {
    Vector6::from_fn(|i, _| {
        let (a, b) = PAIRS[i];
        (cws[a] - cws[b]).norm_squared()
    })
}

/// Least squares on selected columns of L via SVD.
fn solve_columns<const C: usize>(l: &Matrix6x10, cols: [usize; C], rho: &Vector6) -> Option<SVector<f64, C>> {
    let a = SMatrix::<f64, 6, C>::from_fn(|i, j| l[(i, cols[j])]);
    lstsq(&a, rho)
}

/// Least squares through the normal equations; `None` when rank deficient.
fn lstsq<const C: usize>(a: &SMatrix<f64, 6, C>, b: &Vector6) -> Option<SVector<f64, C>> {
    let x = (a.transpose() * a).cholesky()?.solve(&(a.transpose() * b));
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// N = 1: scale the smallest null vector so control-point distances match.
fn betas_n1(v0: &Vector12, cws: &[Point3; 4]) -> Vector4<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for &(a, b) in &PAIRS {
        let dc = (block(v0, a) - block(v0, b)).norm();
        let dw = (cws[a] - cws[b]).norm();
        num += dc * dw;
        den += dc * dc;
    }
    Vector4::new(if den > 0.0 { num / den } else { 0.0 }, 0.0, 0.0, 0.0)
}

fn betas_approx_n2(l: &Matrix6x10, rho: &Vector6) -> Option<Vector4<f64>> {
    let b = solve_columns(l, [0, 1, 2], rho)?;
    let (mut b0, b1) = if b[0] < 0.0 {
        ((-b[0]).sqrt(), if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 })
    } else {
        (b[0].sqrt(), if b[2] > 0.0 { b[2].sqrt() } else { 0.0 })
    };
    if b[1] < 0.0 {
        b0 = -b0;
    }
    Some(Vector4::new(b0, b1, 0.0, 0.0))
}

fn betas_approx_n3(l: &Matrix6x10, rho: &Vector6) -> Option<Vector4<f64>> {
    let b = solve_columns(l, [0, 1, 2, 3, 4], rho)?;
    let (mut b0, b1) = if b[0] < 0.0 {
        ((-b[0]).sqrt(), if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 })
    } else {
        (b[0].sqrt(), if b[2] > 0.0 { b[2].sqrt() } else { 0.0 })
    };
    if b[1] < 0.0 {
        b0 = -b0;
    }
    let b2 = if b0 != 0.0 { b[3] / b0 } else { 0.0 };
    Some(Vector4::new(b0, b1, b2, 0.0))
}

fn betas_approx_n4(l: &Matrix6x10, rho: &Vector6) -> Option<Vector4<f64>> {
    let b = solve_columns(l, [0, 1, 3, 6], rho)?;
    if b[0] < 0.0 {
        let b0 = (-b[0]).sqrt();
        Some(Vector4::new(b0, -b[1] / b0, -b[2] / b0, -b[3] / b0))
    } else if b[0] > 0.0 {
        let b0 = b[0].sqrt();
        Some(Vector4::new(b0, b[1] / b0, b[2] / b0, b[3] / b0))
    } else {
        None
    }
}

fn gauss_newton(l: &Matrix6x10, rho: &Vector6, mut betas: Vector4<f64>) -> Vector4<f64> {
    for _ in 0..EPNP_GAUSS_NEWTON_ITERS {
        let [b0, b1, b2, b3] = [betas[0], betas[1], betas[2], betas[3]];
        let mut a = Matrix6x4::zeros();
        let mut r = Vector6::zeros();
        for i in 0..6 {
            let row = l.row(i);
            a[(i, 0)] = 2.0 * row[0] * b0 + row[1] * b1 + row[3] * b2 + row[6] * b3;
            a[(i, 1)] = row[1] * b0 + 2.0 * row[2] * b1 + row[4] * b2 + row[7] * b3;
            a[(i, 2)] = row[3] * b0 + row[4] * b1 + 2.0 * row[5] * b2 + row[8] * b3;
            a[(i, 3)] = row[6] * b0 + row[7] * b1 + row[8] * b2 + 2.0 * row[9] * b3;
            r[i] = rho[i]
                - (row[0] * b0 * b0
                    + row[1] * b0 * b1
                    + row[2] * b1 * b1
                    + row[3] * b0 * b2
                    + row[4] * b1 * b2
                    + row[5] * b2 * b2
                    + row[6] * b0 * b3
                    + row[7] * b1 * b3
                    + row[8] * b2 * b3
                    + row[9] * b3 * b3);
        }
        let Some(dx) = lstsq(&a, &r) else {
            break;
        };
        betas += dx;
        if dx.norm() <= 1e-12 * betas.norm() {
            break;
        }
    }
    betas
}

fn pose_from_betas(
    v: &[Vector12; 4],
    betas: &Vector4<f64>,
    alphas: &[Vector4<f64>],
    p3: &[Point3],
    p2: &[Point2],
    k: &CameraIntrinsics,
) -> Option<(Pose, f64)> {
    let x: Vector12 = v[0] * betas[0] + v[1] * betas[1] + v[2] * betas[2] + v[3] * betas[3];
    let mut ccs: [Vector3<f64>; 4] = std::array::from_fn(|i| block(&x, i));
    let camera = |ccs: &[Vector3<f64>; 4], a: &Vector4<f64>| ccs[0] * a[0] + ccs[1] * a[1] + ccs[2] * a[2] + ccs[3] * a[3];
    if camera(&ccs, &alphas[0]).z < 0.0 {
        for c in ccs.iter_mut() {
            *c = -*c;
        }
    }
    let pcs: Vec<Point3> = alphas.iter().map(|a| camera(&ccs, a)).collect();
    let (r, t) = absolute_orientation(p3, &pcs)?;
    let mut sum = 0.0;
    for (w, uv) in p3.iter().zip(p2) {
        let e = residual(&r, &t, w, uv, k);
        sum += e * e;
    }
    let rms = (sum / p3.len() as f64).sqrt();
    rms.is_finite().then(|| (Pose::from_rotation(&r, t), rms))
}

/// Least-squares rigid transform `pc ≈ R·pw + t` (Kabsch/Umeyama, no scale).
pub(crate) fn absolute_orientation(pw: &[Point3], pc: &[Point3]) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let n = pw.len() as f64;
    let cw = pw.iter().sum::<Point3>() / n;
    let cc = pc.iter().sum::<Point3>() / n;
    let mut h = Matrix3::zeros();
    for (w, c) in pw.iter().zip(pc) {
        h += (c - cc) * (w - cw).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let d = (u * vt).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
    let t = cc - r * cw;
    (r.iter().all(|x| x.is_finite()) && t.iter().all(|x| x.is_finite())).then_some((r, t))
}

#[derive(Debug, Clone)]
struct Hypothesis {
    iteration: usize,
    pose: Pose,
    count: usize,
    mean_residual: f64,
}

impl Hypothesis {
    /// Ordering used to pick the consensus model: more inliers, then lower
    /// mean residual, then earlier iteration.
    fn beats(&self, other: &Hypothesis) -> bool {
        use std::cmp::Ordering::*;
        match self.count.cmp(&other.count) {
            Greater => true,
            Less => false,
            Equal => match self.mean_residual.total_cmp(&other.mean_residual) {
                Less => true,
                Greater => false,
                Equal => self.iteration < other.iteration,
            },
        }
    }
}

/// Scores `pose` against all correspondences: inlier indices and their mean residual.
pub fn consensus(
    pose: &Pose,
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    threshold: f64,
) -> (Vec<usize>, f64) {
    let r = pose.rotation();
    let mut inliers = Vec::new();
    let mut sum = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        let e = residual(&r, &pose.t, &c.p3, &c.p2, k);
        if e < threshold {
            inliers.push(i);
            sum += e;
        }
    }
    let mean = if inliers.is_empty() {
        f64::INFINITY
    } else {
        sum / inliers.len() as f64
    };
    (inliers, mean)
}

/// Robust EPnP: uniform `sample_size` subsets drawn from per-iteration seeded
/// streams, consensus by `residual < reproj_threshold`, refit on the winning
/// inlier set. Fewer than `min_inliers` inliers yields a degenerate result.
pub fn ransac_pnp(corrs: &[Correspondence], k: &CameraIntrinsics, cfg: &RansacConfig) -> Result<PnPResult, PnpError> {
    cfg.validate()?;
    let n = corrs.len();
    if n < cfg.sample_size {
        return Err(PnpError::NotEnoughCorrespondences {
            needed: cfg.sample_size,
            got: n,
        });
    }
    let p3: Vec<Point3> = corrs.iter().map(|c| c.p3).collect();
    let p2: Vec<Point2> = corrs.iter().map(|c| c.p2).collect();

    let mut best: Option<Hypothesis> = None;
    let mut best_inliers = Vec::new();
    let mut residuals = vec![0.0; n];
    let mut s3 = Vec::with_capacity(cfg.sample_size);
    let mut s2 = Vec::with_capacity(cfg.sample_size);
    for iteration in 0..cfg.iterations {
        let mut rng = stream_rng(cfg.seed, iteration as u64);
        let sample = rand::seq::index::sample(&mut rng, n, cfg.sample_size);
        s3.clear();
        s2.clear();
        for i in sample.iter() {
            s3.push(p3[i]);
            s2.push(p2[i]);
        }
        let Ok((pose, _)) = Epnp::solve(&s3, &s2, k) else {
            continue;
        };
        let r = pose.rotation();
        let (mut count, mut sum) = (0usize, 0.0);
        for (i, e) in residuals.iter_mut().enumerate() {
            *e = residual(&r, &pose.t, &p3[i], &p2[i], k);
            if *e < cfg.reproj_threshold {
                count += 1;
                sum += *e;
            }
        }
        let hyp = Hypothesis {
            iteration,
            pose,
            count,
            mean_residual: if count > 0 { sum / count as f64 } else { f64::INFINITY },
        };
        if best.as_ref().is_none_or(|b| hyp.beats(b)) {
            best_inliers.clear();
            best_inliers.extend((0..n).filter(|&i| residuals[i] < cfg.reproj_threshold));
            best = Some(hyp);
        }
    }

    let Some(best) = best else {
        return Ok(PnPResult::degenerate(Vec::new()));
    };
    if best.count < cfg.min_inliers {
        return Ok(PnPResult::degenerate(best_inliers));
    }
    let in3: Vec<Point3> = best_inliers.iter().map(|&i| p3[i]).collect();
    let in2: Vec<Point2> = best_inliers.iter().map(|&i| p2[i]).collect();
    let pose = Epnp::solve(&in3, &in2, k).map(|(p, _)| p).unwrap_or(best.pose);
    let r = pose.rotation();
    let mean_reproj_error = best_inliers
        .iter()
        .map(|&i| residual(&r, &pose.t, &p3[i], &p2[i], k))
        .sum::<f64>()
        / best_inliers.len() as f64;
    Ok(PnPResult {
        pose,
        inliers: best_inliers,
        degenerate: false,
        mean_reproj_error,
    })
}
