//! Per-frame channel arbitration: CMKD consistency gate, MC-sample
//! uncertainty and the fused or single-channel RANSAC pose.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::BoundingBox;
use crate::geometry::{CameraIntrinsics, KeypointSet, LandmarkSet, Pose};
use crate::pnp::{channel_correspondences, fuse_correspondences, ransac_pnp, Channel, Correspondence, PnPResult, PnpError, RansacConfig};

/// Default fraction of the box diagonal used as the CMKD gate.
pub const DEFAULT_ALPHA: f64 = 0.2;
/// MC-dropout sample count used by the simulated predictors.
pub const DEFAULT_MC_SAMPLES: usize = 32;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no landmark is valid in both channels; CMKD undefined")]
    UndefinedCmkd,
    #[error("keypoint sets differ in size ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("uncertainty needs at least 2 MC samples, got {0}")]
    TooFewSamples(usize),
    #[error("no landmark is valid in every MC sample")]
    NoValidSamples,
    #[error("invalid bounding box for the CMKD threshold")]
    BadBox,
    #[error("alpha must be finite and >= 0, got {0}")]
    BadAlpha(f64),
    #[error(transparent)]
    Pnp(#[from] PnpError),
}

/// One channel's keypoint estimate plus its MC-dropout samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelPrediction {
    pub channel: Channel,
    pub keypoints: KeypointSet,
    pub mc_samples: Vec<KeypointSet>,
}

impl ChannelPrediction {
    /// A prediction with no valid keypoints, used for missing inputs.
    pub fn missing(channel: Channel, z: usize) -> Self {
        Self {
            channel,
            keypoints: KeypointSet::invalid(z),
            mc_samples: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub ransac: RansacConfig,
    pub alpha: f64,
    /// When false the channels are always fused, whatever the CMKD.
    pub gate: bool,
    pub aggregation: Aggregation,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            alpha: DEFAULT_ALPHA,
            gate: true,
            aggregation: Aggregation::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Fused,
    RgbOnly,
    EventOnly,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Fused => "fused",
            FusionMode::RgbOnly => "rgb_only",
            FusionMode::EventOnly => "event_only",
        }
    }

    pub fn for_channel(c: Channel) -> Self {
        match c {
            Channel::Rgb => FusionMode::RgbOnly,
            Channel::Event => FusionMode::EventOnly,
        }
    }
}

/// Why a mode was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// CMKD within the threshold.
    Consistent,
    /// CMKD above the threshold; lower-uncertainty channel.
    GateFired,
    /// No commonly valid landmark; lower-uncertainty channel.
    UndefinedCmkd,
    /// Gate disabled by configuration.
    GateDisabled,
    /// Single channel forced by the caller.
    Forced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub pose: Pose,
    pub degenerate: bool,
    pub mode: FusionMode,
    pub provenance: Provenance,
    /// The preferred channel was degenerate and the other one was used.
    pub fallback: bool,
    pub cmkd: Option<f64>,
    pub threshold_e: f64,
    pub u_rgb: Option<f64>,
    pub u_event: Option<f64>,
    /// Landmark ids of the RANSAC inliers, per channel.
    pub inliers_rgb: Vec<usize>,
    pub inliers_event: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl FusionResult {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("FusionResult serializes")
    }
}

/// Median; even counts average the two central values. `None` when empty.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Cross-modal keypoint distance: median over landmarks valid in both sets.
pub fn cmkd(m_rgb: &KeypointSet, m_event: &KeypointSet) -> Result<f64, FusionError> {
    if m_rgb.len() != m_event.len() {
        return Err(FusionError::SizeMismatch(m_rgb.len(), m_event.len()));
    }
    let mut d: Vec<f64> = (0..m_rgb.len())
        .filter(|&i| m_rgb.valid[i] && m_event.valid[i])
        .map(|i| (m_rgb.points[i] - m_event.points[i]).norm())
        .collect();
    median(&mut d).ok_or(FusionError::UndefinedCmkd)
}

pub fn cmkd_threshold(bbox: &BoundingBox, alpha: f64) -> Result<f64, FusionError> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(FusionError::BadAlpha(alpha));
    }
    bbox.validate().map_err(|_| FusionError::BadBox)?;
    Ok(alpha * bbox.diagonal())
}

/// Three sample standard deviations per landmark and ordinate, aggregated
/// over landmarks valid in every sample, then averaged over x and y.
pub fn uncertainty(samples: &[KeypointSet], aggregation: Aggregation) -> Result<f64, FusionError> {
    let q = samples.len();
    if q < 2 {
        return Err(FusionError::TooFewSamples(q));
    }
    let z = samples[0].len();
    if let Some(s) = samples.iter().find(|s| s.len() != z) {
        return Err(FusionError::SizeMismatch(z, s.len()));
    }
    let mut ux = Vec::new();
    let mut uy = Vec::new();
    for i in 0..z {
        if !samples.iter().all(|s| s.valid[i]) {
            continue;
        }
        // Welford updates keep identical samples at exactly zero spread.
        let (mut mx, mut my, mut vx, mut vy) = (0.0, 0.0, 0.0, 0.0);
        for (k, s) in samples.iter().enumerate() {
            let p = s.points[i];
            let w = (k + 1) as f64;
            let (dx, dy) = (p.x - mx, p.y - my);
            mx += dx / w;
            my += dy / w;
            vx += dx * (p.x - mx);
            vy += dy * (p.y - my);
        }
        let n = q as f64;
        ux.push(3.0 * (vx / (n - 1.0)).sqrt());
        uy.push(3.0 * (vy / (n - 1.0)).sqrt());
    }
    if ux.is_empty() {
        return Err(FusionError::NoValidSamples);
    }
    let agg = |v: &mut Vec<f64>| match aggregation {
        Aggregation::Mean => v.iter().sum::<f64>() / v.len() as f64,
        Aggregation::Median => median(v).unwrap_or(f64::NAN),
    };
    Ok(0.5 * (agg(&mut ux) + agg(&mut uy)))
}

fn run_ransac(corrs: &[Correspondence], k: &CameraIntrinsics, cfg: &RansacConfig) -> Result<PnPResult, FusionError> {
    if corrs.len() < cfg.sample_size {
        cfg.validate()?;
        return Ok(PnPResult::degenerate(Vec::new()));
    }
    Ok(ransac_pnp(corrs, k, cfg)?)
}

fn split_inliers(corrs: &[Correspondence], res: &PnPResult) -> (Vec<usize>, Vec<usize>) {
    let mut rgb = Vec::new();
    let mut event = Vec::new();
    if !res.degenerate {
        for &i in &res.inliers {
            match corrs[i].channel {
                Channel::Rgb => rgb.push(corrs[i].landmark_id),
                Channel::Event => event.push(corrs[i].landmark_id),
            }
        }
    }
    (rgb, event)
}

/// Pose for one frame from aligned RGB and event predictions (event keypoints
/// already mapped into RGB pixel space).
pub fn estimate_pose(
    pred_rgb: &ChannelPrediction,
    pred_event: &ChannelPrediction,
    landmarks: &LandmarkSet,
    bbox: &BoundingBox,
    k: &CameraIntrinsics,
    cfg: &FusionConfig,
) -> Result<FusionResult, FusionError> {
    let threshold_e = cmkd_threshold(bbox, cfg.alpha)?;
    let cmkd_value = match cmkd(&pred_rgb.keypoints, &pred_event.keypoints) {
        Ok(v) => Some(v),
        Err(FusionError::UndefinedCmkd) => None,
        Err(e) => return Err(e),
    };
    let u_rgb = uncertainty(&pred_rgb.mc_samples, cfg.aggregation).ok();
    let u_event = uncertainty(&pred_event.mc_samples, cfg.aggregation).ok();

    let base = |res: &PnPResult, corrs: &[Correspondence], mode, provenance, fallback| {
        let (inliers_rgb, inliers_event) = split_inliers(corrs, res);
        FusionResult {
            pose: res.pose,
            degenerate: res.degenerate,
            mode,
            provenance,
            fallback,
            cmkd: cmkd_value,
            threshold_e,
            u_rgb,
            u_event,
            inliers_rgb,
            inliers_event,
            reason: None,
        }
    };

    let fused_provenance = if !cfg.gate {
        Some(Provenance::GateDisabled)
    } else {
        match cmkd_value {
            Some(c) if c <= threshold_e => Some(Provenance::Consistent),
            _ => None,
        }
    };
    if let Some(provenance) = fused_provenance {
        let corrs = fuse_correspondences(&pred_rgb.keypoints, &pred_event.keypoints, landmarks)?;
        let res = run_ransac(&corrs, k, &cfg.ransac)?;
        return Ok(base(&res, &corrs, FusionMode::Fused, provenance, false));
    }

    let provenance = if cmkd_value.is_some() {
        Provenance::GateFired
    } else {
        Provenance::UndefinedCmkd
    };
    let ur = u_rgb.unwrap_or(f64::INFINITY);
    let ue = u_event.unwrap_or(f64::INFINITY);
    // Ties go to the event channel.
    let (first, second) = if ur < ue {
        (pred_rgb, pred_event)
    } else {
        (pred_event, pred_rgb)
    };
    let try_channel = |p: &ChannelPrediction| -> Result<(PnPResult, Vec<Correspondence>), FusionError> {
        let corrs = channel_correspondences(&p.keypoints, landmarks, p.channel);
        Ok((run_ransac(&corrs, k, &cfg.ransac)?, corrs))
    };
    let (res, corrs) = try_channel(first)?;
    if res.degenerate {
        let (res2, corrs2) = try_channel(second)?;
        if !res2.degenerate {
            return Ok(base(&res2, &corrs2, FusionMode::for_channel(second.channel), provenance, true));
        }
    }
    Ok(base(&res, &corrs, FusionMode::for_channel(first.channel), provenance, false))
}

/// Single-channel pose with the same bookkeeping as [`estimate_pose`].
pub fn estimate_single(
    pred: &ChannelPrediction,
    other: Option<&ChannelPrediction>,
    landmarks: &LandmarkSet,
    bbox: &BoundingBox,
    k: &CameraIntrinsics,
    cfg: &FusionConfig,
) -> Result<FusionResult, FusionError> {
    let threshold_e = cmkd_threshold(bbox, cfg.alpha)?;
    let corrs = channel_correspondences(&pred.keypoints, landmarks, pred.channel);
    let res = run_ransac(&corrs, k, &cfg.ransac)?;
    let (inliers_rgb, inliers_event) = split_inliers(&corrs, &res);
    let u_self = uncertainty(&pred.mc_samples, cfg.aggregation).ok();
    let u_other = other.and_then(|o| uncertainty(&o.mc_samples, cfg.aggregation).ok());
    let cmkd_value = other.and_then(|o| cmkd(&pred.keypoints, &o.keypoints).ok());
    let (u_rgb, u_event) = match pred.channel {
        Channel::Rgb => (u_self, u_other),
        Channel::Event => (u_other, u_self),
    };
    Ok(FusionResult {
        pose: res.pose,
        degenerate: res.degenerate,
        mode: FusionMode::for_channel(pred.channel),
        provenance: Provenance::Forced,
        fallback: false,
        cmkd: cmkd_value,
        threshold_e,
        u_rgb,
        u_event,
        inliers_rgb,
        inliers_event,
        reason: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, project, rotation_error_deg, Point2, Point3};
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn kps(points: &[(f64, f64)]) -> KeypointSet {
        KeypointSet::all_valid(points.iter().map(|&(x, y)| Point2::new(x, y)).collect())
    }

    #[test]
    fn cmkd_examples() {
        let a = kps(&[(0.0, 0.0), (10.0, 5.0), (20.0, 7.0)]);
        assert_eq!(cmkd(&a, &a).unwrap(), 0.0);
        let shifted = kps(&[(3.0, 4.0), (13.0, 9.0), (23.0, 11.0)]);
        assert!((cmkd(&a, &shifted).unwrap() - 5.0).abs() < 1e-12);
        let b = kps(&[(1.0, 0.0), (10.0, 7.0), (120.0, 7.0)]);
        assert_eq!(cmkd(&a, &b).unwrap(), 2.0);
        let even = kps(&[(1.0, 0.0), (10.0, 7.0), (20.0, 7.0)]);
        let mut with_invalid = even.clone();
        with_invalid.valid[2] = false;
        assert_eq!(cmkd(&a, &with_invalid).unwrap(), 1.5);
        assert!(matches!(cmkd(&a, &KeypointSet::invalid(3)), Err(FusionError::UndefinedCmkd)));
    }

    #[test]
    fn threshold_examples() {
        let b = BoundingBox::new(0.0, 0.0, 300.0, 400.0).unwrap();
        assert!((cmkd_threshold(&b, 0.2).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(cmkd_threshold(&b, 0.0).unwrap(), 0.0);
        let s = BoundingBox::new(10.0, 10.0, 60.0, 60.0).unwrap();
        assert!((cmkd_threshold(&s, 0.2).unwrap() - 0.2 * 50.0 * 2f64.sqrt()).abs() < 1e-12);
        let flat = BoundingBox { x_min: 0.0, y_min: 0.0, x_max: 10.0, y_max: 0.0 };
        assert!(cmkd_threshold(&flat, 0.2).is_err());
    }

    /// Samples whose x deviations are ±sx and y deviations ±sy around a base
    /// set; with an even sample count the sample stdev is sx·sqrt(Q/(Q-1)).
    fn spread_samples(base: &KeypointSet, q: usize, sx: f64, sy: f64) -> Vec<KeypointSet> {
        (0..q)
            .map(|j| {
                let s = if j % 2 == 0 { 1.0 } else { -1.0 };
                KeypointSet::new(
                    base.points.iter().map(|p| p + Point2::new(s * sx, s * sy)).collect(),
                    base.valid.clone(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn uncertainty_examples() {
        let base = kps(&[(0.0, 0.0), (50.0, 20.0), (80.0, 90.0)]);
        let same = vec![base.clone(); 4];
        assert_eq!(uncertainty(&same, Aggregation::Mean).unwrap(), 0.0);
        // Q = 4 with ±a deviations has sample stdev a·sqrt(4/3); choose a so it is 2 and 4.
        let f = (3.0f64 / 4.0).sqrt();
        let s = spread_samples(&base, 4, 2.0 * f, 4.0 * f);
        assert!((uncertainty(&s, Aggregation::Mean).unwrap() - 9.0).abs() < 1e-12);
        assert!((uncertainty(&s, Aggregation::Median).unwrap() - 9.0).abs() < 1e-12);
        assert!(matches!(uncertainty(&s[..1], Aggregation::Mean), Err(FusionError::TooFewSamples(1))));
    }

    proptest! {
        #[test]
        fn cmkd_symmetric_and_translation_invariant(
            pts in prop::collection::vec((-500.0..500.0f64, -500.0..500.0f64, -50.0..50.0f64, -50.0..50.0f64), 1..20),
            shift in (-100.0..100.0f64, -100.0..100.0f64),
        ) {
            let a = kps(&pts.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>());
            let b = kps(&pts.iter().map(|p| (p.0 + p.2, p.1 + p.3)).collect::<Vec<_>>());
            let c1 = cmkd(&a, &b).unwrap();
            prop_assert_eq!(c1, cmkd(&b, &a).unwrap());
            let t = Point2::new(shift.0, shift.1);
            let at = a.map_valid(|p| Some(p + t));
            let bt = b.map_valid(|p| Some(p + t));
            prop_assert!((cmkd(&at, &bt).unwrap() - c1).abs() < 1e-9);
        }

        #[test]
        fn uncertainty_translation_invariant_and_homogeneous(
            devs in prop::collection::vec(prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 6), 2..10),
            shift in (-100.0..100.0f64, -100.0..100.0f64),
            c in 0.1..10.0f64,
        ) {
            let base: Vec<Point2> = (0..6).map(|i| Point2::new(i as f64 * 10.0, 3.0 * i as f64)).collect();
            let make = |scale: f64, off: Point2| -> Vec<KeypointSet> {
                devs.iter()
                    .map(|d| KeypointSet::all_valid(base.iter().zip(d).map(|(b, d)| b + Point2::new(d.0, d.1) * scale + off).collect()))
                    .collect()
            };
            let u = uncertainty(&make(1.0, Point2::zeros()), Aggregation::Mean).unwrap();
            let ut = uncertainty(&make(1.0, Point2::new(shift.0, shift.1)), Aggregation::Mean).unwrap();
            let us = uncertainty(&make(c, Point2::zeros()), Aggregation::Mean).unwrap();
            prop_assert!((u - ut).abs() < 1e-6 * (1.0 + u));
            prop_assert!((us - c * u).abs() < 1e-9 * (1.0 + us));
        }
    }

    fn scene() -> (LandmarkSet, Pose, CameraIntrinsics, BoundingBox) {
        let lm = LandmarkSet::new(
            (0..18)
                .map(|i| {
                    let a = i as f64 * 0.7;
                    Point3::new(0.12 * a.cos(), 0.1 * (1.3 * a).sin(), 0.11 * (0.9 * a + 1.0).cos())
                })
                .collect(),
        )
        .unwrap();
        let pose = Pose::new(axis_angle(Vector3::new(0.2, 1.0, 0.1), 30.0), Point3::new(0.0, 0.0, 1.0));
        let k = CameraIntrinsics::new(1000.0, 1000.0, 400.0, 360.0).unwrap();
        let kp = project(&lm, &pose, &k, false);
        let b = crate::detection::derive_box(&kp, 0.1).unwrap();
        (lm, pose, k, b)
    }

    fn pred(channel: Channel, kp: KeypointSet, sigma: f64) -> ChannelPrediction {
        let f = (3.0f64 / 4.0).sqrt();
        let mc_samples = spread_samples(&kp, 4, sigma * f, sigma * f);
        ChannelPrediction { channel, keypoints: kp, mc_samples }
    }

    fn cfg(gate: bool) -> FusionConfig {
        FusionConfig {
            ransac: RansacConfig { iterations: 300, seed: 3, ..Default::default() },
            gate,
            ..Default::default()
        }
    }

    #[test]
    fn consistent_channels_fuse() {
        let (lm, pose, k, b) = scene();
        let kp = project(&lm, &pose, &k, false);
        let r = estimate_pose(&pred(Channel::Rgb, kp.clone(), 1.0), &pred(Channel::Event, kp, 1.0), &lm, &b, &k, &cfg(true)).unwrap();
        assert_eq!(r.mode, FusionMode::Fused);
        assert_eq!(r.cmkd, Some(0.0));
        assert!(!r.inliers_rgb.is_empty() && !r.inliers_event.is_empty());
        assert!(rotation_error_deg(&r.pose, &pose) < 1e-6);
    }

    #[test]
    fn gate_picks_lower_uncertainty_and_ties_go_to_event() {
        let (lm, pose, k, b) = scene();
        let kp = project(&lm, &pose, &k, false);
        let far = kp.map_valid(|p| Some(p + Point2::new(400.0, 0.0)));
        let r = estimate_pose(&pred(Channel::Rgb, kp.clone(), 1.0), &pred(Channel::Event, far.clone(), 5.0), &lm, &b, &k, &cfg(true)).unwrap();
        assert_eq!(r.mode, FusionMode::RgbOnly);
        assert_eq!(r.provenance, Provenance::GateFired);
        assert!(r.u_rgb.unwrap() < r.u_event.unwrap());
        let tie = estimate_pose(&pred(Channel::Rgb, kp.clone(), 2.0), &pred(Channel::Event, far, 2.0), &lm, &b, &k, &cfg(true)).unwrap();
        assert_eq!(tie.mode, FusionMode::EventOnly);
    }

    #[test]
    fn degenerate_choice_falls_back() {
        let (lm, pose, k, b) = scene();
        let kp = project(&lm, &pose, &k, false);
        // RGB has the lower U but no valid keypoints, so it is degenerate.
        let mut rgb_bad = ChannelPrediction::missing(Channel::Rgb, lm.len());
        rgb_bad.mc_samples = spread_samples(&kp, 4, 0.1, 0.1);
        let ev_ok = pred(Channel::Event, kp.clone(), 5.0);
        let r = estimate_pose(&rgb_bad, &ev_ok, &lm, &b, &k, &cfg(true)).unwrap();
        assert_eq!(r.provenance, Provenance::UndefinedCmkd);
        assert_eq!(r.mode, FusionMode::EventOnly);
        assert!(r.fallback);
        assert!(!r.degenerate);
    }

    #[test]
    fn both_invalid_is_degenerate() {
        let (lm, _, k, b) = scene();
        let r = estimate_pose(
            &ChannelPrediction::missing(Channel::Rgb, lm.len()),
            &ChannelPrediction::missing(Channel::Event, lm.len()),
            &lm,
            &b,
            &k,
            &cfg(true),
        )
        .unwrap();
        assert!(r.degenerate);
        assert_eq!(r.pose, Pose::identity());
    }

    #[test]
    fn gate_off_with_invalid_channel_equals_single_channel() {
        let (lm, pose, k, b) = scene();
        let mut kp = project(&lm, &pose, &k, false);
        for i in 0..7 {
            kp.points[i] += Point2::new(60.0 * i as f64, -90.0);
        }
        let rgb = pred(Channel::Rgb, kp.clone(), 1.0);
        let ev = ChannelPrediction::missing(Channel::Event, lm.len());
        let c = cfg(false);
        let fused = estimate_pose(&rgb, &ev, &lm, &b, &k, &c).unwrap();
        let single = ransac_pnp(&channel_correspondences(&kp, &lm, Channel::Rgb), &k, &c.ransac).unwrap();
        assert_eq!(fused.pose, single.pose);
        assert_eq!(fused.inliers_rgb, single.inliers);
        assert_eq!(fused.provenance, Provenance::GateDisabled);
    }

    #[test]
    fn json_line_round_trip() {
        let (lm, pose, k, b) = scene();
        let kp = project(&lm, &pose, &k, false);
        let r = estimate_pose(&pred(Channel::Rgb, kp.clone(), 1.0), &pred(Channel::Event, kp, 1.0), &lm, &b, &k, &cfg(true)).unwrap();
        let line = r.to_json_line();
        assert!(!line.contains('\n'));
        let back: FusionResult = serde_json::from_str(&line).unwrap();
        assert_eq!(back.mode, r.mode);
        assert_eq!(back.inliers_rgb, r.inliers_rgb);
        assert!((back.pose.t - r.pose.t).norm() < 1e-12);
    }
}
