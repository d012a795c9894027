//! Synthetic scenarios standing in for the renderer and the neural
//! predictors: trajectories, labels, condition-dependent keypoint noise,
//! MC samples, scripted detections and event-stream synthesis.

use nalgebra::{UnitQuaternion, Vector3};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{derive_box, BoundingBox, Detection};
use crate::event::{Event, EventBuffer, EventError, Polarity};
use crate::fusion::{ChannelPrediction, DEFAULT_MC_SAMPLES};
use crate::geometry::{project, AffineWarp, CameraIntrinsics, KeypointSet, LandmarkSet, Point2, Point3, Pose};
use crate::io::{FramePredictions, FrameRange};
use crate::pnp::Channel;
use crate::rng::keyed_rng;

const KEY_LANDMARKS: u64 = 0x4c41_4e44;
const KEY_DETECTIONS: u64 = 0x4445_5443;
const KEY_EVENT_NOISE: u64 = 0x4e4f_4953;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("invalid noise model: {0}")]
    Noise(&'static str),
    #[error("event synthesis needs at least 2 frames of equal size and a positive threshold")]
    Synthesis,
    #[error(transparent)]
    Event(#[from] EventError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceSetting {
    Close,
    Far,
}

impl DistanceSetting {
    /// Nominal camera-to-object range in meters.
    pub fn range_m(self) -> f64 {
        match self {
            DistanceSetting::Close => 0.8,
            DistanceSetting::Far => 1.2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DistanceSetting::Close => "close",
            DistanceSetting::Far => "far",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "close" => Some(DistanceSetting::Close),
            "far" => Some(DistanceSetting::Far),
            _ => None,
        }
    }
}

/// Keypoint predictor noise for one channel.
///
/// Corrupt frames displace `corrupt_fraction` of the keypoints by
/// `corrupt_offset` pixels, either along one shared direction (`clustered`)
/// or independently, and mark `invalid_fraction_corrupt` of them invalid.
/// `sporadic_rate` corrupts nominally clean frames at random.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub base_sigma: f64,
    pub corrupt_fraction: f64,
    pub corrupt_offset: f64,
    pub clustered: bool,
    pub mc_sigma_clean: f64,
    pub mc_sigma_corrupt: f64,
    pub invalid_fraction_corrupt: f64,
    pub sporadic_rate: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            base_sigma: 1.0,
            corrupt_fraction: 0.6,
            corrupt_offset: 250.0,
            clustered: true,
            mc_sigma_clean: 1.0,
            mc_sigma_corrupt: 6.0,
            invalid_fraction_corrupt: 0.2,
            sporadic_rate: 0.15,
        }
    }
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self {
            base_sigma: 0.0,
            corrupt_fraction: 0.0,
            corrupt_offset: 0.0,
            clustered: false,
            mc_sigma_clean: 0.0,
            mc_sigma_corrupt: 0.0,
            invalid_fraction_corrupt: 0.0,
            sporadic_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let nonneg = [self.base_sigma, self.corrupt_offset, self.mc_sigma_clean, self.mc_sigma_corrupt];
        if !nonneg.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(SimError::Noise("sigmas and offsets must be finite and >= 0"));
        }
        let fractions = [self.corrupt_fraction, self.invalid_fraction_corrupt, self.sporadic_rate];
        if !fractions.iter().all(|f| (0.0..=1.0).contains(f)) {
            return Err(SimError::Noise("fractions must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Scripted stand-in for the object detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionScript {
    /// Per-coordinate Gaussian jitter on clean frames.
    pub jitter_px: f64,
    /// Clean scores are uniform in `[clean_score_min, 1]`.
    pub clean_score_min: f64,
    /// Low-motion scores are uniform in `[collapse_score_min, collapse_score_max]`.
    pub collapse_score_min: f64,
    pub collapse_score_max: f64,
    /// Low-motion boxes drift by this fraction of the box width.
    pub collapse_shift: f64,
}

impl Default for DetectionScript {
    fn default() -> Self {
        Self {
            jitter_px: 2.0,
            clean_score_min: 0.985,
            collapse_score_min: 0.2,
            collapse_score_max: 0.9,
            collapse_shift: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub object: String,
    pub trajectory_index: u32,
    pub z: usize,
    /// Side of the cube the landmarks are drawn from, in meters.
    pub object_extent: f64,
    pub distance: DistanceSetting,
    pub fps: f64,
    pub n_frames: usize,
    /// Degrees per frame.
    pub rotation_rate: f64,
    /// Span of each x-axis step between y-axis revolutions, degrees.
    pub x_interval_deg: f64,
    /// Rotation-rate multiplier inside low-motion ranges.
    pub low_motion_factor: f64,
    pub harsh_ranges: Vec<FrameRange>,
    pub low_motion_ranges: Vec<FrameRange>,
    pub noise_rgb: NoiseModel,
    pub noise_event: NoiseModel,
    pub mc_samples: usize,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub intrinsics: CameraIntrinsics,
    /// Event-sensor pixels to RGB pixels.
    pub warp: AffineWarp,
    /// Mirror half of the landmarks across the y-z plane.
    pub symmetric: bool,
    pub detection: DetectionScript,
    pub contrast_threshold: f64,
    pub blob_sigma_px: f64,
    pub synthesize_events: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            object: "sat".into(),
            trajectory_index: 1,
            z: 18,
            object_extent: 0.3,
            distance: DistanceSetting::Close,
            fps: 30.0,
            n_frames: 300,
            rotation_rate: 1.0,
            x_interval_deg: 20.0,
            low_motion_factor: 0.0,
            harsh_ranges: Vec::new(),
            low_motion_ranges: Vec::new(),
            noise_rgb: NoiseModel::default(),
            noise_event: NoiseModel::default(),
            mc_samples: DEFAULT_MC_SAMPLES,
            seed: 0,
            width: 800,
            height: 720,
            intrinsics: CameraIntrinsics {
                fx: 1000.0,
                fy: 1000.0,
                cx: 400.0,
                cy: 360.0,
                dist: [0.0; 5],
            },
            warp: AffineWarp {
                sx: 1.02,
                sy: 1.02,
                tx: -6.0,
                ty: 4.0,
            },
            symmetric: false,
            detection: DetectionScript::default(),
            contrast_threshold: 0.2,
            blob_sigma_px: 4.0,
            synthesize_events: true,
        }
    }
}

impl ScenarioConfig {
    /// 300 frames, a 100-frame harsh window followed by a separate 100-frame
    /// low-motion window.
    pub fn fusion_benchmark(seed: u64) -> Self {
        Self {
            seed,
            n_frames: 300,
            harsh_ranges: vec![FrameRange::new(31, 130)],
            low_motion_ranges: vec![FrameRange::new(171, 270)],
            synthesize_events: false,
            ..Self::default()
        }
    }

    /// Harsh and low-motion windows that overlap for 60 frames.
    pub fn confounding_benchmark(seed: u64) -> Self {
        Self {
            seed,
            trajectory_index: 2,
            n_frames: 300,
            harsh_ranges: vec![FrameRange::new(61, 220)],
            low_motion_ranges: vec![FrameRange::new(161, 240)],
            synthesize_events: false,
            ..Self::default()
        }
    }

    /// Both channels corrupt at once: the event channel collapses onto one
    /// large displaced cluster with high MC spread, the RGB channel has
    /// scattered outliers with moderate spread.
    pub fn clustered_outlier_fixture(seed: u64) -> Self {
        Self {
            seed,
            trajectory_index: 3,
            n_frames: 60,
            harsh_ranges: vec![FrameRange::new(11, 50)],
            low_motion_ranges: vec![FrameRange::new(11, 50)],
            low_motion_factor: 1.0,
            noise_rgb: NoiseModel {
                corrupt_fraction: 0.5,
                corrupt_offset: 150.0,
                clustered: false,
                mc_sigma_corrupt: 3.0,
                invalid_fraction_corrupt: 0.0,
                sporadic_rate: 0.0,
                ..NoiseModel::default()
            },
            noise_event: NoiseModel {
                corrupt_fraction: 14.0 / 18.0,
                corrupt_offset: 250.0,
                clustered: true,
                mc_sigma_corrupt: 8.0,
                invalid_fraction_corrupt: 2.0 / 18.0,
                sporadic_rate: 0.0,
                ..NoiseModel::default()
            },
            synthesize_events: false,
            ..Self::default()
        }
    }

    pub fn sequence_name(&self) -> String {
        format!("{}-{}-{}", self.object, self.trajectory_index, self.distance.as_str())
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad(format!("fps must be > 0, got {}", self.fps));
        }
        if self.z < 4 {
            return bad(format!("need at least 4 landmarks, got {}", self.z));
        }
        if self.n_frames == 0 {
            return bad("n_frames must be > 0".into());
        }
        if !(self.rotation_rate > 0.0 && self.x_interval_deg > 0.0 && self.object_extent > 0.0) {
            return bad("rotation_rate, x_interval_deg and object_extent must be > 0".into());
        }
        if !(self.low_motion_factor >= 0.0) {
            return bad("low_motion_factor must be >= 0".into());
        }
        if self.mc_samples < 2 {
            return bad("mc_samples must be >= 2".into());
        }
        if !(self.contrast_threshold > 0.0 && self.blob_sigma_px > 0.0) {
            return bad("contrast_threshold and blob_sigma_px must be > 0".into());
        }
        for r in self.harsh_ranges.iter().chain(&self.low_motion_ranges) {
            if !r.within(self.n_frames) {
                return bad(format!("range [{}, {}] outside [1, {}]", r.start, r.end, self.n_frames));
            }
        }
        self.intrinsics.validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.warp.validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.noise_rgb.validate()?;
        self.noise_event.validate()
    }

    pub fn is_harsh(&self, frame: usize) -> bool {
        self.harsh_ranges.iter().any(|r| r.contains(frame))
    }

    pub fn is_low_motion(&self, frame: usize) -> bool {
        self.low_motion_ranges.iter().any(|r| r.contains(frame))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrameCondition {
    pub harsh: bool,
    pub low_motion: bool,
}

impl FrameCondition {
    /// Whether this condition corrupts `channel`: harsh lighting hits RGB,
    /// low motion hits events.
    pub fn corrupts(&self, channel: Channel) -> bool {
        match channel {
            Channel::Rgb => self.harsh,
            Channel::Event => self.low_motion,
        }
    }
}

/// Ground truth for one frame; keypoints are in RGB pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub frame: usize,
    pub pose: Pose,
    pub keypoints: KeypointSet,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default)]
    pub condition: FrameCondition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub landmarks: LandmarkSet,
    /// Pose before the first increment, used for the first intensity frame.
    pub initial_pose: Pose,
    pub labels: Vec<FrameLabel>,
}

/// (y angle, x angle) in degrees after each of `0..=n_frames` increments.
pub fn trajectory_angles(cfg: &ScenarioConfig) -> Vec<(f64, f64)> {
    let ny = (360.0 / cfg.rotation_rate).round().max(1.0) as usize;
    let nx = (cfg.x_interval_deg / cfg.rotation_rate).round().max(1.0) as usize;
    let mut out = Vec::with_capacity(cfg.n_frames + 1);
    let (mut ay, mut ax) = (0.0, 0.0);
    out.push((ay, ax));
    for n in 1..=cfg.n_frames {
        let step = if cfg.is_low_motion(n) {
            cfg.rotation_rate * cfg.low_motion_factor
        } else {
            cfg.rotation_rate
        };
        if (n - 1) % (ny + nx) < ny {
            ay += step;
        } else {
            ax += step;
        }
        out.push((ay, ax));
    }
    out
}

/// Object pose for the given accumulated angles: `Ry(ay) Rx(ax) Rz(90°)`
/// at the configured range along the optical axis.
pub fn pose_from_angles(cfg: &ScenarioConfig, ay: f64, ax: f64) -> Pose {
    let q = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), ay.to_radians())
        * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), ax.to_radians())
        * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
    Pose::new(q, Point3::new(0.0, 0.0, cfg.distance.range_m()))
}

pub fn generate_landmarks(cfg: &ScenarioConfig) -> LandmarkSet {
    let mut rng = keyed_rng(cfg.seed, &[KEY_LANDMARKS]);
    let h = 0.5 * cfg.object_extent;
    let draw = |rng: &mut ChaCha8Rng| Point3::new(rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h));
    let points = if cfg.symmetric {
        let half: Vec<Point3> = (0..cfg.z.div_ceil(2)).map(|_| draw(&mut rng)).collect();
        let mut pts = half.clone();
        pts.extend(half.iter().map(|p| Point3::new(-p.x, p.y, p.z)));
        pts.truncate(cfg.z);
        pts
    } else {
        (0..cfg.z).map(|_| draw(&mut rng)).collect()
    };
    LandmarkSet::new(points).expect("z >= 4 checked by validate")
}

pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario, SimError> {
    cfg.validate()?;
    let landmarks = generate_landmarks(cfg);
    let angles = trajectory_angles(cfg);
    let initial_pose = pose_from_angles(cfg, angles[0].0, angles[0].1);
    let mut labels = Vec::with_capacity(cfg.n_frames);
    for (n, &(ay, ax)) in angles.iter().enumerate().skip(1) {
        let pose = pose_from_angles(cfg, ay, ax);
        let keypoints = project(&landmarks, &pose, &cfg.intrinsics, cfg.intrinsics.has_distortion());
        let bbox = derive_box(&keypoints, 0.10).map_err(|e| SimError::Config(format!("frame {n}: {e}")))?;
        labels.push(FrameLabel {
            frame: n,
            pose,
            keypoints,
            bbox,
            condition: FrameCondition {
                harsh: cfg.is_harsh(n),
                low_motion: cfg.is_low_motion(n),
            },
        });
    }
    Ok(Scenario {
        config: cfg.clone(),
        landmarks,
        initial_pose,
        labels,
    })
}

fn channel_key(channel: Channel) -> u64 {
    match channel {
        Channel::Rgb => 1,
        Channel::Event => 2,
    }
}

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated")
}

/// Simulated keypoint regressor output for one frame and channel.
pub fn simulate_prediction(
    truth: &KeypointSet,
    corrupt: bool,
    model: &NoiseModel,
    seed: u64,
    frame: usize,
    channel: Channel,
    mc_samples: usize,
) -> ChannelPrediction {
    let mut rng = keyed_rng(seed, &[frame as u64, channel_key(channel)]);
    let sporadic = rng.random::<f64>() < model.sporadic_rate;
    let corrupt = corrupt || sporadic;
    let base = gaussian(model.base_sigma);
    let mut kp = truth.clone();
    for (p, v) in kp.points.iter_mut().zip(&kp.valid) {
        if *v {
            *p += Point2::new(base.sample(&mut rng), base.sample(&mut rng));
        }
    }
    if corrupt {
        let valid_ids: Vec<usize> = (0..kp.len()).filter(|&i| kp.valid[i]).collect();
        let z = kp.len();
        let nd = ((model.corrupt_fraction * z as f64).round() as usize).min(valid_ids.len());
        let picked = index::sample(&mut rng, valid_ids.len(), nd).into_vec();
        let displaced: Vec<usize> = picked.iter().map(|&i| valid_ids[i]).collect();
        let shared = rng.random_range(0.0..std::f64::consts::TAU);
        for &i in &displaced {
            let a = if model.clustered {
                shared
            } else {
                rng.random_range(0.0..std::f64::consts::TAU)
            };
            kp.points[i] += Point2::new(a.cos(), a.sin()) * model.corrupt_offset;
        }
        let ni = (model.invalid_fraction_corrupt * z as f64).round() as usize;
        let mut rest: Vec<usize> = valid_ids.iter().copied().filter(|i| !displaced.contains(i)).collect();
        if rest.len() < ni {
            rest.extend(&displaced);
        }
        for j in index::sample(&mut rng, rest.len(), ni.min(rest.len())) {
            kp.valid[rest[j]] = false;
        }
    }
    let mc = gaussian(if corrupt { model.mc_sigma_corrupt } else { model.mc_sigma_clean });
    let samples = (0..mc_samples)
        .map(|_| {
            let mut s = kp.clone();
            for (p, v) in s.points.iter_mut().zip(&s.valid) {
                if *v {
                    *p += Point2::new(mc.sample(&mut rng), mc.sample(&mut rng));
                }
            }
            s
        })
        .collect();
    ChannelPrediction {
        channel,
        keypoints: kp,
        mc_samples: samples,
    }
}

/// Per-frame predictions for both channels. Event predictions are in
/// event-sensor pixels, as a network on unaligned event frames would emit.
pub fn simulate_predictions(scn: &Scenario) -> Vec<FramePredictions> {
    let cfg = &scn.config;
    let to_event = cfg.warp.inverse();
    scn.labels
        .iter()
        .map(|l| {
            let truth_event = l.keypoints.map_valid(|p| Some(to_event.apply(p)));
            FramePredictions {
                frame: l.frame,
                rgb: simulate_prediction(
                    &l.keypoints,
                    l.condition.corrupts(Channel::Rgb),
                    &cfg.noise_rgb,
                    cfg.seed,
                    l.frame,
                    Channel::Rgb,
                    cfg.mc_samples,
                ),
                event: simulate_prediction(
                    &truth_event,
                    l.condition.corrupts(Channel::Event),
                    &cfg.noise_event,
                    cfg.seed,
                    l.frame,
                    Channel::Event,
                    cfg.mc_samples,
                ),
            }
        })
        .collect()
}

/// Detector stand-in: jittered ground-truth boxes with high scores, and
/// drifting low-score boxes during low motion.
pub fn scripted_detections(scn: &Scenario) -> Vec<Detection> {
    let script = &scn.config.detection;
    let jitter = gaussian(script.jitter_px);
    scn.labels
        .iter()
        .map(|l| {
            let mut rng = keyed_rng(scn.config.seed, &[l.frame as u64, KEY_DETECTIONS]);
            let b = l.bbox;
            if l.condition.low_motion {
                let score = rng.random_range(script.collapse_score_min..=script.collapse_score_max);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                Detection {
                    bbox: b.translated(sign * script.collapse_shift * b.width(), 0.0),
                    score,
                }
            } else {
                let score = rng.random_range(script.clean_score_min..=1.0);
                let mut j = || jitter.sample(&mut rng);
                let (x0, y0, x1, y1) = (b.x_min + j(), b.y_min + j(), b.x_max + j(), b.y_max + j());
                let bbox = BoundingBox::new(x0, y0, x1.max(x0 + 1.0), y1.max(y0 + 1.0)).unwrap_or(b);
                Detection { bbox, score }
            }
        })
        .collect()
}

/// Luminance grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LumaFrame {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl LumaFrame {
    pub fn constant(width: u32, height: u32, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[y as usize * self.width as usize + x as usize]
    }
}

/// Gaussian blobs on a dim background at each valid keypoint.
pub fn render_keypoints(kps: &KeypointSet, width: u32, height: u32, sigma: f64) -> LumaFrame {
    let mut f = LumaFrame::constant(width, height, 0.1);
    let r = (3.0 * sigma).ceil() as i64;
    for (_, p) in kps.iter_valid() {
        let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
        for y in (cy - r).max(0)..=(cy + r).min(height as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(width as i64 - 1) {
                let d2 = (x as f64 - p.x).powi(2) + (y as f64 - p.y).powi(2);
                f.data[y as usize * width as usize + x as usize] += (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    f
}

/// A bright vertical bar sweeping right at `speed` pixels per frame.
pub fn moving_bar_frames(width: u32, height: u32, n: usize, bar_width: f64, speed: f64) -> Vec<LumaFrame> {
    (0..n)
        .map(|k| {
            let left = k as f64 * speed;
            let mut f = LumaFrame::constant(width, height, 0.2);
            for x in 0..width {
                // Anti-aliased coverage of pixel [x, x+1).
                let cover = ((x as f64 + 1.0).min(left + bar_width) - (x as f64).max(left)).clamp(0.0, 1.0);
                if cover > 0.0 {
                    for y in 0..height {
                        f.data[y as usize * width as usize + x as usize] = 0.2 + 0.8 * cover;
                    }
                }
            }
            f
        })
        .collect()
}

/// Frame timestamp in microseconds for frame index `k` (frame 0 at `t0_us`).
pub fn frame_time_us(t0_us: u64, k: usize, fps: f64) -> u64 {
    t0_us + (k as f64 * 1e6 / fps).round() as u64
}

/// Threshold-crossing event generator over linearly interpolated
/// log-intensity. Frame `k` is taken at [`frame_time_us`]`(t0_us, k, fps)`.
pub fn synthesize_events(frames: &[LumaFrame], contrast_threshold: f64, fps: f64, t0_us: u64) -> Result<EventBuffer, SimError> {
    if frames.len() < 2 || !(contrast_threshold > 0.0) || !(fps > 0.0) {
        return Err(SimError::Synthesis);
    }
    let (w, h) = (frames[0].width, frames[0].height);
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(SimError::Synthesis);
    }
    let c = contrast_threshold;
    let eps = 1e-9 * c;
    let times: Vec<u64> = (0..frames.len()).map(|k| frame_time_us(t0_us, k, fps)).collect();
    let logs: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| f.data.iter().map(|v| v.max(1e-6).ln()).collect())
        .collect();
    let mut events = Vec::new();
    for pix in 0..(w as usize * h as usize) {
        let (x, y) = ((pix % w as usize) as u16, (pix / w as usize) as u16);
        let mut reference = logs[0][pix];
        for k in 0..frames.len() - 1 {
            let (l0, l1) = (logs[k][pix], logs[k + 1][pix]);
            if l0 == l1 {
                continue;
            }
            let span = (times[k + 1] - times[k]) as f64;
            let at = |level: f64| times[k] + (((level - l0) / (l1 - l0)).clamp(0.0, 1.0) * span).round() as u64;
            if l1 > l0 {
                while l1 - reference >= c - eps {
                    reference += c;
                    events.push(Event::new(at(reference), x, y, Polarity::On));
                }
            } else {
                while reference - l1 >= c - eps {
                    reference -= c;
                    events.push(Event::new(at(reference), x, y, Polarity::Off));
                }
            }
        }
    }
    events.sort_by_key(|e| (e.t, e.y, e.x));
    Ok(EventBuffer::new(w, h, events)?)
}

/// Events for a scenario, rendered in event-sensor pixels from frame 0
/// (the initial pose) to the last frame.
pub fn scenario_events(scn: &Scenario, t0_us: u64) -> Result<EventBuffer, SimError> {
    let cfg = &scn.config;
    let to_event = cfg.warp.inverse();
    let poses = std::iter::once(&scn.initial_pose).chain(scn.labels.iter().map(|l| &l.pose));
    let frames: Vec<LumaFrame> = poses
        .map(|pose| {
            let kp = project(&scn.landmarks, pose, &cfg.intrinsics, cfg.intrinsics.has_distortion());
            let ev = kp.map_valid(|p| Some(to_event.apply(p)));
            render_keypoints(&ev, cfg.width, cfg.height, cfg.blob_sigma_px)
        })
        .collect();
    synthesize_events(&frames, cfg.contrast_threshold, cfg.fps, t0_us)
}

/// Convex or simple quadrilateral in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quad(pub [Point2; 4]);

impl Quad {
    /// Even-odd rule.
    pub fn contains(&self, p: &Point2) -> bool {
        let v = &self.0;
        let mut inside = false;
        let mut j = 3;
        for i in 0..4 {
            if (v[i].y > p.y) != (v[j].y > p.y) && p.x < (v[j].x - v[i].x) * (p.y - v[i].y) / (v[j].y - v[i].y) + v[i].x {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        self.0.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
        )
    }

    /// A random quadrilateral inside a `width` x `height` sensor.
    pub fn random(rng: &mut impl Rng, width: u32, height: u32) -> Self {
        let (w, h) = (width as f64, height as f64);
        let cx = rng.random_range(0.2 * w..0.8 * w);
        let cy = rng.random_range(0.2 * h..0.8 * h);
        let mut pts = [Point2::zeros(); 4];
        for (k, p) in pts.iter_mut().enumerate() {
            let a = (k as f64 + rng.random_range(0.1..0.9)) * std::f64::consts::FRAC_PI_2;
            let r = rng.random_range(0.05..0.2) * w.min(h);
            *p = Point2::new((cx + r * a.cos()).clamp(0.0, w - 1.0), (cy + r * a.sin()).clamp(0.0, h - 1.0));
        }
        Quad(pts)
    }
}

fn noisy_events(
    buffer: &EventBuffer,
    add_rate: f64,
    remove_rate: f64,
    seed: u64,
    region: Option<&Quad>,
) -> Result<EventBuffer, SimError> {
    if !(add_rate >= 0.0 && remove_rate >= 0.0) {
        return Err(SimError::Noise("rates must be >= 0"));
    }
    let mut rng = keyed_rng(seed, &[KEY_EVENT_NOISE]);
    let inside = |e: &Event| region.is_none_or(|q| q.contains(&Point2::new(e.x as f64, e.y as f64)));
    let mut out: Vec<Event> = buffer
        .events()
        .iter()
        .filter(|e| !(remove_rate > 0.0 && inside(e) && rng.random::<f64>() < remove_rate))
        .copied()
        .collect();
    let n = buffer.len();
    if add_rate > 0.0 && n > 0 {
        let mean = add_rate * n as f64;
        let count = Normal::new(mean, mean.sqrt()).expect("finite").sample(&mut rng).round().max(0.0) as usize;
        let (t_lo, t_hi) = (buffer.events()[0].t, buffer.events()[n - 1].t);
        let (w, h) = (buffer.width() as f64, buffer.height() as f64);
        let (x0, y0, x1, y1) = region.map(|q| q.bounds()).unwrap_or((0.0, 0.0, w - 1.0, h - 1.0));
        let (x0, y0) = (x0.max(0.0), y0.max(0.0));
        let (x1, y1) = (x1.min(w - 1.0), y1.min(h - 1.0));
        let mut added = 0;
        let mut tries = 0;
        while added < count && tries < 100 * count.max(1) && x1 >= x0 && y1 >= y0 {
            tries += 1;
            let e = Event::new(
                rng.random_range(t_lo..=t_hi),
                rng.random_range(x0..=x1).round() as u16,
                rng.random_range(y0..=y1).round() as u16,
                if rng.random::<bool>() { Polarity::On } else { Polarity::Off },
            );
            if inside(&e) {
                out.push(e);
                added += 1;
            }
        }
    }
    Ok(EventBuffer::from_unsorted(buffer.width(), buffer.height(), out)?)
}

/// Seeded removal (each event with probability `remove_rate`) and addition
/// of about `add_rate` times the event count of uniformly placed events.
pub fn event_noise(buffer: &EventBuffer, add_rate: f64, remove_rate: f64, seed: u64) -> Result<EventBuffer, SimError> {
    noisy_events(buffer, add_rate, remove_rate, seed, None)
}

/// [`event_noise`] restricted to the interior of `quad`.
pub fn event_patch_noise(
    buffer: &EventBuffer,
    quad: &Quad,
    add_rate: f64,
    remove_rate: f64,
    seed: u64,
) -> Result<EventBuffer, SimError> {
    noisy_events(buffer, add_rate, remove_rate, seed, Some(quad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{uncertainty, Aggregation};
    use crate::geometry::{quat_angle, rotation_error_deg};

    fn small(n: usize) -> ScenarioConfig {
        ScenarioConfig {
            n_frames: n,
            synthesize_events: false,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn full_revolution_closes() {
        let scn = generate_scenario(&small(360)).unwrap();
        let last = scn.labels.last().unwrap();
        let d = quat_angle(scn.initial_pose.quaternion(), last.pose.quaternion()).unwrap();
        assert!(d < 1e-9, "{d}");
    }

    #[test]
    fn consecutive_poses_one_degree_apart() {
        let mut cfg = small(420);
        cfg.low_motion_ranges = vec![FrameRange::new(100, 130)];
        let scn = generate_scenario(&cfg).unwrap();
        let mut prev = scn.initial_pose;
        for l in &scn.labels {
            let d = rotation_error_deg(&prev, &l.pose);
            if l.condition.low_motion {
                assert!(d < 1e-9);
            } else {
                assert!((d - 1.0).abs() < 1e-9, "frame {} step {d}", l.frame);
            }
            prev = l.pose;
        }
    }

    #[test]
    fn labels_are_self_consistent() {
        let scn = generate_scenario(&small(50)).unwrap();
        for l in &scn.labels {
            let re = project(&scn.landmarks, &l.pose, &scn.config.intrinsics, false);
            assert_eq!(re, l.keypoints);
            for (_, p) in l.keypoints.iter_valid() {
                assert!(p.x > l.bbox.x_min && p.x < l.bbox.x_max && p.y > l.bbox.y_min && p.y < l.bbox.y_max);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(10);
        cfg.harsh_ranges = vec![FrameRange::new(5, 11)];
        assert!(generate_scenario(&cfg).is_err());
        let cfg = ScenarioConfig { fps: 0.0, ..small(10) };
        assert!(cfg.validate().is_err());
        let cfg = ScenarioConfig { z: 3, ..small(10) };
        assert!(cfg.validate().is_err());
        assert_eq!(small(1).sequence_name(), "sat-1-close");
    }

    #[test]
    fn zero_noise_returns_truth() {
        let scn = generate_scenario(&small(5)).unwrap();
        let truth = &scn.labels[0].keypoints;
        for corrupt in [false, true] {
            let p = simulate_prediction(truth, corrupt, &NoiseModel::zero(), 1, 1, Channel::Rgb, 8);
            assert_eq!(&p.keypoints, truth);
            assert_eq!(uncertainty(&p.mc_samples, Aggregation::Mean).unwrap(), 0.0);
        }
    }

    #[test]
    fn clustered_corruption_displaces_exact_count() {
        let scn = generate_scenario(&small(5)).unwrap();
        let truth = &scn.labels[0].keypoints;
        let model = NoiseModel {
            base_sigma: 0.0,
            corrupt_fraction: 0.33,
            corrupt_offset: 100.0,
            clustered: true,
            invalid_fraction_corrupt: 0.0,
            sporadic_rate: 0.0,
            ..NoiseModel::default()
        };
        let p = simulate_prediction(truth, true, &model, 7, 3, Channel::Event, 4);
        let offsets: Vec<Point2> = (0..truth.len())
            .map(|i| p.keypoints.points[i] - truth.points[i])
            .filter(|d| d.norm() > 1e-9)
            .collect();
        assert_eq!(offsets.len(), 6);
        for d in &offsets {
            assert!((d - offsets[0]).norm() < 1e-9);
            assert!((d.norm() - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mc_spread_ratio_tracks_sigma() {
        let scn = generate_scenario(&small(100)).unwrap();
        let model = NoiseModel {
            mc_sigma_clean: 1.5,
            mc_sigma_corrupt: 3.0,
            corrupt_fraction: 0.0,
            invalid_fraction_corrupt: 0.0,
            sporadic_rate: 0.0,
            ..NoiseModel::default()
        };
        let (mut clean, mut corrupt) = (0.0, 0.0);
        for l in &scn.labels {
            let a = simulate_prediction(&l.keypoints, false, &model, 3, l.frame, Channel::Rgb, 32);
            let b = simulate_prediction(&l.keypoints, true, &model, 3, l.frame, Channel::Rgb, 32);
            clean += uncertainty(&a.mc_samples, Aggregation::Mean).unwrap();
            corrupt += uncertainty(&b.mc_samples, Aggregation::Mean).unwrap();
        }
        let ratio = corrupt / clean;
        assert!((ratio - 2.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn predictions_are_deterministic_per_frame_and_channel() {
        let scn = generate_scenario(&small(4)).unwrap();
        let a = simulate_predictions(&scn);
        let b = simulate_predictions(&scn);
        assert_eq!(a, b);
        assert_ne!(a[0].rgb.keypoints, a[1].rgb.keypoints);
        let again = generate_scenario(&small(4)).unwrap();
        assert_eq!(scn, again);
    }

    #[test]
    fn scripted_detections_collapse_in_low_motion() {
        let mut cfg = small(40);
        cfg.low_motion_ranges = vec![FrameRange::new(10, 30)];
        let scn = generate_scenario(&cfg).unwrap();
        let dets = scripted_detections(&scn);
        for (l, d) in scn.labels.iter().zip(&dets) {
            let x = crate::detection::iou(&l.bbox, &d.bbox);
            if l.condition.low_motion {
                assert!(d.score <= 0.9 && x < 0.5, "frame {} iou {x}", l.frame);
            } else {
                assert!(d.score > 0.98 && x > 0.9, "frame {} iou {x}", l.frame);
            }
        }
    }

    fn single_pixel(values: &[f64]) -> Vec<LumaFrame> {
        values
            .iter()
            .map(|&v| LumaFrame {
                width: 1,
                height: 1,
                data: vec![v],
            })
            .collect()
    }

    #[test]
    fn synthesis_examples() {
        let flat = vec![LumaFrame::constant(4, 3, 0.5); 5];
        assert!(synthesize_events(&flat, 0.2, 30.0, 0).unwrap().is_empty());

        let c: f64 = 0.2;
        let frames = single_pixel(&[1.0, (3.0 * c).exp()]);
        let buf = synthesize_events(&frames, c, 30.0, 0).unwrap();
        assert_eq!(buf.len(), 3);
        assert!(buf.events().iter().all(|e| e.p == Polarity::On));
        assert_eq!(buf.events()[2].t, frame_time_us(0, 1, 30.0));

        let down = single_pixel(&[1.0, (-2.5 * c).exp()]);
        let buf = synthesize_events(&down, c, 30.0, 0).unwrap();
        assert_eq!(buf.len(), 2);
        assert!(buf.events().iter().all(|e| e.p == Polarity::Off));
        assert!(synthesize_events(&frames[..1], c, 30.0, 0).is_err());
    }

    #[test]
    fn doubling_fps_keeps_counts() {
        let (w, h) = (60, 4);
        let slow = moving_bar_frames(w, h, 11, 8.0, 4.0);
        let fast = moving_bar_frames(w, h, 21, 8.0, 2.0);
        let a = synthesize_events(&slow, 0.15, 30.0, 0).unwrap();
        let b = synthesize_events(&fast, 0.15, 60.0, 0).unwrap();
        assert!(!a.is_empty());
        let count = |buf: &EventBuffer| {
            let mut c = vec![0i64; (w * h) as usize];
            for e in buf.events() {
                c[e.y as usize * w as usize + e.x as usize] += 1;
            }
            c
        };
        for (ca, cb) in count(&a).iter().zip(count(&b)) {
            assert!((ca - cb).abs() <= 1, "{ca} vs {cb}");
        }
    }

    #[test]
    fn scenario_events_are_valid() {
        let mut cfg = small(6);
        cfg.synthesize_events = true;
        let scn = generate_scenario(&cfg).unwrap();
        let buf = scenario_events(&scn, 0).unwrap();
        assert!(!buf.is_empty());
        assert!(buf.events().windows(2).all(|w| w[0].t <= w[1].t));
        assert!(buf.events().last().unwrap().t <= frame_time_us(0, 6, 30.0));
    }

    fn some_events() -> EventBuffer {
        let ev = (0..2000u64)
            .map(|i| Event::new(i * 10, (i * 7 % 64) as u16, (i * 13 % 48) as u16, if i % 3 == 0 { Polarity::Off } else { Polarity::On }))
            .collect();
        EventBuffer::new(64, 48, ev).unwrap()
    }

    #[test]
    fn noise_examples() {
        let buf = some_events();
        assert_eq!(event_noise(&buf, 0.0, 0.0, 1).unwrap(), buf);
        assert!(event_noise(&buf, 0.0, 1.0, 1).unwrap().is_empty());
        let more = event_noise(&buf, 0.5, 0.0, 1).unwrap();
        assert!(more.len() > buf.len());
        assert_eq!(more, event_noise(&buf, 0.5, 0.0, 1).unwrap());
        assert!(event_noise(&buf, -1.0, 0.0, 1).is_err());
    }

    #[test]
    fn patch_noise_stays_inside() {
        let buf = some_events();
        let left = Quad([Point2::new(-0.5, -0.5), Point2::new(31.5, -0.5), Point2::new(31.5, 47.5), Point2::new(-0.5, 47.5)]);
        let out = event_patch_noise(&buf, &left, 0.5, 0.0, 4).unwrap();
        let mut orig: Vec<Event> = buf.events().to_vec();
        let mut added = Vec::new();
        for e in out.events() {
            if let Some(pos) = orig.iter().position(|o| o == e) {
                orig.swap_remove(pos);
            } else {
                added.push(*e);
            }
        }
        assert!(orig.is_empty());
        assert!(!added.is_empty());
        assert!(added.iter().all(|e| (e.x as u32) < 64 / 2));
        let removed = event_patch_noise(&buf, &left, 0.0, 1.0, 4).unwrap();
        assert!(removed.events().iter().all(|e| e.x > 31));
    }
}
