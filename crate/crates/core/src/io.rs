//! Sequence bundles on disk, replay, pipeline orchestration and reports.
//!
//! A bundle directory holds:
//!
//! ```text
//! meta.json          SequenceMeta
//! intrinsics.json    CameraIntrinsics of the RGB camera
//! warp.json          AffineWarp, event pixels -> RGB pixels
//! landmarks.json     LandmarkSet
//! labels.jsonl       one FrameLabel per line
//! events.bin         16-byte little-endian event records
//! predictions.jsonl  optional, one FramePredictions per line
//! detections.csv     optional, frame,x_min,y_min,x_max,y_max,score
//! scenario.json      optional, the ScenarioConfig that produced the bundle
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{self, derive_box, BoundingBox, Detection, DetectionError, DetectionSmoother};
use crate::event::{self, accumulate_frame, Event, EventBuffer, EventError, EventFrame, PolarityMode};
use crate::fusion::{estimate_pose, estimate_single, ChannelPrediction, FusionConfig, FusionError, FusionMode, FusionResult, Provenance};
use crate::geometry::{undistort_points, warp_points, AffineWarp, CameraIntrinsics, KeypointSet, LandmarkSet, Pose};
use crate::metrics::{self, frame_error, success_rates, FrameError, MethodRates, MetricsError, RatesBySequence, SuccessConfig, Table};
use crate::rng::derive_seed;
use crate::simkit::{self, frame_time_us, DistanceSetting, FrameLabel, Scenario, ScenarioConfig, SimError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("invalid sequence name {0:?}; expected <object>-<trajectory_index>-<close|far>")]
    SequenceName(String),
    #[error("invalid bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Inclusive, 1-based frame interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameRange {
    pub start: usize,
    pub end: usize,
}

impl FrameRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }

    pub fn within(&self, n_frames: usize) -> bool {
        self.start >= 1 && self.start <= self.end && self.end <= n_frames
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> {
        self.start..=self.end
    }
}

/// Both channels' predictions for one frame. Event keypoints are in
/// event-sensor pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePredictions {
    pub frame: usize,
    pub rgb: ChannelPrediction,
    pub event: ChannelPrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub name: String,
    pub object_id: String,
    pub trajectory_index: u32,
    pub distance: DistanceSetting,
    pub fps: f64,
    pub n_frames: usize,
    pub width: u32,
    pub height: u32,
    pub harsh_ranges: Vec<FrameRange>,
    pub low_motion_ranges: Vec<FrameRange>,
    pub z: usize,
    /// Timestamp of frame 0; frame `n` ends at `t0_us + round(n * 1e6 / fps)`.
    #[serde(default)]
    pub t0_us: u64,
    /// RGB image paths, carried for provenance only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rgb_frames: Vec<String>,
}

/// Splits `<object>-<trajectory_index>-<distance>`.
pub fn parse_sequence_name(name: &str) -> Result<(String, u32, DistanceSetting), IoError> {
    let err = || IoError::SequenceName(name.to_string());
    let mut parts = name.rsplitn(3, '-');
    let distance = parts.next().and_then(DistanceSetting::parse).ok_or_else(err)?;
    let index: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(err)?;
    let object = parts.next().ok_or_else(err)?;
    if object.is_empty() || !object.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(err());
    }
    Ok((object.to_string(), index, distance))
}

impl SequenceMeta {
    pub fn validate(&self) -> Result<(), IoError> {
        let (object, index, distance) = parse_sequence_name(&self.name)?;
        if object != self.object_id || index != self.trajectory_index || distance != self.distance {
            return Err(IoError::Bundle(format!("name {:?} disagrees with its fields", self.name)));
        }
        if !(self.fps > 0.0) {
            return Err(IoError::Bundle(format!("fps must be > 0, got {}", self.fps)));
        }
        for r in self.harsh_ranges.iter().chain(&self.low_motion_ranges) {
            if !r.within(self.n_frames) {
                return Err(IoError::Bundle(format!("range [{}, {}] outside [1, {}]", r.start, r.end, self.n_frames)));
            }
        }
        Ok(())
    }

    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        Self {
            name: cfg.sequence_name(),
            object_id: cfg.object.clone(),
            trajectory_index: cfg.trajectory_index,
            distance: cfg.distance,
            fps: cfg.fps,
            n_frames: cfg.n_frames,
            width: cfg.width,
            height: cfg.height,
            harsh_ranges: cfg.harsh_ranges.clone(),
            low_motion_ranges: cfg.low_motion_ranges.clone(),
            z: cfg.z,
            t0_us: 0,
            rgb_frames: Vec::new(),
        }
    }

    fn collect(ranges: &[FrameRange]) -> BTreeSet<usize> {
        ranges.iter().flat_map(|r| r.frames()).collect()
    }

    pub fn harsh_frames(&self) -> BTreeSet<usize> {
        Self::collect(&self.harsh_ranges)
    }

    pub fn low_motion_frames(&self) -> BTreeSet<usize> {
        Self::collect(&self.low_motion_ranges)
    }

    /// Frames under harsh lighting or low motion.
    pub fn adverse_frames(&self) -> BTreeSet<usize> {
        let mut s = self.harsh_frames();
        s.extend(self.low_motion_frames());
        s
    }

    /// End of frame `n`'s window; `frame_time(0)` opens the first window.
    pub fn frame_time(&self, n: usize) -> u64 {
        frame_time_us(self.t0_us, n, self.fps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBundle {
    pub meta: SequenceMeta,
    pub intrinsics: CameraIntrinsics,
    pub warp: AffineWarp,
    pub landmarks: LandmarkSet,
    pub labels: Vec<FrameLabel>,
    pub events: EventBuffer,
    pub predictions: Option<Vec<FramePredictions>>,
    pub detections: Option<Vec<Detection>>,
    pub scenario: Option<ScenarioConfig>,
}

impl SequenceBundle {
    pub fn validate(&self) -> Result<(), IoError> {
        self.meta.validate()?;
        if self.labels.len() != self.meta.n_frames {
            return Err(IoError::Bundle(format!("{} labels for {} frames", self.labels.len(), self.meta.n_frames)));
        }
        if self.landmarks.len() != self.meta.z {
            return Err(IoError::Bundle(format!("{} landmarks but z = {}", self.landmarks.len(), self.meta.z)));
        }
        if let Some(d) = &self.detections {
            if d.len() != self.meta.n_frames {
                return Err(IoError::Bundle(format!("{} detections for {} frames", d.len(), self.meta.n_frames)));
            }
        }
        Ok(())
    }

    /// Predictions for frame `n`, if present.
    pub fn predictions_for(&self, n: usize) -> Option<&FramePredictions> {
        let preds = self.predictions.as_ref()?;
        preds.get(n.checked_sub(1)?).filter(|p| p.frame == n).or_else(|| preds.iter().find(|p| p.frame == n))
    }
}

/// Labels, simulated predictions, scripted detections and (optionally)
/// synthesized events for a scenario.
pub fn bundle_from_scenario(scn: &Scenario) -> Result<SequenceBundle, IoError> {
    let cfg = &scn.config;
    let meta = SequenceMeta::from_config(cfg);
    let events = if cfg.synthesize_events {
        simkit::scenario_events(scn, meta.t0_us)?
    } else {
        EventBuffer::empty(cfg.width, cfg.height)
    };
    Ok(SequenceBundle {
        meta,
        intrinsics: cfg.intrinsics,
        warp: cfg.warp,
        landmarks: scn.landmarks.clone(),
        labels: scn.labels.clone(),
        events,
        predictions: Some(simkit::simulate_predictions(scn)),
        detections: Some(simkit::scripted_detections(scn)),
        scenario: Some(cfg.clone()),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let f = File::create(path).map_err(file_err(path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        line: 0,
        source,
    })?;
    w.write_all(b"\n").map_err(file_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let f = File::open(path).map_err(file_err(path))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        line: 0,
        source,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IoError> {
    let f = File::create(path).map_err(file_err(path))?;
    let mut w = BufWriter::new(f);
    for (i, item) in items.iter().enumerate() {
        serde_json::to_writer(&mut w, item).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        w.write_all(b"\n").map_err(file_err(path))?;
    }
    w.flush().map_err(file_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let f = File::open(path).map_err(file_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(file_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn write_bundle(dir: &Path, b: &SequenceBundle) -> Result<(), IoError> {
    b.validate()?;
    fs::create_dir_all(dir).map_err(file_err(dir))?;
    write_json(&dir.join("meta.json"), &b.meta)?;
    write_json(&dir.join("intrinsics.json"), &b.intrinsics)?;
    write_json(&dir.join("warp.json"), &b.warp)?;
    write_json(&dir.join("landmarks.json"), &b.landmarks)?;
    write_jsonl(&dir.join("labels.jsonl"), &b.labels)?;
    let ev = dir.join("events.bin");
    b.events
        .write_binary(BufWriter::new(File::create(&ev).map_err(file_err(&ev))?))?;
    if let Some(p) = &b.predictions {
        write_jsonl(&dir.join("predictions.jsonl"), p)?;
    }
    if let Some(d) = &b.detections {
        detection::save_detections(&dir.join("detections.csv"), d)?;
    }
    if let Some(s) = &b.scenario {
        write_json(&dir.join("scenario.json"), s)?;
    }
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<SequenceBundle, IoError> {
    let meta: SequenceMeta = read_json(&dir.join("meta.json"))?;
    let ev = dir.join("events.bin");
    let events = if ev.exists() {
        EventBuffer::read_binary(BufReader::new(File::open(&ev).map_err(file_err(&ev))?), meta.width, meta.height)?
    } else {
        EventBuffer::empty(meta.width, meta.height)
    };
    let opt = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
    let detections = match opt("detections.csv") {
        Some(p) => {
            let rows = detection::load_detections(&p)?;
            for (i, (f, _)) in rows.iter().enumerate() {
                if *f != i + 1 {
                    return Err(IoError::Bundle(format!("detections.csv: expected frame {}, found {f}", i + 1)));
                }
            }
            Some(rows.into_iter().map(|(_, d)| d).collect())
        }
        None => None,
    };
    let b = SequenceBundle {
        intrinsics: read_json(&dir.join("intrinsics.json"))?,
        warp: read_json(&dir.join("warp.json"))?,
        landmarks: read_json(&dir.join("landmarks.json"))?,
        labels: read_jsonl(&dir.join("labels.jsonl"))?,
        events,
        predictions: opt("predictions.jsonl").map(|p| read_jsonl(&p)).transpose()?,
        detections,
        scenario: opt("scenario.json").map(|p| read_json(&p)).transpose()?,
        meta,
    };
    b.validate()?;
    Ok(b)
}

/// One replayed frame: the events of `(window_start, window_end]`, their
/// accumulated frame and the frame's labels.
#[derive(Debug, Clone)]
pub struct ReplayFrame<'a> {
    pub frame: usize,
    pub window_start: u64,
    pub window_end: u64,
    pub events: &'a [Event],
    pub event_frame: EventFrame,
    pub label: &'a FrameLabel,
}

/// Fixed-rate consumer over a bundle's event stream.
pub struct Replay<'a> {
    bundle: &'a SequenceBundle,
    mode: PolarityMode,
    next: usize,
    ignored: usize,
}

impl<'a> Replay<'a> {
    /// Events outside `(frame_time(0), frame_time(n_frames)]`.
    pub fn ignored_events(&self) -> usize {
        self.ignored
    }
}

pub fn replay(bundle: &SequenceBundle, mode: PolarityMode) -> Replay<'_> {
    let meta = &bundle.meta;
    let (lo, hi) = (meta.frame_time(0), meta.frame_time(meta.n_frames));
    let inside = event::slice_window(bundle.events.events(), lo, hi).len();
    let ignored = bundle.events.len() - inside;
    if ignored > 0 {
        log::warn!("{}: {ignored} events outside the labelled time range ignored", meta.name);
    }
    Replay {
        bundle,
        mode,
        next: 1,
        ignored,
    }
}

impl<'a> Iterator for Replay<'a> {
    type Item = ReplayFrame<'a>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.bundle;
        let n = self.next;
        if n > b.meta.n_frames {
            return None;
        }
        self.next += 1;
        let (t0, t1) = (b.meta.frame_time(n - 1), b.meta.frame_time(n));
        let events = b.events.slice_window(t0, t1);
        let event_frame = accumulate_frame(events, b.events.width(), b.events.height(), self.mode)
            .expect("buffer events are in bounds")
            .with_window(t0, t1);
        Some(ReplayFrame {
            frame: n,
            window_start: t0,
            window_end: t1,
            events,
            event_frame,
            label: &b.labels[n - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Fusion,
    FusionNoGate,
    RgbOnly,
    EventOnly,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 4] = [PipelineMode::Fusion, PipelineMode::FusionNoGate, PipelineMode::RgbOnly, PipelineMode::EventOnly];

    pub fn as_str(&self) -> &'static str {
        match self {
            PipelineMode::Fusion => "fusion",
            PipelineMode::FusionNoGate => "fusion_no_gate",
            PipelineMode::RgbOnly => "rgb_only",
            PipelineMode::EventOnly => "event_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl std::fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub fusion: FusionConfig,
    /// Base seed; frame `n` runs RANSAC with `derive_seed(seed, [n])`.
    pub seed: u64,
    /// Reject detector seeds scoring below this and defer smoothing.
    pub seed_score_min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOutput {
    pub frame: usize,
    pub result: FusionResult,
    pub error: FrameError,
    /// Smoothed detection box used for the CMKD threshold.
    #[serde(rename = "box")]
    pub bbox: Option<BoundingBox>,
}

fn map_prediction(p: &ChannelPrediction, f: impl Fn(&KeypointSet) -> KeypointSet) -> ChannelPrediction {
    ChannelPrediction {
        channel: p.channel,
        keypoints: f(&p.keypoints),
        mc_samples: p.mc_samples.iter().map(&f).collect(),
    }
}

fn missing_result(mode: PipelineMode, reason: &str) -> FusionResult {
    FusionResult {
        pose: Pose::identity(),
        degenerate: true,
        mode: match mode {
            PipelineMode::RgbOnly => FusionMode::RgbOnly,
            PipelineMode::EventOnly => FusionMode::EventOnly,
            _ => FusionMode::Fused,
        },
        provenance: match mode {
            PipelineMode::Fusion => Provenance::Consistent,
            PipelineMode::FusionNoGate => Provenance::GateDisabled,
            _ => Provenance::Forced,
        },
        fallback: false,
        cmkd: None,
        threshold_e: 0.0,
        u_rgb: None,
        u_event: None,
        inliers_rgb: Vec::new(),
        inliers_event: Vec::new(),
        reason: Some(reason.to_string()),
    }
}

/// Runs one method over every frame: detection smoothing, event-to-RGB
/// keypoint warp, undistortion, pose estimation and scoring.
pub fn run_pipeline(bundle: &SequenceBundle, mode: PipelineMode, cfg: &PipelineConfig) -> Result<Vec<FrameOutput>, IoError> {
    bundle.validate()?;
    let k = &bundle.intrinsics;
    let z = bundle.landmarks.len();
    let mut smoother = DetectionSmoother::new(cfg.seed_score_min);
    let mut out = Vec::with_capacity(bundle.meta.n_frames);
    for label in &bundle.labels {
        let n = label.frame;
        let bbox = bundle.detections.as_ref().map(|d| smoother.step(d[n - 1]).bbox);
        let preds = bundle.predictions_for(n);
        let (result, bbox) = match preds {
            Some(p) if p.rgb.keypoints.len() == z && p.event.keypoints.len() == z => {
                let undistort = |kp: &KeypointSet| {
                    if k.has_distortion() {
                        undistort_points(kp, k)
                    } else {
                        kp.clone()
                    }
                };
                let rgb = map_prediction(&p.rgb, undistort);
                let event = map_prediction(&p.event, |kp| undistort(&warp_points(kp, &bundle.warp)));
                let bbox = match bbox {
                    Some(b) => Some(b),
                    None => derive_box(&rgb.keypoints, 0.10).or_else(|_| derive_box(&event.keypoints, 0.10)).ok(),
                };
                match bbox {
                    Some(b) => {
                        let mut fc = cfg.fusion;
                        fc.ransac.seed = derive_seed(cfg.seed, &[n as u64]);
                        let r = match mode {
                            PipelineMode::Fusion => {
                                fc.gate = true;
                                estimate_pose(&rgb, &event, &bundle.landmarks, &b, k, &fc)?
                            }
                            PipelineMode::FusionNoGate => {
                                fc.gate = false;
                                estimate_pose(&rgb, &event, &bundle.landmarks, &b, k, &fc)?
                            }
                            PipelineMode::RgbOnly => estimate_single(&rgb, Some(&event), &bundle.landmarks, &b, k, &fc)?,
                            PipelineMode::EventOnly => estimate_single(&event, Some(&rgb), &bundle.landmarks, &b, k, &fc)?,
                        };
                        (r, Some(b))
                    }
                    None => (missing_result(mode, "no_box"), None),
                }
            }
            Some(_) => (missing_result(mode, "prediction_size_mismatch"), bbox),
            None => (missing_result(mode, "missing_predictions"), bbox),
        };
        let error = frame_error(n, &label.pose, &result.pose, result.degenerate);
        out.push(FrameOutput {
            frame: n,
            result,
            error,
            bbox,
        });
    }
    Ok(out)
}

/// Row of `<mode>.errors.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub frame: usize,
    pub omega_m: f64,
    pub theta_deg: f64,
    pub degenerate: bool,
    pub mode: String,
    pub cmkd: Option<f64>,
    pub u_rgb: Option<f64>,
    pub u_event: Option<f64>,
}

impl ErrorRow {
    pub fn from_output(o: &FrameOutput) -> Self {
        Self {
            frame: o.frame,
            omega_m: o.error.omega,
            theta_deg: o.error.theta,
            degenerate: o.error.degenerate,
            mode: o.result.mode.as_str().to_string(),
            cmkd: o.result.cmkd,
            u_rgb: o.result.u_rgb,
            u_event: o.result.u_event,
        }
    }

    pub fn frame_error(&self) -> FrameError {
        FrameError {
            frame: self.frame,
            omega: self.omega_m,
            theta: self.theta_deg,
            degenerate: self.degenerate,
        }
    }
}

pub fn write_errors_csv<W: Write>(w: W, rows: &[ErrorRow]) -> Result<(), IoError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(|e| IoError::Csv(e.into()))?;
    Ok(())
}

pub fn read_errors_csv(path: &Path) -> Result<Vec<ErrorRow>, IoError> {
    let mut rd = csv::Reader::from_path(path)?;
    let rows = rd.deserialize().collect::<Result<Vec<ErrorRow>, _>>()?;
    Ok(rows)
}

/// Writes `<out>/<sequence>/<mode>.errors.csv`, `<mode>.results.jsonl` and a
/// copy of the sequence metadata. Returns the errors CSV path.
pub fn write_run(out: &Path, meta: &SequenceMeta, mode: PipelineMode, outputs: &[FrameOutput]) -> Result<PathBuf, IoError> {
    let dir = out.join(&meta.name);
    fs::create_dir_all(&dir).map_err(file_err(&dir))?;
    write_json(&dir.join("meta.json"), meta)?;
    let errors = dir.join(format!("{mode}.errors.csv"));
    let rows: Vec<ErrorRow> = outputs.iter().map(ErrorRow::from_output).collect();
    write_errors_csv(BufWriter::new(File::create(&errors).map_err(file_err(&errors))?), &rows)?;
    let results: Vec<&FusionResult> = outputs.iter().map(|o| &o.result).collect();
    write_jsonl(&dir.join(format!("{mode}.results.jsonl")), &results)?;
    Ok(errors)
}

/// Ω and Θ over all frames and over the adverse-condition frames.
pub fn method_rates(errors: &[FrameError], meta: &SequenceMeta, cfg: &SuccessConfig) -> Result<MethodRates, IoError> {
    let all = success_rates(errors, cfg, None)?;
    let psi_frames = meta.adverse_frames();
    let psi = match success_rates(errors, cfg, Some(&psi_frames)) {
        Ok(r) => Some(r),
        Err(MetricsError::EmptySelection) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(MethodRates {
        omega_all: Some(all.omega),
        omega_psi: psi.map(|r| r.omega),
        theta_all: Some(all.theta),
        theta_psi: psi.map(|r| r.theta),
    })
}

/// Scans run directories for `<sequence>/<mode>.errors.csv` files and builds
/// the success-rate table. Later run directories override earlier ones.
pub fn evaluate_runs(run_dirs: &[PathBuf], cfg: &SuccessConfig) -> Result<Table, IoError> {
    let mut per: RatesBySequence = BTreeMap::new();
    let mut methods: BTreeSet<String> = BTreeSet::new();
    for run in run_dirs {
        let mut seq_dirs: Vec<PathBuf> = fs::read_dir(run)
            .map_err(file_err(run))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("meta.json").exists())
            .collect();
        seq_dirs.sort();
        for dir in seq_dirs {
            let meta: SequenceMeta = read_json(&dir.join("meta.json"))?;
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(file_err(&dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.to_string_lossy().ends_with(".errors.csv"))
                .collect();
            files.sort();
            for f in files {
                let fname = f.file_name().unwrap_or_default().to_string_lossy().to_string();
                let method = fname.trim_end_matches(".errors.csv").to_string();
                let errors: Vec<FrameError> = read_errors_csv(&f)?.iter().map(ErrorRow::frame_error).collect();
                let rates = method_rates(&errors, &meta, cfg)?;
                per.entry(meta.name.clone()).or_default().insert(method.clone(), rates);
                methods.insert(method);
            }
        }
    }
    let mut ordered: Vec<String> = PipelineMode::ALL
        .iter()
        .map(|m| m.as_str().to_string())
        .filter(|m| methods.contains(m))
        .collect();
    ordered.extend(methods.into_iter().filter(|m| PipelineMode::parse(m).is_none()));
    Ok(metrics::aggregate_table(&per, &ordered)?)
}

/// SVG geometry shared by the plot and its tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotLayout {
    pub width: f64,
    pub panel_height: f64,
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub gap: f64,
}

impl Default for PlotLayout {
    fn default() -> Self {
        Self {
            width: 960.0,
            panel_height: 240.0,
            left: 70.0,
            right: 70.0,
            top: 30.0,
            gap: 50.0,
        }
    }
}

impl PlotLayout {
    pub fn plot_width(&self) -> f64 {
        self.width - self.left - self.right
    }

    /// Horizontal position of the left edge of frame `f`'s slot; frame `f`
    /// occupies `[x(f), x(f + 1))`.
    pub fn x(&self, f: f64, n_frames: usize) -> f64 {
        self.left + (f - 1.0) / n_frames.max(1) as f64 * self.plot_width()
    }

    pub fn panel_top(&self, panel: usize) -> f64 {
        self.top + panel as f64 * (self.panel_height + self.gap)
    }

    pub fn height(&self) -> f64 {
        self.panel_top(2) - self.gap + 30.0
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v:.2}")
}

/// Two stacked panels (ω, θ) over frame index with harsh and low-motion
/// bands, a cross for degenerate frames and the per-channel uncertainty on
/// a secondary axis.
pub fn emit_plots(rows: &[ErrorRow], meta: &SequenceMeta, success: &SuccessConfig) -> String {
    let lay = PlotLayout::default();
    let n = meta.n_frames.max(rows.iter().map(|r| r.frame).max().unwrap_or(0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="11">"#,
        lay.width,
        lay.height(),
        lay.width,
        lay.height()
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, meta.name);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{}" height="{}" fill="white"/>"#, lay.width, lay.height());
    let u_max = rows
        .iter()
        .flat_map(|r| [r.u_rgb, r.u_event])
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    type Get = fn(&ErrorRow) -> f64;
    let panels: [(&str, &str, Get, f64); 2] = [
        ("omega", "ω (m)", |r| r.omega_m, success.rho),
        ("theta", "θ (deg)", |r| r.theta_deg, success.sigma),
    ];
    for (pi, (id, label, get, threshold)) in panels.iter().enumerate() {
        let top = lay.panel_top(pi);
        let bottom = top + lay.panel_height;
        let v_max = rows.iter().map(get).filter(|v| v.is_finite()).fold(*threshold, f64::max) * 1.05;
        let y = |v: f64| bottom - (v / v_max).clamp(0.0, 1.0) * lay.panel_height;
        let _ = writeln!(s, r#"<g class="panel" id="{id}">"#);
        for (class, ranges) in [("harsh", &meta.harsh_ranges), ("low-motion", &meta.low_motion_ranges)] {
            let fill = if class == "harsh" { "#f8c8d4" } else { "#b9a3d6" };
            for r in ranges.iter() {
                let x0 = lay.x(r.start as f64, n);
                let x1 = lay.x(r.end as f64 + 1.0, n);
                let _ = writeln!(
                    s,
                    r#"<rect class="band {class}" data-start="{}" data-end="{}" x="{}" y="{}" width="{}" height="{}" fill="{fill}" fill-opacity="0.6"/>"#,
                    r.start,
                    r.end,
                    fmt_num(x0),
                    fmt_num(top),
                    fmt_num(x1 - x0),
                    fmt_num(lay.panel_height)
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<rect class="frame" x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            lay.left,
            fmt_num(top),
            fmt_num(lay.plot_width()),
            fmt_num(lay.panel_height)
        );
        let _ = writeln!(
            s,
            r#"<line class="threshold" x1="{}" x2="{}" y1="{}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
            lay.left,
            fmt_num(lay.left + lay.plot_width()),
            fmt_num(y(*threshold)),
            fmt_num(y(*threshold))
        );
        let _ = writeln!(s, r#"<text x="8" y="{}">{label}</text>"#, fmt_num(top + 12.0));
        let _ = writeln!(s, r#"<text x="8" y="{}">{}</text>"#, fmt_num(bottom), fmt_num(v_max));
        if u_max > 0.0 {
            let yu = |v: f64| bottom - (v / (u_max * 1.05)).clamp(0.0, 1.0) * lay.panel_height;
            for (class, color, pick) in [
                ("u-rgb", "#d9822b", (|r: &ErrorRow| r.u_rgb) as fn(&ErrorRow) -> Option<f64>),
                ("u-event", "#2b6cd9", |r: &ErrorRow| r.u_event),
            ] {
                let pts: Vec<String> = rows
                    .iter()
                    .filter_map(|r| pick(r).filter(|v| v.is_finite()).map(|v| (r.frame, v)))
                    .map(|(f, v)| format!("{},{}", fmt_num(lay.x(f as f64 + 0.5, n)), fmt_num(yu(v))))
                    .collect();
                if !pts.is_empty() {
                    let _ = writeln!(
                        s,
                        r#"<polyline class="{class}" points="{}" fill="none" stroke="{color}" stroke-width="1"/>"#,
                        pts.join(" ")
                    );
                }
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}">U max {} px</text>"#,
                fmt_num(lay.width - lay.right + 4.0),
                fmt_num(top + 12.0),
                fmt_num(u_max)
            );
        }
        for r in rows {
            let cx = lay.x(r.frame as f64 + 0.5, n);
            let cy = y(get(r));
            if r.degenerate {
                let d = 3.0;
                let _ = writeln!(
                    s,
                    r#"<path class="degenerate" data-frame="{}" d="M{} {} L{} {} M{} {} L{} {}" stroke="red" stroke-width="1.5"/>"#,
                    r.frame,
                    fmt_num(cx - d),
                    fmt_num(cy - d),
                    fmt_num(cx + d),
                    fmt_num(cy + d),
                    fmt_num(cx - d),
                    fmt_num(cy + d),
                    fmt_num(cx + d),
                    fmt_num(cy - d)
                );
            } else {
                let _ = writeln!(
                    s,
                    r#"<circle class="point" data-frame="{}" cx="{}" cy="{}" r="1.8" fill="black"/>"#,
                    r.frame,
                    fmt_num(cx),
                    fmt_num(cy)
                );
            }
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">frame</text>"#,
        fmt_num(lay.left + lay.plot_width() / 2.0),
        fmt_num(lay.height() - 8.0)
    );
    s.push_str("</svg>\n");
    s
}

/// Writes one event frame as a CSV grid, one image row per line.
pub fn write_frame_csv<W: Write>(mut w: W, frame: &EventFrame) -> std::io::Result<()> {
    for y in 0..frame.height {
        let row: Vec<String> = (0..frame.width).map(|x| format!("{:.6}", frame.get(x, y))).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Sequence-level helper used by the CLI and tests: simulate, then keep
/// everything in memory.
pub fn simulate_bundle(cfg: &ScenarioConfig) -> Result<SequenceBundle, IoError> {
    let scn = simkit::generate_scenario(cfg)?;
    bundle_from_scenario(&scn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Polarity;

    fn small_cfg(n: usize) -> ScenarioConfig {
        ScenarioConfig {
            n_frames: n,
            synthesize_events: true,
            harsh_ranges: vec![FrameRange::new(2, 3)],
            low_motion_ranges: vec![FrameRange::new(3, 4)],
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn sequence_names() {
        assert_eq!(parse_sequence_name("cassini-2-close").unwrap(), ("cassini".into(), 2, DistanceSetting::Close));
        assert_eq!(parse_sequence_name("soho-4-far").unwrap().1, 4);
        for bad in ["cassini-2", "cassini-x-far", "cassini-2-near", "-2-far", "a b-1-far"] {
            assert!(parse_sequence_name(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn bundle_round_trip() {
        let b = simulate_bundle(&small_cfg(8)).unwrap();
        assert!(!b.events.is_empty());
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &b).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.meta, b.meta);
        assert_eq!(back.events, b.events);
        assert_eq!(back.detections, b.detections);
        assert_eq!(back.scenario, b.scenario);
        assert_eq!(back.landmarks, b.landmarks);
        assert_eq!(back.labels.len(), b.labels.len());
        for (x, y) in back.labels.iter().zip(&b.labels) {
            assert_eq!(x.keypoints, y.keypoints);
            assert_eq!(x.bbox, y.bbox);
            assert!((x.pose.t - y.pose.t).norm() < 1e-15);
            assert!(crate::geometry::rotation_error_deg(&x.pose, &y.pose) < 1e-9);
        }
        assert_eq!(back.predictions, b.predictions);
    }

    #[test]
    fn replay_partitions_events() {
        let b = simulate_bundle(&small_cfg(8)).unwrap();
        let frames: Vec<ReplayFrame> = replay(&b, PolarityMode::Count).collect();
        assert_eq!(frames.len(), 8);
        let total: usize = frames.iter().map(|f| f.events.len()).sum();
        let (lo, hi) = (b.meta.frame_time(0), b.meta.frame_time(8));
        let inside = b.events.events().iter().filter(|e| e.t > lo && e.t <= hi).count();
        assert_eq!(total, inside);
        for f in &frames {
            assert_eq!(f.events, b.events.slice_window(f.window_start, f.window_end));
        }
    }

    #[test]
    fn replay_counts_trailing_events() {
        let mut b = simulate_bundle(&ScenarioConfig { synthesize_events: false, ..small_cfg(4) }).unwrap();
        let end = b.meta.frame_time(4);
        b.events = EventBuffer::new(
            b.meta.width,
            b.meta.height,
            vec![Event::new(0, 1, 1, Polarity::On), Event::new(10, 1, 1, Polarity::On), Event::new(end + 5, 2, 2, Polarity::Off)],
        )
        .unwrap();
        let r = replay(&b, PolarityMode::Count);
        assert_eq!(r.ignored_events(), 2);
        assert_eq!(r.map(|f| f.events.len()).sum::<usize>(), 1);
    }

    #[test]
    fn empty_events_give_empty_frames() {
        let b = simulate_bundle(&ScenarioConfig { synthesize_events: false, ..small_cfg(5) }).unwrap();
        assert!(replay(&b, PolarityMode::Signed).all(|f| f.event_frame.empty));
    }

    #[test]
    fn missing_predictions_are_degenerate() {
        let mut b = simulate_bundle(&ScenarioConfig { synthesize_events: false, ..small_cfg(4) }).unwrap();
        b.predictions.as_mut().unwrap().retain(|p| p.frame != 2);
        let cfg = PipelineConfig {
            fusion: FusionConfig {
                ransac: crate::pnp::RansacConfig { iterations: 50, ..Default::default() },
                ..Default::default()
            },
            ..Default::default()
        };
        let out = run_pipeline(&b, PipelineMode::Fusion, &cfg).unwrap();
        assert!(out[1].result.degenerate);
        assert_eq!(out[1].result.reason.as_deref(), Some("missing_predictions"));
        assert!(out[1].error.degenerate);
    }

    fn meta(n: usize, harsh: Vec<FrameRange>, low: Vec<FrameRange>) -> SequenceMeta {
        SequenceMeta {
            harsh_ranges: harsh,
            low_motion_ranges: low,
            n_frames: n,
            ..SequenceMeta::from_config(&ScenarioConfig { n_frames: n, ..Default::default() })
        }
    }

    fn rows(n: usize, degenerate: bool) -> Vec<ErrorRow> {
        (1..=n)
            .map(|f| ErrorRow {
                frame: f,
                omega_m: 0.001 * f as f64,
                theta_deg: if degenerate { 120.0 } else { 0.5 },
                degenerate,
                mode: "fused".into(),
                cmkd: Some(1.0),
                u_rgb: Some(3.0 + f as f64 * 0.1),
                u_event: None,
            })
            .collect()
    }

    #[test]
    fn plot_without_ranges_has_no_bands() {
        let svg = emit_plots(&rows(10, false), &meta(10, vec![], vec![]), &SuccessConfig::default());
        assert!(!svg.contains("class=\"band"));
        assert_eq!(svg.matches("class=\"point\"").count(), 20);
        assert!(svg.contains("class=\"u-rgb\""));
        assert!(!svg.contains("class=\"u-event\""));
    }

    #[test]
    fn plot_marks_degenerate_frames() {
        let svg = emit_plots(&rows(7, true), &meta(7, vec![], vec![]), &SuccessConfig::default());
        assert_eq!(svg.matches("class=\"degenerate\"").count(), 14);
        assert!(!svg.contains("class=\"point\""));
    }

    #[test]
    fn errors_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let r = rows(3, false);
        write_errors_csv(File::create(&p).unwrap(), &r).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("frame,omega_m,theta_deg,degenerate,mode,cmkd,u_rgb,u_event\n"));
        assert!(text.lines().nth(1).unwrap().ends_with(",fused,1.0,3.1,"));
        assert_eq!(read_errors_csv(&p).unwrap(), r);
    }
}
