//! Bounding boxes, IoU, last-good-box detection smoothing and IoU metrics.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::KeypointSet;

/// Score a detection must strictly exceed to replace the last good box.
pub const SCORE_THRESHOLD: f64 = 0.98;
/// IoU with the last good box that a detection must strictly exceed.
pub const IOU_THRESHOLD: f64 = 0.6;
/// IoU above which a frame counts towards the detection success rate.
pub const IOU_SUCCESS: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("invalid box [{x_min}, {y_min}, {x_max}, {y_max}]")]
    InvalidBox { x_min: f64, y_min: f64, x_max: f64, y_max: f64 },
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("cannot derive a box: {0}")]
    Underdetermined(&'static str),
    #[error("{preds} predictions but {gts} ground-truth boxes")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("empty sequence")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, DetectionError> {
        let b = Self { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), DetectionError> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite());
        if finite && self.x_min < self.x_max && self.y_min < self.y_max {
            Ok(())
        } else {
            Err(DetectionError::InvalidBox {
                x_min: self.x_min,
                y_min: self.y_min,
                x_max: self.x_max,
                y_max: self.y_max,
            })
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, score: f64) -> Result<Self, DetectionError> {
        bbox.validate()?;
        if !(0.0..=1.0).contains(&score) {
            return Err(DetectionError::InvalidScore(score));
        }
        Ok(Self { bbox, score })
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Axis-aligned box around the valid keypoints, grown by `tolerance` times
/// the extent on each side.
pub fn derive_box(kps: &KeypointSet, tolerance: f64) -> Result<BoundingBox, DetectionError> {
    let mut it = kps.iter_valid().map(|(_, p)| p);
    let first = it.next().ok_or(DetectionError::Underdetermined("no valid keypoints"))?;
    let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
    for p in it {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let (w, h) = (x1 - x0, y1 - y0);
    if !(w > 0.0 && h > 0.0) {
        return Err(DetectionError::Underdetermined("keypoints have zero extent"));
    }
    BoundingBox::new(x0 - tolerance * w, y0 - tolerance * h, x1 + tolerance * w, y1 + tolerance * h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerState {
    pub last_good_box: BoundingBox,
    pub last_good_score: f64,
}

impl TrackerState {
    pub fn from_detection(det: &Detection) -> Self {
        Self {
            last_good_box: det.bbox,
            last_good_score: det.score,
        }
    }
}

/// One step of the last-good-box smoother.
pub fn smooth(state: TrackerState, det: Detection) -> (TrackerState, Detection) {
    if det.score > SCORE_THRESHOLD && iou(&det.bbox, &state.last_good_box) > IOU_THRESHOLD {
        (TrackerState::from_detection(&det), det)
    } else {
        let held = Detection {
            bbox: state.last_good_box,
            score: state.last_good_score,
        };
        (state, held)
    }
}

/// Sequential smoother over a detection stream.
///
/// The first detection seeds the state. With `seed_score_min` set, seeds
/// scoring below it are passed through and initialization is deferred.
#[derive(Debug, Clone, Default)]
pub struct DetectionSmoother {
    state: Option<TrackerState>,
    seed_score_min: Option<f64>,
}

impl DetectionSmoother {
    pub fn new(seed_score_min: Option<f64>) -> Self {
        Self {
            state: None,
            seed_score_min,
        }
    }

    pub fn state(&self) -> Option<&TrackerState> {
        self.state.as_ref()
    }

    pub fn step(&mut self, det: Detection) -> Detection {
        match self.state {
            Some(state) => {
                let (next, out) = smooth(state, det);
                self.state = Some(next);
                out
            }
            None => {
                if self.seed_score_min.is_none_or(|min| det.score >= min) {
                    self.state = Some(TrackerState::from_detection(&det));
                }
                det
            }
        }
    }
}

/// Smooths a whole stream from a fresh state.
pub fn smooth_sequence(dets: &[Detection], seed_score_min: Option<f64>) -> Vec<Detection> {
    let mut s = DetectionSmoother::new(seed_score_min);
    dets.iter().map(|d| s.step(*d)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub mean_iou: f64,
    pub success_rate: f64,
}

/// Mean IoU and the fraction of frames with IoU strictly above `iou_success`.
pub fn detection_metrics(
    preds: &[BoundingBox],
    gts: &[BoundingBox],
    iou_success: f64,
) -> Result<DetectionMetrics, DetectionError> {
    if preds.len() != gts.len() {
        return Err(DetectionError::LengthMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    if preds.is_empty() {
        return Err(DetectionError::Empty);
    }
    let ious: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| iou(p, g)).collect();
    let n = ious.len() as f64;
    Ok(DetectionMetrics {
        mean_iou: ious.iter().sum::<f64>() / n,
        success_rate: ious.iter().filter(|&&x| x > iou_success).count() as f64 / n,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRow {
    frame: usize,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    score: f64,
}

/// Writes `frame,x_min,y_min,x_max,y_max,score` rows; frames are 1-based.
pub fn write_detections_csv<W: Write>(w: W, dets: &[Detection]) -> Result<(), DetectionError> {
    let mut wr = csv::Writer::from_writer(w);
    for (i, d) in dets.iter().enumerate() {
        wr.serialize(DetectionRow {
            frame: i + 1,
            x_min: d.bbox.x_min,
            y_min: d.bbox.y_min,
            x_max: d.bbox.x_max,
            y_max: d.bbox.y_max,
            score: d.score,
        })?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads detections, returned in frame order.
pub fn read_detections_csv<R: Read>(r: R) -> Result<Vec<(usize, Detection)>, DetectionError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rd.deserialize() {
        let row: DetectionRow = row?;
        let bbox = BoundingBox::new(row.x_min, row.y_min, row.x_max, row.y_max)?;
        out.push((row.frame, Detection::new(bbox, row.score)?));
    }
    out.sort_by_key(|(f, _)| *f);
    Ok(out)
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<(), DetectionError> {
    write_detections_csv(std::fs::File::create(path)?, dets)
}

pub fn load_detections(path: &Path) -> Result<Vec<(usize, Detection)>, DetectionError> {
    read_detections_csv(std::fs::File::open(path)?)
}
