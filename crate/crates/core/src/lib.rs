//! Event-RGB keypoint fusion for spacecraft pose estimation.
//!
//! The crate is organised along the processing chain:
//!
//! * [`event`]: event tuples, time-window slicing and event-frame accumulation.
//! * [`geometry`]: camera model, projection, distortion, cross-sensor warp, rotations.
//! * [`pnp`]: EPnP and seeded RANSAC, including cross-modal correspondence fusion.
//! * [`fusion`]: the CMKD consistency gate and MC-sample uncertainty arbitration.
//! * [`detection`]: bounding boxes, IoU and last-good-box detection smoothing.
//! * [`simkit`]: synthetic scenarios that stand in for the renderer and the networks.
//! * [`metrics`]: pose errors and success-rate aggregation.
//! * [`io`]: sequence bundles, replay, pipeline orchestration, CSV and SVG reports.

pub mod detection;
pub mod event;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pnp;
pub mod rng;
pub mod simkit;

pub use detection::{BoundingBox, Detection, TrackerState};
pub use event::{Event, EventBuffer, EventFrame, Polarity, PolarityMode};
pub use fusion::{ChannelPrediction, FusionConfig, FusionMode, FusionResult};
pub use geometry::{AffineWarp, CameraIntrinsics, KeypointSet, LandmarkSet, Pose};
pub use metrics::{FrameError, SuccessConfig};
pub use pnp::{Channel, Correspondence, PnPResult, RansacConfig};
