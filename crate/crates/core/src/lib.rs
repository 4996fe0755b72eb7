//! Multi-camera 3D ball localization.
//!
//! The pipeline runs per frame: each camera proposes regions of interest
//! (background-difference prefilter or a tracked window), a detector scores
//! ball candidates, the per-camera best detections vote on a consistent 3D
//! position, the position is refined by Levenberg-Marquardt and reprojected
//! into every camera to recover missed or occluded views.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod court;
pub mod detector;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod raster;
pub mod sim;
pub mod tracker;

pub use court::{CourtFile2D, CourtModel, Polygon};
pub use detector::{BBox, Detection, Detector, DetectorConfig, NoiseModel};
pub use eval::{Counts, MatchCriterion, Report};
pub use fusion::{Observation, Reconstruction3D};
pub use geometry::{Camera, CameraId, CameraIntrinsics, CameraPose, PixelPoint, Rig, WorldPoint};
pub use raster::{GrayFrame, RoiBox};
pub use sim::{Dataset, SimConfig};
pub use tracker::{FrameOutput, Pipeline, Status, Strategy, TrackerConfig};
