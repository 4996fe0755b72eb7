//! Per-frame orchestration of detection, fusion and tracking.
//!
//! Each camera keeps a [`CameraTrackState`]. Its undetected-frame counter
//! `lost_frm` selects the search region: a tight window around the last or
//! predicted ball position, a wider window, or the full image (narrowed by
//! background-difference proposals when pixels are available). Accepted 3D
//! points must pass a speed and acceleration check against the recent
//! trajectory; a frame without an accepted point repeats the previous one
//! until the trajectory is declared lost.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::court::{CourtError, CourtModel, Polygon};
use crate::detector::{best_detection, nms, BBox, DetectRequest, Detection, Detector, DetectorConfig, FrameSet};
use crate::fusion::{
    refine_point_lm, reproject_and_refine, vote_consensus, LmSettings, Observation, ReprojectSettings,
};
use crate::geometry::{Camera, CameraId, PixelPoint, Rig, WorldPoint};
use crate::raster::{propose_rois, BackgroundModel, GrayFrame, PrefilterConfig, RoiBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackerError {
    #[error("no frame supplied for camera {0}")]
    RigMismatch(CameraId),
    #[error("dataset has no frame {0}")]
    DatasetGap(usize),
    #[error("frame {got} processed after frame {last}")]
    OutOfOrder { last: usize, got: usize },
    #[error("court: {0}")]
    Court(#[from] CourtError),
    #[error("frame source: {0}")]
    Source(String),
    #[error("malformed output record at line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },
}

/// Detect/track cadence.
///
/// * `M1`: full detection every `interval` frames, nothing in between.
/// * `M2`: full detection every `interval` frames; tracking in between while
///   the last detection frame produced a point.
/// * `M3`: full detection on the first frame, tracking afterwards, and full
///   re-detection on any frame where tracking fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    M1 { interval: usize },
    M2 { interval: usize },
    M3,
}

pub const DEFAULT_DETECT_INTERVAL: usize = 5;

impl Strategy {
    pub const fn m1() -> Self {
        Strategy::M1 {
            interval: DEFAULT_DETECT_INTERVAL,
        }
    }

    pub const fn m2() -> Self {
        Strategy::M2 {
            interval: DEFAULT_DETECT_INTERVAL,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::M1 { .. } => "M1",
            Strategy::M2 { .. } => "M2",
            Strategy::M3 => "M3",
        }
    }

    /// Same variant with a different detection interval (ignored by M3).
    pub fn with_interval(self, interval: usize) -> Self {
        let interval = interval.max(1);
        match self {
            Strategy::M1 { .. } => Strategy::M1 { interval },
            Strategy::M2 { .. } => Strategy::M2 { interval },
            Strategy::M3 => Strategy::M3,
        }
    }

    /// Action for frame `index` (0-based position in the sequence).
    /// `tracking` tells whether the last full-detection frame produced a
    /// point.
    pub fn action(&self, index: usize, tracking: bool) -> FrameAction {
        match *self {
            Strategy::M1 { interval } if index.is_multiple_of(interval) => FrameAction::Detect,
            Strategy::M1 { .. } => FrameAction::Skip,
            Strategy::M2 { interval } if index.is_multiple_of(interval) => FrameAction::Detect,
            Strategy::M2 { .. } if tracking => FrameAction::Track,
            Strategy::M2 { .. } => FrameAction::Skip,
            Strategy::M3 if index == 0 => FrameAction::Detect,
            Strategy::M3 => FrameAction::TrackThenDetect,
        }
    }

    fn interpolates(&self) -> bool {
        !matches!(self, Strategy::M3)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M1" => Ok(Strategy::m1()),
            "M2" => Ok(Strategy::m2()),
            "M3" => Ok(Strategy::M3),
            other => Err(format!("unknown strategy '{other}' (expected M1, M2 or M3)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameAction {
    /// Full-image detection in every camera.
    Detect,
    /// Per-camera scheduled search regions.
    Track,
    /// Track; on failure, detect in the same frame.
    TrackThenDetect,
    /// Frame not processed.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackMode {
    FullImage,
    Roi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraTrackState {
    pub camera_id: CameraId,
    pub last_box: Option<BBox>,
    pub lost_frm: u32,
    pub mode: TrackMode,
}

impl CameraTrackState {
    pub fn new(camera_id: CameraId) -> Self {
        Self {
            camera_id,
            last_box: None,
            lost_frm: 0,
            mode: TrackMode::FullImage,
        }
    }

    fn record_hit(&mut self, b: BBox) {
        self.last_box = Some(b);
        self.lost_frm = 0;
        self.mode = TrackMode::Roi;
    }

    fn record_miss(&mut self) {
        self.lost_frm = self.lost_frm.saturating_add(1);
    }
}

/// Search-window tiers by consecutive undetected frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiTiers {
    /// Largest `lost_frm` served by the tight window.
    pub near_max_lost: u32,
    /// Largest `lost_frm` served by the wide window; beyond it, full image.
    pub far_max_lost: u32,
    /// Tight window side as a multiple of the box side.
    pub near_scale: f64,
    /// Wide window side as a multiple of the box side.
    pub far_scale: f64,
    pub min_side_px: f64,
}

impl Default for RoiTiers {
    fn default() -> Self {
        Self {
            near_max_lost: 2,
            far_max_lost: 5,
            near_scale: 4.0,
            far_scale: 10.0,
            min_side_px: 48.0,
        }
    }
}

/// Search region for one camera. A predicted center overrides the center of
/// the last box; the window size always comes from the last box.
pub fn schedule_roi(
    state: &CameraTrackState,
    predicted_px: Option<&PixelPoint>,
    camera: &Camera,
    tiers: &RoiTiers,
) -> (TrackMode, Vec<RoiBox>) {
    let full = (TrackMode::FullImage, vec![RoiBox::full(camera.width, camera.height)]);
    let Some(last) = state.last_box else {
        return full;
    };
    let scale = if state.lost_frm <= tiers.near_max_lost {
        tiers.near_scale
    } else if state.lost_frm <= tiers.far_max_lost {
        tiers.far_scale
    } else {
        return full;
    };
    let center = predicted_px.copied().unwrap_or_else(|| last.center());
    let side = (scale * last.w.max(last.h)).max(tiers.min_side_px);
    let rois = RoiBox::centered(center.u, center.v, side, camera.width, camera.height)
        .into_iter()
        .collect();
    (TrackMode::Roi, rois)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothLimits {
    pub v_max: f64,
    pub a_max: f64,
    pub fps: f64,
}

impl Default for SmoothLimits {
    fn default() -> Self {
        Self {
            v_max: 45.0,
            a_max: 400.0,
            fps: 25.0,
        }
    }
}

pub const DEFAULT_BUFFER_CAPACITY: usize = 38;

/// Recent accepted 3D points, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBuffer {
    capacity: usize,
    points: VecDeque<(usize, WorldPoint)>,
}

impl TrajectoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            points: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn clear(&mut self) {
        self.points.clear();
    }

    pub fn last(&self) -> Option<&(usize, WorldPoint)> {
        self.points.back()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, WorldPoint)> {
        self.points.iter()
    }

    /// Appends a point; frame numbers must increase strictly.
    pub fn push(&mut self, frame_no: usize, p: WorldPoint) -> Result<(), TrackerError> {
        if let Some(&(last, _)) = self.points.back() {
            if frame_no <= last {
                return Err(TrackerError::OutOfOrder { last, got: frame_no });
            }
        }
        if self.points.len() == self.capacity {
            self.points.pop_front();
        }
        self.points.push_back((frame_no, p));
        Ok(())
    }

    /// Constant-velocity extrapolation to `frame_no`.
    pub fn predict(&self, frame_no: usize) -> Option<WorldPoint> {
        let n = self.points.len();
        let &(f1, p1) = self.points.back()?;
        if n < 2 || frame_no <= f1 {
            return Some(p1);
        }
        let (f0, p0) = self.points[n - 2];
        let v = (p1 - p0) / (f1 - f0) as f64;
        Some(p1 + v * (frame_no - f1) as f64)
    }
}

/// Speed and acceleration implied by `candidate` against the last two
/// buffered points stay within the limits. Vacuously true for fewer than two
/// points.
pub fn validate_smooth(
    buffer: &TrajectoryBuffer,
    candidate: &WorldPoint,
    frame_no: usize,
    limits: &SmoothLimits,
) -> bool {
    let n = buffer.points.len();
    if n < 2 {
        return true;
    }
    let (f1, p1) = buffer.points[n - 1];
    let (f0, p0) = buffer.points[n - 2];
    if frame_no <= f1 {
        return false;
    }
    let dt1 = (f1 - f0) as f64 / limits.fps;
    let dt2 = (frame_no - f1) as f64 / limits.fps;
    let v_prev = (p1 - p0) / dt1;
    let v_new = (candidate - p1) / dt2;
    if v_new.norm() > limits.v_max {
        return false;
    }
    let accel = (v_new - v_prev).norm() / (0.5 * (dt1 + dt2));
    accel <= limits.a_max
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    CarriedForward,
    /// Filled by linear interpolation between processed frames.
    Interpolated,
    Lost,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Ok => "OK",
            Status::CarriedForward => "CARRIED_FORWARD",
            Status::Interpolated => "INTERPOLATED",
            Status::Lost => "LOST",
        }
    }
}

impl FromStr for Status {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "OK" => Ok(Status::Ok),
            "CARRIED_FORWARD" => Ok(Status::CarriedForward),
            "INTERPOLATED" => Ok(Status::Interpolated),
            "LOST" => Ok(Status::Lost),
            other => Err(format!("unknown status '{other}'")),
        }
    }
}

/// 2D output for one camera. `confidence` is 0 for boxes that come only
/// from projecting the 3D point (no detection in that camera).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera2D {
    pub bbox: BBox,
    pub confidence: f64,
}

/// Invariants: `point3d.is_some() == (status != Lost)`; every visible camera
/// has an entry in `per_camera_2d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub frame_no: usize,
    pub status: Status,
    pub point3d: Option<WorldPoint>,
    pub visible_cameras: Vec<CameraId>,
    pub per_camera_2d: BTreeMap<CameraId, Camera2D>,
}

impl FrameOutput {
    fn lost(frame_no: usize) -> Self {
        Self {
            frame_no,
            status: Status::Lost,
            point3d: None,
            visible_cameras: Vec::new(),
            per_camera_2d: BTreeMap::new(),
        }
    }

    /// `frm_no status x y z cam_count [cam_id u v w h conf]...` with `(u, v)`
    /// the box center. A lost frame writes `nan` coordinates.
    pub fn to_record(&self) -> String {
        let (x, y, z) = match self.point3d {
            Some(p) => (p.x, p.y, p.z),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        let mut line = format!(
            "{} {} {} {} {} {}",
            self.frame_no,
            self.status.as_str(),
            x,
            y,
            z,
            self.per_camera_2d.len()
        );
        for (id, c) in &self.per_camera_2d {
            let ctr = c.bbox.center();
            line.push_str(&format!(
                " {id} {} {} {} {} {}",
                ctr.u, ctr.v, c.bbox.w, c.bbox.h, c.confidence
            ));
        }
        line
    }

    pub fn from_record(line: &str) -> Result<Self, String> {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 6 {
            return Err(format!("expected at least 6 fields, got {}", tok.len()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("'{s}': {e}"));
        let int = |s: &str| s.parse::<usize>().map_err(|e| format!("'{s}': {e}"));
        let frame_no = int(tok[0])?;
        let status: Status = tok[1].parse()?;
        let (x, y, z) = (num(tok[2])?, num(tok[3])?, num(tok[4])?);
        let count = int(tok[5])?;
        if tok.len() != 6 + 6 * count {
            return Err(format!(
                "camera count {count} needs {} fields, got {}",
                6 + 6 * count,
                tok.len()
            ));
        }
        let point3d = match status {
            Status::Lost => None,
            _ if [x, y, z].iter().all(|v| v.is_finite()) => Some(WorldPoint::new(x, y, z)),
            _ => return Err("non-lost record without a finite point".into()),
        };
        let mut per_camera_2d = BTreeMap::new();
        let mut visible_cameras = Vec::new();
        for chunk in tok[6..].chunks(6) {
            let id = int(chunk[0])?;
            let (u, v, w, h, conf) = (
                num(chunk[1])?,
                num(chunk[2])?,
                num(chunk[3])?,
                num(chunk[4])?,
                num(chunk[5])?,
            );
            if conf > 0.0 {
                visible_cameras.push(id);
            }
            let entry = Camera2D {
                bbox: BBox::from_center(PixelPoint::new(u, v), w, h),
                confidence: conf,
            };
            if per_camera_2d.insert(id, entry).is_some() {
                return Err(format!("camera {id} listed twice"));
            }
        }
        Ok(Self {
            frame_no,
            status,
            point3d,
            visible_cameras,
            per_camera_2d,
        })
    }
}

/// Writes one record per line.
pub fn write_outputs(outputs: &[FrameOutput]) -> String {
    let mut s = String::from("# frm_no status x y z cam_count [cam_id u v w h conf]...\n");
    for o in outputs {
        s.push_str(&o.to_record());
        s.push('\n');
    }
    s
}

pub fn parse_outputs(text: &str) -> Result<Vec<FrameOutput>, TrackerError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| FrameOutput::from_record(l).map_err(|msg| TrackerError::MalformedRecord { line: i + 1, msg }))
        .collect()
}

/// Detector invocation counts. `pixels_scanned` sums the areas of all
/// regions handed to the detector and measures detector work.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DetectorCallStats {
    pub full_image_calls: u64,
    pub roi_calls: u64,
    pub full_image_frames: u64,
    pub pixels_scanned: u64,
}

impl DetectorCallStats {
    pub fn total_calls(&self) -> u64 {
        self.full_image_calls + self.roi_calls
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub detector: DetectorConfig,
    pub dist_thd_m: f64,
    pub lm: LmSettings,
    pub tiers: RoiTiers,
    pub smooth: SmoothLimits,
    pub buffer_capacity: usize,
    pub ball_radius_m: f64,
    /// Reprojection window side as a multiple of the projected ball size.
    pub reproject_scale: f64,
    pub prefilter: PrefilterConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            dist_thd_m: 0.5,
            lm: LmSettings::default(),
            tiers: RoiTiers::default(),
            smooth: SmoothLimits::default(),
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            ball_radius_m: 0.11,
            reproject_scale: 4.0,
            prefilter: PrefilterConfig::default(),
        }
    }
}

/// Frames of a contiguous sequence `0..frame_count()`.
pub trait FrameSource: Sync {
    fn rig(&self) -> &Rig;
    fn frame_count(&self) -> usize;
    fn frames(&self, frame_no: usize) -> Result<FrameSet, TrackerError>;
    /// Ball-free background frame, when the source has one.
    fn background(&self, _camera: CameraId) -> Option<GrayFrame> {
        None
    }
}

struct CameraSlot {
    state: CameraTrackState,
    background: Option<BackgroundModel>,
    court: Option<Polygon>,
}

struct CameraPass {
    best: Option<Detection>,
    mode: Option<TrackMode>,
    pixels: u64,
}

/// Tracker state for one rig and detector, advanced one frame at a time.
pub struct Pipeline<'a> {
    rig: &'a Rig,
    detector: &'a dyn Detector,
    config: TrackerConfig,
    slots: Vec<CameraSlot>,
    buffer: TrajectoryBuffer,
    last_point: Option<WorldPoint>,
    failures: usize,
    last_frame: Option<usize>,
    stats: DetectorCallStats,
}

impl<'a> Pipeline<'a> {
    pub fn new(rig: &'a Rig, detector: &'a dyn Detector, config: TrackerConfig) -> Self {
        let slots = rig
            .cameras()
            .iter()
            .map(|c| CameraSlot {
                state: CameraTrackState::new(c.id),
                background: None,
                court: None,
            })
            .collect();
        let buffer = TrajectoryBuffer::new(config.buffer_capacity);
        Self {
            rig,
            detector,
            config,
            slots,
            buffer,
            last_point: None,
            failures: 0,
            last_frame: None,
            stats: DetectorCallStats::default(),
        }
    }

    /// Restricts prefilter proposals to the court as seen by each camera.
    /// Cameras that cannot see the court keep unrestricted proposals.
    pub fn with_court(mut self, court: &CourtModel) -> Self {
        for (slot, cam) in self.slots.iter_mut().zip(self.rig.cameras()) {
            slot.court = court.camera_court_mask(cam).ok();
        }
        self
    }

    /// Seeds the background model of `camera`.
    pub fn set_background(&mut self, camera: CameraId, frame: &GrayFrame) {
        if let Some(slot) = self.slots.iter_mut().find(|s| s.state.camera_id == camera) {
            slot.background = Some(BackgroundModel::from_frame(
                frame,
                self.config.prefilter.alpha,
                self.config.prefilter.refresh_period,
            ));
        }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn stats(&self) -> DetectorCallStats {
        self.stats
    }

    pub fn camera_state(&self, camera: CameraId) -> Option<&CameraTrackState> {
        self.slots
            .iter()
            .find(|s| s.state.camera_id == camera)
            .map(|s| &s.state)
    }

    pub fn buffer(&self) -> &TrajectoryBuffer {
        &self.buffer
    }

    /// Processes a frame with the default policy: track, and detect on
    /// tracking failure.
    pub fn step(&mut self, frames: &FrameSet, frame_no: usize) -> Result<FrameOutput, TrackerError> {
        self.step_with(frames, frame_no, FrameAction::TrackThenDetect)
    }

    pub fn step_with(
        &mut self,
        frames: &FrameSet,
        frame_no: usize,
        action: FrameAction,
    ) -> Result<FrameOutput, TrackerError> {
        if let Some(missing) = frames.missing_camera(self.rig) {
            return Err(TrackerError::RigMismatch(missing));
        }
        if let Some(last) = self.last_frame {
            if frame_no <= last {
                return Err(TrackerError::OutOfOrder { last, got: frame_no });
            }
        }
        self.last_frame = Some(frame_no);
        if action == FrameAction::Skip {
            return Ok(FrameOutput::lost(frame_no));
        }

        let full_first = action == FrameAction::Detect;
        let mut passes = self.detect_pass(frames, frame_no, full_first);
        let mut result = self.fuse(&passes, frames, frame_no);
        if result.is_none() && action == FrameAction::TrackThenDetect {
            passes = self.detect_pass(frames, frame_no, true);
            result = self.fuse(&passes, frames, frame_no);
        }
        self.observe_backgrounds(frames)?;

        let Some((point, detections, projected)) = result else {
            return Ok(self.fail(frame_no));
        };
        self.failures = 0;
        self.last_point = Some(point);
        self.buffer.push(frame_no, point)?;

        let mut per_camera_2d = BTreeMap::new();
        for slot in &mut self.slots {
            let id = slot.state.camera_id;
            if let Some(d) = detections.get(&id) {
                slot.state.record_hit(d.bbox);
                per_camera_2d.insert(
                    id,
                    Camera2D {
                        bbox: d.bbox,
                        confidence: d.confidence,
                    },
                );
            } else {
                slot.state.record_miss();
                if let Some(b) = projected.get(&id) {
                    slot.state.last_box = Some(*b);
                    slot.state.mode = TrackMode::Roi;
                    per_camera_2d.insert(
                        id,
                        Camera2D {
                            bbox: *b,
                            confidence: 0.0,
                        },
                    );
                }
            }
        }
        Ok(FrameOutput {
            frame_no,
            status: Status::Ok,
            point3d: Some(point),
            visible_cameras: detections.keys().copied().collect(),
            per_camera_2d,
        })
    }

    fn fail(&mut self, frame_no: usize) -> FrameOutput {
        for slot in &mut self.slots {
            slot.state.record_miss();
        }
        self.failures += 1;
        match self.last_point {
            Some(p) if self.failures <= self.buffer.capacity() => FrameOutput {
                frame_no,
                status: Status::CarriedForward,
                point3d: Some(p),
                visible_cameras: Vec::new(),
                per_camera_2d: BTreeMap::new(),
            },
            _ => {
                self.last_point = None;
                self.buffer.clear();
                FrameOutput::lost(frame_no)
            }
        }
    }

    fn observe_backgrounds(&mut self, frames: &FrameSet) -> Result<(), TrackerError> {
        let pf = self.config.prefilter;
        self.slots.par_iter_mut().try_for_each(|slot| {
            if let Some(frame) = frames.frame(slot.state.camera_id) {
                match &mut slot.background {
                    Some(bg) => bg.observe(frame).map_err(|e| TrackerError::Source(e.to_string()))?,
                    None => slot.background = Some(BackgroundModel::from_frame(frame, pf.alpha, pf.refresh_period)),
                }
            }
            Ok(())
        })
    }

    /// Runs the detector once per camera. With `full` set every camera
    /// searches its whole image; otherwise each follows its schedule and
    /// cameras whose predicted position leaves the image are skipped.
    fn detect_pass(&mut self, frames: &FrameSet, frame_no: usize, full: bool) -> Vec<CameraPass> {
        let predicted = self.buffer.predict(frame_no);
        let detector = self.detector;
        let cfg = &self.config;
        let passes: Vec<CameraPass> = self
            .slots
            .par_iter()
            .zip(self.rig.cameras().par_iter())
            .map(|(slot, cam)| {
                let frame = frames.frame(cam.id);
                let pred_px = match (full, predicted) {
                    (false, Some(p)) => match cam.project(&p) {
                        Ok((px, _)) if cam.in_image(&px) => Some(px),
                        _ => {
                            return CameraPass {
                                best: None,
                                mode: None,
                                pixels: 0,
                            }
                        }
                    },
                    _ => None,
                };
                let (mode, mut rois) = if full {
                    (TrackMode::FullImage, vec![RoiBox::full(cam.width, cam.height)])
                } else {
                    schedule_roi(&slot.state, pred_px.as_ref(), cam, &cfg.tiers)
                };
                if mode == TrackMode::FullImage {
                    if let (Some(frame), Some(bg)) = (frame, &slot.background) {
                        if let Ok(mask) = bg.foreground_mask(frame, cfg.prefilter.k_sigma) {
                            let proposals =
                                propose_rois(&mask, slot.court.as_ref(), cfg.prefilter.min_area, cfg.prefilter.pad);
                            if !proposals.is_empty() {
                                rois = proposals;
                            }
                        }
                    }
                }
                if rois.is_empty() {
                    return CameraPass {
                        best: None,
                        mode: None,
                        pixels: 0,
                    };
                }
                let request = DetectRequest {
                    camera: cam,
                    frame_no,
                    frame,
                };
                let dets = nms(&detector.detect(&request, &rois), cfg.detector.iou_thd);
                CameraPass {
                    best: best_detection(&dets, cfg.detector.det_conf),
                    mode: Some(mode),
                    pixels: rois.iter().map(RoiBox::area).sum(),
                }
            })
            .collect();
        if full {
            self.stats.full_image_frames += 1;
        }
        for p in &passes {
            match p.mode {
                Some(TrackMode::FullImage) => self.stats.full_image_calls += 1,
                Some(TrackMode::Roi) => self.stats.roi_calls += 1,
                None => {}
            }
            self.stats.pixels_scanned += p.pixels;
        }
        passes
    }

    /// Voting, refinement, smoothness check and reprojection. Returns the
    /// point, the accepted detection per camera, and projected boxes for
    /// in-image cameras without a detection.
    #[allow(clippy::type_complexity)]
    fn fuse(
        &mut self,
        passes: &[CameraPass],
        frames: &FrameSet,
        frame_no: usize,
    ) -> Option<(WorldPoint, BTreeMap<CameraId, Detection>, BTreeMap<CameraId, BBox>)> {
        let cfg = &self.config;
        let mut detections: BTreeMap<CameraId, Detection> = self
            .rig
            .cameras()
            .iter()
            .zip(passes)
            .filter_map(|(c, p)| p.best.map(|d| (c.id, d)))
            .collect();
        let observations: Vec<Observation> = detections
            .iter()
            .map(|(&id, d)| Observation::new(id, d.center(), d.confidence))
            .collect();
        let consensus = vote_consensus(&observations, self.rig, cfg.dist_thd_m).ok()?;
        let inlier_obs: Vec<Observation> = observations
            .iter()
            .filter(|o| consensus.inliers.contains(&o.camera_id))
            .copied()
            .collect();
        let recon = refine_point_lm(&consensus.point, &inlier_obs, self.rig, &cfg.lm).ok()?;
        if !validate_smooth(&self.buffer, &recon.point, frame_no, &cfg.smooth) {
            return None;
        }
        let inliers: BTreeSet<CameraId> = consensus.inliers.iter().copied().collect();
        detections.retain(|id, _| inliers.contains(id));

        let others: Vec<CameraId> = self.rig.ids().filter(|id| !inliers.contains(id)).collect();
        let settings = ReprojectSettings {
            ball_radius_m: cfg.ball_radius_m,
            window_scale: cfg.reproject_scale,
            min_window_px: cfg.tiers.min_side_px,
            det_conf: cfg.detector.det_conf,
            iou_thd: cfg.detector.iou_thd,
        };
        let reprojections = reproject_and_refine(
            &recon.point,
            self.rig,
            self.detector,
            frames,
            frame_no,
            &others,
            &settings,
        );
        let mut point = recon.point;
        let mut recovered = Vec::new();
        let mut projected = BTreeMap::new();
        for r in &reprojections {
            self.stats.roi_calls += 1;
            self.stats.pixels_scanned += r.window.area();
            match r.detection {
                // A recovered detection must agree with the projection.
                Some(d) if d.center().distance(&r.projected.center()) <= reprojection_gate(&r.projected, cfg) => {
                    recovered.push((r.camera, d))
                }
                _ => {
                    projected.insert(r.camera, r.projected);
                }
            }
        }
        if !recovered.is_empty() {
            detections.extend(recovered.iter().copied());
            let all: Vec<Observation> = detections
                .iter()
                .map(|(&id, d)| Observation::new(id, d.center(), d.confidence))
                .collect();
            if let Ok(r) = refine_point_lm(&point, &all, self.rig, &cfg.lm) {
                point = r.point;
            }
        }
        Some((point, detections, projected))
    }
}

/// Largest pixel distance between a recovered detection and the projected
/// ball center: the pixel footprint of the voting threshold, at least one
/// ball diameter.
fn reprojection_gate(projected: &BBox, cfg: &TrackerConfig) -> f64 {
    let diameter = projected.w.max(projected.h);
    let px_per_m = diameter / (2.0 * cfg.ball_radius_m);
    (cfg.dist_thd_m * px_per_m).max(diameter)
}

/// Runs a whole sequence under `strategy`. For interpolating strategies,
/// skipped frames between two OK frames receive linearly interpolated
/// points; skipped frames after the last OK frame repeat it.
pub fn run_sequence(
    pipeline: &mut Pipeline<'_>,
    source: &dyn FrameSource,
    strategy: Strategy,
) -> Result<(Vec<FrameOutput>, DetectorCallStats), TrackerError> {
    run_sequence_timed(pipeline, source, strategy).map(|r| (r.outputs, r.stats))
}

/// A finished run with the wall time of each frame step.
#[derive(Debug, Clone)]
pub struct TimedRun {
    pub outputs: Vec<FrameOutput>,
    pub stats: DetectorCallStats,
    pub frame_times: Vec<std::time::Duration>,
}

pub fn run_sequence_timed(
    pipeline: &mut Pipeline<'_>,
    source: &dyn FrameSource,
    strategy: Strategy,
) -> Result<TimedRun, TrackerError> {
    let start = pipeline.stats();
    let mut frame_times = Vec::with_capacity(source.frame_count());
    let mut outputs = Vec::with_capacity(source.frame_count());
    let mut skipped = Vec::with_capacity(source.frame_count());
    let mut tracking = false;
    for cam in source.rig().ids() {
        if let Some(bg) = source.background(cam) {
            pipeline.set_background(cam, &bg);
        }
    }
    for frame_no in 0..source.frame_count() {
        let action = strategy.action(frame_no, tracking);
        let frames = source.frames(frame_no)?;
        let t = std::time::Instant::now();
        let out = pipeline.step_with(&frames, frame_no, action)?;
        frame_times.push(t.elapsed());
        if action == FrameAction::Detect {
            tracking = out.status == Status::Ok;
        }
        skipped.push(action == FrameAction::Skip);
        outputs.push(out);
    }
    if strategy.interpolates() {
        interpolate_skipped(&mut outputs, &skipped);
    }
    let end = pipeline.stats();
    let stats = DetectorCallStats {
        full_image_calls: end.full_image_calls - start.full_image_calls,
        roi_calls: end.roi_calls - start.roi_calls,
        full_image_frames: end.full_image_frames - start.full_image_frames,
        pixels_scanned: end.pixels_scanned - start.pixels_scanned,
    };
    Ok(TimedRun {
        outputs,
        stats,
        frame_times,
    })
}

/// Fills skipped frames from the surrounding OK frames.
pub fn interpolate_skipped(outputs: &mut [FrameOutput], skipped: &[bool]) {
    let ok: Vec<(usize, WorldPoint)> = outputs
        .iter()
        .enumerate()
        .filter(|(_, o)| o.status == Status::Ok)
        .filter_map(|(i, o)| o.point3d.map(|p| (i, p)))
        .collect();
    for (i, out) in outputs.iter_mut().enumerate() {
        if !skipped.get(i).copied().unwrap_or(false) {
            continue;
        }
        let after = ok.partition_point(|&(k, _)| k < i);
        let prev = after.checked_sub(1).map(|k| ok[k]);
        let next = ok.get(after).copied();
        match (prev, next) {
            (Some((i0, p0)), Some((i1, p1))) => {
                let t = (i - i0) as f64 / (i1 - i0) as f64;
                out.status = Status::Interpolated;
                out.point3d = Some(p0 + (p1 - p0) * t);
            }
            (Some((_, p0)), None) => {
                out.status = Status::CarriedForward;
                out.point3d = Some(p0);
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{NoiseModel, OracleDetector, OracleTruth};
    use crate::fusion::project_ball_box;
    use crate::geometry::{CameraIntrinsics, CameraPose};
    use nalgebra::Vector3;

    fn rig(k: usize) -> Rig {
        let cams = (0..k)
            .map(|i| {
                let a = (i as f64 + 0.5) / k as f64 * std::f64::consts::TAU;
                let eye = WorldPoint::new(40.0 * a.cos(), 30.0 * a.sin(), 15.0);
                let pose = CameraPose::look_at(&eye, &WorldPoint::origin(), &Vector3::z()).unwrap();
                let k = CameraIntrinsics::simple(1500.0, 1500.0, 640.0, 360.0).unwrap();
                Camera::new(i, k, pose, 1280, 720).unwrap()
            })
            .collect();
        Rig::new(cams).unwrap()
    }

    fn truth_table(
        rig: &Rig,
        path: &[WorldPoint],
        hidden: &dyn Fn(CameraId, usize) -> bool,
    ) -> BTreeMap<(CameraId, usize), OracleTruth> {
        let mut t = BTreeMap::new();
        for (f, p) in path.iter().enumerate() {
            for cam in rig.cameras() {
                if let Some(b) = project_ball_box(cam, p, 0.11) {
                    let visible = cam.in_image(&b.center()) && !hidden(cam.id, f);
                    t.insert((cam.id, f), OracleTruth { bbox: b, visible });
                }
            }
        }
        t
    }

    struct Blank<'a> {
        rig: &'a Rig,
        n: usize,
    }

    impl FrameSource for Blank<'_> {
        fn rig(&self) -> &Rig {
            self.rig
        }
        fn frame_count(&self) -> usize {
            self.n
        }
        fn frames(&self, _: usize) -> Result<FrameSet, TrackerError> {
            Ok(FrameSet::blank(self.rig))
        }
    }

    fn path(n: usize) -> Vec<WorldPoint> {
        (0..n)
            .map(|f| {
                let t = f as f64 / 25.0;
                WorldPoint::new(-5.0 + 8.0 * t, 2.0 - 3.0 * t, 0.11 + 4.0 * t - 1.0 * t * t)
            })
            .collect()
    }

    #[test]
    fn strategy_cadence() {
        let m1 = Strategy::m1();
        let detects: Vec<usize> = (0..10).filter(|&f| m1.action(f, true) == FrameAction::Detect).collect();
        assert_eq!(detects, vec![0, 5]);
        assert_eq!(Strategy::m2().action(3, true), FrameAction::Track);
        assert_eq!(Strategy::m2().action(3, false), FrameAction::Skip);
        assert_eq!(Strategy::M3.action(0, false), FrameAction::Detect);
        assert_eq!(Strategy::M3.action(7, false), FrameAction::TrackThenDetect);
        assert_eq!("m2".parse::<Strategy>().unwrap(), Strategy::m2());
        assert!("M4".parse::<Strategy>().is_err());
    }

    #[test]
    fn roi_tiers() {
        let cam = &rig(4).cameras()[0].clone();
        let tiers = RoiTiers::default();
        let mut st = CameraTrackState::new(0);
        assert_eq!(schedule_roi(&st, None, cam, &tiers).0, TrackMode::FullImage);
        st.last_box = Some(BBox::from_center(PixelPoint::new(300.0, 200.0), 20.0, 20.0));
        let (mode, rois) = schedule_roi(&st, None, cam, &tiers);
        assert_eq!(mode, TrackMode::Roi);
        assert_eq!(rois, vec![RoiBox::new(260, 160, 80, 80)]);

        st.lost_frm = 4;
        let pred = PixelPoint::new(500.0, 300.0);
        let (mode, rois) = schedule_roi(&st, Some(&pred), cam, &tiers);
        assert_eq!(mode, TrackMode::Roi);
        assert_eq!(rois, vec![RoiBox::new(400, 200, 200, 200)]);

        st.lost_frm = 6;
        assert_eq!(schedule_roi(&st, Some(&pred), cam, &tiers).0, TrackMode::FullImage);
        // Small boxes still get the minimum window.
        st.lost_frm = 0;
        st.last_box = Some(BBox::from_center(PixelPoint::new(300.0, 200.0), 4.0, 4.0));
        assert_eq!(
            schedule_roi(&st, None, cam, &tiers).1,
            vec![RoiBox::new(276, 176, 48, 48)]
        );
    }

    #[test]
    fn smoothness() {
        let lim = SmoothLimits::default();
        let mut buf = TrajectoryBuffer::new(38);
        let origin = WorldPoint::origin();
        assert!(validate_smooth(&buf, &WorldPoint::new(100.0, 0.0, 0.0), 1, &lim));
        buf.push(0, origin).unwrap();
        buf.push(1, origin).unwrap();
        assert!(validate_smooth(&buf, &WorldPoint::new(0.5, 0.0, 0.0), 2, &lim));
        assert!(!validate_smooth(&buf, &WorldPoint::new(3.0, 0.0, 0.0), 2, &lim));
        assert!(buf.push(1, origin).is_err());
    }

    #[test]
    fn buffer_is_bounded_and_predicts() {
        let mut buf = TrajectoryBuffer::new(3);
        for f in 0..10 {
            buf.push(f, WorldPoint::new(f as f64, 0.0, 0.0)).unwrap();
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.iter().next().unwrap().0, 7);
        assert_eq!(buf.predict(12), Some(WorldPoint::new(12.0, 0.0, 0.0)));
    }

    #[test]
    fn noiseless_tracking_is_exact() {
        let rig = rig(6);
        let pts = path(30);
        let det = OracleDetector::new(truth_table(&rig, &pts, &|_, _| false), NoiseModel::NOISELESS, 1);
        let mut pipe = Pipeline::new(&rig, &det, TrackerConfig::default());
        let src = Blank {
            rig: &rig,
            n: pts.len(),
        };
        let (out, stats) = run_sequence(&mut pipe, &src, Strategy::M3).unwrap();
        for (o, p) in out.iter().zip(&pts) {
            assert_eq!(o.status, Status::Ok);
            assert!((o.point3d.unwrap() - p).norm() < 1e-6);
            assert_eq!(o.visible_cameras, (0..6).collect::<Vec<_>>());
        }
        assert_eq!(stats.full_image_frames, 1);
        assert_eq!(stats.full_image_calls, 6);
    }

    #[test]
    fn occluded_cameras_get_projected_boxes() {
        let rig = rig(6);
        let pts = path(20);
        let hidden = |c: CameraId, f: usize| c < 2 && (5..15).contains(&f);
        let det = OracleDetector::new(truth_table(&rig, &pts, &hidden), NoiseModel::NOISELESS, 1);
        let mut pipe = Pipeline::new(&rig, &det, TrackerConfig::default());
        let src = Blank {
            rig: &rig,
            n: pts.len(),
        };
        let (out, _) = run_sequence(&mut pipe, &src, Strategy::M3).unwrap();
        let o = &out[10];
        assert_eq!(o.status, Status::Ok);
        assert_eq!(o.visible_cameras, vec![2, 3, 4, 5]);
        assert_eq!(o.per_camera_2d[&0].confidence, 0.0);
        assert!(o.per_camera_2d.contains_key(&1));
        assert_eq!(pipe.camera_state(2).unwrap().lost_frm, 0);
        // Counter after 10 hidden frames, then reset once visible.
        assert_eq!(out[19].visible_cameras.len(), 6);
        assert_eq!(pipe.camera_state(0).unwrap().lost_frm, 0);
    }

    #[test]
    fn invisible_frame_carries_forward_then_lost() {
        let rig = rig(4);
        let pts = vec![WorldPoint::new(1.0, 1.0, 0.11); 45];
        let hidden = |_: CameraId, f: usize| f >= 3;
        let det = OracleDetector::new(truth_table(&rig, &pts, &hidden), NoiseModel::NOISELESS, 1);
        let mut pipe = Pipeline::new(&rig, &det, TrackerConfig::default());
        let src = Blank {
            rig: &rig,
            n: pts.len(),
        };
        let (out, _) = run_sequence(&mut pipe, &src, Strategy::M3).unwrap();
        assert_eq!(out[3].status, Status::CarriedForward);
        assert_eq!(out[3].point3d, out[2].point3d);
        let first_lost = out.iter().position(|o| o.status == Status::Lost).unwrap();
        assert_eq!(first_lost, 3 + DEFAULT_BUFFER_CAPACITY);
        assert!(out[first_lost..]
            .iter()
            .all(|o| o.status == Status::Lost && o.point3d.is_none()));
    }

    #[test]
    fn missing_camera_frame_is_rig_mismatch() {
        let rig = rig(3);
        let det = OracleDetector::new(BTreeMap::new(), NoiseModel::NOISELESS, 1);
        let mut pipe = Pipeline::new(&rig, &det, TrackerConfig::default());
        let mut frames = FrameSet::default();
        frames.insert(0, None);
        frames.insert(1, None);
        assert_eq!(pipe.step(&frames, 0), Err(TrackerError::RigMismatch(2)));
    }

    #[test]
    fn m1_interpolates_between_detections() {
        let rig = rig(5);
        let pts: Vec<WorldPoint> = (0..11).map(|f| WorldPoint::new(f as f64 * 0.2, 0.0, 1.0)).collect();
        let det = OracleDetector::new(truth_table(&rig, &pts, &|_, _| false), NoiseModel::NOISELESS, 1);
        let mut pipe = Pipeline::new(&rig, &det, TrackerConfig::default());
        let src = Blank {
            rig: &rig,
            n: pts.len(),
        };
        let (out, stats) = run_sequence(&mut pipe, &src, Strategy::m1()).unwrap();
        assert_eq!(stats.full_image_frames, 3);
        assert_eq!(stats.roi_calls, 0);
        for (o, p) in out.iter().zip(&pts) {
            let expect = if o.frame_no % 5 == 0 {
                Status::Ok
            } else {
                Status::Interpolated
            };
            assert_eq!(o.status, expect);
            assert!((o.point3d.unwrap() - p).norm() < 1e-6);
        }
    }

    #[test]
    fn record_round_trip() {
        let mut per = BTreeMap::new();
        per.insert(
            3,
            Camera2D {
                bbox: BBox::new(10.25, 20.5, 8.0, 7.5),
                confidence: 0.97,
            },
        );
        per.insert(
            7,
            Camera2D {
                bbox: BBox::new(1.0, 2.0, 3.0, 4.0),
                confidence: 0.0,
            },
        );
        let outs = vec![
            FrameOutput {
                frame_no: 4,
                status: Status::Ok,
                point3d: Some(WorldPoint::new(1.5, -2.25, 0.125)),
                visible_cameras: vec![3],
                per_camera_2d: per,
            },
            FrameOutput::lost(5),
        ];
        let text = write_outputs(&outs);
        assert_eq!(parse_outputs(&text).unwrap(), outs);
        assert!(parse_outputs("1 OK 1 2 3 1 4 5").is_err());
    }
}
