//! Synthetic scenes: camera rigs around a pitch, piecewise ballistic/rolling
//! ball trajectories, per-camera occlusion episodes, optional rendered
//! frames, and the on-disk dataset layout.
//!
//! Dataset directory:
//!
//! ```text
//! rig.txt          cameras, one per line
//! court.txt        court in ground meters
//! truth3d.txt      frm_no x y z
//! sequence.txt     key=value metadata
//! occlusions.txt   camera start end   (end exclusive)
//! C000/groundtruth.txt   frm_no, x, y, w, h, vis
//! C000/court.txt         court in pixels for this camera (when visible)
//! C000/C000F0000.pgm     frames, when rendered
//! C000/C000F9999.pgm     ball-free background, when rendered
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::court::{parse_court_file, CourtError, CourtFile2D, CourtModel, Polygon};
use crate::detector::BBox;
use crate::detector::{disc_coverage, stream_seed, FrameSet, NoiseModel, OracleDetector, OracleTruth};
use crate::eval::{parse_groundtruth, parse_truth3d, render_groundtruth, render_truth3d, EvalError, GtRecord};
use crate::fusion::project_ball_box;
use crate::geometry::{Camera, CameraId, CameraIntrinsics, CameraPose, GeometryError, Rig, WorldPoint};
use crate::raster::{GrayFrame, RasterError};
use crate::tracker::{FrameSource, TrackerError};

pub const GRAVITY: f64 = 9.81;
/// Frame index of the background image in each camera folder.
pub const BACKGROUND_FRAME: usize = 9999;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("insufficient coverage: {0}")]
    InsufficientCoverage(String),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Court(#[from] CourtError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, msg: impl ToString) -> SimError {
    SimError::Parse {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Rig layout

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookAtPolicy {
    CourtCenter,
    /// Each camera aims halfway between the court center and the court point
    /// nearest to it.
    Zones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigLayout {
    pub court_length: f64,
    pub court_width: f64,
    pub n_cameras: usize,
    pub mount_height: f64,
    /// Distance of the camera rectangle outside the court boundary.
    pub mount_offset: f64,
    pub look_at: LookAtPolicy,
    pub focal_px: f64,
    pub image_width: u32,
    pub image_height: u32,
    /// Every court ground point must lie in the image of this many cameras.
    pub min_coverage: usize,
}

impl Default for RigLayout {
    fn default() -> Self {
        Self {
            court_length: 105.0,
            court_width: 68.0,
            n_cameras: 36,
            mount_height: 20.0,
            mount_offset: 10.0,
            look_at: LookAtPolicy::CourtCenter,
            focal_px: 2000.0,
            image_width: 2560,
            image_height: 1536,
            min_coverage: 4,
        }
    }
}

impl RigLayout {
    pub fn court(&self) -> Result<CourtModel, SimError> {
        Ok(CourtModel::rectangle(self.court_length, self.court_width)?)
    }

    /// Mount positions, evenly spaced along the offset rectangle starting
    /// from the middle of the near side, counter-clockwise. Position `k` sits
    /// at arc length `(k + 0.5) P / n`, so the layout is mirror symmetric
    /// about `x = length / 2`.
    pub fn mount_points(&self) -> Vec<WorldPoint> {
        let (l, w, o) = (self.court_length, self.court_width, self.mount_offset);
        let (x0, x1, y0, y1) = (-o, l + o, -o, w + o);
        let (lx, ly) = (x1 - x0, y1 - y0);
        let perimeter = 2.0 * (lx + ly);
        let n = self.n_cameras;
        (0..n)
            .map(|k| {
                // Arc length from the near-side midpoint, counter-clockwise.
                let s = (k as f64 + 0.5) * perimeter / n as f64;
                let legs = [lx / 2.0, ly, lx, ly, lx / 2.0];
                let mut rest = s;
                let mut leg = 0;
                while leg < legs.len() - 1 && rest > legs[leg] {
                    rest -= legs[leg];
                    leg += 1;
                }
                let (x, y) = match leg {
                    0 => (l / 2.0 + rest, y0),
                    1 => (x1, y0 + rest),
                    2 => (x1 - rest, y1),
                    3 => (x0, y1 - rest),
                    _ => (x0 + rest, y0),
                };
                WorldPoint::new(x, y, self.mount_height)
            })
            .collect()
    }

    fn target(&self, eye: &WorldPoint) -> WorldPoint {
        let (l, w) = (self.court_length, self.court_width);
        let center = WorldPoint::new(l / 2.0, w / 2.0, 0.0);
        match self.look_at {
            LookAtPolicy::CourtCenter => center,
            LookAtPolicy::Zones => {
                let near = WorldPoint::new(eye.x.clamp(0.0, l), eye.y.clamp(0.0, w), 0.0);
                WorldPoint::from((center.coords + near.coords) / 2.0)
            }
        }
    }
}

/// Ground sample points used for the coverage check.
fn coverage_grid(l: f64, w: f64) -> Vec<WorldPoint> {
    let (nx, ny) = (11, 7);
    let mut pts = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            pts.push(WorldPoint::new(
                l * i as f64 / (nx - 1) as f64,
                w * j as f64 / (ny - 1) as f64,
                0.0,
            ));
        }
    }
    pts
}

/// Number of cameras whose image contains `p`.
pub fn coverage(rig: &Rig, p: &WorldPoint) -> usize {
    rig.cameras().iter().filter(|c| c.project_visible(p).is_some()).count()
}

pub fn build_rig(layout: &RigLayout) -> Result<Rig, SimError> {
    if layout.n_cameras < 2 {
        return Err(SimError::InsufficientCoverage(format!(
            "{} camera(s) cannot triangulate",
            layout.n_cameras
        )));
    }
    if !(layout.court_length > 0.0 && layout.court_width > 0.0 && layout.focal_px > 0.0) {
        return Err(SimError::InvalidConfig(
            "court size and focal length must be positive".into(),
        ));
    }
    let k = CameraIntrinsics::simple(
        layout.focal_px,
        layout.focal_px,
        layout.image_width as f64 / 2.0,
        layout.image_height as f64 / 2.0,
    )?;
    let cameras = layout
        .mount_points()
        .into_iter()
        .enumerate()
        .map(|(id, eye)| {
            let pose = CameraPose::look_at(&eye, &layout.target(&eye), &Vector3::z())?;
            Camera::new(id, k, pose, layout.image_width, layout.image_height)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rig = Rig::new(cameras)?;
    for p in coverage_grid(layout.court_length, layout.court_width) {
        let n = coverage(&rig, &p);
        if n < layout.min_coverage {
            return Err(SimError::InsufficientCoverage(format!(
                "court point ({}, {}) is seen by {n} camera(s), need {}",
                p.x, p.y, layout.min_coverage
            )));
        }
    }
    Ok(rig)
}

// ---------------------------------------------------------------------------
// Trajectory

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segment {
    /// Free flight under gravity from `p0` with velocity `v0` at time `t0`.
    Ballistic { t0: f64, p0: WorldPoint, v0: Vector3<f64> },
    /// Straight-line roll with constant deceleration until rest.
    Roll {
        t0: f64,
        p0: WorldPoint,
        v0: Vector3<f64>,
        decel: f64,
    },
}

impl Segment {
    pub fn start(&self) -> f64 {
        match *self {
            Segment::Ballistic { t0, .. } | Segment::Roll { t0, .. } => t0,
        }
    }

    pub fn position(&self, t: f64) -> WorldPoint {
        match *self {
            Segment::Ballistic { t0, p0, v0 } => {
                let tau = t - t0;
                p0 + v0 * tau - Vector3::z() * (0.5 * GRAVITY * tau * tau)
            }
            Segment::Roll { t0, p0, v0, decel } => {
                let speed = v0.norm();
                if speed == 0.0 {
                    return p0;
                }
                let tau = (t - t0).min(speed / decel);
                let d = speed * tau - 0.5 * decel * tau * tau;
                p0 + v0 / speed * d
            }
        }
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        match *self {
            Segment::Ballistic { t0, v0, .. } => v0 - Vector3::z() * (GRAVITY * (t - t0)),
            Segment::Roll { t0, v0, decel, .. } => {
                let speed = v0.norm();
                if speed == 0.0 {
                    return v0;
                }
                let s = (speed - decel * (t - t0)).max(0.0);
                v0 / speed * s
            }
        }
    }
}

/// Piecewise trajectory of the ball center. Segments are sorted by start
/// time and join continuously.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryModel {
    pub segments: Vec<Segment>,
}

const RESTITUTION: f64 = 0.6;
const BOUNCE_FRICTION: f64 = 0.8;
const MIN_BOUNCE_VZ: f64 = 1.0;
const MAX_KICK_DV: f64 = 14.5;

impl TrajectoryModel {
    pub fn stationary(p: WorldPoint) -> Self {
        Self {
            segments: vec![Segment::Roll {
                t0: 0.0,
                p0: p,
                v0: Vector3::zeros(),
                decel: 1.0,
            }],
        }
    }

    /// A single flight with no ground contact.
    pub fn ballistic(p0: WorldPoint, v0: Vector3<f64>) -> Self {
        Self {
            segments: vec![Segment::Ballistic { t0: 0.0, p0, v0 }],
        }
    }

    fn segment_at(&self, t: f64) -> &Segment {
        let k = self.segments.partition_point(|s| s.start() <= t);
        &self.segments[k.saturating_sub(1)]
    }

    pub fn position(&self, t: f64) -> WorldPoint {
        self.segment_at(t).position(t)
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        self.segment_at(t).velocity(t)
    }

    /// Random play on the court for `duration` seconds: passes along the
    /// ground and lofted kicks toward random court points, bounces with
    /// restitution, and rolls to rest. Velocity changes stay below
    /// 15 m/s per event.
    pub fn random(rng: &mut impl Rng, court: &CourtModel, duration: f64, radius: f64) -> Self {
        let (l, w) = (court.length(), court.width());
        let margin = 0.1 * l.min(w);
        let pick = |rng: &mut dyn rand::RngCore| {
            WorldPoint::new(
                rng.random_range(margin..l - margin),
                rng.random_range(margin..w - margin),
                radius,
            )
        };
        let start = pick(rng);
        let mut segments = vec![Segment::Roll {
            t0: 0.0,
            p0: start,
            v0: Vector3::zeros(),
            decel: 1.0,
        }];
        let mut next_kick: f64 = rng.random_range(0.2..1.0);
        loop {
            let seg = *segments.last().expect("non-empty");
            let t0 = seg.start();
            if t0 >= duration {
                break;
            }
            match seg {
                Segment::Ballistic { p0, v0, .. } => {
                    // Landing: p0.z + v0.z tau - g tau^2 / 2 = radius.
                    let a = 0.5 * GRAVITY;
                    let disc = v0.z * v0.z + 4.0 * a * (p0.z - radius);
                    let tau = (v0.z + disc.max(0.0).sqrt()) / (2.0 * a);
                    let t_land = t0 + tau;
                    let v_land = seg.velocity(t_land);
                    let mut p_land = seg.position(t_land);
                    p_land.z = radius;
                    let vxy = Vector3::new(v_land.x, v_land.y, 0.0) * BOUNCE_FRICTION;
                    let vz = -v_land.z * RESTITUTION;
                    segments.push(if vz < MIN_BOUNCE_VZ {
                        Segment::Roll {
                            t0: t_land,
                            p0: p_land,
                            v0: vxy,
                            decel: 1.5,
                        }
                    } else {
                        Segment::Ballistic {
                            t0: t_land,
                            p0: p_land,
                            v0: vxy + Vector3::z() * vz,
                        }
                    });
                }
                Segment::Roll { .. } => {
                    let t_kick = next_kick.max(t0 + 0.04);
                    if t_kick >= duration {
                        break;
                    }
                    let p = seg.position(t_kick);
                    let v_cur = seg.velocity(t_kick);
                    let target = pick(rng);
                    let dir = Vector3::new(target.x - p.x, target.y - p.y, 0.0);
                    let dist = dir.norm().max(1.0);
                    let dir = dir / dist;
                    let lofted = rng.random_bool(0.5);
                    let mut v_new = if lofted {
                        dir * rng.random_range(4.0..12.0) + Vector3::z() * rng.random_range(3.0..8.0)
                    } else {
                        dir * rng.random_range(5.0..14.0)
                    };
                    let dv = v_new - v_cur;
                    if dv.norm() > MAX_KICK_DV {
                        v_new = v_cur + dv * (MAX_KICK_DV / dv.norm());
                    }
                    segments.push(if v_new.z > 0.0 {
                        Segment::Ballistic {
                            t0: t_kick,
                            p0: p,
                            v0: v_new,
                        }
                    } else {
                        let speed = v_new.norm();
                        Segment::Roll {
                            t0: t_kick,
                            p0: p,
                            v0: Vector3::new(v_new.x, v_new.y, 0.0),
                            decel: (speed * speed / (2.0 * dist)).clamp(0.5, 6.0),
                        }
                    });
                    next_kick = t_kick + rng.random_range(1.5..4.0);
                }
            }
        }
        Self { segments }
    }
}

// ---------------------------------------------------------------------------
// Occlusion

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Occlusion {
    pub camera: CameraId,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OcclusionSchedule {
    pub episodes: Vec<Occlusion>,
}

impl OcclusionSchedule {
    /// One episode of `min_len..=max_len` frames for each of
    /// `round(fraction * n)` randomly chosen cameras.
    pub fn random(
        rng: &mut impl Rng,
        cameras: &[CameraId],
        n_frames: usize,
        fraction: f64,
        min_len: usize,
        max_len: usize,
    ) -> Self {
        let count = ((fraction * cameras.len() as f64).round() as usize).min(cameras.len());
        if n_frames == 0 || count == 0 {
            return Self::default();
        }
        let mut chosen: Vec<usize> = sample(rng, cameras.len(), count).into_vec();
        chosen.sort_unstable();
        let episodes = chosen
            .into_iter()
            .map(|k| {
                let len = rng.random_range(min_len..=max_len.max(min_len)).min(n_frames);
                let start = rng.random_range(0..=n_frames - len);
                Occlusion {
                    camera: cameras[k],
                    start,
                    end: start + len,
                }
            })
            .collect();
        Self { episodes }
    }

    pub fn is_occluded(&self, camera: CameraId, frame: usize) -> bool {
        self.episodes
            .iter()
            .any(|e| e.camera == camera && (e.start..e.end).contains(&frame))
    }

    pub fn validate(&self, n_frames: usize) -> Result<(), SimError> {
        match self.episodes.iter().find(|e| e.start >= e.end || e.end > n_frames) {
            Some(e) => Err(SimError::InvalidConfig(format!(
                "occlusion {}..{} on camera {} outside 0..{n_frames}",
                e.start, e.end, e.camera
            ))),
            None => Ok(()),
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# camera start end\n");
        for e in &self.episodes {
            s.push_str(&format!("{} {} {}\n", e.camera, e.start, e.end));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut episodes = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| format!("line {}: {e}", i + 1))?;
            if f.len() != 3 {
                return Err(format!("line {}: expected 3 fields", i + 1));
            }
            episodes.push(Occlusion {
                camera: f[0],
                start: f[1],
                end: f[2],
            });
        }
        Ok(Self { episodes })
    }
}

// ---------------------------------------------------------------------------
// Simulation

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub fps: f64,
    pub n_frames: usize,
    pub noise: NoiseModel,
    pub render: bool,
    pub ball_radius_m: f64,
    pub occlusion_fraction: f64,
    pub occlusion_min_len: usize,
    pub occlusion_max_len: usize,
    /// Moving gray blobs drawn into rendered frames.
    pub distractors: usize,
    pub layout: RigLayout,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fps: 25.0,
            n_frames: 450,
            noise: NoiseModel::default(),
            render: false,
            ball_radius_m: 0.11,
            occlusion_fraction: 0.3,
            occlusion_min_len: 20,
            occlusion_max_len: 60,
            distractors: 4,
            layout: RigLayout::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.into()));
        if !(self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if self.n_frames == 0 || self.n_frames > BACKGROUND_FRAME {
            return bad("n_frames must be in 1..=9999");
        }
        if !(self.ball_radius_m > 0.0) {
            return bad("ball radius must be positive");
        }
        if !(0.0..=1.0).contains(&self.occlusion_fraction) {
            return bad("occlusion fraction must be in [0, 1]");
        }
        if self.occlusion_min_len == 0 || self.occlusion_min_len > self.occlusion_max_len {
            return bad("occlusion lengths must satisfy 0 < min <= max");
        }
        let n = &self.noise;
        if !(n.sigma_px >= 0.0 && (0.0..=1.0).contains(&n.p_miss) && n.lambda_fp >= 0.0) {
            return bad("noise parameters out of range");
        }
        if !(0.0..1.0).contains(&n.fp_conf_min) {
            return bad("fp_conf_min must be in [0, 1)");
        }
        Ok(())
    }
}

/// Stream tags for derived seeds.
const TAG_TRAJECTORY: u64 = 1;
const TAG_OCCLUSION: u64 = 2;
const TAG_RENDER: u64 = 3;
const TAG_DISTRACTOR: u64 = 4;

fn stream(seed: u64, tag: u64, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, tag, k))
}

/// Sequence-level metadata stored in `sequence.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMeta {
    pub seed: u64,
    pub fps: f64,
    pub n_frames: usize,
    pub ball_radius_m: f64,
    pub noise: NoiseModel,
    pub rendered: bool,
}

impl SequenceMeta {
    pub fn render(&self) -> String {
        let n = &self.noise;
        format!(
            "seed={}\nfps={}\nn_frames={}\nball_radius_m={}\nsigma_px={}\np_miss={}\nlambda_fp={}\nfp_conf_min={}\nrendered={}\n",
            self.seed,
            self.fps,
            self.n_frames,
            self.ball_radius_m,
            n.sigma_px,
            n.p_miss,
            n.lambda_fp,
            n.fp_conf_min,
            self.rendered
        )
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut kv = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, k: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            kv.get(k)
                .ok_or_else(|| format!("missing key '{k}'"))?
                .parse::<T>()
                .map_err(|e| format!("key '{k}': {e}"))
        }
        Ok(Self {
            seed: get(&kv, "seed")?,
            fps: get(&kv, "fps")?,
            n_frames: get(&kv, "n_frames")?,
            ball_radius_m: get(&kv, "ball_radius_m")?,
            noise: NoiseModel {
                sigma_px: get(&kv, "sigma_px")?,
                p_miss: get(&kv, "p_miss")?,
                lambda_fp: get(&kv, "lambda_fp")?,
                fp_conf_min: get(&kv, "fp_conf_min")?,
            },
            rendered: get(&kv, "rendered")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: SequenceMeta,
    pub rig: Rig,
    pub court: CourtModel,
    /// Pixel-space court per camera that sees it.
    pub camera_courts: BTreeMap<CameraId, CourtFile2D>,
    pub truth3d: BTreeMap<usize, WorldPoint>,
    pub groundtruth: BTreeMap<CameraId, Vec<GtRecord>>,
    pub occlusions: OcclusionSchedule,
    /// Rendered frames keyed by (camera, frame); empty when not rendered.
    pub frames: BTreeMap<(CameraId, usize), GrayFrame>,
    pub backgrounds: BTreeMap<CameraId, GrayFrame>,
}

impl Dataset {
    /// Ground truth for the oracle detector: visible rows are visible, and
    /// occluded or out-of-image rows carry no ball.
    pub fn oracle_truth(&self) -> BTreeMap<(CameraId, usize), OracleTruth> {
        self.groundtruth
            .iter()
            .flat_map(|(&cam, rows)| {
                rows.iter().filter(|r| r.vis).map(move |r| {
                    (
                        (cam, r.frm_no),
                        OracleTruth {
                            bbox: r.bbox,
                            visible: true,
                        },
                    )
                })
            })
            .collect()
    }

    pub fn oracle_detector(&self, seed: u64) -> OracleDetector {
        OracleDetector::new(self.oracle_truth(), self.meta.noise, seed)
    }
}

impl FrameSource for Dataset {
    fn rig(&self) -> &Rig {
        &self.rig
    }

    fn frame_count(&self) -> usize {
        self.meta.n_frames
    }

    fn frames(&self, frame_no: usize) -> Result<FrameSet, TrackerError> {
        if frame_no >= self.meta.n_frames {
            return Err(TrackerError::DatasetGap(frame_no));
        }
        let mut set = FrameSet::default();
        for cam in self.rig.ids() {
            let frame = if self.meta.rendered {
                Some(
                    self.frames
                        .get(&(cam, frame_no))
                        .cloned()
                        .ok_or(TrackerError::DatasetGap(frame_no))?,
                )
            } else {
                None
            };
            set.insert(cam, frame);
        }
        Ok(set)
    }

    fn background(&self, camera: CameraId) -> Option<GrayFrame> {
        self.backgrounds.get(&camera).cloned()
    }
}

/// Ground-truth row for one camera and frame. A ball behind the camera
/// gives an all-zero box; a ball whose center projects outside the image
/// gives an all-zero box; otherwise the box is kept and `vis` records
/// whether the ball is unoccluded.
pub fn gt_row(cam: &Camera, frame: usize, p: &WorldPoint, radius: f64, occluded: bool) -> GtRecord {
    match project_ball_box(cam, p, radius) {
        Some(b) if cam.in_image(&b.center()) => GtRecord {
            frm_no: frame,
            bbox: b,
            vis: !occluded,
        },
        _ => GtRecord {
            frm_no: frame,
            bbox: BBox::new(0.0, 0.0, 0.0, 0.0),
            vis: false,
        },
    }
}

/// Full pipeline from a config: rig, random trajectory, occlusions, then
/// [`simulate`].
pub fn generate(config: &SimConfig) -> Result<Dataset, SimError> {
    config.validate()?;
    let rig = build_rig(&config.layout)?;
    let court = config.layout.court()?;
    let duration = config.n_frames as f64 / config.fps;
    let trajectory = TrajectoryModel::random(
        &mut stream(config.seed, TAG_TRAJECTORY, 0),
        &court,
        duration,
        config.ball_radius_m,
    );
    let ids: Vec<CameraId> = rig.ids().collect();
    let occlusions = OcclusionSchedule::random(
        &mut stream(config.seed, TAG_OCCLUSION, 0),
        &ids,
        config.n_frames,
        config.occlusion_fraction,
        config.occlusion_min_len,
        config.occlusion_max_len,
    );
    simulate(config, &rig, &court, &trajectory, &occlusions)
}

pub fn simulate(
    config: &SimConfig,
    rig: &Rig,
    court: &CourtModel,
    trajectory: &TrajectoryModel,
    occlusions: &OcclusionSchedule,
) -> Result<Dataset, SimError> {
    config.validate()?;
    occlusions.validate(config.n_frames)?;
    let truth3d: BTreeMap<usize, WorldPoint> = (0..config.n_frames)
        .map(|f| (f, trajectory.position(f as f64 / config.fps)))
        .collect();
    let mut groundtruth = BTreeMap::new();
    let mut camera_courts = BTreeMap::new();
    for cam in rig.cameras() {
        let rows: Vec<GtRecord> = truth3d
            .iter()
            .map(|(&f, p)| gt_row(cam, f, p, config.ball_radius_m, occlusions.is_occluded(cam.id, f)))
            .collect();
        groundtruth.insert(cam.id, rows);
        if let Ok(cf) = court.camera_court_file(cam) {
            camera_courts.insert(cam.id, cf);
        }
    }
    let mut frames = BTreeMap::new();
    let mut backgrounds = BTreeMap::new();
    if config.render {
        let players = Distractors::new(config, court);
        for cam in rig.cameras() {
            let mask = camera_courts.get(&cam.id).map(|c| c.contour_polygon());
            let base = background_image(cam, mask.as_ref());
            backgrounds.insert(
                cam.id,
                add_sensor_noise(
                    &base,
                    &mut stream(config.seed, TAG_RENDER, stream_seed(cam.id as u64, u64::MAX, 0)),
                ),
            );
            for (&f, p) in &truth3d {
                let mut img = base.clone();
                for pos in players.positions(f as f64 / config.fps) {
                    draw_player(&mut img, cam, &pos);
                }
                let row = &groundtruth[&cam.id][f];
                if row.vis {
                    if let Some(b) = project_ball_box(cam, p, config.ball_radius_m) {
                        draw_disc(&mut img, &b, BALL_GRAY);
                    }
                }
                let mut rng = stream(config.seed, TAG_RENDER, stream_seed(cam.id as u64, f as u64, 1));
                frames.insert((cam.id, f), add_sensor_noise(&img, &mut rng));
            }
        }
    }
    Ok(Dataset {
        meta: SequenceMeta {
            seed: config.seed,
            fps: config.fps,
            n_frames: config.n_frames,
            ball_radius_m: config.ball_radius_m,
            noise: config.noise,
            rendered: config.render,
        },
        rig: rig.clone(),
        court: court.clone(),
        camera_courts,
        truth3d,
        groundtruth,
        occlusions: occlusions.clone(),
        frames,
        backgrounds,
    })
}

// ---------------------------------------------------------------------------
// Rendering

const COURT_GRAY: u8 = 90;
const STANDS_GRAY: u8 = 60;
const PLAYER_GRAY: f64 = 150.0;
const BALL_GRAY: f64 = 235.0;
const SENSOR_NOISE: i32 = 2;

fn background_image(cam: &Camera, court: Option<&Polygon>) -> GrayFrame {
    let mut img = GrayFrame::filled(cam.width, cam.height, STANDS_GRAY);
    if let Some(poly) = court {
        for y in 0..cam.height {
            for x in 0..cam.width {
                if poly.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    img.set(x, y, COURT_GRAY);
                }
            }
        }
    }
    img
}

fn add_sensor_noise(img: &GrayFrame, rng: &mut impl Rng) -> GrayFrame {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let n = rng.random_range(-SENSOR_NOISE..=SENSOR_NOISE);
        *p = (*p as i32 + n).clamp(0, 255) as u8;
    }
    out
}

/// Blends a disc inscribed in `b` with anti-aliased coverage.
fn draw_disc(img: &mut GrayFrame, b: &BBox, gray: f64) {
    let c = b.center();
    let r = 0.5 * b.w.min(b.h);
    let (w, h) = img.dims();
    let x0 = (c.u - r - 1.0).floor().max(0.0) as u32;
    let y0 = (c.v - r - 1.0).floor().max(0.0) as u32;
    let x1 = ((c.u + r + 1.0).ceil().max(0.0) as u32).min(w);
    let y1 = ((c.v + r + 1.0).ceil().max(0.0) as u32).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            let cov = disc_coverage(x, y, c.u, c.v, r);
            if cov > 0.0 {
                let old = img.get(x, y) as f64;
                img.set(x, y, (old + (gray - old) * cov).round() as u8);
            }
        }
    }
}

/// Players as upright ellipses, 1.8 m tall and a third as wide.
fn draw_player(img: &mut GrayFrame, cam: &Camera, foot: &WorldPoint) {
    let head = foot + Vector3::z() * 1.8;
    let (Ok((pf, _)), Ok((ph, _))) = (cam.project(foot), cam.project(&head)) else {
        return;
    };
    let height = (pf.v - ph.v).abs().max(2.0);
    let (cu, cv) = ((pf.u + ph.u) / 2.0, (pf.v + ph.v) / 2.0);
    let (ru, rv) = (height / 6.0, height / 2.0);
    let (w, h) = img.dims();
    let x0 = (cu - ru).floor().max(0.0) as u32;
    let y0 = (cv - rv).floor().max(0.0) as u32;
    let x1 = ((cu + ru).ceil().max(0.0) as u32).min(w);
    let y1 = ((cv + rv).ceil().max(0.0) as u32).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            let du = (x as f64 + 0.5 - cu) / ru;
            let dv = (y as f64 + 0.5 - cv) / rv;
            if du * du + dv * dv <= 1.0 {
                img.set(x, y, PLAYER_GRAY as u8);
            }
        }
    }
}

/// Players moving at constant velocity, reflecting off the court edges.
struct Distractors {
    starts: Vec<(WorldPoint, Vector3<f64>)>,
    length: f64,
    width: f64,
}

impl Distractors {
    fn new(config: &SimConfig, court: &CourtModel) -> Self {
        let mut rng = stream(config.seed, TAG_DISTRACTOR, 0);
        let (l, w) = (court.length(), court.width());
        let starts = (0..config.distractors)
            .map(|_| {
                let p = WorldPoint::new(rng.random_range(0.0..l), rng.random_range(0.0..w), 0.0);
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let s = rng.random_range(1.0..6.0);
                (p, Vector3::new(a.cos() * s, a.sin() * s, 0.0))
            })
            .collect();
        Self {
            starts,
            length: l,
            width: w,
        }
    }

    fn positions(&self, t: f64) -> Vec<WorldPoint> {
        let reflect = |x: f64, lim: f64| {
            let period = 2.0 * lim;
            let m = x.rem_euclid(period);
            if m > lim {
                period - m
            } else {
                m
            }
        };
        self.starts
            .iter()
            .map(|(p, v)| {
                let q = p + v * t;
                WorldPoint::new(reflect(q.x, self.length), reflect(q.y, self.width), 0.0)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Disk layout

pub fn camera_dir_name(camera: CameraId) -> String {
    format!("C{camera:03}")
}

pub fn frame_file_name(camera: CameraId, frame: usize) -> String {
    format!("C{camera:03}F{frame:04}.pgm")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), SimError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String, SimError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("rig.txt"), dataset.rig.render())?;
    write_file(&dir.join("court.txt"), dataset.court.to_court_file().render())?;
    write_file(&dir.join("truth3d.txt"), render_truth3d(&dataset.truth3d))?;
    write_file(&dir.join("sequence.txt"), dataset.meta.render())?;
    write_file(&dir.join("occlusions.txt"), dataset.occlusions.render())?;
    for cam in dataset.rig.ids() {
        let cdir = dir.join(camera_dir_name(cam));
        fs::create_dir_all(&cdir).map_err(io_err(&cdir))?;
        let rows = dataset.groundtruth.get(&cam).map(Vec::as_slice).unwrap_or(&[]);
        write_file(&cdir.join("groundtruth.txt"), render_groundtruth(rows))?;
        if let Some(cf) = dataset.camera_courts.get(&cam) {
            write_file(&cdir.join("court.txt"), cf.render())?;
        }
        if let Some(bg) = dataset.backgrounds.get(&cam) {
            bg.write_pgm(&cdir.join(frame_file_name(cam, BACKGROUND_FRAME)))?;
        }
    }
    for (&(cam, f), img) in &dataset.frames {
        img.write_pgm(&dir.join(camera_dir_name(cam)).join(frame_file_name(cam, f)))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, SimError> {
    if !dir.is_dir() {
        return Err(SimError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        });
    }
    let p = dir.join("rig.txt");
    let rig = Rig::parse(&read_text(&p)?).map_err(|e| parse_err(&p, e))?;
    let p = dir.join("court.txt");
    let court = CourtModel::from_court_file(&parse_court_file(&read_text(&p)?).map_err(|e| parse_err(&p, e))?)
        .map_err(|e| parse_err(&p, e))?;
    let p = dir.join("truth3d.txt");
    let truth3d = parse_truth3d(&read_text(&p)?).map_err(|e: EvalError| parse_err(&p, e))?;
    let p = dir.join("sequence.txt");
    let meta = SequenceMeta::parse(&read_text(&p)?).map_err(|e| parse_err(&p, e))?;
    let p = dir.join("occlusions.txt");
    let occlusions = if p.exists() {
        OcclusionSchedule::parse(&read_text(&p)?).map_err(|e| parse_err(&p, e))?
    } else {
        OcclusionSchedule::default()
    };
    if truth3d.keys().copied().ne(0..meta.n_frames) {
        return Err(parse_err(&dir.join("truth3d.txt"), "frames are not 0..n_frames"));
    }

    let mut groundtruth = BTreeMap::new();
    let mut camera_courts = BTreeMap::new();
    let mut frames = BTreeMap::new();
    let mut backgrounds = BTreeMap::new();
    for cam in rig.ids() {
        let cdir = dir.join(camera_dir_name(cam));
        let p = cdir.join("groundtruth.txt");
        let rows = parse_groundtruth(&read_text(&p)?).map_err(|e| parse_err(&p, e))?;
        if rows.iter().map(|r| r.frm_no).ne(0..meta.n_frames) {
            return Err(parse_err(&p, "rows are not frames 0..n_frames in order"));
        }
        groundtruth.insert(cam, rows);
        let p = cdir.join("court.txt");
        if p.exists() {
            camera_courts.insert(cam, parse_court_file(&read_text(&p)?).map_err(|e| parse_err(&p, e))?);
        }
        let p = cdir.join(frame_file_name(cam, BACKGROUND_FRAME));
        if p.exists() {
            backgrounds.insert(cam, GrayFrame::read_pgm(&p)?);
        }
        if meta.rendered {
            for f in 0..meta.n_frames {
                let p = cdir.join(frame_file_name(cam, f));
                frames.insert((cam, f), GrayFrame::read_pgm(&p).map_err(|e| parse_err(&p, e))?);
            }
        }
    }
    Ok(Dataset {
        meta,
        rig,
        court,
        camera_courts,
        truth3d,
        groundtruth,
        occlusions,
        frames,
        backgrounds,
    })
}
