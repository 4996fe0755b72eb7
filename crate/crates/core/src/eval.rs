//! Detection and 3D metrics.
//!
//! Counts follow the convention `ballNum` (detections emitted), `gtNum`
//! (visible ground-truth instances) and `hitNum` (detections matched one to
//! one with ground truth), with `precision = hit / ball` and
//! `recall = hit / gt`. Undefined quotients are reported as 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::detector::{detection_order, BBox, Detection};
use crate::geometry::{CameraId, WorldPoint};
use crate::tracker::{FrameOutput, Status};

/// Physical ball diameter used to turn a metric distance into pixels at the
/// depth of a ground-truth box.
pub const BALL_DIAMETER_M: f64 = 0.22;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("frame misalignment: {0}")]
    FrameMisalignment(String),
    #[error("malformed groundtruth at line {line}: {msg}")]
    MalformedGroundTruth { line: usize, msg: String },
    #[error("malformed truth3d at line {line}: {msg}")]
    MalformedTruth { line: usize, msg: String },
}

/// One `groundtruth.txt` row: `frm_no, x, y, w, h, vis` with `(x, y)` the
/// top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtRecord {
    pub frm_no: usize,
    pub bbox: BBox,
    pub vis: bool,
}

impl GtRecord {
    pub fn to_row(&self) -> String {
        let b = &self.bbox;
        format!(
            "{}, {}, {}, {}, {}, {}",
            self.frm_no,
            b.x,
            b.y,
            b.w,
            b.h,
            u8::from(self.vis)
        )
    }
}

pub fn render_groundtruth(records: &[GtRecord]) -> String {
    let mut s = String::from("# frm_no, x, y, w, h, vis\n");
    for r in records {
        s.push_str(&r.to_row());
        s.push('\n');
    }
    s
}

pub fn parse_groundtruth(text: &str) -> Result<Vec<GtRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| EvalError::MalformedGroundTruth { line: i + 1, msg };
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, got {}", fields.len())));
        }
        let frm_no = fields[0]
            .parse::<usize>()
            .map_err(|e| err(format!("frm_no '{}': {e}", fields[0])))?;
        let mut v = [0.0; 4];
        for (k, f) in fields[1..5].iter().enumerate() {
            v[k] = f.parse::<f64>().map_err(|e| err(format!("'{f}': {e}")))?;
            if !v[k].is_finite() {
                return Err(err(format!("'{f}' is not finite")));
            }
        }
        if v[2] < 0.0 || v[3] < 0.0 {
            return Err(err("negative box size".into()));
        }
        let vis = match fields[5] {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("vis must be 0 or 1, got '{other}'"))),
        };
        out.push(GtRecord {
            frm_no,
            bbox: BBox::new(v[0], v[1], v[2], v[3]),
            vis,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchCriterion {
    /// IOU at least the threshold.
    IouAt(f64),
    /// Box centers at most this many pixels apart.
    CenterDistPx(f64),
    /// Box centers at most this many meters apart at the depth of the
    /// ground-truth ball, whose box width spans [`BALL_DIAMETER_M`].
    Dist3dM(f64),
}

impl MatchCriterion {
    /// The three report columns: `iou=0.2`, `iou=1e-6`, `dist=50`.
    pub fn report_columns() -> [MatchCriterion; 3] {
        [
            MatchCriterion::IouAt(0.2),
            MatchCriterion::IouAt(1e-6),
            MatchCriterion::Dist3dM(0.5),
        ]
    }

    pub fn label(&self) -> String {
        match self {
            MatchCriterion::IouAt(t) if *t < 1e-3 => format!("iou={t:e}"),
            MatchCriterion::IouAt(t) => format!("iou={t}"),
            MatchCriterion::CenterDistPx(d) => format!("px={d}"),
            MatchCriterion::Dist3dM(d) => format!("dist={}", (d * 100.0).round()),
        }
    }

    pub fn holds(&self, det: &BBox, gt: &BBox) -> bool {
        match *self {
            MatchCriterion::IouAt(t) => det.iou(gt) >= t,
            MatchCriterion::CenterDistPx(d) => det.center().distance(&gt.center()) <= d,
            MatchCriterion::Dist3dM(d) => {
                let px_per_m = gt.w.max(gt.h) / BALL_DIAMETER_M;
                det.center().distance(&gt.center()) <= d * px_per_m
            }
        }
    }
}

/// `ball`: detections, `gt`: visible ground-truth instances, `hit`: matches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub ball: u64,
    pub gt: u64,
    pub hit: u64,
}

impl Counts {
    pub fn new(ball: u64, gt: u64, hit: u64) -> Self {
        Self { ball, gt, hit }
    }

    pub fn add(&mut self, other: &Counts) {
        self.ball += other.ball;
        self.gt += other.gt;
        self.hit += other.hit;
    }

    pub fn precision_recall(&self) -> (f64, f64) {
        precision_recall(self)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

pub fn precision_recall(c: &Counts) -> (f64, f64) {
    let q = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    (q(c.hit, c.ball), q(c.hit, c.gt))
}

/// Greedy one-to-one matching in detection order. Returns a hit flag per
/// detection, in the order of `dets` as sorted by [`detection_order`].
fn match_frame(dets: &[Detection], gts: &[GtRecord], criterion: &MatchCriterion) -> Vec<(Detection, bool)> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_order);
    let mut used = vec![false; gts.len()];
    sorted
        .into_iter()
        .map(|d| {
            let hit = gts
                .iter()
                .enumerate()
                .find(|(k, g)| g.vis && !used[*k] && criterion.holds(&d.bbox, &g.bbox))
                .map(|(k, _)| k);
            if let Some(k) = hit {
                used[k] = true;
            }
            (d, hit.is_some())
        })
        .collect()
}

fn check_alignment(
    dets: &BTreeMap<usize, Vec<Detection>>,
    gts: &BTreeMap<usize, Vec<GtRecord>>,
) -> Result<(), EvalError> {
    if let Some(f) = dets.keys().find(|f| !gts.contains_key(f)) {
        return Err(EvalError::FrameMisalignment(format!(
            "detections for frame {f} without ground truth"
        )));
    }
    Ok(())
}

/// Groups ground-truth rows by frame.
pub fn group_groundtruth(records: &[GtRecord]) -> BTreeMap<usize, Vec<GtRecord>> {
    let mut m: BTreeMap<usize, Vec<GtRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.frm_no).or_default().push(*r);
    }
    m
}

/// Counts over a sequence. Frames without detections still contribute their
/// visible ground truth.
pub fn match_sequence(
    dets: &BTreeMap<usize, Vec<Detection>>,
    gts: &BTreeMap<usize, Vec<GtRecord>>,
    criterion: &MatchCriterion,
) -> Result<Counts, EvalError> {
    check_alignment(dets, gts)?;
    let mut c = Counts::default();
    for (f, frame_gts) in gts {
        c.gt += frame_gts.iter().filter(|g| g.vis).count() as u64;
        if let Some(d) = dets.get(f) {
            let m = match_frame(d, frame_gts, criterion);
            c.ball += m.len() as u64;
            c.hit += m.iter().filter(|(_, h)| *h).count() as u64;
        }
    }
    Ok(c)
}

/// Area under the precision-recall curve. The curve has one point per
/// distinct confidence (all detections at or above it kept), is preceded by
/// `(recall 0, precision of the first point)`, and is integrated with the
/// trapezoid rule over recall.
pub fn average_precision(
    dets: &BTreeMap<usize, Vec<Detection>>,
    gts: &BTreeMap<usize, Vec<GtRecord>>,
    criterion: &MatchCriterion,
) -> Result<f64, EvalError> {
    check_alignment(dets, gts)?;
    let gt_total: u64 = gts.values().flatten().filter(|g| g.vis).count() as u64;
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (f, d) in dets {
        let frame_gts = &gts[f];
        scored.extend(
            match_frame(d, frame_gts, criterion)
                .into_iter()
                .map(|(d, h)| (d.confidence, h)),
        );
    }
    if gt_total == 0 || scored.is_empty() {
        return Ok(0.0);
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut tp, mut n) = (0u64, 0u64);
    let mut k = 0;
    while k < scored.len() {
        let conf = scored[k].0;
        while k < scored.len() && scored[k].0 == conf {
            n += 1;
            tp += u64::from(scored[k].1);
            k += 1;
        }
        curve.push((tp as f64 / gt_total as f64, tp as f64 / n as f64));
    }
    Ok(trapezoid(&curve))
}

/// Trapezoid area of `(recall, precision)` points prefixed by
/// `(0, first precision)`.
pub fn trapezoid(curve: &[(f64, f64)]) -> f64 {
    let Some(&(_, p0)) = curve.first() else {
        return 0.0;
    };
    let mut area = 0.0;
    let mut prev = (0.0, p0);
    for &(r, p) in curve {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    area
}

/// 3D counts: an estimate is any frame whose status is not LOST, a hit is an
/// estimate within `d_m` of the truth. Output frame numbers must increase
/// strictly and exist in `truth`.
pub fn eval_3d(outputs: &[FrameOutput], truth: &BTreeMap<usize, WorldPoint>, d_m: f64) -> Result<Counts, EvalError> {
    let mut last = None;
    let mut c = Counts {
        gt: truth.len() as u64,
        ..Counts::default()
    };
    for o in outputs {
        if last.is_some_and(|l| o.frame_no <= l) {
            return Err(EvalError::FrameMisalignment(format!(
                "output frame {} follows frame {}",
                o.frame_no,
                last.unwrap_or(0)
            )));
        }
        last = Some(o.frame_no);
        let t = truth
            .get(&o.frame_no)
            .ok_or_else(|| EvalError::FrameMisalignment(format!("output frame {} has no truth", o.frame_no)))?;
        if o.status == Status::Lost {
            continue;
        }
        if let Some(p) = o.point3d {
            c.ball += 1;
            if (p - t).norm() <= d_m {
                c.hit += 1;
            }
        }
    }
    Ok(c)
}

/// `frm_no x y z` per line.
pub fn render_truth3d(points: &BTreeMap<usize, WorldPoint>) -> String {
    let mut s = String::from("# frm_no x y z\n");
    for (f, p) in points {
        let _ = writeln!(s, "{f} {} {} {}", p.x, p.y, p.z);
    }
    s
}

pub fn parse_truth3d(text: &str) -> Result<BTreeMap<usize, WorldPoint>, EvalError> {
    let mut m = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| EvalError::MalformedTruth { line: i + 1, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", f.len())));
        }
        let frm = f[0].parse::<usize>().map_err(|e| err(e.to_string()))?;
        let mut v = [0.0; 3];
        for k in 0..3 {
            v[k] = f[k + 1].parse::<f64>().map_err(|e| err(e.to_string()))?;
        }
        if m.insert(frm, WorldPoint::new(v[0], v[1], v[2])).is_some() {
            return Err(err(format!("duplicate frame {frm}")));
        }
    }
    Ok(m)
}

/// Per-camera detections of a tracker run: boxes with positive confidence.
pub fn camera_detections(outputs: &[FrameOutput], camera: CameraId) -> BTreeMap<usize, Vec<Detection>> {
    outputs
        .iter()
        .map(|o| {
            let dets = o
                .per_camera_2d
                .get(&camera)
                .filter(|c| c.confidence > 0.0)
                .map(|c| vec![Detection::new(c.bbox, c.confidence)])
                .unwrap_or_default();
            (o.frame_no, dets)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub criterion: MatchCriterion,
    pub counts: Counts,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraReport {
    pub camera: CameraId,
    pub results: Vec<CriterionResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub cameras: Vec<CameraReport>,
    pub multi_3d: Counts,
    pub dist_3d_m: f64,
}

impl Report {
    /// Per-camera evaluation of the tracker's 2D outputs against each
    /// camera's ground truth, plus the 3D counts.
    pub fn build(
        outputs: &[FrameOutput],
        groundtruth: &BTreeMap<CameraId, Vec<GtRecord>>,
        truth3d: &BTreeMap<usize, WorldPoint>,
        criteria: &[MatchCriterion],
        dist_3d_m: f64,
    ) -> Result<Self, EvalError> {
        let out_frames: BTreeSet<usize> = outputs.iter().map(|o| o.frame_no).collect();
        let mut cameras = Vec::new();
        for (&cam, rows) in groundtruth {
            let gts: BTreeMap<usize, Vec<GtRecord>> = group_groundtruth(rows)
                .into_iter()
                .filter(|(f, _)| out_frames.contains(f))
                .collect();
            let dets = camera_detections(outputs, cam);
            let results = criteria
                .iter()
                .map(|c| {
                    Ok(CriterionResult {
                        criterion: *c,
                        counts: match_sequence(&dets, &gts, c)?,
                        ap: average_precision(&dets, &gts, c)?,
                    })
                })
                .collect::<Result<Vec<_>, EvalError>>()?;
            cameras.push(CameraReport { camera: cam, results });
        }
        Ok(Self {
            cameras,
            multi_3d: eval_3d(outputs, truth3d, dist_3d_m)?,
            dist_3d_m,
        })
    }

    /// Camera x criterion table followed by the 3D line.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<6}", "camera");
        if let Some(first) = self.cameras.first() {
            for r in &first.results {
                let _ = write!(s, " | {:^41}", r.criterion.label());
            }
        }
        s.push('\n');
        let _ = write!(s, "{:<6}", "");
        if let Some(first) = self.cameras.first() {
            for _ in &first.results {
                let _ = write!(
                    s,
                    " | {:>5} {:>5} {:>5} {:>7} {:>7} {:>7}",
                    "ball", "gt", "hit", "prec", "recall", "AP"
                );
            }
        }
        s.push('\n');
        for cam in &self.cameras {
            let _ = write!(s, "C{:03}  ", cam.camera);
            for r in &cam.results {
                let (p, rc) = r.counts.precision_recall();
                let _ = write!(
                    s,
                    " | {:>5} {:>5} {:>5} {:>7.5} {:>7.5} {:>7.5}",
                    r.counts.ball, r.counts.gt, r.counts.hit, p, rc, r.ap
                );
            }
            s.push('\n');
        }
        let (p, r) = self.multi_3d.precision_recall();
        let _ = writeln!(
            s,
            "3D dist={}cm: ball {} gt {} hit {} precision {:.5} recall {:.5}",
            (self.dist_3d_m * 100.0).round(),
            self.multi_3d.ball,
            self.multi_3d.gt,
            self.multi_3d.hit,
            p,
            r
        );
        s
    }

    /// One `key=value` record per line.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for cam in &self.cameras {
            for r in &cam.results {
                let (p, rc) = r.counts.precision_recall();
                let _ = writeln!(
                    s,
                    "camera={} criterion={} ball={} gt={} hit={} precision={} recall={} ap={} undefined={}",
                    cam.camera,
                    r.criterion.label(),
                    r.counts.ball,
                    r.counts.gt,
                    r.counts.hit,
                    p,
                    rc,
                    r.ap,
                    r.counts.ball == 0 || r.counts.gt == 0
                );
            }
        }
        let (p, r) = self.multi_3d.precision_recall();
        let _ = writeln!(
            s,
            "scope=3d criterion=dist={} ball={} gt={} hit={} precision={} recall={} undefined={}",
            (self.dist_3d_m * 100.0).round(),
            self.multi_3d.ball,
            self.multi_3d.gt,
            self.multi_3d.hit,
            p,
            r,
            self.multi_3d.ball == 0 || self.multi_3d.gt == 0
        );
        s
    }
}
