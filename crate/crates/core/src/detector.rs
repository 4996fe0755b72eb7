//! Ball detector contract, greedy suppression, and two reference detectors:
//! a disc template matcher for rendered frames and a noisy ground-truth
//! oracle for closed-loop simulation.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::geometry::{Camera, CameraId, PixelPoint, Rig};
use crate::raster::{GrayFrame, RoiBox};

/// Axis-aligned box with sub-pixel corners: top-left `(x, y)` and size.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(c: PixelPoint, w: f64, h: f64) -> Self {
        Self::new(c.u - w / 2.0, c.v - h / 2.0, w, h)
    }

    pub fn center(&self) -> PixelPoint {
        PixelPoint::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let ih = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Intersection over union; 0 for disjoint or degenerate boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    pub fn intersects_roi(&self, roi: &RoiBox) -> bool {
        self.intersection_area(&BBox::from(*roi)) > 0.0
    }
}

impl From<RoiBox> for BBox {
    fn from(r: RoiBox) -> Self {
        BBox::new(r.x as f64, r.y as f64, r.w as f64, r.h as f64)
    }
}

/// A scored ball box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BBox, confidence: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&confidence));
        Self { bbox, confidence }
    }

    pub fn center(&self) -> PixelPoint {
        self.bbox.center()
    }
}

/// Confidence descending, then smaller area, lower x, lower y.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.bbox.area().total_cmp(&b.bbox.area()))
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    /// Minimum confidence of an accepted detection.
    pub det_conf: f64,
    /// Suppression overlap threshold.
    pub iou_thd: f64,
    /// Detector window side in pixels; larger ROIs are tiled.
    pub input_size: u32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            det_conf: 0.9,
            iou_thd: 0.2,
            input_size: 160,
        }
    }
}

/// Greedy non-maximum suppression: keep a detection iff its IOU with every
/// already kept one is at most `iou_thd`.
pub fn nms(detections: &[Detection], iou_thd: f64) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) <= iou_thd) {
            kept.push(d);
        }
    }
    kept
}

/// Highest-ranked detection with confidence at least `det_conf`.
pub fn best_detection(detections: &[Detection], det_conf: f64) -> Option<Detection> {
    detections
        .iter()
        .filter(|d| d.confidence >= det_conf)
        .min_by(|a, b| detection_order(a, b))
        .copied()
}

/// What a detector is asked to look at.
#[derive(Debug, Clone, Copy)]
pub struct DetectRequest<'a> {
    pub camera: &'a Camera,
    pub frame_no: usize,
    pub frame: Option<&'a GrayFrame>,
}

/// Frames of one time step, keyed by camera. A camera may be present
/// without pixels when the dataset was not rendered.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameSet {
    frames: BTreeMap<CameraId, Option<GrayFrame>>,
}

impl FrameSet {
    /// Every camera of the rig, without pixels.
    pub fn blank(rig: &Rig) -> Self {
        Self {
            frames: rig.ids().map(|id| (id, None)).collect(),
        }
    }

    pub fn insert(&mut self, camera: CameraId, frame: Option<GrayFrame>) {
        self.frames.insert(camera, frame);
    }

    pub fn contains(&self, camera: CameraId) -> bool {
        self.frames.contains_key(&camera)
    }

    pub fn frame(&self, camera: CameraId) -> Option<&GrayFrame> {
        self.frames.get(&camera).and_then(|f| f.as_ref())
    }

    /// First rig camera without an entry.
    pub fn missing_camera(&self, rig: &Rig) -> Option<CameraId> {
        rig.ids().find(|id| !self.frames.contains_key(id))
    }
}

/// Detector contract: boxes returned intersect the union of `rois` and carry
/// confidences in `[0, 1]`. Implementations are stateless per call.
pub trait Detector: Send + Sync {
    fn detect(&self, request: &DetectRequest<'_>, rois: &[RoiBox]) -> Vec<Detection>;
}

// ---------------------------------------------------------------------------
// Disc template matcher

/// Fraction of pixel `(x, y)` covered by a disc, 4x4 supersampled.
pub fn disc_coverage(x: u32, y: u32, cx: f64, cy: f64, radius: f64) -> f64 {
    const N: u32 = 4;
    let r2 = radius * radius;
    let mut hits = 0;
    for sy in 0..N {
        for sx in 0..N {
            let px = x as f64 + (sx as f64 + 0.5) / N as f64 - cx;
            let py = y as f64 + (sy as f64 + 0.5) / N as f64 - cy;
            if px * px + py * py <= r2 {
                hits += 1;
            }
        }
    }
    hits as f64 / (N * N) as f64
}

struct Template {
    radius: f64,
    half: u32,
    /// Zero-mean template values.
    values: Vec<f64>,
    norm: f64,
}

impl Template {
    fn new(radius: f64) -> Self {
        let half = (1.6 * radius).ceil() as u32 + 1;
        let side = 2 * half + 1;
        let c = half as f64 + 0.5;
        let raw: Vec<f64> = (0..side)
            .flat_map(|y| (0..side).map(move |x| (x, y)))
            .map(|(x, y)| disc_coverage(x, y, c, c, radius))
            .collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let values: Vec<f64> = raw.iter().map(|v| v - mean).collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self {
            radius,
            half,
            values,
            norm,
        }
    }

    fn side(&self) -> u32 {
        2 * self.half + 1
    }
}

/// Normalized cross-correlation disc matcher.
pub struct TemplateDetector {
    config: DetectorConfig,
    templates: Vec<Template>,
}

impl TemplateDetector {
    /// Templates for radii from `r_min` to `r_max` in half-pixel steps.
    pub fn new(config: DetectorConfig, r_min: f64, r_max: f64) -> Self {
        assert!(r_min > 0.0 && r_max >= r_min, "invalid radius range");
        let mut templates = Vec::new();
        let mut r = r_min;
        while r <= r_max + 1e-9 {
            templates.push(Template::new(r));
            r += 0.5;
        }
        Self { config, templates }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    fn tiles(&self, roi: &RoiBox) -> Vec<RoiBox> {
        let size = self.config.input_size.max(1);
        if roi.w <= size && roi.h <= size {
            return vec![*roi];
        }
        let overlap = self.templates.iter().map(|t| t.side()).max().unwrap_or(0).min(size / 2);
        let stride = (size - overlap).max(1);
        let starts = |len: u32| -> Vec<u32> {
            if len <= size {
                return vec![0];
            }
            let mut v: Vec<u32> = (0..).map(|k| k * stride).take_while(|&s| s + size < len).collect();
            v.push(len - size);
            v
        };
        let mut out = Vec::new();
        for sy in starts(roi.h) {
            for sx in starts(roi.w) {
                out.push(RoiBox::new(
                    roi.x + sx as i32,
                    roi.y + sy as i32,
                    size.min(roi.w),
                    size.min(roi.h),
                ));
            }
        }
        out
    }

    fn detect_in_region(&self, frame: &GrayFrame, roi: &RoiBox) -> Vec<Detection> {
        let Some(roi) = roi.clip(frame.width(), frame.height()) else {
            return Vec::new();
        };
        let (rw, rh) = (roi.w as usize, roi.h as usize);
        // Integral images over the ROI.
        let stride = rw + 1;
        let mut sum = vec![0.0f64; stride * (rh + 1)];
        let mut sq = vec![0.0f64; stride * (rh + 1)];
        for y in 0..rh {
            let mut row_s = 0.0;
            let mut row_q = 0.0;
            for x in 0..rw {
                let p = frame.get(roi.x as u32 + x as u32, roi.y as u32 + y as u32) as f64;
                row_s += p;
                row_q += p * p;
                sum[(y + 1) * stride + x + 1] = sum[y * stride + x + 1] + row_s;
                sq[(y + 1) * stride + x + 1] = sq[y * stride + x + 1] + row_q;
            }
        }
        let rect = |t: &[f64], x0: usize, y0: usize, s: usize| {
            t[(y0 + s) * stride + x0 + s] - t[y0 * stride + x0 + s] - t[(y0 + s) * stride + x0] + t[y0 * stride + x0]
        };

        // Best score and template index per candidate center.
        let max_side = self.templates.iter().map(|t| t.side() as usize).max().unwrap_or(0);
        if max_side > rw || max_side > rh {
            return Vec::new();
        }
        // All templates are evaluated on a common grid of centers.
        let max_half = max_side / 2;
        let (gw, gh) = (rw - max_side + 1, rh - max_side + 1);
        let mut best: Vec<(f64, usize)> = vec![(0.0, 0); gw * gh];
        for (ti, t) in self.templates.iter().enumerate() {
            let side = t.side() as usize;
            let n = (side * side) as f64;
            let off = max_half - t.half as usize;
            for gy in 0..gh {
                for gx in 0..gw {
                    let (x0, y0) = (gx + off, gy + off);
                    let s = rect(&sum, x0, y0, side);
                    let q = rect(&sq, x0, y0, side);
                    let var = q - s * s / n;
                    if var <= 1e-9 || t.norm <= 0.0 {
                        continue;
                    }
                    let mut dot = 0.0;
                    for ty in 0..side {
                        let fy = roi.y as u32 + (y0 + ty) as u32;
                        let row = &t.values[ty * side..(ty + 1) * side];
                        for (tx, tv) in row.iter().enumerate() {
                            dot += tv * frame.get(roi.x as u32 + (x0 + tx) as u32, fy) as f64;
                        }
                    }
                    let score = dot / (t.norm * var.sqrt());
                    let cell = &mut best[gy * gw + gx];
                    if score > cell.0 {
                        *cell = (score, ti);
                    }
                }
            }
        }

        let mut out = Vec::new();
        let at = |x: usize, y: usize| best[y * gw + x].0;
        for gy in 0..gh {
            for gx in 0..gw {
                let (score, ti) = best[gy * gw + gx];
                if score < self.config.det_conf {
                    continue;
                }
                let mut is_peak = true;
                'nb: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = (gx as i64 + dx, gy as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= gw as i64 || ny >= gh as i64 {
                            continue;
                        }
                        let other = at(nx as usize, ny as usize);
                        // Strict on earlier neighbours so plateaus yield one peak.
                        let earlier = dy < 0 || (dy == 0 && dx < 0);
                        if other > score || (earlier && other == score) {
                            is_peak = false;
                            break 'nb;
                        }
                    }
                }
                if !is_peak {
                    continue;
                }
                let sub = |l: f64, c: f64, r: f64| {
                    let den = l - 2.0 * c + r;
                    if den < 0.0 {
                        (0.5 * (l - r) / den).clamp(-0.5, 0.5)
                    } else {
                        0.0
                    }
                };
                let ox = if gx > 0 && gx + 1 < gw {
                    sub(at(gx - 1, gy), score, at(gx + 1, gy))
                } else {
                    0.0
                };
                let oy = if gy > 0 && gy + 1 < gh {
                    sub(at(gx, gy - 1), score, at(gx, gy + 1))
                } else {
                    0.0
                };
                let cx = roi.x as f64 + gx as f64 + max_half as f64 + 0.5 + ox;
                let cy = roi.y as f64 + gy as f64 + max_half as f64 + 0.5 + oy;
                let r = self.templates[ti].radius;
                out.push(Detection::new(
                    BBox::from_center(PixelPoint::new(cx, cy), 2.0 * r, 2.0 * r),
                    score.clamp(0.0, 1.0),
                ));
            }
        }
        out
    }
}

/// Template-match every ROI (tiled to the detector window) and suppress
/// overlapping peaks.
pub fn disc_template_detect(
    frame: &GrayFrame,
    rois: &[RoiBox],
    config: &DetectorConfig,
    radius_range: (f64, f64),
) -> Vec<Detection> {
    TemplateDetector::new(*config, radius_range.0, radius_range.1).detect_frame(frame, rois)
}

impl TemplateDetector {
    pub fn detect_frame(&self, frame: &GrayFrame, rois: &[RoiBox]) -> Vec<Detection> {
        let raw: Vec<Detection> = rois
            .iter()
            .flat_map(|roi| self.tiles(roi))
            .flat_map(|tile| self.detect_in_region(frame, &tile))
            .collect();
        nms(&raw, self.config.iou_thd)
    }
}

impl Detector for TemplateDetector {
    fn detect(&self, request: &DetectRequest<'_>, rois: &[RoiBox]) -> Vec<Detection> {
        match request.frame {
            Some(frame) => self.detect_frame(frame, rois),
            None => Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Oracle detector

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// Gaussian pixel noise on the box position.
    pub sigma_px: f64,
    /// Probability of missing a visible ball.
    pub p_miss: f64,
    /// Mean number of false positives per call.
    pub lambda_fp: f64,
    /// Lower bound of false-positive confidences.
    pub fp_conf_min: f64,
}

impl NoiseModel {
    pub const NOISELESS: NoiseModel = NoiseModel {
        sigma_px: 0.0,
        p_miss: 0.0,
        lambda_fp: 0.0,
        fp_conf_min: 0.5,
    };
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_px: 1.0,
            p_miss: 0.05,
            lambda_fp: 0.2,
            fp_conf_min: 0.5,
        }
    }
}

/// Ground-truth ball box for one camera and frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleTruth {
    pub bbox: BBox,
    /// False when occluded or outside the image; the ball is then never
    /// reported.
    pub visible: bool,
}

const TRUE_CONFIDENCE: f64 = 1.0;
const FP_DEFAULT_SIDE: f64 = 10.0;

/// Noisy detections of a known ball. Random draws happen in a fixed order
/// (miss, x-noise, y-noise, false positives) so the true detection only
/// depends on the generator state, not on `rois`.
pub fn oracle_detect<R: Rng + ?Sized>(
    truth: Option<&OracleTruth>,
    noise: &NoiseModel,
    rois: &[RoiBox],
    rng: &mut R,
) -> Vec<Detection> {
    let mut out = Vec::new();
    let missed = rng.random::<f64>() < noise.p_miss;
    let (dx, dy) = if noise.sigma_px > 0.0 {
        let n = Normal::new(0.0, noise.sigma_px).expect("finite sigma");
        (n.sample(rng), n.sample(rng))
    } else {
        (0.0, 0.0)
    };
    if let Some(t) = truth {
        if t.visible && !missed {
            let b = BBox::new(t.bbox.x + dx, t.bbox.y + dy, t.bbox.w, t.bbox.h);
            if rois.iter().any(|r| b.intersects_roi(r)) {
                out.push(Detection::new(b, TRUE_CONFIDENCE));
            }
        }
    }
    let total_area: u64 = rois.iter().map(|r| r.area()).sum();
    if noise.lambda_fp > 0.0 && total_area > 0 {
        let count = Poisson::new(noise.lambda_fp).expect("positive rate").sample(rng) as usize;
        let side = truth.map(|t| t.bbox.w.max(1.0)).unwrap_or(FP_DEFAULT_SIDE);
        for _ in 0..count {
            let mut pick = rng.random_range(0..total_area);
            let roi = rois
                .iter()
                .find(|r| {
                    if pick < r.area() {
                        true
                    } else {
                        pick -= r.area();
                        false
                    }
                })
                .expect("pick within total area");
            let cx = roi.x as f64 + rng.random::<f64>() * roi.w as f64;
            let cy = roi.y as f64 + rng.random::<f64>() * roi.h as f64;
            let lo = noise.fp_conf_min.min(TRUE_CONFIDENCE);
            let conf = lo + rng.random::<f64>() * (TRUE_CONFIDENCE - lo);
            let conf = conf.min(TRUE_CONFIDENCE - 1e-9);
            out.push(Detection::new(
                BBox::from_center(PixelPoint::new(cx, cy), side, side),
                conf,
            ));
        }
    }
    out
}

/// Mixes a seed with stream coordinates (splitmix64 finalizer).
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Oracle detector over a ground-truth table. Each (camera, frame) pair has
/// its own seeded generator, so results do not depend on call order.
pub struct OracleDetector {
    truth: BTreeMap<(CameraId, usize), OracleTruth>,
    noise: NoiseModel,
    seed: u64,
}

impl OracleDetector {
    pub fn new(truth: BTreeMap<(CameraId, usize), OracleTruth>, noise: NoiseModel, seed: u64) -> Self {
        Self { truth, noise, seed }
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }
}

impl Detector for OracleDetector {
    fn detect(&self, request: &DetectRequest<'_>, rois: &[RoiBox]) -> Vec<Detection> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
            self.seed,
            request.camera.id as u64,
            request.frame_no as u64,
        ));
        let truth = self.truth.get(&(request.camera.id, request.frame_no));
        oracle_detect(truth, &self.noise, rois, &mut rng)
    }
}
