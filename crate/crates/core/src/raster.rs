//! Grayscale frames and the background-difference ROI prefilter.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use thiserror::Error;

use crate::court::Polygon;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch { expected: (u32, u32), got: (u32, u32) },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("pgm codec error: {0}")]
    Codec(#[from] image::ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Row-major 8-bit grayscale frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl GrayFrame {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::InvalidFrame(format!("empty frame {width}x{height}")));
        }
        if pixels.len() != width as usize * height as usize {
            return Err(RasterError::InvalidFrame(format!(
                "{} pixels for a {width}x{height} frame",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        assert!(width > 0 && height > 0, "frame dimensions must be positive");
        Self {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: u8) {
        self.pixels[y as usize * self.width as usize + x as usize] = value;
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Result<Vec<u8>, RasterError> {
        let mut buf = Vec::new();
        PnmEncoder::new(&mut buf)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&self.pixels, self.width, self.height, ExtendedColorType::L8)?;
        Ok(buf)
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, RasterError> {
        let img = image::load(Cursor::new(bytes), ImageFormat::Pnm)?.into_luma8();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw())
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), RasterError> {
        std::fs::write(path, self.to_pgm()?)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self, RasterError> {
        Self::from_pgm(&std::fs::read(path)?)
    }
}

/// Bilinear resize with pixel-center alignment.
pub fn resize(frame: &GrayFrame, new_width: u32, new_height: u32) -> GrayFrame {
    assert!(new_width > 0 && new_height > 0, "target dimensions must be positive");
    let (sw, sh) = (frame.width as f64, frame.height as f64);
    let sx = sw / new_width as f64;
    let sy = sh / new_height as f64;
    let mut out = Vec::with_capacity(new_width as usize * new_height as usize);
    for y in 0..new_height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, sh - 1.0);
        let y0 = fy.floor() as u32;
        let y1 = (y0 + 1).min(frame.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..new_width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, sw - 1.0);
            let x0 = fx.floor() as u32;
            let x1 = (x0 + 1).min(frame.width - 1);
            let wx = fx - x0 as f64;
            let top = frame.get(x0, y0) as f64 * (1.0 - wx) + frame.get(x1, y0) as f64 * wx;
            let bot = frame.get(x0, y1) as f64 * (1.0 - wx) + frame.get(x1, y1) as f64 * wx;
            out.push((top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayFrame {
        width: new_width,
        height: new_height,
        pixels: out,
    }
}

pub fn histogram(frame: &GrayFrame) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &p in &frame.pixels {
        hist[p as usize] += 1;
    }
    hist
}

/// CDF remap `round(255 * (cdf(p) - cdf_min) / (N - cdf_min))`. A constant
/// frame is returned unchanged.
pub fn equalize_histogram(frame: &GrayFrame) -> GrayFrame {
    let hist = histogram(frame);
    let n = frame.pixels.len() as u64;
    let mut cdf = [0u64; 256];
    let mut acc = 0;
    for (c, h) in cdf.iter_mut().zip(hist.iter()) {
        acc += h;
        *c = acc;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if n == cdf_min {
        return frame.clone();
    }
    let denom = (n - cdf_min) as f64;
    let mut lut = [0u8; 256];
    for (v, l) in lut.iter_mut().enumerate() {
        let num = cdf[v].saturating_sub(cdf_min) as f64;
        *l = (255.0 * num / denom).round() as u8;
    }
    GrayFrame {
        width: frame.width,
        height: frame.height,
        pixels: frame.pixels.iter().map(|&p| lut[p as usize]).collect(),
    }
}

/// Per-pixel adaptive Gaussian background with periodic re-initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundModel {
    width: u32,
    height: u32,
    mean: Vec<f64>,
    variance: Vec<f64>,
    frames_seen: u64,
    refresh_period: u64,
    alpha: f64,
}

pub const DEFAULT_REFRESH_PERIOD: u64 = 200;
pub const DEFAULT_BACKGROUND_ALPHA: f64 = 0.02;

impl BackgroundModel {
    /// Model initialized from `frame` with zero variance.
    pub fn from_frame(frame: &GrayFrame, alpha: f64, refresh_period: u64) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]");
        assert!(refresh_period > 0, "refresh period must be positive");
        Self {
            width: frame.width,
            height: frame.height,
            mean: frame.pixels.iter().map(|&p| p as f64).collect(),
            variance: vec![0.0; frame.pixels.len()],
            frames_seen: 0,
            refresh_period,
            alpha,
        }
    }

    pub fn with_defaults(frame: &GrayFrame) -> Self {
        Self::from_frame(frame, DEFAULT_BACKGROUND_ALPHA, DEFAULT_REFRESH_PERIOD)
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    pub fn refresh_period(&self) -> u64 {
        self.refresh_period
    }

    /// Rounded mean as a frame.
    pub fn mean_frame(&self) -> GrayFrame {
        GrayFrame {
            width: self.width,
            height: self.height,
            pixels: self.mean.iter().map(|m| m.round().clamp(0.0, 255.0) as u8).collect(),
        }
    }

    fn check_dims(&self, frame: &GrayFrame) -> Result<(), RasterError> {
        if frame.dims() != self.dims() {
            return Err(RasterError::DimensionMismatch {
                expected: self.dims(),
                got: frame.dims(),
            });
        }
        Ok(())
    }

    /// Exponential running update of mean and variance. Every
    /// `refresh_period` observed frames the model is re-initialized from the
    /// current frame and the counter restarts.
    pub fn observe(&mut self, frame: &GrayFrame) -> Result<(), RasterError> {
        self.check_dims(frame)?;
        self.frames_seen += 1;
        if self.frames_seen >= self.refresh_period {
            for ((m, v), &p) in self.mean.iter_mut().zip(&mut self.variance).zip(&frame.pixels) {
                *m = p as f64;
                *v = 0.0;
            }
            self.frames_seen = 0;
            return Ok(());
        }
        let a = self.alpha;
        for ((m, v), &p) in self.mean.iter_mut().zip(&mut self.variance).zip(&frame.pixels) {
            let d = p as f64 - *m;
            *m += a * d;
            *v = (1.0 - a) * (*v + a * d * d);
        }
        Ok(())
    }

    /// `|frame - mean| > k_sigma * sqrt(variance + 1)`.
    pub fn foreground_mask(&self, frame: &GrayFrame, k_sigma: f64) -> Result<Mask, RasterError> {
        self.check_dims(frame)?;
        let bits = frame
            .pixels
            .iter()
            .zip(self.mean.iter().zip(&self.variance))
            .map(|(&p, (&m, &v))| (p as f64 - m).abs() > k_sigma * (v + 1.0).sqrt())
            .collect();
        Ok(Mask {
            width: self.width,
            height: self.height,
            bits,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width as usize * height as usize, "mask size mismatch");
        Self { width, height, bits }
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self::new(width, height, vec![false; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Integer pixel rectangle, top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RoiBox {
    pub x: i32,
    pub y: i32,
    pub w: u32,
    pub h: u32,
}

impl RoiBox {
    pub const fn new(x: i32, y: i32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self::new(0, 0, width, height)
    }

    /// Square of side `side` centered on `(cx, cy)`, clipped to the image.
    pub fn centered(cx: f64, cy: f64, side: f64, width: u32, height: u32) -> Option<Self> {
        let half = side / 2.0;
        let x0 = (cx - half).floor() as i64;
        let y0 = (cy - half).floor() as i64;
        let x1 = (cx + half).ceil() as i64;
        let y1 = (cy + half).ceil() as i64;
        Self::from_corners(x0, y0, x1, y1).and_then(|b| b.clip(width, height))
    }

    fn from_corners(x0: i64, y0: i64, x1: i64, y1: i64) -> Option<Self> {
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        Some(Self::new(x0 as i32, y0 as i32, (x1 - x0) as u32, (y1 - y0) as u32))
    }

    pub fn x1(&self) -> i64 {
        self.x as i64 + self.w as i64
    }

    pub fn y1(&self) -> i64 {
        self.y as i64 + self.h as i64
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    /// Intersection with the image rectangle; `None` if empty.
    pub fn clip(&self, width: u32, height: u32) -> Option<Self> {
        let x0 = (self.x as i64).max(0);
        let y0 = (self.y as i64).max(0);
        let x1 = self.x1().min(width as i64);
        let y1 = self.y1().min(height as i64);
        Self::from_corners(x0, y0, x1, y1)
    }

    pub fn intersects(&self, other: &RoiBox) -> bool {
        (self.x as i64) < other.x1()
            && (other.x as i64) < self.x1()
            && (self.y as i64) < other.y1()
            && (other.y as i64) < self.y1()
    }

    pub fn padded(&self, pad: u32) -> Self {
        Self::new(
            self.x - pad as i32,
            self.y - pad as i32,
            self.w + 2 * pad,
            self.h + 2 * pad,
        )
    }
}

/// A connected foreground region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub bbox: RoiBox,
    pub pixels: Vec<(u32, u32)>,
}

/// 8-connected component labeling in raster order.
pub fn connected_components(mask: &Mask) -> Vec<Component> {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let mut visited = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % w, idx / w);
            pixels.push((x as u32, y as u32));
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    if mask.bits[n] && !visited[n] {
                        visited[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        out.push(Component {
            bbox: RoiBox::new(x0 as i32, y0 as i32, (x1 - x0 + 1) as u32, (y1 - y0 + 1) as u32),
            pixels,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefilterConfig {
    pub k_sigma: f64,
    /// Minimum component size in pixels.
    pub min_area: usize,
    pub pad: u32,
    pub alpha: f64,
    pub refresh_period: u64,
}

impl Default for PrefilterConfig {
    fn default() -> Self {
        Self {
            k_sigma: 3.0,
            min_area: 9,
            pad: 8,
            alpha: DEFAULT_BACKGROUND_ALPHA,
            refresh_period: DEFAULT_REFRESH_PERIOD,
        }
    }
}

/// Candidate ball regions from a foreground mask: padded, clipped component
/// boxes of at least `min_area` pixels that touch the court polygon, largest
/// first.
pub fn propose_rois(mask: &Mask, court: Option<&Polygon>, min_area: usize, pad: u32) -> Vec<RoiBox> {
    let mut rois: Vec<RoiBox> = connected_components(mask)
        .into_iter()
        .filter(|c| c.pixels.len() >= min_area)
        .filter_map(|c| c.bbox.padded(pad).clip(mask.width, mask.height))
        .filter(|b| court.is_none_or(|poly| poly.intersects_rect(b.x as f64, b.y as f64, b.x1() as f64, b.y1() as f64)))
        .collect();
    rois.sort_by(|a, b| b.area().cmp(&a.area()).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x)));
    rois
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc_frame(w: u32, h: u32, discs: &[(f64, f64, f64)], bg: u8, fg: u8) -> GrayFrame {
        let mut f = GrayFrame::filled(w, h, bg);
        for y in 0..h {
            for x in 0..w {
                let inside = discs.iter().any(|&(cx, cy, r)| {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    dx * dx + dy * dy <= r * r
                });
                if inside {
                    f.set(x, y, fg);
                }
            }
        }
        f
    }

    #[test]
    fn resize_constant_frame() {
        let f = GrayFrame::filled(37, 23, 100);
        for (w, h) in [(10, 10), (74, 46), (1, 1), (100, 3)] {
            let r = resize(&f, w, h);
            assert_eq!(r.dims(), (w, h));
            assert!(r.pixels().iter().all(|&p| p == 100));
        }
    }

    #[test]
    fn resize_halving() {
        let f = GrayFrame::filled(5120, 3072, 7);
        let r = resize(&f, 2560, 1536);
        assert_eq!(r.dims(), (2560, 1536));
    }

    #[test]
    fn resize_round_trip_gradient() {
        let (w, h) = (64u32, 48u32);
        let px = (0..h)
            .flat_map(|y| (0..w).map(move |x| (40.0 + 1.5 * x as f64 + 0.8 * y as f64).round() as u8))
            .collect();
        let f = GrayFrame::new(w, h, px).unwrap();
        let back = resize(&resize(&f, 2 * w, 2 * h), w, h);
        let max_err = f
            .pixels()
            .iter()
            .zip(back.pixels())
            .map(|(&a, &b)| (a as i32 - b as i32).abs())
            .max()
            .unwrap();
        assert!(max_err <= 2, "max error {max_err}");
    }

    #[test]
    fn equalize_two_level_and_constant() {
        let px: Vec<u8> = (0..64).map(|i| if i % 2 == 0 { 0 } else { 255 }).collect();
        let f = GrayFrame::new(8, 8, px).unwrap();
        assert_eq!(equalize_histogram(&f), f);
        let c = GrayFrame::filled(5, 5, 77);
        assert_eq!(equalize_histogram(&c), c);
    }

    #[test]
    fn equalize_ramp_is_near_linear() {
        // Every gray level appears exactly 4 times, compressed into 64..191.
        let px: Vec<u8> = (0..1024).map(|i| 64 + ((i / 4) % 256 / 2) as u8).collect();
        let f = GrayFrame::new(32, 32, px).unwrap();
        let eq = equalize_histogram(&f);
        let hist = histogram(&eq);
        let n = 1024.0;
        let mut acc = 0.0;
        for (v, h) in hist.iter().enumerate() {
            acc += *h as f64;
            if *h > 0 {
                let linear = (v as f64 + 1.0) / 256.0;
                assert!((acc / n - linear).abs() <= 1.0 / 256.0 + 1e-12, "level {v}");
            }
        }
    }

    #[test]
    fn background_fixed_point() {
        let f = disc_frame(16, 16, &[(8.0, 8.0, 4.0)], 30, 200);
        let mut m = BackgroundModel::from_frame(&GrayFrame::filled(16, 16, 0), 0.02, 1000);
        for _ in 0..300 {
            m.observe(&f).unwrap();
        }
        // 0.98^300 ~ 2.3e-3 of the initial 200-level offset remains.
        let mut m2 = BackgroundModel::from_frame(&f, 0.02, 1000);
        for _ in 0..300 {
            m2.observe(&f).unwrap();
        }
        for (mu, &p) in m2.mean().iter().zip(f.pixels()) {
            assert!((mu - p as f64).abs() < 1e-6);
        }
        assert!(m2.variance().iter().all(|&v| v < 1e-6));
        assert!(m.variance().iter().all(|&v| v >= 0.0));
        assert!(m
            .mean()
            .iter()
            .zip(f.pixels())
            .all(|(mu, &p)| (mu - p as f64).abs() < 0.5));
    }

    #[test]
    fn background_refresh() {
        let a = GrayFrame::filled(4, 4, 10);
        let b = GrayFrame::filled(4, 4, 90);
        let mut m = BackgroundModel::from_frame(&a, 0.02, 5);
        for i in 1..5 {
            m.observe(&a).unwrap();
            assert_eq!(m.frames_seen(), i);
        }
        m.observe(&b).unwrap();
        assert_eq!(m.frames_seen(), 0);
        assert!(m.mean().iter().all(|&v| v == 90.0));
        assert!(m.variance().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn background_alternating_closed_form() {
        // m_{k+1} = m_k + alpha (x_k - m_k) with inputs B, A, B, A, ...
        let (a_val, b_val, alpha) = (20.0, 220.0, 0.1);
        let a = GrayFrame::filled(2, 2, a_val as u8);
        let b = GrayFrame::filled(2, 2, b_val as u8);
        let mut m = BackgroundModel::from_frame(&a, alpha, 10_000);
        let steps = 400;
        for k in 0..steps {
            m.observe(if k % 2 == 0 { &b } else { &a }).unwrap();
        }
        // After an even number of steps the last input was A; the limit of the
        // two-step map m -> (1-alpha)^2 m + alpha (1-alpha) B + alpha A.
        let q = (1.0 - alpha) * (1.0 - alpha);
        let fixed = (alpha * (1.0 - alpha) * b_val + alpha * a_val) / (1.0 - q);
        let n = steps / 2;
        let expected = fixed + (a_val - fixed) * q.powi(n);
        assert!((m.mean()[0] - expected).abs() < 1e-9, "{} vs {expected}", m.mean()[0]);
    }

    #[test]
    fn dimension_mismatch() {
        let mut m = BackgroundModel::with_defaults(&GrayFrame::filled(4, 4, 0));
        assert!(matches!(
            m.observe(&GrayFrame::filled(5, 4, 0)),
            Err(RasterError::DimensionMismatch { .. })
        ));
        assert!(m.foreground_mask(&GrayFrame::filled(4, 5, 0), 3.0).is_err());
    }

    #[test]
    fn foreground_disc_exact() {
        let bg = GrayFrame::filled(48, 48, 0);
        let m = BackgroundModel::with_defaults(&bg);
        let f = disc_frame(48, 48, &[(24.0, 24.0, 6.0)], 0, 255);
        let mask = m.foreground_mask(&f, 3.0).unwrap();
        for y in 0..48 {
            for x in 0..48 {
                assert_eq!(mask.get(x, y), f.get(x, y) == 255);
            }
        }
        assert_eq!(m.foreground_mask(&bg, 3.0).unwrap().count(), 0);
    }

    #[test]
    fn raising_k_sigma_never_adds_pixels() {
        let bg = disc_frame(32, 32, &[(10.0, 10.0, 5.0)], 50, 70);
        let mut m = BackgroundModel::with_defaults(&bg);
        m.observe(&disc_frame(32, 32, &[(12.0, 11.0, 5.0)], 52, 75)).unwrap();
        let f = disc_frame(32, 32, &[(20.0, 20.0, 4.0), (5.0, 25.0, 2.0)], 48, 140);
        let mut prev = usize::MAX;
        for k in [0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 50.0] {
            let c = m.foreground_mask(&f, k).unwrap().count();
            assert!(c <= prev);
            prev = c;
        }
    }

    #[test]
    fn roi_proposals() {
        let m = BackgroundModel::with_defaults(&GrayFrame::filled(100, 60, 0));
        assert!(propose_rois(&Mask::empty(100, 60), None, 9, 8).is_empty());

        let f = disc_frame(100, 60, &[(20.0, 20.0, 6.0), (75.0, 40.0, 4.0)], 0, 255);
        let mask = m.foreground_mask(&f, 3.0).unwrap();
        let rois = propose_rois(&mask, None, 9, 8);
        assert_eq!(rois.len(), 2);
        assert!(rois[0].area() >= rois[1].area());
        for (cx, cy, r) in [(20.0, 20.0, 6.0), (75.0, 40.0, 4.0)] {
            assert!(rois.iter().any(|b| (b.x as f64) <= cx - r
                && (b.x1() as f64) >= cx + r
                && (b.y as f64) <= cy - r
                && (b.y1() as f64) >= cy + r));
        }

        // Court covering only the left half drops the right disc.
        let court = Polygon::rectangle(0.0, 0.0, 50.0, 60.0);
        let rois = propose_rois(&mask, Some(&court), 9, 8);
        assert_eq!(rois.len(), 1);
        assert!(rois[0].x < 20);

        // Specks below min_area are ignored.
        let speck = disc_frame(100, 60, &[(50.0, 30.0, 1.0)], 0, 255);
        let mask = m.foreground_mask(&speck, 3.0).unwrap();
        assert!(propose_rois(&mask, None, 9, 8).is_empty());
    }

    #[test]
    fn pgm_round_trip() {
        let f = disc_frame(13, 7, &[(6.0, 3.0, 2.5)], 17, 250);
        let bytes = f.to_pgm().unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(GrayFrame::from_pgm(&bytes).unwrap(), f);
    }

    #[test]
    fn roi_box_helpers() {
        let b = RoiBox::centered(5.0, 5.0, 20.0, 100, 100).unwrap();
        assert_eq!(b, RoiBox::new(0, 0, 15, 15));
        assert!(RoiBox::centered(-50.0, 5.0, 10.0, 100, 100).is_none());
        assert!(RoiBox::new(0, 0, 10, 10).intersects(&RoiBox::new(9, 9, 5, 5)));
        assert!(!RoiBox::new(0, 0, 10, 10).intersects(&RoiBox::new(10, 0, 5, 5)));
    }
}
