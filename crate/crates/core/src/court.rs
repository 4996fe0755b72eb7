//! Court geometry from labeled key points.
//!
//! The court is a ground-plane polygon (`z = 0`). Per-camera court masks are
//! obtained by clipping the polygon against the camera's near plane,
//! projecting it and clipping the result to the image rectangle.

use std::fmt::Write as _;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{Camera, WorldPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CourtError {
    #[error("malformed court file (line {line}): {msg}")]
    MalformedCourtFile { line: usize, msg: String },
    #[error("invalid court model: {0}")]
    InvalidCourt(String),
    #[error("court is not visible from camera {0}")]
    CourtNotVisible(usize),
}

/// Simple polygon in a 2D plane (pixels or ground meters).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Polygon {
    pub vertices: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn new(vertices: Vec<[f64; 2]>) -> Self {
        Self { vertices }
    }

    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.len() < 3
    }

    fn edges(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Unsigned shoelace area.
    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    fn signed_area(&self) -> f64 {
        self.edges().map(|(a, b)| a[0] * b[1] - b[0] * a[1]).sum::<f64>() * 0.5
    }

    /// Ray-casting containment; points on an edge count as inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        if self.vertices.len() < 3 {
            return false;
        }
        if self.edges().any(|(a, b)| on_segment([x, y], a, b)) {
            return true;
        }
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a[1] > y) != (b[1] > y) {
                let x_cross = a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                if x < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// True when no two non-adjacent edges intersect.
    pub fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        let edges: Vec<_> = self.edges().collect();
        for i in 0..n {
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                let (a, b) = edges[i];
                let (c, d) = edges[j];
                if adjacent {
                    // Adjacent edges share a vertex; they must not fold back onto each other.
                    let shared_ok = if j == i + 1 {
                        !on_segment(d, a, b) && !on_segment(a, c, d)
                    } else {
                        !on_segment(c, a, b) && !on_segment(b, c, d)
                    };
                    if !shared_ok && n > 3 {
                        return false;
                    }
                    continue;
                }
                if segments_intersect(a, b, c, d) {
                    return false;
                }
            }
        }
        self.signed_area().abs() > 0.0
    }

    /// Sutherland-Hodgman clip against the axis-aligned rectangle
    /// `[x0, x1] x [y0, y1]`.
    pub fn clip_to_rect(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        let mut pts = self.vertices.clone();
        let planes: [(usize, f64, bool); 4] = [(0, x0, true), (0, x1, false), (1, y0, true), (1, y1, false)];
        for (axis, bound, keep_greater) in planes {
            if pts.is_empty() {
                break;
            }
            let inside = |p: &[f64; 2]| {
                if keep_greater {
                    p[axis] >= bound
                } else {
                    p[axis] <= bound
                }
            };
            let mut out = Vec::with_capacity(pts.len() + 2);
            for i in 0..pts.len() {
                let cur = pts[i];
                let prev = pts[(i + pts.len() - 1) % pts.len()];
                let (cin, pin) = (inside(&cur), inside(&prev));
                if cin != pin {
                    let t = (bound - prev[axis]) / (cur[axis] - prev[axis]);
                    let mut p = [prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])];
                    p[axis] = bound;
                    out.push(p);
                }
                if cin {
                    out.push(cur);
                }
            }
            pts = out;
        }
        Polygon::new(pts)
    }

    /// Whether the polygon overlaps the closed rectangle `[x0, x1] x [y0, y1]`.
    pub fn intersects_rect(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
        if self.vertices.len() < 3 {
            return false;
        }
        if self
            .vertices
            .iter()
            .any(|p| p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1)
        {
            return true;
        }
        let corners = [[x0, y0], [x1, y0], [x1, y1], [x0, y1]];
        if corners.iter().any(|c| self.contains(c[0], c[1])) {
            return true;
        }
        self.edges()
            .any(|(a, b)| (0..4).any(|k| segments_intersect(a, b, corners[k], corners[(k + 1) % 4])))
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn on_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    let scale = (b[0] - a[0]).abs().max((b[1] - a[1]).abs()).max(1.0);
    cross(a, b, p).abs() <= 1e-12 * scale * scale
        && p[0] >= a[0].min(b[0]) - 1e-12 * scale
        && p[0] <= a[0].max(b[0]) + 1e-12 * scale
        && p[1] >= a[1].min(b[1]) - 1e-12 * scale
        && p[1] <= a[1].max(b[1]) + 1e-12 * scale
}

fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    on_segment(a, c, d) || on_segment(b, c, d) || on_segment(c, a, b) || on_segment(d, a, b)
}

/// A labeled court-line point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinePoint {
    pub index: i64,
    pub point: WorldPoint,
}

/// Ground-plane court model in world meters.
#[derive(Debug, Clone, PartialEq)]
pub struct CourtModel {
    contour: Vec<WorldPoint>,
    lines: Vec<LinePoint>,
    length: f64,
    width: f64,
}

impl CourtModel {
    pub fn new(contour: Vec<WorldPoint>, lines: Vec<LinePoint>, length: f64, width: f64) -> Result<Self, CourtError> {
        if contour.len() < 3 {
            return Err(CourtError::InvalidCourt(format!(
                "contour needs at least 3 vertices, got {}",
                contour.len()
            )));
        }
        if !(length > 0.0 && width > 0.0) {
            return Err(CourtError::InvalidCourt(format!(
                "dimensions must be positive, got {length} x {width}"
            )));
        }
        let model = Self {
            contour,
            lines,
            length,
            width,
        };
        if !model.ground_polygon().is_simple() {
            return Err(CourtError::InvalidCourt("contour is not a simple polygon".into()));
        }
        Ok(model)
    }

    /// Rectangular pitch `[0, length] x [0, width]` with six key points: the
    /// four corners and both ends of the halfway line.
    pub fn rectangle(length: f64, width: f64) -> Result<Self, CourtError> {
        let p = |x: f64, y: f64| WorldPoint::new(x, y, 0.0);
        let contour = vec![p(0.0, 0.0), p(length, 0.0), p(length, width), p(0.0, width)];
        let half = length / 2.0;
        let lines = [
            p(0.0, 0.0),
            p(half, 0.0),
            p(length, 0.0),
            p(length, width),
            p(half, width),
            p(0.0, width),
        ]
        .into_iter()
        .enumerate()
        .map(|(i, point)| LinePoint { index: i as i64, point })
        .collect();
        Self::new(contour, lines, length, width)
    }

    /// Builds a court from a court file whose coordinates are ground meters.
    pub fn from_court_file(file: &CourtFile2D) -> Result<Self, CourtError> {
        let contour: Vec<_> = file.contour.iter().map(|&[x, y]| WorldPoint::new(x, y, 0.0)).collect();
        let lines = file
            .lines
            .iter()
            .map(|l| LinePoint {
                index: l.index,
                point: WorldPoint::new(l.x, l.y, 0.0),
            })
            .collect();
        let (mut min_x, mut min_y, mut max_x, mut max_y) =
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &contour {
            min_x = min_x.min(p.x);
            max_x = max_x.max(p.x);
            min_y = min_y.min(p.y);
            max_y = max_y.max(p.y);
        }
        Self::new(contour, lines, max_x - min_x, max_y - min_y)
    }

    pub fn to_court_file(&self) -> CourtFile2D {
        CourtFile2D {
            contour: self.contour.iter().map(|p| [p.x, p.y]).collect(),
            lines: self
                .lines
                .iter()
                .map(|l| CourtLinePoint {
                    index: l.index,
                    x: l.point.x,
                    y: l.point.y,
                })
                .collect(),
        }
    }

    pub fn contour(&self) -> &[WorldPoint] {
        &self.contour
    }

    pub fn lines(&self) -> &[LinePoint] {
        &self.lines
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn center(&self) -> WorldPoint {
        let n = self.contour.len() as f64;
        let sum = self.contour.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
        WorldPoint::from(sum / n)
    }

    pub fn ground_polygon(&self) -> Polygon {
        Polygon::new(self.contour.iter().map(|p| [p.x, p.y]).collect())
    }

    /// Whether the ball's ground position is in play. The boundary counts as
    /// inside.
    pub fn point_in_court(&self, p: &WorldPoint) -> bool {
        self.ground_polygon().contains(p.x, p.y)
    }

    /// Court polygon in pixel space for `camera`, clipped to the image.
    pub fn camera_court_mask(&self, camera: &Camera) -> Result<Polygon, CourtError> {
        const NEAR: f64 = 1e-3;
        let cam_pts: Vec<Vector3<f64>> = self.contour.iter().map(|p| camera.pose.to_camera(p)).collect();
        if cam_pts.iter().all(|p| p.z <= 0.0) {
            return Err(CourtError::CourtNotVisible(camera.id));
        }
        // Clip against the near plane in camera coordinates.
        let n = cam_pts.len();
        let mut clipped = Vec::with_capacity(n + 2);
        for i in 0..n {
            let cur = cam_pts[i];
            let prev = cam_pts[(i + n - 1) % n];
            let (cin, pin) = (cur.z >= NEAR, prev.z >= NEAR);
            if cin != pin {
                let t = (NEAR - prev.z) / (cur.z - prev.z);
                clipped.push(prev + (cur - prev) * t);
            }
            if cin {
                clipped.push(cur);
            }
        }
        let projected = Polygon::new(
            clipped
                .iter()
                .map(|pc| {
                    let px = camera.project_camera_frame(pc);
                    [px.u, px.v]
                })
                .collect(),
        );
        Ok(projected.clip_to_rect(0.0, 0.0, camera.width as f64, camera.height as f64))
    }

    /// Per-camera pixel-space court file: projected contour mask and the
    /// visible key points.
    pub fn camera_court_file(&self, camera: &Camera) -> Result<CourtFile2D, CourtError> {
        let mask = self.camera_court_mask(camera)?;
        let lines = self
            .lines
            .iter()
            .filter_map(|l| {
                camera.project_visible(&l.point).map(|px| CourtLinePoint {
                    index: l.index,
                    x: px.u,
                    y: px.v,
                })
            })
            .collect();
        Ok(CourtFile2D {
            contour: mask.vertices,
            lines,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CourtLinePoint {
    pub index: i64,
    pub x: f64,
    pub y: f64,
}

/// Contents of a `court.txt` file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CourtFile2D {
    pub contour: Vec<[f64; 2]>,
    pub lines: Vec<CourtLinePoint>,
}

impl CourtFile2D {
    pub fn contour_polygon(&self) -> Polygon {
        Polygon::new(self.contour.clone())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "contour_pt: {}", self.contour.len());
        for [x, y] in &self.contour {
            let _ = writeln!(out, "({x}, {y})");
        }
        let _ = writeln!(out, "court_pt: {}", self.lines.len());
        for l in &self.lines {
            let _ = writeln!(out, "({}, {}, {})", l.index, l.x, l.y);
        }
        out
    }
}

fn parse_tuple(line: &str, line_no: usize, arity: usize) -> Result<Vec<f64>, CourtError> {
    let err = |msg: String| CourtError::MalformedCourtFile { line: line_no, msg };
    let inner = line
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| err(format!("expected a parenthesized tuple, found {line:?}")))?;
    let values = inner
        .split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| err(format!("bad number {:?}: {e}", f.trim())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() != arity {
        return Err(err(format!("expected {arity} values, found {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(err("non-finite coordinate".into()));
    }
    Ok(values)
}

fn parse_header(line: &str, key: &str, line_no: usize) -> Result<usize, CourtError> {
    let err = |msg: String| CourtError::MalformedCourtFile { line: line_no, msg };
    let rest = line
        .trim_start_matches('-')
        .strip_prefix(key)
        .and_then(|s| s.trim_start().strip_prefix(':'))
        .ok_or_else(|| err(format!("expected `{key}: <num points>`, found {line:?}")))?;
    rest.trim()
        .parse()
        .map_err(|e| err(format!("bad point count {:?}: {e}", rest.trim())))
}

/// Parses a `court.txt` file: a `contour_pt: <n>` block of `(x, y)` lines
/// followed by a `court_pt: <n>` block of `(pi_idx, x, y)` lines.
pub fn parse_court_file(text: &str) -> Result<CourtFile2D, CourtError> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let eof = |what: &str| CourtError::MalformedCourtFile {
        line: text.lines().count(),
        msg: format!("unexpected end of file, expected {what}"),
    };
    let mut it = lines.into_iter();

    let (no, header) = it.next().ok_or_else(|| eof("contour_pt header"))?;
    let n_contour = parse_header(header, "contour_pt", no)?;
    let mut contour = Vec::with_capacity(n_contour);
    for _ in 0..n_contour {
        let (no, l) = it.next().ok_or_else(|| eof("contour point"))?;
        let v = parse_tuple(l, no, 2)?;
        contour.push([v[0], v[1]]);
    }

    let (no, header) = it.next().ok_or_else(|| eof("court_pt header"))?;
    let n_lines = parse_header(header, "court_pt", no)?;
    let mut court_lines = Vec::with_capacity(n_lines);
    for _ in 0..n_lines {
        let (no, l) = it.next().ok_or_else(|| eof("court line point"))?;
        let v = parse_tuple(l, no, 3)?;
        if v[0].fract() != 0.0 {
            return Err(CourtError::MalformedCourtFile {
                line: no,
                msg: format!("point index must be an integer, found {}", v[0]),
            });
        }
        court_lines.push(CourtLinePoint {
            index: v[0] as i64,
            x: v[1],
            y: v[2],
        });
    }
    if let Some((no, l)) = it.next() {
        return Err(CourtError::MalformedCourtFile {
            line: no,
            msg: format!("unexpected trailing content {l:?}"),
        });
    }
    Ok(CourtFile2D {
        contour,
        lines: court_lines,
    })
}
