//! Multi-view 3D estimation.
//!
//! * [`triangulate_pair`]: midpoint of the common perpendicular of two pixel
//!   rays.
//! * [`vote_consensus`]: every camera pair triangulates; cameras whose pair
//!   results disagree with the consensus are voted out as false detections.
//! * [`refine_point_lm`]: Levenberg-Marquardt on the three point coordinates
//!   with cameras held fixed.
//! * [`sba_solve`]: general sparse bundle adjustment over camera poses and
//!   points, solving the damped normal equations by eliminating the camera
//!   block (`N1`) and solving the reduced point system
//!   `dx2 = (N4 - N2^T N1^-1 N2)^-1 (g2 - N2^T N1^-1 g1)`.
//! * [`reproject_and_refine`]: projects the consensus into every camera and
//!   re-runs the detector in a window around the projection.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, SMatrix, Vector2, Vector3, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::detector::{best_detection, nms, BBox, DetectRequest, Detection, Detector, FrameSet};
use crate::geometry::{Camera, CameraId, PixelPoint, Rig, WorldPoint};
use crate::raster::RoiBox;

pub type Matrix2x6 = SMatrix<f64, 2, 6>;
pub type Matrix6x3 = SMatrix<f64, 6, 3>;
pub type Matrix6 = SMatrix<f64, 6, 6>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("degenerate ray pair between cameras {0} and {1}")]
    DegenerateRays(CameraId, CameraId),
    #[error("no consensus: only {inliers} inlier camera(s)")]
    NoConsensus { inliers: usize },
    #[error("unknown camera id {0}")]
    UnknownCamera(CameraId),
    #[error("need observations from at least two distinct cameras, got {0}")]
    TooFewObservations(usize),
    #[error("duplicate observation for camera {0}")]
    DuplicateCamera(CameraId),
    #[error("damped normal matrix is singular")]
    DivergedOrSingular,
    #[error("reduced point system is singular")]
    SingularReducedSystem,
    #[error("invalid bundle adjustment problem: {0}")]
    InvalidProblem(String),
}

/// A 2D ball observation: box center in one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub camera_id: CameraId,
    pub pixel: PixelPoint,
    pub confidence: f64,
}

impl Observation {
    pub fn new(camera_id: CameraId, pixel: PixelPoint, confidence: f64) -> Self {
        Self {
            camera_id,
            pixel,
            confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction3D {
    pub point: WorldPoint,
    /// Sorted camera ids that support the point.
    pub inlier_cameras: Vec<CameraId>,
    /// Root-mean-square reprojection error over the inlier observations.
    pub reproj_error_px: f64,
    pub per_camera_px: BTreeMap<CameraId, PixelPoint>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmSettings {
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iters: usize,
    pub tol_step: f64,
    pub tol_grad: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            max_iters: 50,
            tol_step: 1e-10,
            tol_grad: 1e-10,
        }
    }
}

/// Damping above which a step is considered impossible.
const LAMBDA_MAX: f64 = 1e16;

fn camera(rig: &Rig, id: CameraId) -> Result<&Camera, FusionError> {
    rig.get(id).ok_or(FusionError::UnknownCamera(id))
}

// ---------------------------------------------------------------------------
// Triangulation and voting

/// Midpoint of the shortest segment between the two pixel rays.
pub fn triangulate_pair(
    cam_a: &Camera,
    px_a: &PixelPoint,
    cam_b: &Camera,
    px_b: &PixelPoint,
) -> Result<WorldPoint, FusionError> {
    let (o1, d1) = cam_a.pixel_ray(px_a);
    let (o2, d2) = cam_b.pixel_ray(px_b);
    let degenerate = FusionError::DegenerateRays(cam_a.id, cam_b.id);
    if (o1 - o2).norm() < 1e-12 {
        return Err(degenerate);
    }
    let sin = d1.cross(&d2).norm();
    if sin < 1e-9 {
        return Err(degenerate);
    }
    let w0 = o1 - o2;
    let b = d1.dot(&d2);
    let d = d1.dot(&w0);
    let e = d2.dot(&w0);
    let denom = 1.0 - b * b;
    let s = (b * e - d) / denom;
    let t = (e - b * d) / denom;
    let p1 = o1 + d1 * s;
    let p2 = o2 + d2 * t;
    Ok(WorldPoint::from((p1.coords + p2.coords) * 0.5))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consensus {
    pub point: WorldPoint,
    pub inliers: Vec<CameraId>,
    pub outliers: Vec<CameraId>,
}

struct PairResult {
    a: CameraId,
    b: CameraId,
    point: WorldPoint,
}

fn most_central(results: &[&PairResult]) -> Option<WorldPoint> {
    results
        .iter()
        .map(|r| {
            let total: f64 = results.iter().map(|o| (o.point - r.point).norm()).sum();
            (total, r.point)
        })
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .map(|(_, p)| p)
}

/// Distance from `p` to the pixel ray of `cam`.
fn ray_distance(cam: &Camera, px: &PixelPoint, p: &WorldPoint) -> f64 {
    let (o, d) = cam.pixel_ray(px);
    (p - o).cross(&d).norm()
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn sorted_observations(observations: &[Observation]) -> Result<Vec<Observation>, FusionError> {
    let mut obs = observations.to_vec();
    obs.sort_by_key(|o| o.camera_id);
    if let Some(w) = obs.windows(2).find(|w| w[0].camera_id == w[1].camera_id) {
        return Err(FusionError::DuplicateCamera(w[0].camera_id));
    }
    Ok(obs)
}

/// Pairwise-triangulation voting. The consensus is the pair result with the
/// smallest summed distance to all pair results; a camera is an inlier when
/// the median distance from its pair results to the consensus is at most
/// `dist_thd_m`. The consensus is then re-selected among inlier pairs only.
/// A pair whose rays pass more than `dist_thd_m` apart yields no result, and a
/// camera left without any pair result is an outlier.
pub fn vote_consensus(observations: &[Observation], rig: &Rig, dist_thd_m: f64) -> Result<Consensus, FusionError> {
    let obs = sorted_observations(observations)?;
    if obs.len() < 2 {
        return Err(FusionError::TooFewObservations(obs.len()));
    }
    let cams = obs
        .iter()
        .map(|o| camera(rig, o.camera_id))
        .collect::<Result<Vec<_>, _>>()?;

    let mut pairs = Vec::new();
    for i in 0..obs.len() {
        for j in (i + 1)..obs.len() {
            let Ok(point) = triangulate_pair(cams[i], &obs[i].pixel, cams[j], &obs[j].pixel) else {
                continue;
            };
            // Rays passing farther apart than the threshold have no common point.
            if 2.0 * ray_distance(cams[i], &obs[i].pixel, &point) > dist_thd_m {
                continue;
            }
            {
                pairs.push(PairResult {
                    a: obs[i].camera_id,
                    b: obs[j].camera_id,
                    point,
                });
            }
        }
    }
    let all: Vec<&PairResult> = pairs.iter().collect();
    let seed = most_central(&all).ok_or(FusionError::NoConsensus { inliers: 0 })?;

    let mut inliers = Vec::new();
    let mut outliers = Vec::new();
    for o in &obs {
        let mut dists: Vec<f64> = pairs
            .iter()
            .filter(|p| p.a == o.camera_id || p.b == o.camera_id)
            .map(|p| (p.point - seed).norm())
            .collect();
        match median(&mut dists) {
            Some(m) if m <= dist_thd_m => inliers.push(o.camera_id),
            _ => outliers.push(o.camera_id),
        }
    }
    if inliers.len() < 2 {
        return Err(FusionError::NoConsensus { inliers: inliers.len() });
    }
    let inlier_set: BTreeSet<_> = inliers.iter().copied().collect();
    let inlier_pairs: Vec<&PairResult> = pairs
        .iter()
        .filter(|p| inlier_set.contains(&p.a) && inlier_set.contains(&p.b))
        .collect();
    let point = most_central(&inlier_pairs).ok_or(FusionError::NoConsensus { inliers: inliers.len() })?;
    Ok(Consensus {
        point,
        inliers,
        outliers,
    })
}

// ---------------------------------------------------------------------------
// Point refinement

/// Jacobian of the pixel projection with respect to the camera-frame point.
fn projection_jacobian(cam: &Camera, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let k = &cam.intrinsics;
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    Matrix2x3::new(k.fx * iz, 0.0, -k.fx * pc.x * iz2, 0.0, k.fy * iz, -k.fy * pc.y * iz2)
}

/// Stacked residuals `project(cam_j, p) - x_j` and their Jacobian with
/// respect to `p` (two rows per observation, in input order).
pub fn point_residuals(
    point: &WorldPoint,
    observations: &[Observation],
    rig: &Rig,
) -> Result<(DVector<f64>, DMatrix<f64>), FusionError> {
    let n = observations.len();
    let mut r = DVector::zeros(2 * n);
    let mut jac = DMatrix::zeros(2 * n, 3);
    for (k, o) in observations.iter().enumerate() {
        let cam = camera(rig, o.camera_id)?;
        let pc = cam.pose.to_camera(point);
        if pc.z <= 0.0 {
            return Err(FusionError::DivergedOrSingular);
        }
        let px = cam.project_camera_frame(&pc);
        r[2 * k] = px.u - o.pixel.u;
        r[2 * k + 1] = px.v - o.pixel.v;
        let j = projection_jacobian(cam, &pc) * cam.pose.rotation;
        jac.view_mut((2 * k, 0), (2, 3)).copy_from(&j);
    }
    Ok((r, jac))
}

fn point_cost(point: &WorldPoint, observations: &[Observation], rig: &Rig) -> f64 {
    let mut cost = 0.0;
    for o in observations {
        let Some(cam) = rig.get(o.camera_id) else {
            return f64::INFINITY;
        };
        let pc = cam.pose.to_camera(point);
        if pc.z <= 0.0 {
            return f64::INFINITY;
        }
        let px = cam.project_camera_frame(&pc);
        cost += (px.u - o.pixel.u).powi(2) + (px.v - o.pixel.v).powi(2);
    }
    cost
}

/// Minimizes the summed squared reprojection error over the point
/// coordinates. Cameras stay fixed.
pub fn refine_point_lm(
    initial: &WorldPoint,
    observations: &[Observation],
    rig: &Rig,
    settings: &LmSettings,
) -> Result<Reconstruction3D, FusionError> {
    let obs = sorted_observations(observations)?;
    if obs.len() < 2 {
        return Err(FusionError::TooFewObservations(obs.len()));
    }
    for o in &obs {
        camera(rig, o.camera_id)?;
    }
    let mut point = *initial;
    let mut cost = point_cost(&point, &obs, rig);
    if !cost.is_finite() {
        return Err(FusionError::DivergedOrSingular);
    }
    let mut lambda = settings.lambda0;
    let mut iterations = 0;
    'outer: for _ in 0..settings.max_iters {
        let (r, jac) = point_residuals(&point, &obs, rig)?;
        let grad = jac.transpose() * &r;
        if grad.amax() < settings.tol_grad {
            break;
        }
        let h = jac.transpose() * &jac;
        let mut solved_once = false;
        loop {
            let damped = &h + DMatrix::identity(3, 3) * lambda;
            let Some(chol) = damped.cholesky() else {
                lambda *= settings.lambda_up;
                if lambda > LAMBDA_MAX {
                    if solved_once {
                        break 'outer;
                    }
                    return Err(FusionError::DivergedOrSingular);
                }
                continue;
            };
            solved_once = true;
            let delta = -chol.solve(&grad);
            let step = Vector3::new(delta[0], delta[1], delta[2]);
            if step.norm() <= settings.tol_step * (point.coords.norm() + settings.tol_step) {
                break 'outer;
            }
            let candidate = point + step;
            let new_cost = point_cost(&candidate, &obs, rig);
            if new_cost < cost {
                point = candidate;
                cost = new_cost;
                lambda = (lambda / settings.lambda_down).max(1e-15);
                iterations += 1;
                break;
            }
            lambda *= settings.lambda_up;
            if lambda > LAMBDA_MAX {
                break 'outer;
            }
        }
    }
    let per_camera_px = obs
        .iter()
        .filter_map(|o| {
            let cam = rig.get(o.camera_id)?;
            cam.project(&point).ok().map(|(px, _)| (o.camera_id, px))
        })
        .collect();
    Ok(Reconstruction3D {
        point,
        inlier_cameras: obs.iter().map(|o| o.camera_id).collect(),
        reproj_error_px: (cost / obs.len() as f64).sqrt(),
        per_camera_px,
        iterations,
    })
}

/// Voting followed by point refinement over the inlier cameras.
pub fn reconstruct(
    observations: &[Observation],
    rig: &Rig,
    dist_thd_m: f64,
    settings: &LmSettings,
) -> Result<(Reconstruction3D, Vec<CameraId>), FusionError> {
    let consensus = vote_consensus(observations, rig, dist_thd_m)?;
    let inlier_obs: Vec<Observation> = observations
        .iter()
        .filter(|o| consensus.inliers.contains(&o.camera_id))
        .copied()
        .collect();
    let recon = refine_point_lm(&consensus.point, &inlier_obs, rig, settings)?;
    Ok((recon, consensus.outliers))
}

// ---------------------------------------------------------------------------
// Sparse bundle adjustment

#[derive(Debug, Clone, PartialEq)]
pub struct SbaCamera {
    pub camera: Camera,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbaPoint {
    pub position: WorldPoint,
    pub frozen: bool,
}

/// Observation `x_ij` of point `i` in camera `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SbaObservation {
    pub point: usize,
    pub camera: usize,
    pub pixel: PixelPoint,
    /// 2x2 measurement covariance; the weight is its inverse.
    pub covariance: Matrix2<f64>,
}

impl SbaObservation {
    pub fn new(point: usize, camera: usize, pixel: PixelPoint) -> Self {
        Self {
            point,
            camera,
            pixel,
            covariance: Matrix2::identity(),
        }
    }
}

/// `n` points, `m` cameras and the sparse observations between them.
/// Camera parameter blocks are 6-vectors (axis-angle rotation increment,
/// translation increment); point blocks are 3-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SbaProblem {
    pub cameras: Vec<SbaCamera>,
    pub points: Vec<SbaPoint>,
    pub observations: Vec<SbaObservation>,
}

/// Jacobian blocks of one observation: `A_ij = d x_ij / d a_j` and
/// `B_ij = d x_ij / d b_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationJacobian {
    pub a: Matrix2x6,
    pub b: Matrix2x3<f64>,
}

/// Parameter update for every camera and point block (zero for frozen ones).
#[derive(Debug, Clone, PartialEq)]
pub struct SbaStep {
    pub cameras: Vec<Vector6<f64>>,
    pub points: Vec<Vector3<f64>>,
}

impl SbaStep {
    /// Updates stacked as `(a_1, .., a_m, b_1, .., b_n)`.
    pub fn stacked(&self) -> DVector<f64> {
        let mut v = DVector::zeros(6 * self.cameras.len() + 3 * self.points.len());
        for (j, a) in self.cameras.iter().enumerate() {
            v.rows_mut(6 * j, 6).copy_from(a);
        }
        let off = 6 * self.cameras.len();
        for (i, b) in self.points.iter().enumerate() {
            v.rows_mut(off + 3 * i, 3).copy_from(b);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbaSolution {
    pub problem: SbaProblem,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

impl SbaProblem {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: String| Err(FusionError::InvalidProblem(m));
        if self.cameras.is_empty() || self.points.is_empty() {
            return bad("problem needs at least one camera and one point".into());
        }
        let mut seen = BTreeSet::new();
        let mut views = vec![BTreeSet::new(); self.points.len()];
        for (k, o) in self.observations.iter().enumerate() {
            if o.point >= self.points.len() || o.camera >= self.cameras.len() {
                return bad(format!("observation {k} references ({}, {})", o.point, o.camera));
            }
            if !seen.insert((o.point, o.camera)) {
                return bad(format!(
                    "duplicate observation of point {} in camera {}",
                    o.point, o.camera
                ));
            }
            if !o.pixel.is_finite() {
                return bad(format!("observation {k} is not finite"));
            }
            if o.covariance.cholesky().is_none() {
                return bad(format!("observation {k} covariance is not positive definite"));
            }
            views[o.point].insert(o.camera);
        }
        for (i, (p, v)) in self.points.iter().zip(&views).enumerate() {
            if !p.frozen && v.len() < 2 {
                return bad(format!("free point {i} is observed by {} camera(s)", v.len()));
            }
        }
        Ok(())
    }

    fn project(&self, o: &SbaObservation) -> Option<(PixelPoint, Vector3<f64>)> {
        let cam = &self.cameras[o.camera].camera;
        let pc = cam.pose.to_camera(&self.points[o.point].position);
        (pc.z > 0.0).then(|| (cam.project_camera_frame(&pc), pc))
    }

    /// `x_ij - f(a_j, b_i)` for every observation, or `None` if a point lies
    /// behind an observing camera.
    pub fn residuals(&self) -> Option<Vec<Vector2<f64>>> {
        self.observations
            .iter()
            .map(|o| {
                self.project(o)
                    .map(|(px, _)| Vector2::new(o.pixel.u - px.u, o.pixel.v - px.v))
            })
            .collect()
    }

    /// Weighted squared error `sum e^T Sigma^-1 e`.
    pub fn cost(&self) -> f64 {
        let Some(res) = self.residuals() else {
            return f64::INFINITY;
        };
        self.observations
            .iter()
            .zip(res)
            .map(|(o, e)| {
                let w = o.covariance.try_inverse().unwrap_or_else(Matrix2::zeros);
                (e.transpose() * w * e)[0]
            })
            .sum()
    }

    pub fn observation_jacobian(&self, o: &SbaObservation) -> Option<ObservationJacobian> {
        let (_, pc) = self.project(o)?;
        let cam = &self.cameras[o.camera].camera;
        let dproj = projection_jacobian(cam, &pc);
        // p_cam = exp(w) R p + t, so d p_cam / d w = -[R p]x at w = 0.
        let rp = cam.pose.rotation * self.points[o.point].position.coords;
        let skew = Matrix3::new(0.0, -rp.z, rp.y, rp.z, 0.0, -rp.x, -rp.y, rp.x, 0.0);
        let mut a = Matrix2x6::zeros();
        a.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * (-skew)));
        a.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
        let b = dproj * cam.pose.rotation;
        Some(ObservationJacobian { a, b })
    }

    /// Full Jacobian `dX/dP`: rows follow the observation order, columns are
    /// `(a_1, .., a_m, b_1, .., b_n)`. Frozen blocks are included.
    pub fn dense_jacobian(&self) -> Option<DMatrix<f64>> {
        let m = self.cameras.len();
        let mut jac = DMatrix::zeros(2 * self.observations.len(), 6 * m + 3 * self.points.len());
        for (k, o) in self.observations.iter().enumerate() {
            let blocks = self.observation_jacobian(o)?;
            jac.view_mut((2 * k, 6 * o.camera), (2, 6)).copy_from(&blocks.a);
            jac.view_mut((2 * k, 6 * m + 3 * o.point), (2, 3)).copy_from(&blocks.b);
        }
        Some(jac)
    }

    /// Which `(observation, parameter block)` entries of the Jacobian are
    /// structurally nonzero. Columns are `(a_1, .., a_m, b_1, .., b_n)`.
    pub fn jacobian_block_pattern(&self) -> Vec<Vec<bool>> {
        let m = self.cameras.len();
        self.observations
            .iter()
            .map(|o| {
                let mut row = vec![false; m + self.points.len()];
                row[o.camera] = true;
                row[m + o.point] = true;
                row
            })
            .collect()
    }

    pub fn apply(&self, step: &SbaStep) -> SbaProblem {
        let mut next = self.clone();
        for (c, d) in next.cameras.iter_mut().zip(&step.cameras) {
            if !c.frozen {
                let rot = Vector3::new(d[0], d[1], d[2]);
                let tr = Vector3::new(d[3], d[4], d[5]);
                c.camera.pose = c.camera.pose.perturbed(&rot, &tr);
            }
        }
        for (p, d) in next.points.iter_mut().zip(&step.points) {
            if !p.frozen {
                p.position += d;
            }
        }
        next
    }

    fn free_counts(&self) -> (usize, usize) {
        (
            self.cameras.iter().filter(|c| !c.frozen).count(),
            self.points.iter().filter(|p| !p.frozen).count(),
        )
    }
}

/// Whitened per-observation quantities: with `W = L L^T`, `A~ = L^T A`,
/// `B~ = L^T B`, `e~ = L^T e`.
struct Whitened {
    a: Matrix2x6,
    b: Matrix2x3<f64>,
    e: Vector2<f64>,
}

fn whiten(problem: &SbaProblem) -> Result<Vec<Whitened>, FusionError> {
    let behind = || FusionError::InvalidProblem("point behind an observing camera".into());
    let residuals = problem.residuals().ok_or_else(behind)?;
    problem
        .observations
        .iter()
        .zip(&residuals)
        .map(|(o, e)| {
            let jac = problem.observation_jacobian(o).ok_or_else(behind)?;
            let w = o
                .covariance
                .try_inverse()
                .ok_or_else(|| FusionError::InvalidProblem("singular covariance".into()))?;
            let lt = w
                .cholesky()
                .ok_or_else(|| FusionError::InvalidProblem("covariance not positive definite".into()))?
                .l()
                .transpose();
            Ok(Whitened {
                a: lt * jac.a,
                b: lt * jac.b,
                e: lt * e,
            })
        })
        .collect()
}

/// One damped Gauss-Newton step computed through the reduced point system.
///
/// With `N1` the (block-diagonal) camera block, `N4` the (block-diagonal)
/// point block, `N2` the camera/point coupling, and `g1`, `g2` the matching
/// halves of `J^T W e`, the point update is
/// `dx2 = (N4 - N2^T N1^-1 N2)^-1 (g2 - N2^T N1^-1 g1)` and the camera update
/// is recovered as `dx1 = N1^-1 (g1 - N2 dx2)`. Both diagonal blocks carry
/// the damping `lambda * I`. Frozen blocks are left out of the system.
///
/// Per camera `j`, `N1_j = A~^T A~ + lambda I` over all its observations, so
/// the products `N2^T N1^-1 N2` and `N2^T N1^-1 g1` are evaluated through
/// `A~ (A~^T A~ + lambda I)^-1 A~^T = I - lambda (A~ A~^T + lambda I)^-1`,
/// which avoids subtracting nearly equal terms when `N1` is badly
/// conditioned.
pub fn schur_step(problem: &SbaProblem, lambda: f64) -> Result<SbaStep, FusionError> {
    if !(lambda > 0.0) {
        return Err(FusionError::InvalidProblem("damping must be positive".into()));
    }
    let m = problem.cameras.len();
    let n = problem.points.len();
    let mut pt_idx = vec![None; n];
    let mut free_point_ids = Vec::new();
    for (i, p) in problem.points.iter().enumerate() {
        if !p.frozen {
            pt_idx[i] = Some(free_point_ids.len());
            free_point_ids.push(i);
        }
    }
    let free_pts = free_point_ids.len();
    let wh = whiten(problem)?;

    let mut by_camera: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (k, o) in problem.observations.iter().enumerate() {
        by_camera[o.camera].push(k);
    }

    let mut s = DMatrix::<f64>::identity(3 * free_pts, 3 * free_pts) * lambda;
    let mut rhs = DVector::<f64>::zeros(3 * free_pts);
    // Per free camera: Cholesky of N1_j and the inverse of A~ A~^T + lambda I.
    let mut cam_factor: Vec<Option<nalgebra::Cholesky<f64, nalgebra::U6>>> = vec![None; m];

    for j in 0..m {
        let obs = &by_camera[j];
        if problem.cameras[j].frozen {
            for &k in obs {
                if let Some(pi) = pt_idx[problem.observations[k].point] {
                    let w = &wh[k];
                    let blk = s.view((3 * pi, 3 * pi), (3, 3)) + w.b.transpose() * w.b;
                    s.view_mut((3 * pi, 3 * pi), (3, 3)).copy_from(&blk);
                    let r = rhs.rows(3 * pi, 3) + w.b.transpose() * w.e;
                    rhs.rows_mut(3 * pi, 3).copy_from(&r);
                }
            }
            continue;
        }
        let mut n1 = Matrix6::identity() * lambda;
        for &k in obs {
            n1 += wh[k].a.transpose() * wh[k].a;
        }
        cam_factor[j] = Some(n1.cholesky().ok_or(FusionError::SingularReducedSystem)?);

        let r = 2 * obs.len();
        if r == 0 {
            continue;
        }
        let mut outer = DMatrix::<f64>::identity(r, r) * lambda;
        for (x, &k) in obs.iter().enumerate() {
            for (y, &l) in obs.iter().enumerate() {
                let blk = wh[k].a * wh[l].a.transpose();
                let cur = outer.view((2 * x, 2 * y), (2, 2)) + blk;
                outer.view_mut((2 * x, 2 * y), (2, 2)).copy_from(&cur);
            }
        }
        let c = outer.cholesky().ok_or(FusionError::SingularReducedSystem)?.inverse();
        for (x, &k) in obs.iter().enumerate() {
            let Some(pk) = pt_idx[problem.observations[k].point] else {
                continue;
            };
            let bk = wh[k].b;
            let mut acc_r = Vector3::zeros();
            for (y, &l) in obs.iter().enumerate() {
                let cxy: Matrix2<f64> = c.fixed_view::<2, 2>(2 * x, 2 * y).into_owned();
                acc_r += bk.transpose() * cxy * wh[l].e;
                if let Some(pl) = pt_idx[problem.observations[l].point] {
                    let blk = (bk.transpose() * cxy * wh[l].b) * lambda;
                    let cur = s.view((3 * pk, 3 * pl), (3, 3)) + blk;
                    s.view_mut((3 * pk, 3 * pl), (3, 3)).copy_from(&cur);
                }
            }
            let cur = rhs.rows(3 * pk, 3) + acc_r * lambda;
            rhs.rows_mut(3 * pk, 3).copy_from(&cur);
        }
    }

    let dx2 = if free_pts == 0 {
        DVector::zeros(0)
    } else {
        s.cholesky().ok_or(FusionError::SingularReducedSystem)?.solve(&rhs)
    };
    if dx2.iter().any(|v| !v.is_finite()) {
        return Err(FusionError::SingularReducedSystem);
    }

    let mut step = SbaStep {
        cameras: vec![Vector6::zeros(); m],
        points: vec![Vector3::zeros(); n],
    };
    for (pi, &i) in free_point_ids.iter().enumerate() {
        step.points[i] = Vector3::new(dx2[3 * pi], dx2[3 * pi + 1], dx2[3 * pi + 2]);
    }
    for j in 0..m {
        let Some(factor) = &cam_factor[j] else {
            continue;
        };
        // g1 - N2 dx2 = A~^T (e~ - B~ dx2), with frozen points contributing no B~.
        let mut r = Vector6::zeros();
        for &k in &by_camera[j] {
            let i = problem.observations[k].point;
            let shifted = if pt_idx[i].is_some() {
                wh[k].e - wh[k].b * step.points[i]
            } else {
                wh[k].e
            };
            r += wh[k].a.transpose() * shifted;
        }
        step.cameras[j] = factor.solve(&r);
    }
    Ok(step)
}

/// Levenberg-Marquardt bundle adjustment. Accepted steps strictly decrease
/// the weighted cost; frozen blocks never move.
pub fn sba_solve(problem: &SbaProblem, settings: &LmSettings) -> Result<SbaSolution, FusionError> {
    problem.validate()?;
    let initial_cost = problem.cost();
    if !initial_cost.is_finite() {
        return Err(FusionError::InvalidProblem("point behind an observing camera".into()));
    }
    let mut current = problem.clone();
    let mut cost = initial_cost;
    let mut history = vec![cost];
    let (free_cams, free_pts) = problem.free_counts();
    if free_cams == 0 && free_pts == 0 {
        return Ok(SbaSolution {
            problem: current,
            initial_cost,
            final_cost: cost,
            iterations: 0,
            cost_history: history,
        });
    }
    let mut lambda = settings.lambda0;
    let mut iterations = 0;
    'outer: for _ in 0..settings.max_iters {
        let grad = sba_gradient(&current)?;
        if grad < settings.tol_grad {
            break;
        }
        loop {
            let step = match schur_step(&current, lambda) {
                Ok(s) => s,
                Err(FusionError::SingularReducedSystem) => {
                    lambda *= settings.lambda_up;
                    if lambda > LAMBDA_MAX {
                        return Err(FusionError::SingularReducedSystem);
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            let stacked = step.stacked();
            let scale = parameter_norm(&current);
            if stacked.norm() <= settings.tol_step * (scale + settings.tol_step) {
                break 'outer;
            }
            let candidate = current.apply(&step);
            let new_cost = candidate.cost();
            if new_cost < cost {
                current = candidate;
                cost = new_cost;
                history.push(cost);
                lambda = (lambda / settings.lambda_down).max(1e-15);
                iterations += 1;
                break;
            }
            lambda *= settings.lambda_up;
            if lambda > LAMBDA_MAX {
                break 'outer;
            }
        }
    }
    Ok(SbaSolution {
        problem: current,
        initial_cost,
        final_cost: cost,
        iterations,
        cost_history: history,
    })
}

/// Max-norm of `J^T W e` over the free blocks.
fn sba_gradient(problem: &SbaProblem) -> Result<f64, FusionError> {
    let residuals = problem
        .residuals()
        .ok_or_else(|| FusionError::InvalidProblem("point behind an observing camera".into()))?;
    let mut g_cam = vec![Vector6::zeros(); problem.cameras.len()];
    let mut g_pt = vec![Vector3::zeros(); problem.points.len()];
    for (o, e) in problem.observations.iter().zip(&residuals) {
        let jac = problem
            .observation_jacobian(o)
            .ok_or_else(|| FusionError::InvalidProblem("point behind an observing camera".into()))?;
        let w = o.covariance.try_inverse().unwrap_or_else(Matrix2::zeros);
        g_cam[o.camera] += jac.a.transpose() * w * e;
        g_pt[o.point] += jac.b.transpose() * w * e;
    }
    let cam_max = problem
        .cameras
        .iter()
        .zip(&g_cam)
        .filter(|(c, _)| !c.frozen)
        .map(|(_, g)| g.amax())
        .fold(0.0, f64::max);
    let pt_max = problem
        .points
        .iter()
        .zip(&g_pt)
        .filter(|(p, _)| !p.frozen)
        .map(|(_, g)| g.amax())
        .fold(0.0, f64::max);
    Ok(cam_max.max(pt_max))
}

fn parameter_norm(problem: &SbaProblem) -> f64 {
    let cams: f64 = problem
        .cameras
        .iter()
        .filter(|c| !c.frozen)
        .map(|c| c.camera.pose.translation.norm_squared())
        .sum();
    let pts: f64 = problem
        .points
        .iter()
        .filter(|p| !p.frozen)
        .map(|p| p.position.coords.norm_squared())
        .sum();
    (cams + pts).sqrt()
}

// ---------------------------------------------------------------------------
// Reprojection

/// Image box of a ball of radius `radius_m` centered at `p`: side
/// `2 * radius * f / depth` per axis around the projected center.
pub fn project_ball_box(cam: &Camera, p: &WorldPoint, radius_m: f64) -> Option<BBox> {
    let pc = cam.pose.to_camera(p);
    if pc.z <= 0.0 {
        return None;
    }
    let c = cam.project_camera_frame(&pc);
    let k = &cam.intrinsics;
    Some(BBox::from_center(
        c,
        2.0 * radius_m * k.fx / pc.z,
        2.0 * radius_m * k.fy / pc.z,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReprojectSettings {
    pub ball_radius_m: f64,
    /// Window side as a multiple of the projected ball diameter.
    pub window_scale: f64,
    pub min_window_px: f64,
    pub det_conf: f64,
    pub iou_thd: f64,
}

impl Default for ReprojectSettings {
    fn default() -> Self {
        Self {
            ball_radius_m: 0.11,
            window_scale: 4.0,
            min_window_px: 48.0,
            det_conf: 0.9,
            iou_thd: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reprojection {
    pub camera: CameraId,
    pub projected: BBox,
    pub window: RoiBox,
    pub detection: Option<Detection>,
}

/// Projects `point` into each listed camera and, where the center lands in
/// the image, re-runs the detector in a square window around it. The best
/// accepted detection of each window is reported.
pub fn reproject_and_refine(
    point: &WorldPoint,
    rig: &Rig,
    detector: &dyn Detector,
    frames: &FrameSet,
    frame_no: usize,
    cameras: &[CameraId],
    settings: &ReprojectSettings,
) -> Vec<Reprojection> {
    cameras
        .par_iter()
        .filter_map(|&id| {
            let cam = rig.get(id)?;
            let projected = project_ball_box(cam, point, settings.ball_radius_m)?;
            let c = projected.center();
            if !cam.in_image(&c) {
                return None;
            }
            let side = (settings.window_scale * projected.w.max(projected.h)).max(settings.min_window_px);
            let window = RoiBox::centered(c.u, c.v, side, cam.width, cam.height)?;
            let request = DetectRequest {
                camera: cam,
                frame_no,
                frame: frames.frame(id),
            };
            let dets = nms(&detector.detect(&request, &[window]), settings.iou_thd);
            Some(Reprojection {
                camera: id,
                projected,
                window,
                detection: best_detection(&dets, settings.det_conf),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose};
    use nalgebra::Vector3;

    fn cam_at(id: CameraId, eye: [f64; 3], target: [f64; 3]) -> Camera {
        let pose = CameraPose::look_at(
            &WorldPoint::new(eye[0], eye[1], eye[2]),
            &WorldPoint::new(target[0], target[1], target[2]),
            &Vector3::z(),
        )
        .unwrap();
        let k = CameraIntrinsics::simple(1000.0, 1000.0, 640.0, 360.0).unwrap();
        Camera::new(id, k, pose, 1280, 720).unwrap()
    }

    fn ring_rig(k: usize, target: WorldPoint) -> Rig {
        let cams = (0..k)
            .map(|i| {
                let a = i as f64 / k as f64 * std::f64::consts::TAU;
                cam_at(
                    i,
                    [target.x + 30.0 * a.cos(), target.y + 30.0 * a.sin(), 12.0],
                    [target.x, target.y, target.z],
                )
            })
            .collect();
        Rig::new(cams).unwrap()
    }

    fn observe(rig: &Rig, p: &WorldPoint) -> Vec<Observation> {
        rig.cameras()
            .iter()
            .map(|c| Observation::new(c.id, c.project(p).unwrap().0, 1.0))
            .collect()
    }

    #[test]
    fn triangulate_symmetric_pair() {
        // Cameras at (+-5, 0, 0) looking along +z.
        let k = CameraIntrinsics::simple(800.0, 800.0, 320.0, 240.0).unwrap();
        let mk = |id, x: f64| {
            let pose = CameraPose::new(nalgebra::Matrix3::identity(), Vector3::new(-x, 0.0, 0.0)).unwrap();
            Camera::new(id, k, pose, 640, 480).unwrap()
        };
        let (a, b) = (mk(0, 5.0), mk(1, -5.0));
        let p = WorldPoint::new(0.0, 0.0, 10.0);
        let (pa, _) = a.project(&p).unwrap();
        let (pb, _) = b.project(&p).unwrap();
        let got = triangulate_pair(&a, &pa, &b, &pb).unwrap();
        assert!((got - p).norm() < 1e-9);
        assert_eq!(
            triangulate_pair(&a, &pa, &a, &pa),
            Err(FusionError::DegenerateRays(0, 0))
        );
    }

    #[test]
    fn triangulation_error_shrinks_with_baseline() {
        let p = WorldPoint::new(0.0, 0.0, 20.0);
        let k = CameraIntrinsics::simple(800.0, 800.0, 320.0, 240.0).unwrap();
        let mut errors = Vec::new();
        for half_baseline in [1.0, 3.0, 9.0] {
            let mk = |id, x: f64| {
                let pose = CameraPose::new(nalgebra::Matrix3::identity(), Vector3::new(-x, 0.0, 0.0)).unwrap();
                Camera::new(id, k, pose, 640, 480).unwrap()
            };
            let (a, b) = (mk(0, half_baseline), mk(1, -half_baseline));
            let (mut pa, _) = a.project(&p).unwrap();
            let (mut pb, _) = b.project(&p).unwrap();
            // Antisymmetric 1 px disparity error: moves the point along depth.
            pa.u += 1.0;
            pb.u -= 1.0;
            let got = triangulate_pair(&a, &pa, &b, &pb).unwrap();
            let err = got - p;
            assert!(err.x.abs() < 1e-9 && err.y.abs() < 1e-9);
            errors.push(err.norm());
        }
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
    }

    #[test]
    fn consensus_noiseless() {
        let p = WorldPoint::new(3.0, -2.0, 1.5);
        let rig = ring_rig(4, p);
        let c = vote_consensus(&observe(&rig, &p), &rig, 0.5).unwrap();
        assert!((c.point - p).norm() < 1e-9);
        assert_eq!(c.inliers, vec![0, 1, 2, 3]);
        assert!(c.outliers.is_empty());
    }

    #[test]
    fn consensus_rejects_displaced_camera() {
        let p = WorldPoint::new(3.0, -2.0, 1.5);
        let mut rig_cams = ring_rig(4, p).cameras().to_vec();
        rig_cams.push(cam_at(4, [p.x + 5.0, p.y - 28.0, 15.0], [p.x, p.y, p.z]));
        let rig = Rig::new(rig_cams).unwrap();
        let mut obs = observe(&rig, &p);
        obs[2].pixel.u += 50.0;
        let c = vote_consensus(&obs, &rig, 0.5).unwrap();
        assert_eq!(c.outliers, vec![2]);
        assert!((c.point - p).norm() < 1e-9);
    }

    #[test]
    fn two_inconsistent_cameras_have_no_consensus() {
        let p = WorldPoint::new(0.0, 0.0, 1.0);
        let rig = ring_rig(2, p);
        let mut obs = observe(&rig, &p);
        // Rays that pass each other far apart.
        obs[0].pixel.u += 200.0;
        obs[1].pixel.v -= 200.0;
        assert!(matches!(
            vote_consensus(&obs, &rig, 0.5),
            Err(FusionError::NoConsensus { .. })
        ));
        assert!(matches!(
            vote_consensus(&obs[..1], &rig, 0.5),
            Err(FusionError::TooFewObservations(1))
        ));
    }

    #[test]
    fn consensus_is_order_invariant() {
        let p = WorldPoint::new(1.0, 1.0, 2.0);
        let rig = ring_rig(6, p);
        let mut obs = observe(&rig, &p);
        obs[1].pixel.u += 3.0;
        obs[4].pixel.v -= 80.0;
        let a = vote_consensus(&obs, &rig, 0.5).unwrap();
        obs.reverse();
        obs.swap(0, 3);
        let b = vote_consensus(&obs, &rig, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn refine_fixed_point_and_convergence() {
        let p = WorldPoint::new(2.0, 1.0, 0.5);
        let rig = ring_rig(6, p);
        let obs = observe(&rig, &p);
        let r = refine_point_lm(&p, &obs, &rig, &LmSettings::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert!(r.reproj_error_px < 1e-12);

        let start = p + Vector3::new(0.6, -0.5, 0.6245);
        assert!(((start - p).norm() - 1.0).abs() < 1e-3);
        let r = refine_point_lm(&start, &obs, &rig, &LmSettings::default()).unwrap();
        assert!((r.point - p).norm() < 1e-7, "{}", (r.point - p).norm());
        assert_eq!(r.inlier_cameras.len(), 6);
    }

    #[test]
    fn refine_never_increases_cost() {
        let p = WorldPoint::new(2.0, 1.0, 0.5);
        let rig = ring_rig(5, p);
        let mut obs = observe(&rig, &p);
        for (k, o) in obs.iter_mut().enumerate() {
            o.pixel.u += (k as f64 * 1.7).sin() * 2.0;
            o.pixel.v += (k as f64 * 0.3).cos() * 2.0;
        }
        let start = p + Vector3::new(0.2, 0.1, -0.1);
        let before = point_cost(&start, &obs, &rig);
        let r = refine_point_lm(&start, &obs, &rig, &LmSettings::default()).unwrap();
        let after = point_cost(&r.point, &obs, &rig);
        assert!(after <= before);
        assert!((r.reproj_error_px - (after / 5.0).sqrt()).abs() < 1e-12);
    }

    fn small_problem() -> SbaProblem {
        let target = WorldPoint::new(0.0, 0.0, 0.0);
        let rig = ring_rig(3, target);
        let points = [
            WorldPoint::new(0.5, 0.2, 0.1),
            WorldPoint::new(-0.4, 0.3, 0.6),
            WorldPoint::new(0.1, -0.6, -0.2),
            WorldPoint::new(-0.2, -0.1, 0.9),
        ];
        let mut observations = Vec::new();
        for (i, p) in points.iter().enumerate() {
            for (j, c) in rig.cameras().iter().enumerate() {
                let (px, _) = c.project(p).unwrap();
                let off = ((i * 3 + j) as f64).sin();
                observations.push(SbaObservation::new(i, j, PixelPoint::new(px.u + off, px.v - 0.5 * off)));
            }
        }
        SbaProblem {
            cameras: rig
                .cameras()
                .iter()
                .map(|c| SbaCamera {
                    camera: c.clone(),
                    frozen: false,
                })
                .collect(),
            points: points
                .iter()
                .map(|&position| SbaPoint {
                    position,
                    frozen: false,
                })
                .collect(),
            observations,
        }
    }

    #[test]
    fn frozen_problem_is_untouched() {
        let mut prob = small_problem();
        prob.cameras.iter_mut().for_each(|c| c.frozen = true);
        prob.points.iter_mut().for_each(|p| p.frozen = true);
        let sol = sba_solve(&prob, &LmSettings::default()).unwrap();
        assert_eq!(sol.problem, prob);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn frozen_cameras_stay_fixed() {
        let mut prob = small_problem();
        prob.cameras[0].frozen = true;
        prob.points[2].frozen = true;
        let sol = sba_solve(&prob, &LmSettings::default()).unwrap();
        assert_eq!(sol.problem.cameras[0], prob.cameras[0]);
        assert_eq!(sol.problem.points[2], prob.points[2]);
        assert!(sol.final_cost < sol.initial_cost);
        assert!(sol.cost_history.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn invalid_problems() {
        let mut prob = small_problem();
        prob.observations
            .push(SbaObservation::new(9, 0, PixelPoint::new(0.0, 0.0)));
        assert!(matches!(prob.validate(), Err(FusionError::InvalidProblem(_))));
        let mut prob = small_problem();
        prob.observations.retain(|o| o.point != 1 || o.camera == 0);
        assert!(matches!(
            sba_solve(&prob, &LmSettings::default()),
            Err(FusionError::InvalidProblem(_))
        ));
    }
}
