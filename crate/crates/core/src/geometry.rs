//! Pinhole camera model and camera rig.
//!
//! Conventions: right-handed world frame, camera `z` forward, image origin at
//! the top-left corner with `u` to the right and `v` downward. A pose maps
//! world coordinates into the camera frame: `p_cam = R * p_world + t`.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use thiserror::Error;

/// A point in the shared court frame, in meters.
pub type WorldPoint = Point3<f64>;

/// Index of a camera inside a [`Rig`].
pub type CameraId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z_cam = {0})")]
    PointBehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid rig: {0}")]
    InvalidRig(String),
    #[error("rig file line {line}: {msg}")]
    RigParse { line: usize, msg: String },
}

/// Continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Projective scale divisor: camera-frame `z = depth / s`.
    pub s: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, s: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, s };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with `s = 1`.
    pub fn simple(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        Self::new(fx, fy, cx, cy, 1.0)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let all_finite = [self.fx, self.fy, self.cx, self.cy, self.s]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(GeometryError::InvalidIntrinsics("non-finite value".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.s <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "scale s must be positive, got {}",
                self.s
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ROTATION_TOL: f64 = 1e-9;

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self
            .rotation
            .iter()
            .chain(self.translation.iter())
            .any(|v| !v.is_finite())
        {
            return Err(GeometryError::InvalidPose("non-finite value".into()));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if ortho > ROTATION_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation is not orthonormal (max deviation {ortho:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(())
    }

    /// Pose of a camera at `eye` looking at `target`, with image `v` pointing
    /// along `-up` as far as possible.
    pub fn look_at(eye: &WorldPoint, target: &WorldPoint, up: &Vector3<f64>) -> Result<Self, GeometryError> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(GeometryError::InvalidPose("eye and target coincide".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(up);
        if right.norm() < 1e-9 {
            return Err(GeometryError::InvalidPose("viewing direction parallel to up".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye.coords);
        Self::new(rotation, translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> WorldPoint {
        WorldPoint::from(-(self.rotation.transpose() * self.translation))
    }

    pub fn to_camera(&self, p: &WorldPoint) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }

    pub fn to_world(&self, p_cam: &Vector3<f64>) -> WorldPoint {
        WorldPoint::from(self.rotation.transpose() * (p_cam - self.translation))
    }

    /// Applies an axis-angle increment on the left of the rotation and adds
    /// `delta_t` to the translation.
    pub fn perturbed(&self, delta_rot: &Vector3<f64>, delta_t: &Vector3<f64>) -> Self {
        let increment = Rotation3::new(*delta_rot);
        Self {
            rotation: increment.matrix() * self.rotation,
            translation: self.translation + delta_t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: CameraId,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(
        id: CameraId,
        intrinsics: CameraIntrinsics,
        pose: CameraPose,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        intrinsics.validate()?;
        pose.validate()?;
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        Ok(Self {
            id,
            intrinsics,
            pose,
            width,
            height,
        })
    }

    pub fn center(&self) -> WorldPoint {
        self.pose.center()
    }

    /// Projects a world point. Returns the pixel and the sensor depth
    /// `s * z_cam` (equal to `z_cam` for the default `s = 1`), so that
    /// [`Camera::backproject`] inverts this exactly.
    pub fn project(&self, p: &WorldPoint) -> Result<(PixelPoint, f64), GeometryError> {
        let pc = self.pose.to_camera(p);
        if pc.z <= 0.0 {
            return Err(GeometryError::PointBehindCamera(pc.z));
        }
        Ok((self.project_camera_frame(&pc), pc.z * self.intrinsics.s))
    }

    pub(crate) fn project_camera_frame(&self, pc: &Vector3<f64>) -> PixelPoint {
        let k = &self.intrinsics;
        PixelPoint::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy)
    }

    pub fn backproject(&self, px: &PixelPoint, depth: f64) -> Result<WorldPoint, GeometryError> {
        if !(depth > 0.0) {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        let k = &self.intrinsics;
        let z = depth / k.s;
        let pc = Vector3::new((px.u - k.cx) * z / k.fx, (px.v - k.cy) * z / k.fy, z);
        Ok(self.pose.to_world(&pc))
    }

    /// Ray through a pixel: camera center and unit direction in world frame.
    pub fn pixel_ray(&self, px: &PixelPoint) -> (WorldPoint, Vector3<f64>) {
        let k = &self.intrinsics;
        let dir_cam = Vector3::new((px.u - k.cx) / k.fx, (px.v - k.cy) / k.fy, 1.0);
        let dir = (self.pose.rotation.transpose() * dir_cam).normalize();
        (self.center(), dir)
    }

    /// Half-open containment: `0 <= u < width`, `0 <= v < height`.
    pub fn in_image(&self, px: &PixelPoint) -> bool {
        px.u >= 0.0 && px.u < self.width as f64 && px.v >= 0.0 && px.v < self.height as f64
    }

    /// Projection if the point is in front of the camera and inside the image.
    pub fn project_visible(&self, p: &WorldPoint) -> Option<PixelPoint> {
        match self.project(p) {
            Ok((px, _)) if self.in_image(&px) => Some(px),
            _ => None,
        }
    }
}

/// Ordered set of cameras with distinct ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    cameras: Vec<Camera>,
}

impl Rig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self, GeometryError> {
        if cameras.is_empty() {
            return Err(GeometryError::InvalidRig("rig has no cameras".into()));
        }
        let mut ids: Vec<_> = cameras.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(GeometryError::InvalidRig(format!("duplicate camera id {}", w[0])));
        }
        Ok(Self { cameras })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn get(&self, id: CameraId) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = CameraId> + '_ {
        self.cameras.iter().map(|c| c.id)
    }

    /// Parses the rig text format: one camera per line,
    /// `id fx fy cx cy s r11 r12 r13 r21 r22 r23 r31 r32 r33 t1 t2 t3 width height`.
    pub fn parse(text: &str) -> Result<Self, GeometryError> {
        let mut cameras = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 20 {
                return Err(GeometryError::RigParse {
                    line: line_no,
                    msg: format!("expected 20 fields, found {}", fields.len()),
                });
            }
            let err = |msg: String| GeometryError::RigParse { line: line_no, msg };
            let id: CameraId = fields[0]
                .parse()
                .map_err(|e| err(format!("bad camera id {:?}: {e}", fields[0])))?;
            let nums = fields[1..18]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| err(format!("bad number {f:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let width: u32 = fields[18]
                .parse()
                .map_err(|e| err(format!("bad width {:?}: {e}", fields[18])))?;
            let height: u32 = fields[19]
                .parse()
                .map_err(|e| err(format!("bad height {:?}: {e}", fields[19])))?;
            let intrinsics =
                CameraIntrinsics::new(nums[0], nums[1], nums[2], nums[3], nums[4]).map_err(|e| err(e.to_string()))?;
            let rotation = Matrix3::from_row_slice(&nums[5..14]);
            let translation = Vector3::new(nums[14], nums[15], nums[16]);
            let pose = CameraPose::new(rotation, translation).map_err(|e| err(e.to_string()))?;
            let camera = Camera::new(id, intrinsics, pose, width, height).map_err(|e| err(e.to_string()))?;
            cameras.push(camera);
        }
        Self::new(cameras)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# id fx fy cx cy s r11 r12 r13 r21 r22 r23 r31 r32 r33 t1 t2 t3 width height\n");
        for c in &self.cameras {
            let k = &c.intrinsics;
            let r = &c.pose.rotation;
            let t = &c.pose.translation;
            let _ = write!(out, "{} {} {} {} {} {}", c.id, k.fx, k.fy, k.cx, k.cy, k.s);
            for row in 0..3 {
                for col in 0..3 {
                    let _ = write!(out, " {}", r[(row, col)]);
                }
            }
            let _ = writeln!(out, " {} {} {} {} {}", t.x, t.y, t.z, c.width, c.height);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_camera() -> Camera {
        let k = CameraIntrinsics::simple(1.0, 1.0, 0.0, 0.0).unwrap();
        Camera::new(0, k, CameraPose::identity(), 100, 100).unwrap()
    }

    #[test]
    fn principal_ray_projection() {
        let cam = unit_camera();
        let (px, depth) = cam.project(&WorldPoint::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, PixelPoint::new(0.0, 0.0));
        assert_eq!(depth, 1.0);
        let (px, depth) = cam.project(&WorldPoint::new(2.0, 4.0, 2.0)).unwrap();
        assert_eq!(px, PixelPoint::new(1.0, 2.0));
        assert_eq!(depth, 2.0);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let cam = unit_camera();
        assert!(matches!(
            cam.project(&WorldPoint::new(0.0, 0.0, -1.0)),
            Err(GeometryError::PointBehindCamera(_))
        ));
        assert!(matches!(
            cam.project(&WorldPoint::new(1.0, 0.0, 0.0)),
            Err(GeometryError::PointBehindCamera(_))
        ));
    }

    #[test]
    fn backprojection_examples() {
        let cam = unit_camera();
        let p = cam.backproject(&PixelPoint::new(0.0, 0.0), 1.0).unwrap();
        assert_eq!(p, WorldPoint::new(0.0, 0.0, 1.0));
        let p = cam.backproject(&PixelPoint::new(1.0, 2.0), 2.0).unwrap();
        assert_eq!(p, WorldPoint::new(2.0, 4.0, 2.0));
        assert!(matches!(
            cam.backproject(&PixelPoint::new(0.0, 0.0), 0.0),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(cam.backproject(&PixelPoint::new(0.0, 0.0), f64::NAN).is_err());
    }

    #[test]
    fn ray_of_principal_point() {
        let cam = unit_camera();
        let (o, d) = cam.pixel_ray(&PixelPoint::new(0.0, 0.0));
        assert_eq!(o, WorldPoint::origin());
        assert_eq!(d, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn half_open_image_bounds() {
        let cam = unit_camera();
        assert!(cam.in_image(&PixelPoint::new(0.0, 0.0)));
        assert!(!cam.in_image(&PixelPoint::new(100.0, 50.0)));
        assert!(!cam.in_image(&PixelPoint::new(-0.5, 10.0)));
        assert!(cam.in_image(&PixelPoint::new(99.999, 99.999)));
    }

    #[test]
    fn invalid_parameters() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 1.0).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0.0).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(CameraPose::new(reflect, Vector3::zeros()).is_err());
        let k = CameraIntrinsics::simple(1.0, 1.0, 0.0, 0.0).unwrap();
        assert!(Camera::new(0, k, CameraPose::identity(), 0, 10).is_err());
        let a = unit_camera();
        assert!(Rig::new(vec![a.clone(), a]).is_err());
        assert!(Rig::new(vec![]).is_err());
    }

    #[test]
    fn look_at_points_forward() {
        let eye = WorldPoint::new(-10.0, 34.0, 20.0);
        let target = WorldPoint::new(52.5, 34.0, 0.0);
        let pose = CameraPose::look_at(&eye, &target, &Vector3::z()).unwrap();
        assert!((pose.center() - eye).norm() < 1e-12);
        let pc = pose.to_camera(&target);
        assert!(pc.x.abs() < 1e-9 && pc.y.abs() < 1e-9 && pc.z > 0.0);
        // A point above the target appears higher in the image (smaller v).
        let above = pose.to_camera(&WorldPoint::new(52.5, 34.0, 5.0));
        assert!(above.y / above.z < 0.0);
    }

    #[test]
    fn doubling_focal_length_doubles_offset() {
        let pose = CameraPose::look_at(
            &WorldPoint::new(1.0, -3.0, 2.0),
            &WorldPoint::new(0.3, 0.2, 0.0),
            &Vector3::z(),
        )
        .unwrap();
        // Zero principal point keeps `u - cx` free of cancellation error.
        let k1 = CameraIntrinsics::simple(800.0, 700.0, 0.0, 0.0).unwrap();
        let k2 = CameraIntrinsics::simple(1600.0, 700.0, 0.0, 0.0).unwrap();
        let c1 = Camera::new(0, k1, pose, 640, 480).unwrap();
        let c2 = Camera::new(0, k2, pose, 640, 480).unwrap();
        let p = WorldPoint::new(0.5, 0.1, 0.4);
        let (a, _) = c1.project(&p).unwrap();
        let (b, _) = c2.project(&p).unwrap();
        assert_eq!(2.0 * a.u, b.u);
        assert_eq!(a.v, b.v);
    }

    #[test]
    fn rig_text_round_trip() {
        let pose = CameraPose::look_at(
            &WorldPoint::new(-10.0, 0.1, 20.0),
            &WorldPoint::new(52.5, 34.0, 0.0),
            &Vector3::z(),
        )
        .unwrap();
        let k = CameraIntrinsics::new(2000.0, 2001.5, 1280.0, 768.0, 1.0).unwrap();
        let rig = Rig::new(vec![
            Camera::new(3, k, pose, 2560, 1536).unwrap(),
            Camera::new(7, k, CameraPose::identity(), 640, 480).unwrap(),
        ])
        .unwrap();
        let text = rig.render();
        assert_eq!(Rig::parse(&text).unwrap(), rig);
    }

    #[test]
    fn rig_parse_errors() {
        assert!(Rig::parse("").is_err());
        assert!(matches!(
            Rig::parse("0 1 1 0 0 1 1 0 0 0 1 0 0 0 1 0 0 0 10"),
            Err(GeometryError::RigParse { line: 1, .. })
        ));
        let ok = "# comment\n0 1 1 0 0 1 1 0 0 0 1 0 0 0 1 0 0 0 10 10 # trailing\n";
        assert_eq!(Rig::parse(ok).unwrap().len(), 1);
    }
}
