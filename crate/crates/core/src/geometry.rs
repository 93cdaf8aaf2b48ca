//! Coordinate substrate: points, rigid poses, pinhole cameras, rays and
//! voxel-grid addressing.
//!
//! World frame convention: X is width, Y is height (up), Z is depth.
//! Camera frame convention: x right, y down, z forward (optical axis).

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{OccError, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = Vector3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Rigid transform `p' = R p + t` with `R` a proper rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(OccError::NonFinite("pose".into()));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if err >= ORTHONORMAL_TOL * 10.0 || (rotation.determinant() - 1.0).abs() > 1e-8 {
            return Err(OccError::invalid(format!(
                "rotation is not a proper orthonormal matrix (|RtR-I| = {err:e})"
            )));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about `axis` by `angle` radians followed by a translation.
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Pose {
            rotation: *rot.matrix(),
            translation,
        }
    }

    /// Camera-to-world pose of a camera at `position` whose optical axis is
    /// rotated by `yaw` about the world +Y axis (yaw 0 looks along +Z) and
    /// pitched by `pitch` (positive tilts the view upward).
    ///
    /// The camera's y axis points toward world -Y (down) at zero pitch.
    pub fn camera_yaw_pitch(position: Point3, yaw: f64, pitch: f64) -> Self {
        // Base camera frame: x -> -X world, y -> -Y world, z -> +Z world.
        let base = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        let tilt = Rotation3::from_axis_angle(&Vec3::x_axis(), -pitch);
        let turn = Rotation3::from_axis_angle(&Vec3::y_axis(), yaw);
        Pose {
            rotation: turn.matrix() * tilt.matrix() * base,
            translation: position.coords,
        }
    }

    /// Parses a 4x4 row-major homogeneous matrix.
    pub fn from_row_major(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(OccError::invalid(format!(
                "pose matrix needs 16 values, got {}",
                m.len()
            )));
        }
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom.iter().zip([0.0, 0.0, 0.0, 1.0]).any(|(a, b)| (a - b).abs() > 1e-9) {
            return Err(OccError::invalid("pose matrix bottom row must be 0 0 0 1"));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Pose::new(rotation, Vec3::new(m[3], m[7], m[11]))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    #[inline]
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite()) {
            return Err(OccError::NonFinite("camera intrinsics".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(OccError::invalid("camera resolution must be nonzero"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(OccError::invalid("focal lengths must be positive"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(OccError::invalid("principal point outside the image"));
        }
        Ok(())
    }

    /// Camera-frame unit direction through continuous pixel `(u, v)`.
    #[inline]
    pub fn pixel_direction(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize()
    }
}

/// Result of projecting a world point into a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible { u: f64, v: f64, depth: f64 },
    Behind,
}

impl Projection {
    pub fn visible(self) -> Option<(f64, f64, f64)> {
        match self {
            Projection::Visible { u, v, depth } => Some((u, v, depth)),
            Projection::Behind => None,
        }
    }
}

/// Pinhole projection of a camera-frame point.
#[inline]
pub fn project_camera_frame(p_cam: &Point3, intr: &CameraIntrinsics) -> Projection {
    if p_cam.z <= 0.0 {
        return Projection::Behind;
    }
    Projection::Visible {
        u: intr.fx * p_cam.x / p_cam.z + intr.cx,
        v: intr.fy * p_cam.y / p_cam.z + intr.cy,
        depth: p_cam.z,
    }
}

pub fn project(p_world: &Point3, intr: &CameraIntrinsics, cam_to_world: &Pose) -> Projection {
    project_camera_frame(&cam_to_world.inverse().transform_point(p_world), intr)
}

/// Inverse of [`project`]: lifts pixel `(u, v)` at z-depth `depth` to world.
pub fn backproject(
    u: f64,
    v: f64,
    depth: f64,
    intr: &CameraIntrinsics,
    cam_to_world: &Pose,
) -> Result<Point3> {
    if !(depth > 0.0) {
        return Err(OccError::invalid(format!("backproject needs depth > 0, got {depth}")));
    }
    let p_cam = Point3::new(
        (u - intr.cx) / intr.fx * depth,
        (v - intr.cy) / intr.fy * depth,
        depth,
    );
    Ok(cam_to_world.transform_point(&p_cam))
}

/// A named camera with its cached world-to-camera transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    cam_to_world: Pose,
    world_to_cam: Pose,
}

impl Camera {
    pub fn new(name: impl Into<String>, intrinsics: CameraIntrinsics, cam_to_world: Pose) -> Result<Self> {
        intrinsics.validate()?;
        Ok(Camera {
            name: name.into(),
            intrinsics,
            world_to_cam: cam_to_world.inverse(),
            cam_to_world,
        })
    }

    pub fn cam_to_world(&self) -> &Pose {
        &self.cam_to_world
    }

    pub fn world_to_cam(&self) -> &Pose {
        &self.world_to_cam
    }

    pub fn center(&self) -> Point3 {
        Point3::from(*self.cam_to_world.translation())
    }

    #[inline]
    pub fn project(&self, p_world: &Point3) -> Projection {
        project_camera_frame(&self.world_to_cam.transform_point(p_world), &self.intrinsics)
    }

    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Point3> {
        backproject(u, v, depth, &self.intrinsics, &self.cam_to_world)
    }

    /// World-frame ray through pixel `(u, v)` and the cosine between that
    /// ray and the optical axis (ray distance times the cosine is z-depth).
    pub fn pixel_ray(&self, u: f64, v: f64) -> (Ray, f64) {
        let d_cam = self.intrinsics.pixel_direction(u, v);
        let ray = Ray {
            origin: self.center(),
            direction: self.cam_to_world.rotate(&d_cam),
        };
        (ray, d_cam.z)
    }
}

/// Ordered collection of cameras around the ego vehicle.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    name: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    cam_to_world: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RigRecord {
    cameras: Vec<CameraRecord>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Self {
        CameraRig { cameras }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Parses the rig JSON document:
    /// `{"cameras": [{"name", "fx", "fy", "cx", "cy", "width", "height",
    /// "cam_to_world": [16 row-major floats]}]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let rec: RigRecord = serde_json::from_str(text)
            .map_err(|e| OccError::invalid(format!("camera rig json: {e}")))?;
        Self::from_record(rec)
    }

    fn from_record(rec: RigRecord) -> Result<Self> {
        let cameras = rec
            .cameras
            .into_iter()
            .map(|c| {
                let intr = CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)?;
                let pose = Pose::from_row_major(&c.cam_to_world)?;
                Camera::new(c.name, intr, pose)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CameraRig { cameras })
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        let rec: RigRecord = serde_json::from_value(value)
            .map_err(|e| OccError::invalid(format!("camera rig json: {e}")))?;
        Self::from_record(rec)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let rec = RigRecord {
            cameras: self
                .cameras
                .iter()
                .map(|c| CameraRecord {
                    name: c.name.clone(),
                    fx: c.intrinsics.fx,
                    fy: c.intrinsics.fy,
                    cx: c.intrinsics.cx,
                    cy: c.intrinsics.cy,
                    width: c.intrinsics.width,
                    height: c.intrinsics.height,
                    cam_to_world: c.cam_to_world.to_row_major().to_vec(),
                })
                .collect(),
        };
        serde_json::to_value(rec).expect("rig serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("rig serializes")
    }

    /// `count` cameras evenly spaced in yaw around `center`, all sharing
    /// the same intrinsics.
    pub fn surround(center: Point3, count: usize, intrinsics: CameraIntrinsics, pitch: f64) -> Result<Self> {
        let cameras = (0..count)
            .map(|i| {
                let yaw = std::f64::consts::TAU * i as f64 / count as f64;
                Camera::new(
                    format!("cam{i}"),
                    intrinsics,
                    Pose::camera_yaw_pitch(center, yaw, pitch),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CameraRig { cameras })
    }
}

/// Half-line `origin + t * direction`, `t >= 0`, with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    pub direction: Vec3,
}

impl Ray {
    /// Normalizes `direction`; fails for zero or non-finite input.
    pub fn new(origin: Point3, direction: Vec3) -> Result<Self> {
        let n = direction.norm();
        if !n.is_finite() || n == 0.0 || !origin.coords.iter().all(|v| v.is_finite()) {
            return Err(OccError::invalid("ray needs a finite origin and nonzero direction"));
        }
        Ok(Ray {
            origin,
            direction: direction / n,
        })
    }

    /// Ray from `origin` toward `target`, with the distance between them.
    pub fn towards(origin: Point3, target: Point3) -> Result<(Self, f64)> {
        let d = target - origin;
        let dist = d.norm();
        Ok((Ray::new(origin, d)?, dist))
    }

    #[inline]
    pub fn at(&self, t: f64) -> Point3 {
        self.origin + self.direction * t
    }
}

/// Axis-aligned voxel volume with half-open extent `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub dims: [usize; 3],
}

/// Continuous voxel coordinates of a point plus its containing voxel, if any.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelCoord {
    pub coords: Vec3,
    pub index: Option<[usize; 3]>,
}

impl GridSpec {
    pub fn new(min: [f64; 3], max: [f64; 3], dims: [usize; 3]) -> Result<Self> {
        let spec = GridSpec { min, max, dims };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.min.iter().chain(self.max.iter()).all(|v| v.is_finite()) {
            return Err(OccError::NonFinite("grid extent".into()));
        }
        for a in 0..3 {
            if !(self.max[a] > self.min[a]) {
                return Err(OccError::invalid(format!("grid max must exceed min on axis {a}")));
            }
            if self.dims[a] == 0 {
                return Err(OccError::invalid("grid dims must be >= 1"));
            }
        }
        Ok(())
    }

    /// The evaluation volume used for the driving benchmarks:
    /// X, Z in (-52, 52) m, Y in (0, 6) m, 256 x 16 x 256 voxels.
    pub fn driving_default() -> Self {
        GridSpec {
            min: [-52.0, 0.0, -52.0],
            max: [52.0, 6.0, 52.0],
            dims: [256, 16, 256],
        }
    }

    pub fn voxel_size(&self) -> Vec3 {
        Vec3::new(
            (self.max[0] - self.min[0]) / self.dims[0] as f64,
            (self.max[1] - self.min[1]) / self.dims[1] as f64,
            (self.max[2] - self.min[2]) / self.dims[2] as f64,
        )
    }

    pub fn voxel_diagonal(&self) -> f64 {
        self.voxel_size().norm()
    }

    pub fn min_point(&self) -> Point3 {
        Point3::new(self.min[0], self.min[1], self.min[2])
    }

    pub fn max_point(&self) -> Point3 {
        Point3::new(self.max[0], self.max[1], self.max[2])
    }

    pub fn diagonal(&self) -> f64 {
        (self.max_point() - self.min_point()).norm()
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max[a])
    }

    pub fn world_to_voxel(&self, p: &Point3) -> VoxelCoord {
        let vs = self.voxel_size();
        let coords = Vec3::new(
            (p.x - self.min[0]) / vs.x,
            (p.y - self.min[1]) / vs.y,
            (p.z - self.min[2]) / vs.z,
        );
        let index = if self.contains(p) {
            let mut idx = [0usize; 3];
            for a in 0..3 {
                // A point just below `max` can round up to `dims`.
                idx[a] = (coords[a].floor().max(0.0) as usize).min(self.dims[a] - 1);
            }
            Some(idx)
        } else {
            None
        };
        VoxelCoord { coords, index }
    }

    #[inline]
    pub fn voxel_index(&self, p: &Point3) -> Option<[usize; 3]> {
        self.world_to_voxel(p).index
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> Result<Point3> {
        if (0..3).any(|a| idx[a] >= self.dims[a]) {
            return Err(OccError::IndexOutOfRange {
                index: idx,
                dims: self.dims,
            });
        }
        Ok(self.voxel_center_unchecked(idx))
    }

    #[inline]
    pub(crate) fn voxel_center_unchecked(&self, idx: [usize; 3]) -> Point3 {
        let vs = self.voxel_size();
        Point3::new(
            self.min[0] + (idx[0] as f64 + 0.5) * vs.x,
            self.min[1] + (idx[1] as f64 + 0.5) * vs.y,
            self.min[2] + (idx[2] as f64 + 0.5) * vs.z,
        )
    }

    /// Flat offset in x-fastest order.
    #[inline]
    pub fn linear_index(&self, idx: [usize; 3]) -> usize {
        idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2])
    }

    #[inline]
    pub fn unravel(&self, linear: usize) -> [usize; 3] {
        let x = linear % self.dims[0];
        let rest = linear / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Parametric interval `[t_enter, t_exit]` where `ray` is inside the grid
    /// box, clipped to `t >= 0` (slab method).
    pub fn ray_interval(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let o = ray.origin[a];
            let d = ray.direction[a];
            if d.abs() < 1e-300 {
                if o < self.min[a] || o >= self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut ta, mut tb) = ((self.min[a] - o) * inv, (self.max[a] - o) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}
