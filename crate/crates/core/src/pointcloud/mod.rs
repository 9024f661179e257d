//! Points, poses and the synthetic LiDAR world.

pub mod io;
mod trajectory;
mod world;

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub use trajectory::{generate_trajectory, Direction, Frame, Pattern, TrajectorySpec};
pub use world::{simulate_scan, Landmark, ScanConfig, SyntheticWorld, WorldSpec};

/// A point in the sensor frame, meters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub sensor_id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, sensor_id: impl Into<String>) -> Self {
        Self {
            points,
            sensor_id: sensor_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rigid transform `p' = R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-9;

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let r = Matrix3::from_fn(|i, j| rotation[i][j]);
        let t = Vector3::from(translation);
        if !r.iter().chain(t.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("pose", "non-finite entry"));
        }
        let gram_err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if gram_err > ORTHONORMAL_TOL || (r.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::invalid(
                "pose",
                format!("rotation is not a proper orthonormal matrix (|RtR - I| = {gram_err:e})"),
            ));
        }
        Ok(Self {
            rotation: r,
            translation: t,
        })
    }

    /// Pure rotation about the z axis.
    pub fn yaw_rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::zeros(),
        }
    }

    /// Yaw rotation followed by a translation.
    pub fn from_yaw_translation(theta: f64, translation: [f64; 3]) -> Self {
        Self {
            translation: Vector3::from(translation),
            ..Self::yaw_rotation(theta)
        }
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let r = &self.rotation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    /// Heading angle about z, in `(-pi, pi]`.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: Point3) -> Point3 {
        Point3::from_vector(self.rotation * p.to_vector() + self.translation)
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    pub(crate) fn rotate_vector(&self, v: [f64; 3]) -> [f64; 3] {
        let r = self.rotation * Vector3::from(v);
        [r.x, r.y, r.z]
    }
}

/// Transforms every point by `pose`.
pub fn apply_pose(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|&p| pose.transform_point(p)).collect(),
        sensor_id: cloud.sensor_id.clone(),
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}
