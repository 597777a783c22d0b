//! Poses, boxes and the small amount of 3-D math shared across the crate.

use nalgebra::{Isometry3, Point3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// A rigid pose: position in meters plus a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3 {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Default for Pose3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose3 {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self { position, orientation }
    }

    /// Upright pose at `(x, y, z)` rotated by `yaw` about +z.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self {
            position: Vector3::new(x, y, z),
            orientation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
        }
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self {
            position: iso.translation.vector,
            orientation: renormalize(iso.rotation),
        }
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3::from_isometry(&(self.to_isometry() * other.to_isometry()))
    }

    pub fn inverse(&self) -> Pose3 {
        Pose3::from_isometry(&self.to_isometry().inverse())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.to_isometry().transform_point(&Point3::from(*p)).coords
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.orientation.transform_vector(v)
    }

    /// Heading of the body x axis projected on the table plane.
    pub fn yaw(&self) -> f64 {
        let x = self.rotate(&Vector3::x());
        x.y.atan2(x.x)
    }

    /// `[px, py, pz, qw, qx, qy, qz]`
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.orientation.quaternion();
        [
            self.position.x,
            self.position.y,
            self.position.z,
            q.w,
            q.i,
            q.j,
            q.k,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            position: Vector3::new(a[0], a[1], a[2]),
            orientation: UnitQuaternion::new_unchecked(Quaternion::new(a[3], a[4], a[5], a[6])),
        }
    }
}

/// Renormalizes a quaternion that drifted through repeated products.
pub fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Axis-aligned box in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    /// Cube of edge `size` centered on `c`.
    pub fn cube(c: [f64; 3], size: f64) -> Self {
        let h = size / 2.0;
        Self {
            min: [c[0] - h, c[1] - h, c[2] - h],
            max: [c[0] + h, c[1] + h, c[2] + h],
        }
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] <= self.max[i])
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_xy(&self, p: &Vector3<f64>) -> bool {
        (0..2).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        [
            (self.min[0] + self.max[0]) / 2.0,
            (self.min[1] + self.max[1]) / 2.0,
            (self.min[2] + self.max[2]) / 2.0,
        ]
    }
}

/// Angle in radians between two nonzero vectors.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = a.dot(b) / (a.norm() * b.norm());
    c.clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn yaw_of_upright_pose() {
        let p = Pose3::from_xyz_yaw(0.0, 0.0, 0.0, 0.7);
        assert_relative_eq!(p.yaw(), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert_relative_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(-PI / 2.0 - 2.0 * PI), -PI / 2.0, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let a = Pose3::new(
            Vector3::new(0.3, -0.1, 0.2),
            UnitQuaternion::from_euler_angles(0.1, -0.4, 1.2),
        );
        let id = a.compose(&a.inverse());
        assert!(id.position.norm() < 1e-12);
        assert_relative_eq!(id.orientation.angle(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn array_round_trip() {
        let a = Pose3::new(
            Vector3::new(0.3, -0.1, 0.2),
            UnitQuaternion::from_euler_angles(0.1, -0.4, 1.2),
        );
        assert_eq!(Pose3::from_array(a.to_array()), a);
    }
}
