//! Rigid-body frames, rotations and the kinematic maps between the thruster,
//! body and earth frames.
//!
//! Orientation is stored as a unit quaternion; Z-Y-X Euler angles are only a
//! derived view. The body frame convention follows the earth frame: an
//! East-North-Up earth frame pairs with a forward-left-up body frame, a
//! North-East-Down earth frame with forward-right-down.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Distance from |pitch| = pi/2 at which the Euler-rate Jacobian is refused.
pub const GIMBAL_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum FrameError {
    #[error("gimbal lock: |pitch| = {pitch} is within {GIMBAL_EPSILON} rad of pi/2")]
    GimbalLock { pitch: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EarthFrame {
    #[default]
    Enu,
    Ned,
}

impl EarthFrame {
    /// Unit vector pointing down (towards the seabed) in this earth frame.
    pub fn down(self) -> Vec3 {
        match self {
            EarthFrame::Enu => Vec3::new(0.0, 0.0, -1.0),
            EarthFrame::Ned => Vec3::new(0.0, 0.0, 1.0),
        }
    }

    /// +1 when earth z points down, -1 when it points up.
    pub fn down_sign(self) -> f64 {
        match self {
            EarthFrame::Enu => -1.0,
            EarthFrame::Ned => 1.0,
        }
    }

    /// Positive-down depth of an earth-frame position.
    pub fn depth_of(self, position: &Vec3) -> f64 {
        self.down_sign() * position.z
    }

    /// Earth z coordinate of a positive-down depth.
    pub fn z_of_depth(self, depth: f64) -> f64 {
        self.down_sign() * depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attitude(UnitQuaternion<f64>);

impl Default for Attitude {
    fn default() -> Self {
        Self::identity()
    }
}

impl Attitude {
    pub fn identity() -> Self {
        Attitude(UnitQuaternion::identity())
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Attitude(q)
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    /// Rotation matrix mapping body vectors into the earth frame.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    /// Z-Y-X Euler angles `(roll, pitch, yaw)`.
    pub fn euler(&self) -> (f64, f64, f64) {
        self.0.euler_angles()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn inverse(&self) -> Self {
        Attitude(self.0.inverse())
    }

    pub fn compose(&self, other: &Attitude) -> Self {
        Attitude(self.0 * other.0)
    }
}

/// Z-Y-X intrinsic rotation: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn rotation_from_euler(roll: f64, pitch: f64, yaw: f64) -> Attitude {
    Attitude(UnitQuaternion::from_euler_angles(roll, pitch, yaw))
}

/// Jacobian mapping body angular rates (p, q, r) to Z-Y-X Euler rates.
pub fn euler_rate_jacobian(roll: f64, pitch: f64) -> Result<Matrix3<f64>, FrameError> {
    if pitch.abs() >= PI / 2.0 - GIMBAL_EPSILON {
        return Err(FrameError::GimbalLock { pitch });
    }
    let (sr, cr) = roll.sin_cos();
    let (tp, cp) = (pitch.tan(), pitch.cos());
    Ok(Matrix3::new(
        1.0,
        sr * tp,
        cr * tp,
        0.0,
        cr,
        -sr,
        0.0,
        sr / cp,
        cr / cp,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Transform {
    pub rotation: Attitude,
    pub translation: Vec3,
}

impl Transform {
    pub fn new(rotation: Attitude, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(translation: Vec3) -> Self {
        Self::new(Attitude::identity(), translation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Transform) -> Transform {
        Transform {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Transform {
        let rotation = self.rotation.inverse();
        Transform {
            rotation,
            translation: -rotation.rotate(&self.translation),
        }
    }
}

pub fn transform_point(t: &Transform, p: &Vec3) -> Vec3 {
    t.rotation.rotate(p) + t.translation
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    /// Earth-frame position, meters.
    pub position: Vec3,
    pub attitude: Attitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    /// Body-frame linear velocity, m/s.
    pub linear: Vec3,
    /// Body-frame angular velocity, rad/s.
    pub angular: Vec3,
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rx(a: f64) -> Matrix3<f64> {
        Matrix3::new(1.0, 0.0, 0.0, 0.0, a.cos(), -a.sin(), 0.0, a.sin(), a.cos())
    }
    fn ry(a: f64) -> Matrix3<f64> {
        Matrix3::new(a.cos(), 0.0, a.sin(), 0.0, 1.0, 0.0, -a.sin(), 0.0, a.cos())
    }
    fn rz(a: f64) -> Matrix3<f64> {
        Matrix3::new(a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn euler_identity_and_quarter_turn() {
        assert_relative_eq!(
            rotation_from_euler(0.0, 0.0, 0.0).rotation_matrix(),
            Matrix3::identity()
        );
        let v = rotation_from_euler(0.0, 0.0, PI / 2.0).rotate(&Vec3::x());
        assert_relative_eq!(v, Vec3::y(), epsilon = 1e-12);
    }

    #[test]
    fn euler_matches_matrix_product() {
        let expected = rz(1.1) * ry(-0.2) * rx(0.3);
        let got = rotation_from_euler(0.3, -0.2, 1.1).rotation_matrix();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_cases() {
        assert_eq!(euler_rate_jacobian(0.0, 0.0).unwrap(), Matrix3::identity());
        let j = euler_rate_jacobian(0.0, PI / 3.0).unwrap();
        // sin(roll) * tan(pitch) and cos(roll) / cos(pitch)
        assert_relative_eq!(j[(0, 1)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(j[(0, 2)], (PI / 3.0).tan(), epsilon = 1e-12);
        assert_relative_eq!(j[(2, 2)], 2.0, epsilon = 1e-12);
        assert!(matches!(
            euler_rate_jacobian(PI / 2.0 - 1e-9, PI / 2.0),
            Err(FrameError::GimbalLock { .. })
        ));
        assert!(euler_rate_jacobian(0.0, -(PI / 2.0 - 1e-7)).is_err());
    }

    #[test]
    fn transform_point_cases() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(transform_point(&Transform::identity(), &p), p);
        let t = Transform::translation(Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(transform_point(&t, &Vec3::zeros()), Vec3::new(0.0, 0.0, -1.0));
        let t = Transform::new(rotation_from_euler(0.0, 0.0, PI / 2.0), Vec3::x());
        assert_relative_eq!(
            transform_point(&t, &Vec3::x()),
            Vec3::new(1.0, 1.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn wrap_angle_range() {
        assert_relative_eq!(wrap_angle(PI), PI);
        assert_relative_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_relative_eq!(
            wrap_angle(179f64.to_radians() - (-179f64).to_radians()),
            -2f64.to_radians(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn depth_sign_follows_frame() {
        let p = Vec3::new(0.0, 0.0, -4.0);
        assert_eq!(EarthFrame::Enu.depth_of(&p), 4.0);
        assert_eq!(EarthFrame::Ned.depth_of(&p), -4.0);
        assert_eq!(EarthFrame::Ned.z_of_depth(2.0), 2.0);
    }

    fn angle() -> impl Strategy<Value = f64> {
        -PI..PI
    }

    fn transform() -> impl Strategy<Value = Transform> {
        (angle(), -1.5f64..1.5, angle(), -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0).prop_map(
            |(r, p, y, x, yy, z)| Transform::new(rotation_from_euler(r, p, y), Vec3::new(x, yy, z)),
        )
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(r in angle(), p in angle(), y in angle()) {
            let m = rotation_from_euler(r, p, y).rotation_matrix();
            prop_assert!((m.transpose() * m - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn euler_round_trip(r in angle(), p in -1.5f64..1.5, y in angle()) {
            let (r2, p2, y2) = rotation_from_euler(r, p, y).euler();
            prop_assert!(wrap_angle(r2 - r).abs() < 1e-9);
            prop_assert!((p2 - p).abs() < 1e-9);
            prop_assert!(wrap_angle(y2 - y).abs() < 1e-9);
        }

        #[test]
        fn compose_matches_sequential_application(a in transform(), b in transform(),
                                                  x in -5.0f64..5.0, y in -5.0f64..5.0, z in -5.0f64..5.0) {
            let p = Vec3::new(x, y, z);
            let lhs = transform_point(&a.compose(&b), &p);
            let rhs = transform_point(&a, &transform_point(&b, &p));
            prop_assert!((lhs - rhs).norm() < 1e-9);
            let id = a.compose(&a.inverse());
            prop_assert!(transform_point(&id, &p).metric_distance(&p) < 1e-9);
        }
    }
}
