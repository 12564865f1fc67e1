//! Geometry primitives shared by every other module.
//!
//! Conventions used throughout the crate:
//!
//! * Attitudes are stored as body-to-world rotation matrices, so a vector
//!   measured in the robot frame is mapped to the world frame by `R * v`.
//! * Euler angles follow the intrinsic Z-Y-X (yaw, pitch, roll) sequence,
//!   `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
//! * All angles are radians.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Rotation3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type RotationMatrix = Rotation3<f64>;

/// Gimbal-lock tolerance on `|pitch| - pi/2`.
const GIMBAL_EPS: f64 = 1e-9;

/// Roll, pitch and yaw in radians, each wrapped to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            roll: wrap_angle(roll),
            pitch: wrap_angle(pitch),
            yaw: wrap_angle(yaw),
        }
    }

    /// Euclidean norm of the angle triple.
    pub fn norm(&self) -> f64 {
        (self.roll * self.roll + self.pitch * self.pitch + self.yaw * self.yaw).sqrt()
    }
}

/// Direction and range of a point: azimuth in `(-pi, pi]`, elevation in
/// `[-pi/2, pi/2]`, radius in metres.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Spherical {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
}

impl Spherical {
    pub fn new(azimuth: f64, elevation: f64, radius: f64) -> Self {
        Self {
            azimuth: wrap_angle(azimuth),
            elevation: elevation.clamp(-FRAC_PI_2, FRAC_PI_2),
            radius,
        }
    }

    /// A unit-radius direction.
    pub fn direction(azimuth: f64, elevation: f64) -> Self {
        Self::new(azimuth, elevation, 1.0)
    }

    /// Unit vector pointing along this direction (radius ignored).
    pub fn unit_vector(&self) -> Vec3 {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        Vec3::new(ce * ca, ce * sa, se)
    }
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if !a.is_finite() {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    // rem_euclid can land on exactly -pi after the shift for inputs like 3*pi
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation matrix for Z-Y-X Euler angles.
pub fn euler_to_rotation(e: &EulerAngles) -> RotationMatrix {
    RotationMatrix::from_matrix_unchecked(rot_z(e.yaw) * rot_y(e.pitch) * rot_x(e.roll))
}

/// Inverse of [`euler_to_rotation`].
///
/// At gimbal lock (`|pitch|` within 1e-9 of `pi/2`) roll is fixed to zero and
/// the whole remaining rotation is reported as yaw.
pub fn rotation_to_euler(r: &RotationMatrix) -> EulerAngles {
    let m = r.matrix();
    let sp = (-m[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    if (pitch.abs() - FRAC_PI_2).abs() < GIMBAL_EPS || (1.0 - sp.abs()) < 1e-18 {
        let yaw = (-m[(0, 1)]).atan2(m[(1, 1)]);
        return EulerAngles::new(0.0, pitch, yaw);
    }
    let roll = m[(2, 1)].atan2(m[(2, 2)]);
    let yaw = m[(1, 0)].atan2(m[(0, 0)]);
    EulerAngles::new(roll, pitch, yaw)
}

/// Cartesian to (azimuth, elevation, radius). The zero vector maps to all
/// zeros.
pub fn cartesian_to_spherical(v: &Vec3) -> Spherical {
    let r = v.norm();
    if r == 0.0 {
        return Spherical::default();
    }
    let azimuth = v.y.atan2(v.x);
    let elevation = (v.z / r).clamp(-1.0, 1.0).asin();
    Spherical::new(azimuth, elevation, r)
}

pub fn spherical_to_cartesian(s: &Spherical) -> Vec3 {
    s.unit_vector() * s.radius
}

/// Expresses a world point in the robot frame of a robot at `robot_pos` with
/// body-to-world attitude `attitude`.
pub fn world_to_robot(s_world: &Vec3, robot_pos: &Vec3, attitude: &RotationMatrix) -> Vec3 {
    attitude.inverse_transform_vector(&(s_world - robot_pos))
}

/// Inverse of [`world_to_robot`].
pub fn robot_to_world(s_robot: &Vec3, robot_pos: &Vec3, attitude: &RotationMatrix) -> Vec3 {
    attitude * s_robot + robot_pos
}

/// Position error metric.
pub fn euclidean_error(gt: &Vec3, est: &Vec3) -> f64 {
    (gt - est).norm()
}

/// Great-circle angle between two directions, in `[0, pi]`.
pub fn angle_between(a: &Spherical, b: &Spherical) -> f64 {
    let u = a.unit_vector();
    let v = b.unit_vector();
    u.cross(&v).norm().atan2(u.dot(&v))
}

/// Symmetric part of a matrix.
pub fn symmetrize(m: &Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}

/// Checks that `m` is symmetric and positive semidefinite within a tolerance
/// scaled by its magnitude.
pub fn is_psd(m: &Mat3) -> bool {
    if m.iter().any(|x| !x.is_finite()) {
        return false;
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return false;
    }
    let eig = symmetrize(m).symmetric_eigenvalues();
    eig.min() >= -1e-12 * scale
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(m: &Mat3) -> f64 {
    symmetrize(m).symmetric_eigenvalues().max()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn is_rotation(m: &Mat3) -> bool {
        (m.transpose() * m - Mat3::identity()).amax() < 1e-9 && (m.determinant() - 1.0).abs() < 1e-9
    }

    #[test]
    fn identity_angles() {
        let r = euler_to_rotation(&EulerAngles::default());
        assert_abs_diff_eq!(*r.matrix(), Mat3::identity(), epsilon = 1e-15);
        let e = rotation_to_euler(&RotationMatrix::identity());
        assert_eq!((e.roll, e.pitch, e.yaw), (0.0, 0.0, 0.0));
    }

    #[test]
    fn quarter_yaw_maps_x_to_y() {
        let r = euler_to_rotation(&EulerAngles::new(0.0, 0.0, FRAC_PI_2));
        assert_abs_diff_eq!(r * Vec3::x(), Vec3::y(), epsilon = 1e-15);
        let e = rotation_to_euler(&r);
        assert_abs_diff_eq!(e.roll, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.pitch, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.yaw, FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn matches_nalgebra_zyx() {
        // nalgebra's from_euler_angles uses the same roll/pitch/yaw sequence
        for &(r, p, y) in &[(0.1, -0.4, 2.0), (-2.5, 1.2, -0.3), (3.0, 0.0, -3.0)] {
            let ours = euler_to_rotation(&EulerAngles::new(r, p, y));
            let theirs = Rotation3::from_euler_angles(r, p, y);
            assert_abs_diff_eq!(*ours.matrix(), *theirs.matrix(), epsilon = 1e-14);
        }
    }

    #[test]
    fn gimbal_lock_branch() {
        let r = euler_to_rotation(&EulerAngles::new(0.3, FRAC_PI_2, 0.5));
        let e = rotation_to_euler(&r);
        assert_eq!(e.roll, 0.0);
        let back = euler_to_rotation(&e);
        assert_abs_diff_eq!(*back.matrix(), *r.matrix(), epsilon = 1e-9);
    }

    #[test]
    fn spherical_examples() {
        let s = cartesian_to_spherical(&Vec3::new(1.0, 0.0, 0.0));
        assert_eq!((s.azimuth, s.elevation, s.radius), (0.0, 0.0, 1.0));
        let s = cartesian_to_spherical(&Vec3::new(0.0, 0.0, 2.0));
        assert_abs_diff_eq!(s.azimuth, 0.0);
        assert_abs_diff_eq!(s.elevation, FRAC_PI_2, epsilon = 1e-15);
        assert_abs_diff_eq!(s.radius, 2.0);
        // hand-checked: rho = sqrt(2), z = sqrt(2) so r = 2 and el = 45 deg
        let s = cartesian_to_spherical(&Vec3::new(1.0, 1.0, 2f64.sqrt()));
        assert_abs_diff_eq!(s.azimuth, PI / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.elevation, PI / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.radius, 2.0, epsilon = 1e-15);
        let s = cartesian_to_spherical(&Vec3::zeros());
        assert_eq!((s.azimuth, s.elevation, s.radius), (0.0, 0.0, 0.0));
    }

    #[test]
    fn world_to_robot_examples() {
        let p = Vec3::new(3.0, 3.0, 1.5);
        let r = euler_to_rotation(&EulerAngles::new(0.2, -0.1, 1.0));
        assert_eq!(world_to_robot(&p, &p, &r), Vec3::zeros());
        let v = Vec3::new(1.0, -2.0, 0.5);
        assert_eq!(world_to_robot(&v, &Vec3::zeros(), &RotationMatrix::identity()), v);
    }

    #[test]
    fn error_examples() {
        assert_eq!(euclidean_error(&Vec3::zeros(), &Vec3::zeros()), 0.0);
        assert_eq!(euclidean_error(&Vec3::zeros(), &Vec3::new(3.0, 4.0, 0.0)), 5.0);
        assert_eq!(euclidean_error(&Vec3::new(1.0, 2.0, 3.0), &Vec3::new(4.0, 6.0, 3.0)), 5.0);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-0.5), -0.5);
        assert_abs_diff_eq!(wrap_angle(2.0 * PI + 0.25), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn random_angles_give_rotations() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let e = EulerAngles::new(
                rng.random_range(-PI..PI),
                rng.random_range(-PI..PI),
                rng.random_range(-PI..PI),
            );
            assert!(is_rotation(euler_to_rotation(&e).matrix()));
        }
    }

    fn angle() -> impl Strategy<Value = f64> {
        -PI..PI
    }

    fn point() -> impl Strategy<Value = Vec3> {
        (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn euler_round_trip(roll in angle(), pitch in -(FRAC_PI_2 - 0.1)..(FRAC_PI_2 - 0.1), yaw in angle()) {
            let e = EulerAngles::new(roll, pitch, yaw);
            let back = rotation_to_euler(&euler_to_rotation(&e));
            prop_assert!(wrap_angle(back.roll - e.roll).abs() < 1e-9);
            prop_assert!((back.pitch - e.pitch).abs() < 1e-9);
            prop_assert!(wrap_angle(back.yaw - e.yaw).abs() < 1e-9);
        }

        #[test]
        fn rotation_round_trip(roll in angle(), pitch in angle(), yaw in angle()) {
            let r = euler_to_rotation(&EulerAngles::new(roll, pitch, yaw));
            let back = euler_to_rotation(&rotation_to_euler(&r));
            prop_assert!((back.matrix() - r.matrix()).amax() < 1e-9);
        }

        #[test]
        fn spherical_round_trip(v in point()) {
            prop_assume!(v.norm() > 1e-6);
            let back = spherical_to_cartesian(&cartesian_to_spherical(&v));
            prop_assert!((back - v).amax() < 1e-9);
        }

        #[test]
        fn robot_frame_round_trip(s in point(), p in point(), roll in angle(), pitch in angle(), yaw in angle()) {
            let r = euler_to_rotation(&EulerAngles::new(roll, pitch, yaw));
            let back = robot_to_world(&world_to_robot(&s, &p, &r), &p, &r);
            prop_assert!((back - s).amax() < 1e-12 * (1.0 + s.amax() + p.amax()));
        }

        #[test]
        fn error_is_a_metric(a in point(), b in point(), c in point()) {
            let ab = euclidean_error(&a, &b);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, euclidean_error(&b, &a));
            prop_assert!(ab <= euclidean_error(&a, &c) + euclidean_error(&c, &b) + 1e-12);
        }
    }
}
