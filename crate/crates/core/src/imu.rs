//! Inertial preintegration and dead reckoning.
//!
//! A batch of IMU samples between two frames is summarised into a relative
//! rotation, velocity and position increment expressed in the body frame at
//! the start of the batch, plus first-order covariances for the velocity and
//! position increments. The absolute state is then advanced with
//!
//! ```text
//! R_t = R_{t-1} dR
//! V_t = V_{t-1} + g dt + R_f dV
//! X_t = X_{t-1} + V_{t-1} dt + g dt^2 / 2 + R_f dX
//! ```
//!
//! where `R_f` is the attitude at the start of the interval by default, or
//! at its end when [`IncrementFrame::End`] is selected.

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{is_psd, symmetrize, Mat3, RotationMatrix, Vec3};

type Mat9 = SMatrix<f64, 9, 9>;

/// One accelerometer and gyroscope reading.
///
/// `specific_force` follows the gravity-reactive convention: a level sensor at
/// rest reads `(0, 0, +9.81)`. Readings are held constant over the interval
/// that ends at `timestamp`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub timestamp: f64,
    pub specific_force: Vec3,
    pub angular_rate: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoiseConfig {
    /// Per-sample accelerometer noise variance, (m/s^2)^2.
    pub accel_variance: f64,
    /// Per-sample gyroscope noise variance, (rad/s)^2.
    pub gyro_variance: f64,
    pub gravity: Vec3,
}

impl Default for ImuNoiseConfig {
    fn default() -> Self {
        Self {
            accel_variance: 1e-3,
            gyro_variance: 1e-2,
            gravity: Vec3::new(0.0, 0.0, -9.81),
        }
    }
}

/// Frame used to rotate the preintegrated increments into the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncrementFrame {
    /// Attitude at the start of the interval.
    #[default]
    Start,
    /// Attitude at the end of the interval.
    End,
}

/// Relative motion summarised from one IMU batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Preintegrated {
    pub d_rot: RotationMatrix,
    pub d_vel: Vec3,
    pub d_pos: Vec3,
    pub cov_vel: Mat3,
    pub cov_pos: Mat3,
    pub dt: f64,
}

impl Preintegrated {
    /// Increment for a robot that does not move or rotate for `dt` seconds
    /// under gravity `g`.
    pub fn stationary(dt: f64, gravity: &Vec3) -> Self {
        Self {
            d_rot: RotationMatrix::identity(),
            d_vel: -gravity * dt,
            d_pos: -gravity * (0.5 * dt * dt),
            cov_vel: Mat3::zeros(),
            cov_pos: Mat3::zeros(),
            dt,
        }
    }
}

/// Position, velocity and body-to-world attitude of the robot.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub attitude: RotationMatrix,
}

impl RobotState {
    pub fn at_rest(position: Vec3, attitude: RotationMatrix) -> Self {
        Self {
            position,
            velocity: Vec3::zeros(),
            attitude,
        }
    }
}

fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `(J1, J2)` with `J1 = int_0^h exp(t [w]x) dt` and
/// `J2 = int_0^h (h - t) exp(t [w]x) dt`.
fn held_rotation_integrals(w: &Vec3, h: f64) -> (Mat3, Mat3) {
    let n = w.norm();
    let id = Mat3::identity();
    if n * h < 1e-6 {
        let k = skew(w);
        return (id * h + k * (0.5 * h * h), id * (0.5 * h * h) + k * (h * h * h / 6.0));
    }
    let k = skew(&(w / n));
    let k2 = k * k;
    let th = n * h;
    let (sin, cos) = th.sin_cos();
    let j1 = id * h + k * ((1.0 - cos) / n) + k2 * (h - sin / n);
    let j2 = id * (0.5 * h * h) + k * (h / n - sin / (n * n)) + k2 * (0.5 * h * h - (1.0 - cos) / (n * n));
    (j1, j2)
}

/// Preintegrates `samples`, which cover the interval `(t_start, last timestamp]`.
///
/// Each reading is held constant over its sub-interval and integrated
/// exactly, so a body turning at a constant rate under a constant body-frame
/// force is reproduced without discretisation error. Noise is
/// propagated to first order through the rotation, velocity and position
/// error states. With a zero gyro variance the velocity covariance reduces to
/// `sum(accel_variance * h^2) * I`.
pub fn preintegrate(samples: &[ImuSample], t_start: f64, noise: &ImuNoiseConfig) -> Result<Preintegrated> {
    if samples.is_empty() {
        return Err(Error::Data("no samples".into()));
    }

    let mut d_rot = RotationMatrix::identity();
    let mut d_vel = Vec3::zeros();
    let mut d_pos = Vec3::zeros();
    let mut cov = Mat9::zeros();
    let mut prev_t = t_start;

    for s in samples {
        let h = s.timestamp - prev_t;
        if !(h > 0.0) {
            return Err(Error::Data(format!(
                "IMU timestamps must be strictly increasing ({} after {})",
                s.timestamp, prev_t
            )));
        }
        prev_t = s.timestamp;

        let theta = s.angular_rate * h;
        let half = d_rot * RotationMatrix::new(theta * 0.5);
        let step_rot = RotationMatrix::new(theta);
        let r_half = *half.matrix();

        // error-state propagation, order [dphi, dv, dp]
        let fx = r_half * skew(&s.specific_force);
        let mut a = Mat9::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&step_rot.matrix().transpose());
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-fx * h));
        a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-fx * (0.5 * h * h)));
        a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Mat3::identity() * h));
        let mut q = Mat9::zeros();
        q.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(Mat3::identity() * (noise.gyro_variance * h * h)));
        // rotated accel noise is isotropic, so R sigma^2 R^T = sigma^2 I
        let sa = noise.accel_variance;
        q.fixed_view_mut::<3, 3>(3, 3).copy_from(&(Mat3::identity() * (sa * h * h)));
        q.fixed_view_mut::<3, 3>(3, 6)
            .copy_from(&(Mat3::identity() * (0.5 * sa * h * h * h)));
        q.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Mat3::identity() * (0.5 * sa * h * h * h)));
        q.fixed_view_mut::<3, 3>(6, 6)
            .copy_from(&(Mat3::identity() * (0.25 * sa * h * h * h * h)));
        cov = a * cov * a.transpose() + q;

        let (j1, j2) = held_rotation_integrals(&s.angular_rate, h);
        let r0 = *d_rot.matrix();
        d_pos += d_vel * h + r0 * (j2 * s.specific_force);
        d_vel += r0 * (j1 * s.specific_force);
        d_rot = RotationMatrix::from_matrix_unchecked(d_rot.matrix() * step_rot.matrix());
    }
    d_rot.renormalize();

    Ok(Preintegrated {
        d_rot,
        d_vel,
        d_pos,
        cov_vel: symmetrize(&cov.fixed_view::<3, 3>(3, 3).into_owned()),
        cov_pos: symmetrize(&cov.fixed_view::<3, 3>(6, 6).into_owned()),
        dt: prev_t - t_start,
    })
}

/// Preintegrates `samples` with the rotation over the batch supplied by an
/// external attitude reference instead of the gyroscope.
///
/// The body is assumed to turn at the constant rate that carries it through
/// `d_rot` over the batch, so per-sample attitudes follow the geodesic between
/// the two reference attitudes; the gyro only picks the direction of turns
/// larger than a quarter revolution. Gyro noise is ignored.
pub fn preintegrate_aided(
    samples: &[ImuSample],
    t_start: f64,
    d_rot: &RotationMatrix,
    noise: &ImuNoiseConfig,
) -> Result<Preintegrated> {
    let last = samples.last().ok_or_else(|| Error::Data("no samples".into()))?;
    let span = last.timestamp - t_start;
    if !(span > 0.0) {
        return Err(Error::Data(format!("IMU batch spans {span} s")));
    }
    // the gyro decides which way round a large rotation went
    let mut turn = d_rot.scaled_axis();
    let angle = turn.norm();
    if angle > 0.5 * std::f64::consts::PI {
        let mut hint = Vec3::zeros();
        let mut prev = t_start;
        for s in samples {
            hint += s.angular_rate * (s.timestamp - prev);
            prev = s.timestamp;
        }
        let long_way = -turn * ((2.0 * std::f64::consts::PI - angle) / angle);
        if (hint - long_way).norm() < (hint - turn).norm() {
            turn = long_way;
        }
    }
    let rate = turn / span;
    let aided: Vec<ImuSample> = samples
        .iter()
        .map(|s| ImuSample {
            angular_rate: rate,
            ..*s
        })
        .collect();
    let quiet = ImuNoiseConfig {
        gyro_variance: 0.0,
        ..*noise
    };
    let mut pre = preintegrate(&aided, t_start, &quiet)?;
    pre.d_rot = *d_rot;
    Ok(pre)
}

/// Advances the absolute robot state by one preintegrated increment.
pub fn dead_reckon(prev: &RobotState, pre: &Preintegrated, gravity: &Vec3, frame: IncrementFrame) -> RobotState {
    let dt = pre.dt;
    let attitude = prev.attitude * pre.d_rot;
    let r_f = match frame {
        IncrementFrame::Start => prev.attitude,
        IncrementFrame::End => attitude,
    };
    let velocity = prev.velocity + gravity * dt + r_f * pre.d_vel;
    let position = prev.position + prev.velocity * dt + gravity * (0.5 * dt * dt) + r_f * pre.d_pos;
    RobotState {
        position,
        velocity,
        attitude,
    }
}

/// Propagates the velocity and position process-noise accumulators by one
/// increment. Returns `(q_pos, q_vel)`.
pub fn propagate_noise(q_pos_prev: &Mat3, q_vel_prev: &Mat3, pre: &Preintegrated) -> Result<(Mat3, Mat3)> {
    if !is_psd(q_pos_prev) || !is_psd(q_vel_prev) {
        return Err(Error::Numerical(
            "process noise accumulator is not symmetric positive semidefinite".into(),
        ));
    }
    let dt = pre.dt;
    let q_vel = symmetrize(&(q_vel_prev + pre.cov_vel));
    let q_pos = symmetrize(&(q_pos_prev + q_vel_prev * (dt * dt) + pre.cov_pos));
    Ok((q_pos, q_vel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rot_z;
    use approx::assert_abs_diff_eq;

    const G: f64 = 9.81;

    fn batch(n: usize, dt: f64, f: Vec3, w: Vec3) -> Vec<ImuSample> {
        let h = dt / n as f64;
        (1..=n)
            .map(|k| ImuSample {
                timestamp: k as f64 * h,
                specific_force: f,
                angular_rate: w,
            })
            .collect()
    }

    fn quiet() -> ImuNoiseConfig {
        ImuNoiseConfig {
            accel_variance: 0.0,
            gyro_variance: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let err = preintegrate(&[], 0.0, &quiet()).unwrap_err();
        assert!(err.to_string().contains("no samples"));
    }

    #[test]
    fn non_monotone_timestamps_are_rejected() {
        let mut b = batch(3, 1.0, Vec3::zeros(), Vec3::zeros());
        b[2].timestamp = b[1].timestamp;
        assert!(preintegrate(&b, 0.0, &quiet()).is_err());
        assert!(preintegrate(&b[..1], b[0].timestamp, &quiet()).is_err());
    }

    #[test]
    fn stationary_level_sensor_leaves_state_unchanged() {
        let b = batch(100, 1.0, Vec3::new(0.0, 0.0, G), Vec3::zeros());
        let pre = preintegrate(&b, 0.0, &quiet()).unwrap();
        assert_abs_diff_eq!(*pre.d_rot.matrix(), Mat3::identity(), epsilon = 1e-15);
        assert_abs_diff_eq!(pre.dt, 1.0, epsilon = 1e-12);
        let s0 = RobotState {
            position: Vec3::new(1.0, 2.0, 0.5),
            velocity: Vec3::zeros(),
            attitude: RotationMatrix::identity(),
        };
        let g = Vec3::new(0.0, 0.0, -G);
        let s1 = dead_reckon(&s0, &pre, &g, IncrementFrame::Start);
        assert_abs_diff_eq!(s1.position, s0.position, epsilon = 1e-9);
        assert_abs_diff_eq!(s1.velocity, s0.velocity, epsilon = 1e-9);
    }

    #[test]
    fn constant_acceleration_matches_kinematics() {
        let a = Vec3::new(0.7, -0.3, 0.2);
        let t = 2.0;
        let b = batch(200, t, a + Vec3::new(0.0, 0.0, G), Vec3::zeros());
        let pre = preintegrate(&b, 0.0, &quiet()).unwrap();
        // increments include the gravity reaction; remove it for the world accel
        let g = Vec3::new(0.0, 0.0, -G);
        assert_abs_diff_eq!(pre.d_vel + g * t, a * t, epsilon = 1e-6);
        assert_abs_diff_eq!(pre.d_pos + g * (0.5 * t * t), a * (0.5 * t * t), epsilon = 1e-6);

        let s0 = RobotState::at_rest(Vec3::zeros(), RotationMatrix::identity());
        let s1 = dead_reckon(&s0, &pre, &g, IncrementFrame::Start);
        assert_abs_diff_eq!(s1.position, a * (0.5 * t * t), epsilon = 1e-6);
        assert_abs_diff_eq!(s1.velocity, a * t, epsilon = 1e-6);
    }

    #[test]
    fn pure_yaw_rate_matches_analytic_rotation() {
        let w = 0.8;
        let t = 1.5;
        let b = batch(150, t, Vec3::new(0.0, 0.0, G), Vec3::new(0.0, 0.0, w));
        let pre = preintegrate(&b, 0.0, &quiet()).unwrap();
        assert_abs_diff_eq!(*pre.d_rot.matrix(), rot_z(w * t), epsilon = 1e-6);

        let s0 = RobotState::at_rest(Vec3::new(1.0, 1.0, 1.0), RotationMatrix::identity());
        let s1 = dead_reckon(&s0, &pre, &Vec3::new(0.0, 0.0, -G), IncrementFrame::Start);
        assert_abs_diff_eq!(s1.position, s0.position, epsilon = 1e-9);
        assert_abs_diff_eq!(s1.velocity, Vec3::zeros(), epsilon = 1e-9);
        assert_abs_diff_eq!(*s1.attitude.matrix(), rot_z(w * t), epsilon = 1e-6);
    }

    #[test]
    fn circular_arc_is_exact_with_coarse_samples() {
        let (v, w, t) = (2.0, 1.3, 1.0);
        let coarse = batch(10, t, Vec3::new(0.0, v * w, G), Vec3::new(0.0, 0.0, w));
        let pre = preintegrate(&coarse, 0.0, &quiet()).unwrap();
        let (s, c) = (w * t).sin_cos();
        let d_vel = Vec3::new(v * (c - 1.0), v * s, G * t);
        let d_pos = Vec3::new(v / w * s - v * t, v / w * (1.0 - c), 0.5 * G * t * t);
        assert_abs_diff_eq!(pre.d_vel, d_vel, epsilon = 1e-12);
        assert_abs_diff_eq!(pre.d_pos, d_pos, epsilon = 1e-12);
    }

    #[test]
    fn increment_frame_choice() {
        let b = batch(100, 1.0, Vec3::new(1.0, 0.0, G), Vec3::new(0.0, 0.0, 0.5));
        let pre = preintegrate(&b, 0.0, &quiet()).unwrap();
        let s0 = RobotState::at_rest(Vec3::zeros(), RotationMatrix::identity());
        let g = Vec3::new(0.0, 0.0, -G);
        let start = dead_reckon(&s0, &pre, &g, IncrementFrame::Start);
        let end = dead_reckon(&s0, &pre, &g, IncrementFrame::End);
        assert_abs_diff_eq!(end.velocity, pre.d_rot * (pre.d_vel + g), epsilon = 1e-12);
        assert!((start.velocity - end.velocity).norm() > 1e-3);
    }

    #[test]
    fn accel_only_noise_matches_closed_form() {
        let noise = ImuNoiseConfig {
            accel_variance: 2e-3,
            gyro_variance: 0.0,
            ..Default::default()
        };
        let n = 50;
        let b = batch(n, 1.0, Vec3::new(0.3, 0.1, G), Vec3::new(0.1, 0.2, 0.3));
        let pre = preintegrate(&b, 0.0, &noise).unwrap();
        let h = 1.0 / n as f64;
        let expect_v = 2e-3 * h * h * n as f64;
        assert_abs_diff_eq!(pre.cov_vel, Mat3::identity() * expect_v, epsilon = 1e-15);
        assert!(is_psd(&pre.cov_pos));
    }

    #[test]
    fn gyro_noise_inflates_velocity_covariance() {
        let mut noise = quiet();
        noise.gyro_variance = 1e-2;
        let b = batch(100, 1.0, Vec3::new(0.0, 0.0, G), Vec3::zeros());
        let pre = preintegrate(&b, 0.0, &noise).unwrap();
        // tilt errors leak gravity into the horizontal channels only
        assert!(pre.cov_vel[(0, 0)] > 0.0 && pre.cov_vel[(1, 1)] > 0.0);
        assert_abs_diff_eq!(pre.cov_vel[(2, 2)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn aided_rotation_ignores_gyro_noise() {
        let w = Vec3::new(0.0, 0.0, 0.8);
        let f = Vec3::new(0.5, 0.2, G);
        let clean = batch(100, 1.0, f, w);
        let noisy: Vec<ImuSample> = clean
            .iter()
            .enumerate()
            .map(|(k, s)| ImuSample {
                angular_rate: s.angular_rate + Vec3::new(0.3, -0.2, 0.1) * ((k % 7) as f64 - 3.0),
                ..*s
            })
            .collect();
        let exact = preintegrate(&clean, 0.0, &quiet()).unwrap();
        let aided = preintegrate_aided(&noisy, 0.0, &RotationMatrix::from_matrix_unchecked(rot_z(0.8)), &ImuNoiseConfig::default()).unwrap();
        assert_abs_diff_eq!(aided.d_vel, exact.d_vel, epsilon = 1e-9);
        assert_abs_diff_eq!(aided.d_pos, exact.d_pos, epsilon = 1e-9);
        // only the accelerometer contributes: 100 * 1e-3 * 0.01^2
        assert_abs_diff_eq!(aided.cov_vel, Mat3::identity() * 1e-5, epsilon = 1e-15);
        assert!(preintegrate_aided(&[], 0.0, &RotationMatrix::identity(), &quiet()).is_err());
    }

    #[test]
    fn aided_rotation_follows_gyro_direction_through_half_turns() {
        let w = Vec3::new(0.0, 0.0, 3.0);
        let f = Vec3::new(0.0, 2.0 * 3.0, G);
        let clean = batch(100, 1.0, f, w);
        let exact = preintegrate(&clean, 0.0, &quiet()).unwrap();
        // 3 rad about +z equals 2 pi - 3 rad about -z
        let aided = preintegrate_aided(&clean, 0.0, &exact.d_rot, &quiet()).unwrap();
        assert_abs_diff_eq!(aided.d_vel, exact.d_vel, epsilon = 1e-9);
        let back = batch(100, 1.0, Vec3::new(0.0, -6.0, G), -w);
        let exact_back = preintegrate(&back, 0.0, &quiet()).unwrap();
        let aided_back = preintegrate_aided(&back, 0.0, &exact_back.d_rot, &quiet()).unwrap();
        assert_abs_diff_eq!(aided_back.d_vel, exact_back.d_vel, epsilon = 1e-9);
    }

    #[test]
    fn propagate_noise_examples() {
        let zero = Preintegrated::stationary(1.0, &Vec3::new(0.0, 0.0, -G));
        let (qp, qv) = propagate_noise(&Mat3::zeros(), &Mat3::zeros(), &zero).unwrap();
        assert_eq!(qp, Mat3::zeros());
        assert_eq!(qv, Mat3::zeros());

        let s2 = 0.04;
        let (qp, qv) = propagate_noise(&Mat3::zeros(), &(Mat3::identity() * s2), &zero).unwrap();
        assert_abs_diff_eq!(qp, Mat3::identity() * s2, epsilon = 1e-15);
        assert_abs_diff_eq!(qv, Mat3::identity() * s2, epsilon = 1e-15);

        let bad = Mat3::new(1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(propagate_noise(&bad, &Mat3::zeros(), &zero).is_err());
    }

    #[test]
    fn propagate_noise_is_additive_over_steps() {
        let noise = ImuNoiseConfig::default();
        let b = batch(20, 1.0, Vec3::new(0.2, 0.0, G), Vec3::new(0.0, 0.0, 0.3));
        let pre = preintegrate(&b, 0.0, &noise).unwrap();
        let (mut qp, mut qv) = (Mat3::zeros(), Mat3::zeros());
        for _ in 0..10 {
            (qp, qv) = propagate_noise(&qp, &qv, &pre).unwrap();
            assert!(is_psd(&qp) && is_psd(&qv));
        }
        // closed form: Q_V(k) = k dQ_V, Q_X(k) = k dQ_X + dt^2 dQ_V k(k-1)/2
        let k = 10.0;
        let dt2 = pre.dt * pre.dt;
        assert_abs_diff_eq!(qv, pre.cov_vel * k, epsilon = 1e-15);
        assert_abs_diff_eq!(qp, pre.cov_pos * k + pre.cov_vel * (dt2 * k * (k - 1.0) / 2.0), epsilon = 1e-15);
    }
}
