//! Per-particle robot localisation.
//!
//! Every particle carries a critical-distance hypothesis and an EKF over the
//! robot position. At a keyframe each DoA that is associated with a known
//! source is combined with every DRR window into a range-bearing measurement,
//! each measurement produces one EKF candidate, and the candidates are fused
//! into a single Gaussian weighted by how well they agree with dead
//! reckoning.

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::Rng;

use crate::acoustics::RateLimiter;
use crate::error::{Error, Result};
use crate::geometry::{
    angle_between, cartesian_to_spherical, symmetrize, world_to_robot, wrap_angle, Mat3,
    RotationMatrix, Spherical, Vec3,
};
use crate::imu::{dead_reckon, propagate_noise, IncrementFrame, Preintegrated, RobotState};

/// Added to singular covariances before inversion or factorisation.
const REGULARIZATION: f64 = 1e-9;

/// Distance below which a bearing is undefined.
const DEGENERATE_RANGE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub x: Vec3,
    pub v: Vec3,
    pub cov: Mat3,
    /// Position process noise accumulated since the last keyframe.
    pub q_pos: Mat3,
    /// Velocity process noise accumulated since the last keyframe.
    pub q_vel: Mat3,
}

impl EkfState {
    pub fn new(x: Vec3, v: Vec3, cov: Mat3) -> Self {
        Self {
            x,
            v,
            cov,
            q_pos: Mat3::zeros(),
            q_vel: Mat3::zeros(),
        }
    }

    /// Covariance of the predicted position: the stored covariance plus the
    /// process noise accumulated since the last keyframe.
    pub fn predicted_cov(&self) -> Mat3 {
        symmetrize(&(self.cov + self.q_pos))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocatingConfig {
    /// DoA variance, rad^2.
    pub doa_variance: f64,
    /// Distance variance, m^2.
    pub distance_variance: f64,
    /// Weight of the predicted velocity in the smoothed velocity estimate.
    pub smoothing: f64,
    pub dc_min: f64,
    pub dc_max: f64,
    /// Largest angle between a DoA and a source bearing for the two to be
    /// associated, rad.
    pub association_gate: f64,
    pub rate_limiter: RateLimiter,
}

impl Default for LocatingConfig {
    fn default() -> Self {
        Self {
            doa_variance: 2f64.to_radians().powi(2),
            distance_variance: 0.35,
            smoothing: 0.7,
            dc_min: 0.5,
            dc_max: 10.0,
            association_gate: 15f64.to_radians(),
            rate_limiter: RateLimiter::default(),
        }
    }
}

impl LocatingConfig {
    /// Measurement covariance over `[azimuth, elevation, range]`.
    pub fn r_ekf(&self) -> Mat3 {
        Mat3::from_diagonal(&Vec3::new(self.doa_variance, self.doa_variance, self.distance_variance))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dc_min > 0.0 && self.dc_min <= self.dc_max) {
            return Err(Error::Config(format!(
                "critical distance range [{}, {}] is empty or non-positive",
                self.dc_min, self.dc_max
            )));
        }
        if !(self.doa_variance > 0.0 && self.distance_variance > 0.0) {
            return Err(Error::Config("measurement variances must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("smoothing {} outside [0, 1)", self.smoothing)));
        }
        Ok(())
    }
}

/// Uniform draw of a critical distance from the configured range.
pub fn sample_dc<R: Rng + ?Sized>(cfg: &LocatingConfig, rng: &mut R) -> f64 {
    if cfg.dc_max <= cfg.dc_min {
        return cfg.dc_min;
    }
    rng.random_range(cfg.dc_min..=cfg.dc_max)
}

/// Stratified draw for particle `index` of `count`: uniform within the
/// `index`-th of `count` equal slices of the range.
pub fn sample_dc_stratified<R: Rng + ?Sized>(cfg: &LocatingConfig, index: usize, count: usize, rng: &mut R) -> f64 {
    let width = (cfg.dc_max - cfg.dc_min) / count.max(1) as f64;
    if !(width > 0.0) {
        return cfg.dc_min;
    }
    cfg.dc_min + width * (index as f64 + rng.random::<f64>())
}

/// Dead-reckons the EKF mean and velocity and advances the process-noise
/// accumulators. The stored covariance is left alone; see
/// [`EkfState::predicted_cov`].
pub fn ekf_predict(state: &EkfState, pre: &Preintegrated, r_prev: &RotationMatrix, gravity: &Vec3) -> Result<EkfState> {
    let prev = RobotState {
        position: state.x,
        velocity: state.v,
        attitude: *r_prev,
    };
    let next = dead_reckon(&prev, pre, gravity, IncrementFrame::Start);
    let (q_pos, q_vel) = propagate_noise(&state.q_pos, &state.q_vel, pre)?;
    Ok(EkfState {
        x: next.position,
        v: next.velocity,
        cov: state.cov,
        q_pos,
        q_vel,
    })
}

/// Predicted observation of a source and its Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub predicted: Spherical,
    /// Rows `[azimuth, elevation, range]`, columns robot position.
    pub h: Mat3,
}

/// Azimuth, elevation and range of `source` seen from a robot at `x` with
/// attitude `r`, with the Jacobian with respect to `x`.
pub fn ekf_observe(x: &Vec3, r: &RotationMatrix, source: &Vec3) -> Result<Observation> {
    let u = world_to_robot(source, x, r);
    let rho2 = u.x * u.x + u.y * u.y;
    let rho = rho2.sqrt();
    let range = u.norm();
    if range < DEGENERATE_RANGE || rho < DEGENERATE_RANGE {
        return Err(Error::Numerical("degenerate bearing".into()));
    }
    let r2 = range * range;
    // d[az, el, r] / du
    let j = Matrix3::new(
        -u.y / rho2,
        u.x / rho2,
        0.0,
        -u.x * u.z / (r2 * rho),
        -u.y * u.z / (r2 * rho),
        rho / r2,
        u.x / range,
        u.y / range,
        u.z / range,
    );
    // du/dx = -R^T
    let h = -j * r.matrix().transpose();
    Ok(Observation {
        predicted: cartesian_to_spherical(&u),
        h,
    })
}

/// A DoA with an optional distance for the same source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: Option<f64>,
}

/// One EKF-corrected hypothesis of the robot state.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub x: Vec3,
    pub v: Vec3,
    pub cov: Mat3,
}

/// EKF correction of a predicted position `x_pred` with covariance
/// `cov_pred`.
///
/// Angular innovations are wrapped to `(-pi, pi]`. Without a distance only the
/// two bearing rows are used. The velocity candidate adds the position
/// correction spread over the keyframe interval `dt_kf` to the predicted
/// velocity.
pub fn ekf_update(
    x_pred: &Vec3,
    v_pred: &Vec3,
    cov_pred: &Mat3,
    obs: &Observation,
    meas: &Measurement,
    dt_kf: f64,
    cfg: &LocatingConfig,
) -> Result<Candidate> {
    if !(dt_kf > 0.0) {
        return Err(Error::Data(format!("keyframe interval must be positive, got {dt_kf}")));
    }
    let rows = if meas.distance.is_some() { 3 } else { 2 };
    let mut innovation = DVector::zeros(rows);
    innovation[0] = wrap_angle(meas.azimuth - obs.predicted.azimuth);
    innovation[1] = wrap_angle(meas.elevation - obs.predicted.elevation);
    if let Some(d) = meas.distance {
        innovation[2] = d - obs.predicted.radius;
    }
    let h = DMatrix::from_fn(rows, 3, |i, j| obs.h[(i, j)]);
    let r_full = cfg.r_ekf();
    let r = DMatrix::from_fn(rows, rows, |i, j| r_full[(i, j)]);
    let p = DMatrix::from_fn(3, 3, |i, j| cov_pred[(i, j)]);

    let s = &h * &p * h.transpose() + r;
    let s_inv = invert_spd(s).ok_or_else(|| Error::Numerical("innovation covariance is singular".into()))?;
    let k = &p * h.transpose() * s_inv;
    let dx = &k * innovation;
    let x = x_pred + Vec3::new(dx[0], dx[1], dx[2]);
    let updated = (DMatrix::identity(3, 3) - &k * &h) * &p;
    let cov = symmetrize(&Mat3::from_fn(|i, j| updated[(i, j)]));
    Ok(Candidate {
        x,
        v: v_pred + (x - x_pred) / dt_kf,
        cov,
    })
}

fn invert_spd(m: DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    if let Some(ch) = m.clone().cholesky() {
        return Some(ch.inverse());
    }
    let reg = m + DMatrix::identity(n, n) * REGULARIZATION;
    reg.try_inverse().filter(|inv| inv.iter().all(|x| x.is_finite()))
}

/// Log density of `N(x; mean, cov + 1e-9 I)`.
pub fn log_gaussian(x: &Vec3, mean: &Vec3, cov: &Mat3) -> f64 {
    let reg = symmetrize(cov) + Mat3::identity() * REGULARIZATION;
    let d = x - mean;
    match reg.cholesky() {
        Some(ch) => {
            let l = ch.l();
            let log_det = 2.0 * (0..3).map(|i| l[(i, i)].ln()).sum::<f64>();
            let maha = d.dot(&ch.solve(&d));
            -0.5 * (maha + log_det + 3.0 * (2.0 * std::f64::consts::PI).ln())
        }
        None => f64::NEG_INFINITY,
    }
}

/// Result of fusing EKF candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub x: Vec3,
    pub v: Vec3,
    pub cov: Mat3,
    pub weights: Vec<f64>,
    /// Every raw weight underflowed and uniform weights were used instead.
    pub underflow: bool,
}

/// Gaussian-mixture fusion of candidates.
///
/// Each candidate is weighted by `N(x_hat; x_pred, q_x)`, weights are
/// normalised, positions and covariances are averaged, and the velocity is
/// smoothed as `a_p v_pred + (1 - a_p) sum w v_hat`.
pub fn gmm_fuse(candidates: &[Candidate], x_pred: &Vec3, q_x: &Mat3, v_pred: &Vec3, smoothing: f64) -> Result<Fused> {
    if candidates.is_empty() {
        return Err(Error::Data("no candidates to fuse".into()));
    }
    let log_w: Vec<f64> = candidates.iter().map(|c| log_gaussian(&c.x, x_pred, q_x)).collect();
    let peak = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (weights, underflow) = if peak.is_finite() {
        let raw: Vec<f64> = log_w.iter().map(|l| (l - peak).exp()).collect();
        let total: f64 = raw.iter().sum();
        (raw.into_iter().map(|w| w / total).collect::<Vec<_>>(), false)
    } else {
        (vec![1.0 / candidates.len() as f64; candidates.len()], true)
    };

    let mut x = Vec3::zeros();
    let mut v = Vec3::zeros();
    let mut cov = Mat3::zeros();
    for (c, w) in candidates.iter().zip(&weights) {
        x += c.x * *w;
        v += c.v * *w;
        cov += c.cov * *w;
    }
    Ok(Fused {
        x,
        v: v_pred * smoothing + v * (1.0 - smoothing),
        cov: symmetrize(&cov),
        weights,
        underflow,
    })
}

/// Log of the particle weight factor `N(x_fused; x_pred, q_x)`.
pub fn log_particle_alpha(x_fused: &Vec3, x_pred: &Vec3, q_x: &Mat3) -> f64 {
    log_gaussian(x_fused, x_pred, q_x)
}

/// Agreement between the fused position and dead reckoning.
pub fn particle_alpha(x_fused: &Vec3, x_pred: &Vec3, q_x: &Mat3) -> f64 {
    log_particle_alpha(x_fused, x_pred, q_x).exp()
}

/// Pairs DoAs with source estimates by increasing bearing error, one-to-one,
/// within the association gate. Returns the source index for every DoA.
pub fn associate_doas(
    doas: &[Spherical],
    sources: &[Vec3],
    x: &Vec3,
    r: &RotationMatrix,
    gate: f64,
) -> Vec<Option<usize>> {
    let bearings: Vec<Spherical> = sources
        .iter()
        .map(|s| cartesian_to_spherical(&world_to_robot(s, x, r)))
        .collect();
    let mut pairs = Vec::new();
    for (m, d) in doas.iter().enumerate() {
        for (k, b) in bearings.iter().enumerate() {
            let a = angle_between(d, b);
            if a <= gate {
                pairs.push((a, m, k));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; doas.len()];
    let mut taken = vec![false; sources.len()];
    for (_, m, k) in pairs {
        if out[m].is_none() && !taken[k] {
            out[m] = Some(k);
            taken[k] = true;
        }
    }
    out
}
