//! Synthetic scenarios: a robot moving through a shoebox room with one or
//! more sound sources.
//!
//! The trajectory is planar at constant height and built from one motion
//! segment per frame: a straight speed ramp, a constant-speed arc or a
//! stop. Body-frame specific force and angular rate are constant within a
//! segment, so the IMU samples integrate back to the trajectory exactly when
//! noise is off. DoAs carry Gaussian angular noise, random misses and
//! Poisson clutter; DRR windows come from noisy distances mapped through the
//! critical distance of the room.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::acoustics::{critical_distance, distance_to_drr, DrrWindowSet, RoomAcoustics};
use crate::error::{Error, Result};
use crate::geometry::{
    cartesian_to_spherical, euler_to_rotation, rotation_to_euler, wrap_angle, world_to_robot, EulerAngles,
    Spherical, Vec3,
};
use crate::imu::{ImuSample, RobotState};

const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryMode {
    /// Straight runs with a new random heading every `heading_interval` steps.
    #[default]
    RandomHeading,
    /// Cycles through `waypoints`.
    Waypoint,
    /// Random heading with a stop of `stationary_steps` frames starting at
    /// `stationary_start`.
    StationarySegment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// Room extent along x, y, z from the origin, m.
    pub room: Vec3,
    pub sources: Vec<Vec3>,
    pub t60: f64,
    pub source_directivity: f64,
    pub receiver_directivity: f64,
    pub speed: f64,
    pub mode: TrajectoryMode,
    pub heading_interval: usize,
    pub waypoints: Vec<Vec3>,
    pub stationary_start: usize,
    pub stationary_steps: usize,
    pub start: Vec3,
    /// Clearance kept from the walls when planning, m.
    pub wall_margin: f64,
    /// Largest heading change within one step, rad.
    pub max_turn: f64,
    pub dt: f64,
    pub imu_rate: f64,
    pub accel_variance: f64,
    pub gyro_variance: f64,
    /// Standard deviation of the reported attitude angles, rad.
    pub attitude_noise_std: f64,
    /// Standard deviation of azimuth and elevation noise, rad.
    pub doa_noise_std: f64,
    pub p_d: f64,
    pub clutter_rate: f64,
    /// Standard deviation of the per-window distance noise, m.
    pub drr_distance_std: f64,
    pub drr_windows: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            room: Vec3::new(6.0, 6.0, 3.0),
            sources: vec![Vec3::new(3.0, 3.0, 1.5)],
            t60: 0.15,
            source_directivity: 1.0,
            receiver_directivity: 1.0,
            speed: 2.0,
            mode: TrajectoryMode::RandomHeading,
            heading_interval: 5,
            waypoints: Vec::new(),
            stationary_start: 0,
            stationary_steps: 0,
            start: Vec3::new(1.0, 1.0, 1.0),
            wall_margin: 0.5,
            max_turn: 150f64.to_radians(),
            dt: 1.0,
            imu_rate: 100.0,
            accel_variance: 1e-3,
            gyro_variance: 1e-2,
            attitude_noise_std: 0.0,
            doa_noise_std: 1f64.to_radians(),
            p_d: 0.95,
            clutter_rate: 0.5,
            drr_distance_std: 0.35f64.sqrt(),
            drr_windows: 10,
            steps: 105,
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn room_acoustics(&self) -> RoomAcoustics {
        RoomAcoustics {
            source_directivity: self.source_directivity,
            receiver_directivity: self.receiver_directivity,
            volume: self.room.x * self.room.y * self.room.z,
            t60: self.t60,
        }
    }

    /// Critical distance of the simulated room.
    pub fn critical_distance(&self) -> f64 {
        critical_distance(&self.room_acoustics())
    }

    fn inside(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= 0.0 && p[i] <= self.room[i])
    }

    pub fn validate(&self) -> Result<()> {
        if self.room.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Config(format!("room dimensions must be positive, got {:?}", self.room.as_slice())));
        }
        if let Some(s) = self.sources.iter().find(|s| !self.inside(s)) {
            return Err(Error::Config(format!("source {:?} is outside the room", s.as_slice())));
        }
        if !self.inside(&self.start) {
            return Err(Error::Config("start position is outside the room".into()));
        }
        if !(self.speed > 0.0) {
            return Err(Error::Config(format!("speed must be positive, got {}", self.speed)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.dt > 0.0) || !(self.imu_rate * self.dt >= 1.0) {
            return Err(Error::Config("imu rate must provide at least one sample per step".into()));
        }
        if !(0.0..=1.0).contains(&self.p_d) {
            return Err(Error::Config(format!("p_d {} outside [0, 1]", self.p_d)));
        }
        if !(self.clutter_rate >= 0.0) {
            return Err(Error::Config("clutter rate must be non-negative".into()));
        }
        if self.drr_windows == 0 {
            return Err(Error::Config("drr_windows must be at least 1".into()));
        }
        if !(self.t60 > 0.0) || !(self.source_directivity > 0.0) || !(self.receiver_directivity > 0.0) {
            return Err(Error::Config("t60 and directivities must be positive".into()));
        }
        if self.mode == TrajectoryMode::Waypoint && self.waypoints.is_empty() {
            return Err(Error::Config("waypoint mode needs at least one waypoint".into()));
        }
        if !(self.max_turn > 0.0 && self.max_turn < PI) {
            return Err(Error::Config("max_turn must lie in (0, pi)".into()));
        }
        if self.heading_interval == 0 {
            return Err(Error::Config("heading_interval must be at least 1".into()));
        }
        let variances = [self.accel_variance, self.gyro_variance];
        let stds = [self.attitude_noise_std, self.doa_noise_std, self.drr_distance_std];
        if variances.iter().chain(&stds).any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// Motion over one frame interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segment {
    Still { heading: f64 },
    /// Straight line with speed changing linearly from `v0` to `v1`.
    Ramp { heading: f64, v0: f64, v1: f64 },
    /// Constant speed while heading (and yaw) turn at rate `omega`.
    Arc { heading: f64, omega: f64, speed: f64 },
}

impl Segment {
    fn end_heading(&self, dt: f64) -> f64 {
        match *self {
            Segment::Still { heading } | Segment::Ramp { heading, .. } => heading,
            Segment::Arc { heading, omega, .. } => wrap_angle(heading + omega * dt),
        }
    }

    /// Position offset, velocity and yaw `tau` seconds into the segment.
    fn eval(&self, tau: f64, dt: f64) -> (Vec3, Vec3, f64) {
        match *self {
            Segment::Still { heading } => (Vec3::zeros(), Vec3::zeros(), heading),
            Segment::Ramp { heading, v0, v1 } => {
                let a = (v1 - v0) / dt;
                let u = Vec3::new(heading.cos(), heading.sin(), 0.0);
                (u * (v0 * tau + 0.5 * a * tau * tau), u * (v0 + a * tau), heading)
            }
            Segment::Arc { heading, omega, speed } => {
                let yaw = heading + omega * tau;
                let vel = Vec3::new(yaw.cos(), yaw.sin(), 0.0) * speed;
                let off = if (omega * tau).abs() < 1e-12 {
                    Vec3::new(heading.cos(), heading.sin(), 0.0) * (speed * tau)
                } else {
                    let r = speed / omega;
                    Vec3::new(r * (yaw.sin() - heading.sin()), r * (heading.cos() - yaw.cos()), 0.0)
                };
                (off, vel, wrap_angle(yaw))
            }
        }
    }

    /// Constant body-frame specific force and angular rate.
    fn body_readings(&self, dt: f64) -> (Vec3, Vec3) {
        match *self {
            Segment::Still { .. } => (Vec3::new(0.0, 0.0, GRAVITY), Vec3::zeros()),
            Segment::Ramp { v0, v1, .. } => (Vec3::new((v1 - v0) / dt, 0.0, GRAVITY), Vec3::zeros()),
            Segment::Arc { omega, speed, .. } => (Vec3::new(0.0, speed * omega, GRAVITY), Vec3::new(0.0, 0.0, omega)),
        }
    }
}

/// Ground-truth motion: `states[k]` is the state at `t = k dt` and
/// `segments[k]` the motion from `states[k]` to `states[k + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<RobotState>,
    pub segments: Vec<Segment>,
    pub dt: f64,
}

impl Trajectory {
    /// State `tau` seconds after the start of step `k`.
    pub fn state_at(&self, k: usize, tau: f64) -> RobotState {
        let (off, vel, yaw) = self.segments[k].eval(tau, self.dt);
        RobotState {
            position: self.states[k].position + off,
            velocity: vel,
            attitude: euler_to_rotation(&EulerAngles::new(0.0, 0.0, yaw)),
        }
    }
}

struct Planner<'a> {
    cfg: &'a ScenarioConfig,
}

impl Planner<'_> {
    fn clear(&self, p: &Vec3) -> bool {
        let m = self.cfg.wall_margin;
        p.x >= m && p.x <= self.cfg.room.x - m && p.y >= m && p.y <= self.cfg.room.y - m
    }

    /// The segment and one further straight step at its end speed stay clear
    /// of the walls.
    fn feasible(&self, p: &Vec3, seg: &Segment) -> bool {
        let dt = self.cfg.dt;
        let path_clear = (1..=10).all(|i| self.clear(&(p + seg.eval(dt * i as f64 / 10.0, dt).0)));
        let (off, vel, _) = seg.eval(dt, dt);
        path_clear && self.clear(&(p + off + vel * dt))
    }

    fn turn(&self, from: f64, to: f64) -> Segment {
        let limit = self.cfg.max_turn;
        Segment::Arc {
            heading: from,
            omega: wrap_angle(to - from).clamp(-limit, limit) / self.cfg.dt,
            speed: self.cfg.speed,
        }
    }

    fn headings<R: Rng>(wish: f64, rng: &mut R) -> Vec<f64> {
        let mut options = vec![wish, PI - wish, -wish, wish + PI];
        options.extend((0..500).map(|_| rng.random_range(-PI..PI)));
        options.into_iter().map(wrap_angle).collect()
    }

    /// Moving segment starting at `p` with heading `h`, preferring `wish`.
    /// From rest the robot either speeds up along `h` or turns on the spot.
    fn plan_move<R: Rng>(&self, p: &Vec3, h: f64, speed: f64, wish: f64, rng: &mut R) -> Segment {
        let centre = Vec3::new(self.cfg.room.x / 2.0, self.cfg.room.y / 2.0, p.z) - p;
        let fallback = centre.y.atan2(centre.x);
        if speed == 0.0 {
            let ramp = |heading| Segment::Ramp {
                heading,
                v0: 0.0,
                v1: self.cfg.speed,
            };
            if self.feasible(p, &ramp(h)) {
                return ramp(h);
            }
            let to = Self::headings(wish, rng)
                .into_iter()
                .find(|to| self.feasible(p, &ramp(*to)))
                .unwrap_or(fallback);
            return Segment::Arc {
                heading: h,
                omega: wrap_angle(to - h) / self.cfg.dt,
                speed: 0.0,
            };
        }
        Self::headings(wish, rng)
            .into_iter()
            .filter(|to| wrap_angle(to - h).abs() <= self.cfg.max_turn)
            .map(|to| self.turn(h, to))
            .find(|seg| self.feasible(p, seg))
            .unwrap_or_else(|| self.turn(h, fallback))
    }
}

/// Ground-truth trajectory for the configured mode.
pub fn generate_trajectory<R: Rng>(cfg: &ScenarioConfig, rng: &mut R) -> Trajectory {
    let planner = Planner { cfg };
    let dt = cfg.dt;
    let mut p = cfg.start;
    let mut heading = rng.random_range(-PI..PI);
    let mut speed = 0.0;
    let mut waypoint = 0;
    let mut states = vec![RobotState::at_rest(p, euler_to_rotation(&EulerAngles::new(0.0, 0.0, heading)))];
    let mut segments = Vec::with_capacity(cfg.steps);

    let stop = cfg.stationary_start..cfg.stationary_start + cfg.stationary_steps;
    for k in 0..cfg.steps {
        let stationary = cfg.mode == TrajectoryMode::StationarySegment;
        let seg = if stationary && stop.contains(&k) {
            Segment::Still { heading }
        } else if stationary && k + 1 == stop.start && speed > 0.0 && !stop.is_empty() {
            Segment::Ramp {
                heading,
                v0: speed,
                v1: 0.0,
            }
        } else if cfg.mode == TrajectoryMode::Waypoint {
            let target = cfg.waypoints[waypoint % cfg.waypoints.len()];
            if (target - p).xy().norm() < cfg.speed * dt {
                waypoint += 1;
            }
            let target = cfg.waypoints[waypoint % cfg.waypoints.len()];
            let d = target - p;
            planner.plan_move(&p, heading, speed, d.y.atan2(d.x), rng)
        } else {
            let wish = if k % cfg.heading_interval == 0 {
                rng.random_range(-PI..PI)
            } else {
                heading
            };
            planner.plan_move(&p, heading, speed, wish, rng)
        };
        let (off, vel, _) = seg.eval(dt, dt);
        p += off;
        speed = vel.norm();
        heading = seg.end_heading(dt);
        segments.push(seg);
        states.push(RobotState {
            position: p,
            velocity: vel,
            attitude: euler_to_rotation(&EulerAngles::new(0.0, 0.0, heading)),
        });
    }
    Trajectory { states, segments, dt }
}

/// IMU batches per step: `imu_rate * dt` held readings ending at
/// `t_k + j h`.
pub fn synthesize_imu<R: Rng>(traj: &Trajectory, cfg: &ScenarioConfig, rng: &mut R) -> Vec<Vec<ImuSample>> {
    let n = (cfg.imu_rate * cfg.dt).round().max(1.0) as usize;
    let h = cfg.dt / n as f64;
    let accel = Normal::new(0.0, cfg.accel_variance.sqrt()).expect("finite std");
    let gyro = Normal::new(0.0, cfg.gyro_variance.sqrt()).expect("finite std");
    traj.segments
        .iter()
        .enumerate()
        .map(|(k, seg)| {
            let (f, w) = seg.body_readings(cfg.dt);
            let t0 = k as f64 * cfg.dt;
            (1..=n)
                .map(|j| ImuSample {
                    timestamp: t0 + j as f64 * h,
                    specific_force: f + Vec3::from_fn(|_, _| accel.sample(rng)),
                    angular_rate: w + Vec3::from_fn(|_, _| gyro.sample(rng)),
                })
                .collect()
        })
        .collect()
}

/// A synthesized DoA and the source it came from, `None` for clutter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimDoa {
    pub direction: Spherical,
    pub source: Option<usize>,
}

/// Uniformly distributed direction on the unit sphere.
pub fn random_direction<R: Rng>(rng: &mut R) -> Spherical {
    let az = rng.random_range(-PI..PI);
    let el = rng.random_range(-1.0f64..1.0).asin();
    Spherical::direction(az, el)
}

/// DoAs per step, at the end of every step interval, in random order.
pub fn synthesize_doas<R: Rng>(traj: &Trajectory, sources: &[Vec3], cfg: &ScenarioConfig, rng: &mut R) -> Vec<Vec<SimDoa>> {
    let noise = Normal::new(0.0, cfg.doa_noise_std).expect("finite std");
    let clutter = (cfg.clutter_rate > 0.0).then(|| Poisson::new(cfg.clutter_rate).expect("positive rate"));
    traj.states[1..]
        .iter()
        .map(|state| {
            let mut out = Vec::new();
            for (n, s) in sources.iter().enumerate() {
                if rng.random::<f64>() >= cfg.p_d {
                    continue;
                }
                let b = cartesian_to_spherical(&world_to_robot(s, &state.position, &state.attitude));
                out.push(SimDoa {
                    direction: Spherical::direction(b.azimuth + noise.sample(rng), b.elevation + noise.sample(rng)),
                    source: Some(n),
                });
            }
            let count = clutter.as_ref().map_or(0, |c| c.sample(rng) as usize);
            for _ in 0..count {
                out.push(SimDoa {
                    direction: random_direction(rng),
                    source: None,
                });
            }
            out.shuffle(rng);
            out
        })
        .collect()
}

/// DRR windows aligned with the DoAs of each step. Clutter DoAs get DRRs
/// from a random distance inside the room diagonal.
pub fn synthesize_drr<R: Rng>(
    traj: &Trajectory,
    doas: &[Vec<SimDoa>],
    sources: &[Vec3],
    room: &RoomAcoustics,
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Vec<DrrWindowSet> {
    let d_c = critical_distance(room);
    let noise = Normal::new(0.0, cfg.drr_distance_std).expect("finite std");
    let diagonal = cfg.room.norm();
    traj.states[1..]
        .iter()
        .zip(doas)
        .map(|(state, step)| {
            let windows = step
                .iter()
                .map(|doa| {
                    let d_true = match doa.source {
                        Some(n) => (sources[n] - state.position).norm(),
                        None => rng.random_range(0.3..diagonal),
                    };
                    (0..cfg.drr_windows)
                        .map(|_| distance_to_drr((d_true + noise.sample(rng)).max(0.01), d_c))
                        .collect()
                })
                .collect();
            DrrWindowSet { windows }
        })
        .collect()
}

/// True state and sources attached to a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub position: Vec3,
    pub velocity: Vec3,
    pub attitude: EulerAngles,
    pub sources: Vec<Vec3>,
}

/// Everything the estimator receives for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFrame {
    pub t: f64,
    pub imu: Vec<ImuSample>,
    pub doas: Vec<Spherical>,
    pub drr: DrrWindowSet,
    /// Attitude reported by an attitude reference, if any.
    pub attitude: Option<EulerAngles>,
    pub truth: Option<GroundTruth>,
}

impl MeasurementFrame {
    pub fn validate(&self) -> Result<()> {
        if self.imu.is_empty() {
            return Err(Error::Data(format!("frame at t = {} has no IMU samples", self.t)));
        }
        if self.drr.num_doas() != self.doas.len() {
            return Err(Error::Data(format!(
                "frame at t = {} has {} DoAs but {} DRR window sets",
                self.t,
                self.doas.len(),
                self.drr.num_doas()
            )));
        }
        self.drr.validate()
    }
}

/// Initial state plus frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub initial: RobotState,
    pub frames: Vec<MeasurementFrame>,
    /// Critical distance used to synthesize the DRRs.
    pub critical_distance: f64,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generates a complete scenario. Trajectory, IMU noise, DoAs, DRRs and
/// attitude noise each use their own random stream derived from the seed.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let traj = generate_trajectory(cfg, &mut stream(cfg.seed, 0));
    let imu = synthesize_imu(&traj, cfg, &mut stream(cfg.seed, 1));
    let doas = synthesize_doas(&traj, &cfg.sources, cfg, &mut stream(cfg.seed, 2));
    let drr = synthesize_drr(&traj, &doas, &cfg.sources, &cfg.room_acoustics(), cfg, &mut stream(cfg.seed, 3));
    let mut att_rng = stream(cfg.seed, 4);
    let att_noise = Normal::new(0.0, cfg.attitude_noise_std).expect("finite std");

    let frames = imu
        .into_iter()
        .zip(doas)
        .zip(drr)
        .enumerate()
        .map(|(k, ((imu, doas), drr))| {
            let state = &traj.states[k + 1];
            let e = rotation_to_euler(&state.attitude);
            let reported = EulerAngles::new(
                e.roll + att_noise.sample(&mut att_rng),
                e.pitch + att_noise.sample(&mut att_rng),
                e.yaw + att_noise.sample(&mut att_rng),
            );
            MeasurementFrame {
                t: (k + 1) as f64 * cfg.dt,
                imu,
                doas: doas.iter().map(|d| d.direction).collect(),
                drr,
                attitude: Some(reported),
                truth: Some(GroundTruth {
                    position: state.position,
                    velocity: state.velocity,
                    attitude: e,
                    sources: cfg.sources.clone(),
                }),
            }
        })
        .collect();
    Ok(Scenario {
        initial: traj.states[0].clone(),
        frames,
        critical_distance: cfg.critical_distance(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::drr_to_distance;
    use crate::imu::{dead_reckon, preintegrate, ImuNoiseConfig, IncrementFrame};
    use approx::assert_abs_diff_eq;

    fn quiet() -> ScenarioConfig {
        ScenarioConfig {
            accel_variance: 0.0,
            gyro_variance: 0.0,
            doa_noise_std: 0.0,
            p_d: 1.0,
            clutter_rate: 0.0,
            drr_distance_std: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn stationary_mode_never_moves() {
        let cfg = ScenarioConfig {
            mode: TrajectoryMode::StationarySegment,
            stationary_start: 0,
            stationary_steps: 20,
            steps: 20,
            ..Default::default()
        };
        let traj = generate_trajectory(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(traj.states.iter().all(|s| s == &traj.states[0]));
    }

    #[test]
    fn straight_steps_cover_speed_times_dt() {
        let cfg = ScenarioConfig::default();
        let traj = generate_trajectory(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let mut straight = 0;
        for (k, seg) in traj.segments.iter().enumerate() {
            if let Segment::Arc { omega, .. } = seg {
                if *omega == 0.0 {
                    let d = (traj.states[k + 1].position - traj.states[k].position).norm();
                    assert_abs_diff_eq!(d, 2.0, epsilon = 1e-12);
                    straight += 1;
                }
            }
        }
        assert!(straight > 0);
    }

    #[test]
    fn trajectories_stay_in_the_room() {
        for seed in 0..50 {
            for mode in [TrajectoryMode::RandomHeading, TrajectoryMode::StationarySegment] {
                let cfg = ScenarioConfig {
                    mode,
                    stationary_start: 30,
                    stationary_steps: 15,
                    ..Default::default()
                };
                let traj = generate_trajectory(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
                for k in 0..cfg.steps {
                    for i in 0..=20 {
                        let p = traj.state_at(k, cfg.dt * i as f64 / 20.0).position;
                        assert!(cfg.inside(&p), "seed {seed} step {k}: {p:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn waypoint_mode_visits_waypoints() {
        let cfg = ScenarioConfig {
            mode: TrajectoryMode::Waypoint,
            waypoints: vec![Vec3::new(5.0, 1.0, 1.0), Vec3::new(5.0, 5.0, 1.0), Vec3::new(1.0, 5.0, 1.0)],
            steps: 40,
            ..Default::default()
        };
        let traj = generate_trajectory(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        for w in &cfg.waypoints {
            let closest = traj.states.iter().map(|s| (s.position - w).norm()).fold(f64::MAX, f64::min);
            assert!(closest <= cfg.speed * cfg.dt, "closest approach {closest}");
        }
    }

    #[test]
    fn noiseless_imu_dead_reckons_the_trajectory() {
        let cfg = ScenarioConfig {
            steps: 100,
            mode: TrajectoryMode::StationarySegment,
            stationary_start: 40,
            stationary_steps: 5,
            ..quiet()
        };
        let traj = generate_trajectory(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let imu = synthesize_imu(&traj, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let noise = ImuNoiseConfig::default();
        let mut state = traj.states[0].clone();
        let mut t = 0.0;
        for (k, batch) in imu.iter().enumerate() {
            let pre = preintegrate(batch, t, &noise).unwrap();
            state = dead_reckon(&state, &pre, &noise.gravity, IncrementFrame::Start);
            t = batch.last().unwrap().timestamp;
            assert!((state.position - traj.states[k + 1].position).norm() < 1e-3);
        }
    }

    #[test]
    fn stationary_noiseless_reading() {
        let cfg = ScenarioConfig {
            mode: TrajectoryMode::StationarySegment,
            stationary_steps: 3,
            steps: 3,
            ..quiet()
        };
        let traj = generate_trajectory(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let imu = synthesize_imu(&traj, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        for s in imu.iter().flatten() {
            assert_eq!(s.specific_force, Vec3::new(0.0, 0.0, 9.81));
            assert_eq!(s.angular_rate, Vec3::zeros());
        }
    }

    #[test]
    fn imu_noise_variance_matches_config() {
        let cfg = ScenarioConfig {
            mode: TrajectoryMode::StationarySegment,
            stationary_steps: 100,
            steps: 100,
            ..Default::default()
        };
        let traj = generate_trajectory(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let imu = synthesize_imu(&traj, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let samples: Vec<&ImuSample> = imu.iter().flatten().collect();
        assert_eq!(samples.len(), 10_000);
        let var = |xs: Vec<f64>| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
        };
        let ax = var(samples.iter().map(|s| s.specific_force.x).collect());
        let wz = var(samples.iter().map(|s| s.angular_rate.z).collect());
        assert!((ax / 1e-3 - 1.0).abs() < 0.05, "{ax}");
        assert!((wz / 1e-2 - 1.0).abs() < 0.05, "{wz}");
    }

    fn fixed_traj(steps: usize) -> Trajectory {
        let cfg = ScenarioConfig {
            mode: TrajectoryMode::StationarySegment,
            stationary_steps: steps,
            steps,
            ..Default::default()
        };
        generate_trajectory(&cfg, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn exact_doas_without_noise() {
        let cfg = quiet();
        let traj = generate_trajectory(&cfg, &mut ChaCha8Rng::seed_from_u64(6));
        let doas = synthesize_doas(&traj, &cfg.sources, &cfg, &mut ChaCha8Rng::seed_from_u64(7));
        for (state, step) in traj.states[1..].iter().zip(&doas) {
            assert_eq!(step.len(), 1);
            let truth = cartesian_to_spherical(&world_to_robot(&cfg.sources[0], &state.position, &state.attitude));
            assert_abs_diff_eq!(step[0].direction.azimuth, truth.azimuth, epsilon = 1e-12);
            assert_abs_diff_eq!(step[0].direction.elevation, truth.elevation, epsilon = 1e-12);
        }
    }

    #[test]
    fn detection_and_clutter_rates() {
        let cfg = ScenarioConfig {
            p_d: 0.9,
            clutter_rate: 2.0,
            ..Default::default()
        };
        let traj = fixed_traj(10_000);
        let doas = synthesize_doas(&traj, &cfg.sources, &cfg, &mut ChaCha8Rng::seed_from_u64(8));
        let detected = doas.iter().flatten().filter(|d| d.source.is_some()).count() as f64 / 1e4;
        let clutter = doas.iter().flatten().filter(|d| d.source.is_none()).count() as f64 / 1e4;
        assert!((detected - 0.9).abs() < 0.01, "{detected}");
        assert!((clutter - 2.0).abs() < 0.05, "{clutter}");
    }

    #[test]
    fn drr_examples() {
        let cfg = ScenarioConfig {
            drr_distance_std: 0.0,
            ..quiet()
        };
        let room = cfg.room_acoustics();
        let d_c = critical_distance(&room);
        // place the source exactly one critical distance away
        let start = cfg.start;
        let source = start + Vec3::new(d_c, 0.0, 0.0);
        let traj = fixed_traj(3);
        let doas = synthesize_doas(&traj, &[source], &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let drr = synthesize_drr(&traj, &doas, &[source], &room, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        for set in &drr {
            for eta in set.windows.iter().flatten() {
                assert_abs_diff_eq!(*eta, 1.0, epsilon = 1e-12);
            }
        }

        let noisy = ScenarioConfig {
            drr_windows: 10_000,
            drr_distance_std: 0.35f64.sqrt(),
            ..quiet()
        };
        let traj = fixed_traj(1);
        let doas = synthesize_doas(&traj, &noisy.sources, &noisy, &mut ChaCha8Rng::seed_from_u64(2));
        let drr = synthesize_drr(&traj, &doas, &noisy.sources, &room, &noisy, &mut ChaCha8Rng::seed_from_u64(3));
        let d: Vec<f64> = drr[0].windows[0].iter().map(|e| drr_to_distance(*e, d_c).unwrap()).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        assert!((std / 0.35f64.sqrt() - 1.0).abs() < 0.05, "{std}");
    }

    #[test]
    fn scenario_is_deterministic_and_complete() {
        let cfg = ScenarioConfig::default();
        let a = generate_scenario(&cfg).unwrap();
        let b = generate_scenario(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames.len(), 105);
        for f in &a.frames {
            f.validate().unwrap();
        }
        let other = generate_scenario(&ScenarioConfig { seed: 2, ..cfg.clone() }).unwrap();
        assert_ne!(a.frames, other.frames);
        assert!(generate_scenario(&ScenarioConfig { steps: 0, ..cfg }).is_err());
    }
}
