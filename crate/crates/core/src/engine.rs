//! Particle filter over the critical distance.
//!
//! Each particle holds one critical-distance hypothesis together with its own
//! EKF over the robot position and its own source map. A frame is processed
//! per particle (in parallel), then the particle weights are normalised, a
//! weighted estimate is extracted and the particle set is resampled when it
//! degenerates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acoustics::drr_to_distance;
use crate::error::{Error, Result};
use crate::geometry::{euler_to_rotation, Mat3, RotationMatrix, Vec3};
use crate::imu::{preintegrate, preintegrate_aided, ImuNoiseConfig, Preintegrated, RobotState};
use crate::locating::{
    associate_doas, ekf_observe, ekf_predict, ekf_update, gmm_fuse, log_particle_alpha, sample_dc,
    sample_dc_stratified, EkfState, LocatingConfig, Measurement,
};
use crate::mapping::{
    birth_components, doa_log_evidence, estimate_sources, filter_tracks, keyframe_check, merge_components, reduce,
    update_weights, KeyframeState, MapConfig, SourceMap, SourceTrack,
};
use crate::sim::{GroundTruth, MeasurementFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// DoA and DRR distance.
    #[default]
    Dd,
    /// DoA only; the distance channel and critical-distance estimation are off.
    BearingOnly,
}

/// Where the robot attitude comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttitudeSource {
    /// The attitude reported in each frame, falling back to the gyroscope for
    /// frames without one.
    #[default]
    Reference,
    /// Gyroscope integration only.
    Gyro,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub particles: usize,
    pub seed: u64,
    pub mode: Mode,
    pub map: MapConfig,
    pub locating: LocatingConfig,
    pub imu: ImuNoiseConfig,
    pub attitude_source: AttitudeSource,
    /// Initial isotropic position variance, m^2.
    pub initial_variance: f64,
    /// With keyframes off every frame updates the map.
    pub keyframes: bool,
    /// Draw initial critical distances from equal slices of the range.
    pub stratified_init: bool,
    /// Critical-distance roughening after resampling.
    pub dc_kernel: DcKernel,
    /// Resample when the effective sample size falls below this fraction of
    /// the particle count.
    pub resample_fraction: f64,
    /// Feed the fused velocity back into dead reckoning.
    pub velocity_feedback: bool,
    /// Restart the process-noise accumulators at every keyframe instead of
    /// letting them grow from the initial state.
    pub reset_process_noise: bool,
    /// Multiply the previous weight into the new one instead of setting the
    /// weight from the current frame alone.
    pub weight_memory: bool,
    /// Draw map births for every particle from one shared stream per step, so
    /// that particles in the same state build the same map.
    pub common_births: bool,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            particles: 10,
            seed: 1,
            mode: Mode::Dd,
            map: MapConfig::default(),
            locating: LocatingConfig::default(),
            imu: ImuNoiseConfig::default(),
            attitude_source: AttitudeSource::Reference,
            initial_variance: 0.0,
            keyframes: true,
            stratified_init: true,
            dc_kernel: DcKernel { shrinkage: 0.98, jitter: 0.0 },
            resample_fraction: 0.5,
            velocity_feedback: true,
            reset_process_noise: false,
            weight_memory: true,
            common_births: true,
            threads: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Config("particles must be at least 1".into()));
        }
        self.locating.validate()?;
        let m = &self.map;
        if !(m.r_min > 0.0 && m.r_min <= m.r_max) {
            return Err(Error::Config(format!("birth range [{}, {}] is invalid", m.r_min, m.r_max)));
        }
        if !(0.0..=1.0).contains(&m.p_d) || !(m.clutter_rate > 0.0) {
            return Err(Error::Config("p_d must lie in [0, 1] and the clutter rate must be positive".into()));
        }
        if !(m.doa_variance > 0.0) {
            return Err(Error::Config("map DoA variance must be positive".into()));
        }
        let k = &self.dc_kernel;
        if !(0.0..=1.0).contains(&k.shrinkage) || !(k.jitter >= 0.0) {
            return Err(Error::Config("dc shrinkage must lie in [0, 1] and dc jitter must be non-negative".into()));
        }
        if !(self.initial_variance >= 0.0) {
            return Err(Error::Config("variances must be non-negative".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub d_c: f64,
    pub ekf: EkfState,
    pub map: SourceMap,
    pub kf: Option<KeyframeState>,
    /// Time of the last keyframe, or of the initial state.
    pub kf_time: f64,
    pub tracks: Vec<SourceTrack>,
    /// Fused distance to each track at the last keyframe.
    pub prev_distances: Vec<Option<f64>>,
    pub log_alpha: f64,
    pub log_evidence: f64,
    pub beta: f64,
    pub keyframe: bool,
    pub failed: bool,
}

/// Per-step output of the filter.
#[derive(Debug, Clone, PartialEq)]
pub struct SlamEstimate {
    pub t: f64,
    pub position: Vec3,
    pub velocity: Vec3,
    pub d_c_mean: f64,
    pub sources: Vec<Vec3>,
    pub ess: f64,
    /// The heaviest particle treated this frame as a keyframe.
    pub keyframe: bool,
    /// DoA log evidence of the heaviest particle.
    pub log_evidence: f64,
    pub resampled: bool,
    /// Particles dropped for numerical failure this step.
    pub failed_particles: usize,
}

/// Initial particle set.
pub fn init(cfg: &EngineConfig, start: &RobotState, t0: f64) -> Vec<Particle> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.particles;
    (0..n)
        .map(|i| {
            let d_c = if cfg.stratified_init {
                sample_dc_stratified(&cfg.locating, i, n, &mut rng)
            } else {
                sample_dc(&cfg.locating, &mut rng)
            };
            Particle {
                d_c,
                ekf: EkfState::new(start.position, start.velocity, Mat3::identity() * cfg.initial_variance),
                map: SourceMap::new(&cfg.map),
                kf: None,
                kf_time: t0,
                tracks: Vec::new(),
                prev_distances: Vec::new(),
                log_alpha: 0.0,
                log_evidence: 0.0,
                beta: 1.0 / n as f64,
                keyframe: false,
                failed: false,
            }
        })
        .collect()
}

/// Random stream for particle `index` at step `step`, independent of how
/// particles are scheduled across threads.
pub fn particle_rng(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 24) ^ index);
    rng
}

/// Frame data shared by all particles.
struct Shared<'a> {
    frame: &'a MeasurementFrame,
    pre: &'a Preintegrated,
    r_prev: &'a RotationMatrix,
    r_t: &'a RotationMatrix,
    cfg: &'a EngineConfig,
}

impl Particle {
    fn step<R: Rng>(&mut self, sh: &Shared, rng: &mut R) -> Result<()> {
        let cfg = sh.cfg;
        let frame = sh.frame;
        let pred = ekf_predict(&self.ekf, sh.pre, sh.r_prev, &cfg.imu.gravity)?;
        let keyframe = match (&self.kf, cfg.keyframes) {
            (Some(kf), true) => keyframe_check(&pred.x, sh.r_t, &frame.doas, kf, &cfg.map),
            _ => true,
        };
        self.keyframe = keyframe;
        self.log_alpha = 0.0;
        self.log_evidence = 0.0;
        if !keyframe {
            self.ekf = pred;
            return Ok(());
        }

        let dt_kf = frame.t - self.kf_time;
        let cov_pred = pred.predicted_cov();
        let sources: Vec<Vec3> = self.tracks.iter().map(|t| t.position).collect();
        let assoc = associate_doas(&frame.doas, &sources, &pred.x, sh.r_t, cfg.locating.association_gate);
        let mut candidates = Vec::new();
        for (m, k) in assoc.iter().enumerate() {
            let Some(k) = *k else { continue };
            let Ok(obs) = ekf_observe(&pred.x, sh.r_t, &sources[k]) else {
                continue;
            };
            let doa = &frame.doas[m];
            let bearing = |distance| Measurement {
                azimuth: doa.azimuth,
                elevation: doa.elevation,
                distance,
            };
            match cfg.mode {
                Mode::BearingOnly => {
                    candidates.push(ekf_update(&pred.x, &pred.v, &cov_pred, &obs, &bearing(None), dt_kf, &cfg.locating)?);
                }
                Mode::Dd => {
                    let prev = self.prev_distances.get(k).copied().flatten();
                    for &eta in &frame.drr.windows[m] {
                        let d = cfg.locating.rate_limiter.limit(drr_to_distance(eta, self.d_c)?, prev, dt_kf);
                        candidates.push(ekf_update(&pred.x, &pred.v, &cov_pred, &obs, &bearing(Some(d)), dt_kf, &cfg.locating)?);
                    }
                }
            }
        }

        let (x, v, cov) = if candidates.is_empty() {
            (pred.x, pred.v, cov_pred)
        } else {
            let f = gmm_fuse(&candidates, &pred.x, &pred.q_pos, &pred.v, cfg.locating.smoothing)?;
            (f.x, f.v, f.cov)
        };
        let v = if cfg.velocity_feedback { v } else { pred.v };
        self.log_alpha = log_particle_alpha(&x, &pred.x, &pred.q_pos);
        self.log_evidence = doa_log_evidence(&frame.doas, &x, sh.r_t, &self.map, &cfg.map);

        let mut map = update_weights(std::mem::replace(&mut self.map, SourceMap::new(&cfg.map)), &frame.doas, &x, sh.r_t, &cfg.map);
        for doa in &frame.doas {
            map.components.extend(birth_components(&x, sh.r_t, doa, &cfg.map, rng));
        }
        self.map = reduce(merge_components(map));
        self.tracks = estimate_sources(&self.map, &self.tracks, &cfg.map);
        self.prev_distances = self.tracks.iter().map(|t| Some((t.position - x).norm())).collect();

        let (q_pos, q_vel) = if cfg.reset_process_noise {
            let a = cfg.locating.smoothing;
            (Mat3::zeros(), pred.q_vel * (a * a) + cov * ((1.0 - a) * (1.0 - a) / (dt_kf * dt_kf)))
        } else {
            (pred.q_pos, pred.q_vel)
        };
        self.ekf = EkfState { x, v, cov, q_pos, q_vel };
        self.kf = Some(KeyframeState {
            position: x,
            doas: frame.doas.clone(),
            attitude: *sh.r_t,
            time: frame.t,
        });
        self.kf_time = frame.t;

        let finite = x.iter().chain(v.iter()).chain(cov.iter()).all(|e| e.is_finite());
        if !finite || self.log_alpha.is_nan() || self.log_evidence.is_nan() {
            return Err(Error::Numerical("non-finite particle state".into()));
        }
        Ok(())
    }
}

/// Indices selected by systematic resampling with offset `u0 / n`,
/// `u0` in `[0, 1)`.
pub fn systematic_indices(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    let mut i = 0;
    for k in 0..n {
        let target = (k as f64 + u0) / n as f64;
        while i + 1 < n && cumulative + weights[i] <= target {
            cumulative += weights[i];
            i += 1;
        }
        out.push(i);
    }
    out
}

/// Systematic resampling. Weights reset to `1 / n`; critical distances are
/// copied and then roughened per `kernel`, clamped to `[dc_min, dc_max]`.
pub fn resample<R: Rng>(particles: &[Particle], kernel: &DcKernel, cfg: &LocatingConfig, rng: &mut R) -> Vec<Particle> {
    let weights: Vec<f64> = particles.iter().map(|p| p.beta).collect();
    let idx = systematic_indices(&weights, rng.random::<f64>());
    let n = particles.len() as f64;
    let mean: f64 = particles.iter().map(|p| p.beta * p.d_c).sum();
    let var: f64 = particles.iter().map(|p| p.beta * (p.d_c - mean).powi(2)).sum();
    let a = kernel.shrinkage;
    let std = ((1.0 - a * a) * var + kernel.jitter * kernel.jitter).sqrt();
    let noise = (std > 0.0).then(|| Normal::new(0.0, std).expect("finite std"));
    idx.into_iter()
        .map(|i| {
            let mut p = particles[i].clone();
            p.beta = 1.0 / n;
            if let Some(noise) = &noise {
                let centre = a * p.d_c + (1.0 - a) * mean;
                p.d_c = (centre + noise.sample(rng)).clamp(cfg.dc_min, cfg.dc_max);
            }
            p
        })
        .collect()
}

/// Roughening of the critical distances after resampling.
///
/// Each copy is pulled towards the weighted mean by `1 - shrinkage` and
/// perturbed with variance `(1 - shrinkage^2) var + jitter^2`, where `var` is
/// the weighted variance before resampling. With `shrinkage = 1` and
/// `jitter = 0` the values are copied unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcKernel {
    pub shrinkage: f64,
    pub jitter: f64,
}

impl Default for DcKernel {
    fn default() -> Self {
        Self { shrinkage: 1.0, jitter: 0.0 }
    }
}

/// Normalises log weights in place into probabilities. Returns `false` when
/// no weight is finite.
pub fn normalize_log_weights(log_w: &[f64]) -> Option<Vec<f64>> {
    let peak = log_w.iter().copied().filter(|w| w.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return None;
    }
    let raw: Vec<f64> = log_w
        .iter()
        .map(|w| if w.is_finite() { (w - peak).exp() } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    Some(raw.into_iter().map(|w| w / total).collect())
}

/// Effective sample size `1 / sum(beta^2)`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// The running filter.
pub struct Engine {
    cfg: EngineConfig,
    particles: Vec<Particle>,
    attitude: RotationMatrix,
    t: f64,
    step: u64,
    tracks: Vec<SourceTrack>,
    pool: Option<rayon::ThreadPool>,
}

impl Engine {
    /// Filter starting from `start` at time `t0`.
    pub fn new(cfg: EngineConfig, start: &RobotState, t0: f64) -> Result<Self> {
        cfg.validate()?;
        let pool = match cfg.threads {
            Some(n) => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            ),
            None => None,
        };
        Ok(Self {
            particles: init(&cfg, start, t0),
            attitude: start.attitude,
            t: t0,
            step: 0,
            tracks: Vec::new(),
            pool,
            cfg,
        })
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    fn attitude_and_increment(&self, frame: &MeasurementFrame) -> Result<(RotationMatrix, Preintegrated)> {
        match (self.cfg.attitude_source, frame.attitude) {
            (AttitudeSource::Reference, Some(e)) => {
                let r_t = euler_to_rotation(&e);
                let d_rot = self.attitude.inverse() * r_t;
                Ok((r_t, preintegrate_aided(&frame.imu, self.t, &d_rot, &self.cfg.imu)?))
            }
            _ => {
                let pre = preintegrate(&frame.imu, self.t, &self.cfg.imu)?;
                Ok((self.attitude * pre.d_rot, pre))
            }
        }
    }

    /// Processes one frame.
    pub fn step(&mut self, frame: &MeasurementFrame) -> Result<SlamEstimate> {
        frame.validate()?;
        if !(frame.t > self.t) {
            return Err(Error::Data(format!("frame time {} does not advance past {}", frame.t, self.t)));
        }
        let (r_t, pre) = self.attitude_and_increment(frame)?;
        let shared = Shared {
            frame,
            pre: &pre,
            r_prev: &self.attitude,
            r_t: &r_t,
            cfg: &self.cfg,
        };
        let seed = self.cfg.seed;
        let step = self.step;
        let common = self.cfg.common_births;
        let run = |particles: &mut Vec<Particle>| -> Vec<Result<()>> {
            particles
                .par_iter_mut()
                .enumerate()
                .map(|(i, p)| {
                    let mut rng = particle_rng(seed, step, if common { 0 } else { i as u64 });
                    p.step(&shared, &mut rng)
                })
                .collect()
        };
        let mut particles = std::mem::take(&mut self.particles);
        let results = match &self.pool {
            Some(pool) => pool.install(|| run(&mut particles)),
            None => run(&mut particles),
        };
        let mut failed = 0;
        for (p, r) in particles.iter_mut().zip(results) {
            match r {
                Ok(()) => p.failed = false,
                Err(Error::Numerical(_)) => {
                    p.failed = true;
                    failed += 1;
                }
                Err(e) => return Err(e),
            }
        }

        let log_w: Vec<f64> = particles
            .iter()
            .map(|p| {
                if p.failed || p.beta <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    let prior = if self.cfg.weight_memory || !p.keyframe { p.beta.ln() } else { 0.0 };
                    prior + p.log_alpha + p.log_evidence
                }
            })
            .collect();
        let beta = normalize_log_weights(&log_w)
            .ok_or_else(|| Error::Numerical(format!("all particle weights vanished at t = {}", frame.t)))?;
        for (p, b) in particles.iter_mut().zip(&beta) {
            p.beta = *b;
        }

        let mut position = Vec3::zeros();
        let mut velocity = Vec3::zeros();
        let mut d_c_mean = 0.0;
        for p in &particles {
            position += p.ekf.x * p.beta;
            velocity += p.ekf.v * p.beta;
            d_c_mean += p.d_c * p.beta;
        }
        let best = particles
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.beta.total_cmp(&b.1.beta).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("at least one particle");
        let best_sources: Vec<Vec3> = particles[best].tracks.iter().map(|t| t.position).collect();
        self.tracks = filter_tracks(&best_sources, &self.tracks, &self.cfg.map);
        let ess = effective_sample_size(&beta);
        let keyframe = particles[best].keyframe;
        let log_evidence = particles[best].log_evidence;

        let resampled = ess < self.cfg.resample_fraction * particles.len() as f64;
        if resampled {
            let mut rng = particle_rng(seed, step, u64::from(u32::MAX));
            particles = resample(&particles, &self.cfg.dc_kernel, &self.cfg.locating, &mut rng);
        }
        self.particles = particles;
        self.attitude = r_t;
        self.t = frame.t;
        self.step += 1;

        Ok(SlamEstimate {
            t: frame.t,
            position,
            velocity,
            d_c_mean,
            sources: self.tracks.iter().map(|t| t.position).collect(),
            ess,
            keyframe,
            log_evidence,
            resampled,
            failed_particles: failed,
        })
    }
}

/// One trace row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub estimate: SlamEstimate,
    pub truth: Option<GroundTruth>,
}

impl TraceRecord {
    /// Position error, when ground truth is known.
    pub fn trajectory_error(&self) -> Option<f64> {
        self.truth.as_ref().map(|g| (g.position - self.estimate.position).norm())
    }

    /// Distance from each true source to the nearest estimate.
    pub fn source_errors(&self) -> Option<Vec<Option<f64>>> {
        self.truth.as_ref().map(|g| {
            g.sources
                .iter()
                .map(|s| {
                    self.estimate
                        .sources
                        .iter()
                        .map(|e| (e - s).norm())
                        .min_by(f64::total_cmp)
                })
                .collect()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

/// Runs the filter over all frames.
pub fn run(frames: &[MeasurementFrame], start: &RobotState, cfg: &EngineConfig) -> Result<Trace> {
    if frames.is_empty() {
        return Err(Error::Data("no frames".into()));
    }
    let mut engine = Engine::new(cfg.clone(), start, 0.0)?;
    let mut records = Vec::with_capacity(frames.len());
    for (k, frame) in frames.iter().enumerate() {
        let estimate = engine.step(frame).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("frame {k}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("frame {k}: {m}")),
            other => other,
        })?;
        records.push(TraceRecord {
            step: k,
            estimate,
            truth: frame.truth.clone(),
        });
    }
    Ok(Trace { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_scenario, ScenarioConfig, TrajectoryMode};
    use approx::assert_abs_diff_eq;

    fn start() -> RobotState {
        RobotState::at_rest(Vec3::new(1.0, 1.0, 1.0), RotationMatrix::identity())
    }

    #[test]
    fn init_examples() {
        let one = init(&EngineConfig { particles: 1, ..Default::default() }, &start(), 0.0);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].beta, 1.0);

        let cfg = EngineConfig {
            locating: LocatingConfig {
                dc_min: 1.0,
                dc_max: 5.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = init(&cfg, &start(), 0.0);
        assert!(a.iter().all(|p| (1.0..=5.0).contains(&p.d_c)));
        assert_eq!(a, init(&cfg, &start(), 0.0));
    }

    #[test]
    fn systematic_examples() {
        assert_eq!(systematic_indices(&[0.25; 4], 0.5), vec![0, 1, 2, 3]);
        assert_eq!(systematic_indices(&[1.0, 0.0, 0.0, 0.0], 0.9), vec![0; 4]);
        let w = [0.1, 0.2, 0.3, 0.4];
        for u in [0.0, 0.3, 0.77, 0.999] {
            let idx = systematic_indices(&w, u);
            for (i, wi) in w.iter().enumerate() {
                let count = idx.iter().filter(|&&j| j == i).count() as f64;
                assert!((count - wi * 4.0).abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn resampling_is_unbiased() {
        let cfg = EngineConfig {
            particles: 4,
            ..Default::default()
        };
        let mut particles = init(&cfg, &start(), 0.0);
        let beta = [0.125, 0.375, 0.3, 0.2];
        for (p, b) in particles.iter_mut().zip(beta) {
            p.beta = b;
        }
        let weighted_dc: f64 = particles.iter().map(|p| p.beta * p.d_c).sum();
        let trials = 10_000;
        let mut counts = [0usize; 4];
        let mut dc_sum = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..trials {
            let idx = systematic_indices(&beta, rng.random::<f64>());
            for i in &idx {
                counts[*i] += 1;
            }
            dc_sum += idx.iter().map(|&i| particles[i].d_c).sum::<f64>() / 4.0;
        }
        for (c, b) in counts.iter().zip(beta) {
            let expected = b * 4.0 * trials as f64;
            assert!((*c as f64 / expected - 1.0).abs() < 0.02, "{c} vs {expected}");
        }
        assert!((dc_sum / trials as f64 / weighted_dc - 1.0).abs() < 0.02);

        let out = resample(&particles, &DcKernel::default(), &cfg.locating, &mut rng);
        assert!(out.iter().all(|p| p.beta == 0.25));
    }

    #[test]
    fn weights_normalise_and_ess() {
        let b = normalize_log_weights(&[0.0, 10f64.ln(), 0.0, f64::NEG_INFINITY]).unwrap();
        assert_abs_diff_eq!(b.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b[1], 10.0 / 12.0, epsilon = 1e-12);
        assert_eq!(b[3], 0.0);
        assert!(normalize_log_weights(&[f64::NEG_INFINITY; 3]).is_none());
        assert_abs_diff_eq!(effective_sample_size(&[0.25; 4]), 4.0, epsilon = 1e-12);
    }

    fn scenario(cfg: &ScenarioConfig) -> crate::sim::Scenario {
        generate_scenario(cfg).unwrap()
    }

    #[test]
    fn identical_particles_keep_uniform_weights() {
        let sc = scenario(&ScenarioConfig { steps: 8, ..Default::default() });
        // without random births every particle evolves identically
        let cfg = EngineConfig {
            particles: 4,
            locating: LocatingConfig {
                dc_min: 1.5,
                dc_max: 1.5,
                ..Default::default()
            },
            map: MapConfig {
                births_per_doa: 0,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut engine = Engine::new(cfg, &sc.initial, 0.0).unwrap();
        for f in &sc.frames {
            let est = engine.step(f).unwrap();
            assert_abs_diff_eq!(est.ess, 4.0, epsilon = 1e-9);
            assert!(!est.resampled);
        }
    }

    #[test]
    fn empty_doas_give_pure_dead_reckoning() {
        let mut sc = scenario(&ScenarioConfig {
            steps: 20,
            accel_variance: 0.0,
            gyro_variance: 0.0,
            ..Default::default()
        });
        for f in &mut sc.frames {
            f.doas.clear();
            f.drr.windows.clear();
        }
        let trace = run(&sc.frames, &sc.initial, &EngineConfig::default()).unwrap();
        assert_eq!(trace.records.len(), 20);
        for r in &trace.records {
            assert!(r.trajectory_error().unwrap() < 1e-9);
            assert!(r.estimate.sources.is_empty());
        }
    }

    #[test]
    fn non_keyframes_leave_map_and_weights() {
        let sc = scenario(&ScenarioConfig {
            mode: TrajectoryMode::StationarySegment,
            stationary_steps: 6,
            steps: 6,
            doa_noise_std: 0.0,
            p_d: 1.0,
            clutter_rate: 0.0,
            ..Default::default()
        });
        let mut engine = Engine::new(EngineConfig::default(), &sc.initial, 0.0).unwrap();
        engine.step(&sc.frames[0]).unwrap();
        let maps: Vec<SourceMap> = engine.particles().iter().map(|p| p.map.clone()).collect();
        let betas: Vec<f64> = engine.particles().iter().map(|p| p.beta).collect();
        let dc = engine.particles().iter().map(|p| p.beta * p.d_c).sum::<f64>();
        for f in &sc.frames[1..] {
            let est = engine.step(f).unwrap();
            assert!(!est.keyframe);
            assert!((est.d_c_mean - dc).abs() < 1e-9);
        }
        for (p, (m, b)) in engine.particles().iter().zip(maps.iter().zip(&betas)) {
            assert_eq!(&p.map, m);
            assert_eq!(p.beta, *b);
        }
    }

    #[test]
    fn stale_frames_are_rejected() {
        let sc = scenario(&ScenarioConfig { steps: 2, ..Default::default() });
        let mut engine = Engine::new(EngineConfig::default(), &sc.initial, 0.0).unwrap();
        engine.step(&sc.frames[0]).unwrap();
        assert!(engine.step(&sc.frames[0]).is_err());
        assert!(run(&[], &sc.initial, &EngineConfig::default()).is_err());
    }
}
