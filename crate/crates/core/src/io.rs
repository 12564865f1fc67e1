//! Configuration files, frame files, traces, metrics and the command
//! implementations behind the `ddslam` binary.
//!
//! * Config: flat TOML, one key per setting, angles in degrees. Unknown keys
//!   are rejected by name.
//! * Frames: JSON lines. The first line is a header with the initial robot
//!   state, every further line one [`MeasurementFrame`]. Floats are written in
//!   shortest round-trip form and read back bit for bit.
//! * Traces, metrics and sweep tables: CSV with a header row.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acoustics::{DrrWindowSet, RateLimiter};
use crate::engine::{self, AttitudeSource, DcKernel, EngineConfig, Mode, Trace, TraceRecord};
use crate::error::{Error, Result};
use crate::geometry::{EulerAngles, Mat3, RotationMatrix, Spherical, Vec3};
use crate::imu::{ImuNoiseConfig, ImuSample, RobotState};
use crate::locating::LocatingConfig;
use crate::mapping::{BirthMode, MapConfig};
use crate::sim::{generate_scenario, GroundTruth, MeasurementFrame, Scenario, ScenarioConfig, TrajectoryMode};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "DDSLAM_THREADS";

/// Source error below which a source counts as converged, m.
pub const SOURCE_CONVERGENCE_THRESHOLD: f64 = 0.3;
/// Window of the rolling critical-distance standard deviation, steps.
pub const DC_WINDOW: usize = 20;
/// Rolling standard deviation, relative to the rolling mean, below which the
/// critical distance counts as converged.
pub const DC_RELATIVE_STD: f64 = 0.05;

/// Marker written in place of a step that was never reached.
pub const NOT_CONVERGED: &str = "not_converged";

/// Everything a config file can set. Missing keys take the defaults of
/// [`ScenarioConfig`] and [`EngineConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    // scenario
    pub room: [f64; 3],
    pub sources: Vec<[f64; 3]>,
    pub t60: f64,
    pub source_directivity: f64,
    pub receiver_directivity: f64,
    pub speed: f64,
    pub trajectory: TrajectoryMode,
    pub heading_interval: usize,
    pub waypoints: Vec<[f64; 3]>,
    pub stationary_start: usize,
    pub stationary_steps: usize,
    pub start: [f64; 3],
    pub wall_margin: f64,
    pub max_turn_deg: f64,
    pub dt: f64,
    pub imu_rate: f64,
    pub accel_variance: f64,
    pub gyro_variance: f64,
    pub attitude_noise_deg: f64,
    pub doa_noise_deg: f64,
    pub p_d: f64,
    pub clutter_rate: f64,
    pub drr_distance_std: f64,
    pub drr_windows: usize,
    pub steps: usize,
    pub seed: u64,

    // filter
    pub particles: usize,
    pub mode: Mode,
    pub attitude_source: AttitudeSource,
    pub filter_accel_variance: f64,
    pub filter_gyro_variance: f64,
    pub filter_doa_std_deg: f64,
    pub filter_distance_variance: f64,
    pub filter_p_d: f64,
    pub filter_clutter_rate: f64,
    pub smoothing: f64,
    pub dc_min: f64,
    pub dc_max: f64,
    pub association_gate_deg: f64,
    pub max_speed: f64,
    pub speed_margin: f64,
    pub birth_mode: BirthMode,
    pub r_min: f64,
    pub r_max: f64,
    pub births_per_doa: usize,
    pub birth_variance: f64,
    pub keyframes: bool,
    pub kf_distance: f64,
    pub kf_doa_deg: f64,
    pub kf_rotation_deg: f64,
    pub limit_distance: f64,
    pub limit_max_rejections: u32,
    pub max_components: usize,
    pub prune_threshold: f64,
    pub merge_threshold: f64,
    pub source_weight_threshold: f64,
    pub initial_variance: f64,
    pub stratified_init: bool,
    pub dc_shrinkage: f64,
    pub dc_jitter: f64,
    pub resample_fraction: f64,
    pub velocity_feedback: bool,
    pub reset_process_noise: bool,
    pub weight_memory: bool,
    pub common_births: bool,
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn vec3(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl Default for FileConfig {
    fn default() -> Self {
        let s = ScenarioConfig::default();
        let e = EngineConfig::default();
        let m = &e.map;
        let l = &e.locating;
        Self {
            room: arr(&s.room),
            sources: s.sources.iter().map(arr).collect(),
            t60: s.t60,
            source_directivity: s.source_directivity,
            receiver_directivity: s.receiver_directivity,
            speed: s.speed,
            trajectory: s.mode,
            heading_interval: s.heading_interval,
            waypoints: s.waypoints.iter().map(arr).collect(),
            stationary_start: s.stationary_start,
            stationary_steps: s.stationary_steps,
            start: arr(&s.start),
            wall_margin: s.wall_margin,
            max_turn_deg: s.max_turn.to_degrees(),
            dt: s.dt,
            imu_rate: s.imu_rate,
            accel_variance: s.accel_variance,
            gyro_variance: s.gyro_variance,
            attitude_noise_deg: s.attitude_noise_std.to_degrees(),
            doa_noise_deg: s.doa_noise_std.to_degrees(),
            p_d: s.p_d,
            clutter_rate: s.clutter_rate,
            drr_distance_std: s.drr_distance_std,
            drr_windows: s.drr_windows,
            steps: s.steps,
            seed: s.seed,

            particles: e.particles,
            mode: e.mode,
            attitude_source: e.attitude_source,
            filter_accel_variance: e.imu.accel_variance,
            filter_gyro_variance: e.imu.gyro_variance,
            filter_doa_std_deg: l.doa_variance.sqrt().to_degrees(),
            filter_distance_variance: l.distance_variance,
            filter_p_d: m.p_d,
            filter_clutter_rate: m.clutter_rate,
            smoothing: l.smoothing,
            dc_min: l.dc_min,
            dc_max: l.dc_max,
            association_gate_deg: l.association_gate.to_degrees(),
            max_speed: l.rate_limiter.max_speed,
            speed_margin: l.rate_limiter.margin,
            birth_mode: m.birth_mode,
            r_min: m.r_min,
            r_max: m.r_max,
            births_per_doa: m.births_per_doa,
            birth_variance: m.birth_variance,
            keyframes: e.keyframes,
            kf_distance: m.kf_distance,
            kf_doa_deg: m.kf_doa.to_degrees(),
            kf_rotation_deg: m.kf_rotation.to_degrees(),
            limit_distance: m.limit_distance,
            limit_max_rejections: m.limit_max_rejections,
            max_components: m.max_components,
            prune_threshold: m.prune_threshold,
            merge_threshold: m.merge_threshold,
            source_weight_threshold: m.source_weight_threshold,
            initial_variance: e.initial_variance,
            stratified_init: e.stratified_init,
            dc_shrinkage: e.dc_kernel.shrinkage,
            dc_jitter: e.dc_kernel.jitter,
            resample_fraction: e.resample_fraction,
            velocity_feedback: e.velocity_feedback,
            reset_process_noise: e.reset_process_noise,
            weight_memory: e.weight_memory,
            common_births: e.common_births,
        }
    }
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            room: vec3(&self.room),
            sources: self.sources.iter().map(vec3).collect(),
            t60: self.t60,
            source_directivity: self.source_directivity,
            receiver_directivity: self.receiver_directivity,
            speed: self.speed,
            mode: self.trajectory,
            heading_interval: self.heading_interval,
            waypoints: self.waypoints.iter().map(vec3).collect(),
            stationary_start: self.stationary_start,
            stationary_steps: self.stationary_steps,
            start: vec3(&self.start),
            wall_margin: self.wall_margin,
            max_turn: self.max_turn_deg.to_radians(),
            dt: self.dt,
            imu_rate: self.imu_rate,
            accel_variance: self.accel_variance,
            gyro_variance: self.gyro_variance,
            attitude_noise_std: self.attitude_noise_deg.to_radians(),
            doa_noise_std: self.doa_noise_deg.to_radians(),
            p_d: self.p_d,
            clutter_rate: self.clutter_rate,
            drr_distance_std: self.drr_distance_std,
            drr_windows: self.drr_windows,
            steps: self.steps,
            seed: self.seed,
        }
    }

    pub fn engine(&self) -> EngineConfig {
        let doa_variance = self.filter_doa_std_deg.to_radians().powi(2);
        EngineConfig {
            particles: self.particles,
            seed: self.seed,
            mode: self.mode,
            map: MapConfig {
                birth_mode: self.birth_mode,
                r_min: self.r_min,
                r_max: self.r_max,
                births_per_doa: self.births_per_doa,
                birth_variance: self.birth_variance,
                p_d: self.filter_p_d,
                clutter_rate: self.filter_clutter_rate,
                kf_distance: self.kf_distance,
                kf_doa: self.kf_doa_deg.to_radians(),
                kf_rotation: self.kf_rotation_deg.to_radians(),
                limit_distance: self.limit_distance,
                limit_max_rejections: self.limit_max_rejections,
                doa_variance,
                max_components: self.max_components,
                prune_threshold: self.prune_threshold,
                merge_threshold: self.merge_threshold,
                source_weight_threshold: self.source_weight_threshold,
            },
            locating: LocatingConfig {
                doa_variance,
                distance_variance: self.filter_distance_variance,
                smoothing: self.smoothing,
                dc_min: self.dc_min,
                dc_max: self.dc_max,
                association_gate: self.association_gate_deg.to_radians(),
                rate_limiter: RateLimiter {
                    max_speed: self.max_speed,
                    margin: self.speed_margin,
                },
            },
            imu: ImuNoiseConfig {
                accel_variance: self.filter_accel_variance,
                gyro_variance: self.filter_gyro_variance,
                ..Default::default()
            },
            attitude_source: self.attitude_source,
            initial_variance: self.initial_variance,
            keyframes: self.keyframes,
            stratified_init: self.stratified_init,
            dc_kernel: DcKernel {
                shrinkage: self.dc_shrinkage,
                jitter: self.dc_jitter,
            },
            resample_fraction: self.resample_fraction,
            velocity_feedback: self.velocity_feedback,
            reset_process_noise: self.reset_process_noise,
            weight_memory: self.weight_memory,
            common_births: self.common_births,
            threads: None,
        }
    }
}

/// Reads `DDSLAM_THREADS`. Unset or empty means no cap.
pub fn thread_limit() -> Result<Option<usize>> {
    parse_thread_limit(std::env::var(THREADS_ENV).ok().as_deref())
}

pub fn parse_thread_limit(value: Option<&str>) -> Result<Option<usize>> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

// ---------------------------------------------------------------------------
// frame files

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    format: String,
    frames: usize,
    critical_distance: Option<f64>,
    position: [f64; 3],
    velocity: [f64; 3],
    /// Row-major body-to-world rotation.
    attitude: [[f64; 3]; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthRecord {
    position: [f64; 3],
    velocity: [f64; 3],
    /// Roll, pitch, yaw in radians.
    attitude: [f64; 3],
    sources: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    t: f64,
    imu: Vec<ImuSample>,
    /// Azimuth, elevation in radians.
    doas: Vec<[f64; 2]>,
    drr: Vec<Vec<f64>>,
    #[serde(default)]
    attitude: Option<[f64; 3]>,
    #[serde(default)]
    truth: Option<TruthRecord>,
}

const FRAME_FORMAT: &str = "ddslam-frames-1";

fn euler_arr(e: &EulerAngles) -> [f64; 3] {
    [e.roll, e.pitch, e.yaw]
}

fn euler(a: &[f64; 3]) -> EulerAngles {
    EulerAngles {
        roll: a[0],
        pitch: a[1],
        yaw: a[2],
    }
}

impl From<&MeasurementFrame> for FrameRecord {
    fn from(f: &MeasurementFrame) -> Self {
        Self {
            t: f.t,
            imu: f.imu.clone(),
            doas: f.doas.iter().map(|d| [d.azimuth, d.elevation]).collect(),
            drr: f.drr.windows.clone(),
            attitude: f.attitude.as_ref().map(euler_arr),
            truth: f.truth.as_ref().map(|g| TruthRecord {
                position: arr(&g.position),
                velocity: arr(&g.velocity),
                attitude: euler_arr(&g.attitude),
                sources: g.sources.iter().map(arr).collect(),
            }),
        }
    }
}

impl From<FrameRecord> for MeasurementFrame {
    fn from(r: FrameRecord) -> Self {
        Self {
            t: r.t,
            imu: r.imu,
            doas: r
                .doas
                .iter()
                .map(|d| Spherical {
                    azimuth: d[0],
                    elevation: d[1],
                    radius: 1.0,
                })
                .collect(),
            drr: DrrWindowSet { windows: r.drr },
            attitude: r.attitude.as_ref().map(euler),
            truth: r.truth.map(|g| GroundTruth {
                position: vec3(&g.position),
                velocity: vec3(&g.velocity),
                attitude: euler(&g.attitude),
                sources: g.sources.iter().map(vec3).collect(),
            }),
        }
    }
}

/// Writes a scenario as a frame file.
pub fn write_frames<W: Write>(scenario: &Scenario, mut out: W) -> std::io::Result<()> {
    let r = &scenario.initial.attitude;
    let header = HeaderRecord {
        format: FRAME_FORMAT.into(),
        frames: scenario.frames.len(),
        critical_distance: Some(scenario.critical_distance),
        position: arr(&scenario.initial.position),
        velocity: arr(&scenario.initial.velocity),
        attitude: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for f in &scenario.frames {
        serde_json::to_writer(&mut out, &FrameRecord::from(f))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_frames(scenario: &Scenario, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_frames(scenario, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Parses a frame file. `path` only labels errors.
pub fn read_frames<R: BufRead>(input: R, path: &Path) -> Result<Scenario> {
    let schema = |line: usize, message: String| Error::Schema {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = input.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(s) if s.trim().is_empty() => None,
        other => Some((i + 1, other)),
    });
    let (n, first) = lines.next().ok_or_else(|| schema(1, "empty frame file".into()))?;
    let first = first.map_err(|e| Error::io(path, e))?;
    let header: HeaderRecord = serde_json::from_str(&first).map_err(|e| schema(n, format!("header: {e}")))?;
    if header.format != FRAME_FORMAT {
        return Err(schema(n, format!("unknown format {:?}", header.format)));
    }
    let a = header.attitude;
    let initial = RobotState {
        position: vec3(&header.position),
        velocity: vec3(&header.velocity),
        attitude: RotationMatrix::from_matrix_unchecked(Mat3::new(
            a[0][0], a[0][1], a[0][2], a[1][0], a[1][1], a[1][2], a[2][0], a[2][1], a[2][2],
        )),
    };
    let mut frames = Vec::with_capacity(header.frames);
    for (n, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| schema(n, e.to_string()))?;
        let frame = MeasurementFrame::from(rec);
        frame.validate().map_err(|e| schema(n, e.to_string()))?;
        frames.push(frame);
    }
    if frames.len() != header.frames {
        return Err(Error::Data(format!(
            "{}: header announces {} frames, file has {}",
            path.display(),
            header.frames,
            frames.len()
        )));
    }
    Ok(Scenario {
        initial,
        frames,
        critical_distance: header.critical_distance.unwrap_or(f64::NAN),
    })
}

pub fn load_frames(path: &Path) -> Result<Scenario> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_frames(BufReader::new(file), path)
}

// ---------------------------------------------------------------------------
// traces

/// Trace columns that precede the per-source block.
pub const TRACE_COLUMNS: [&str; 16] = [
    "step", "t", "est_x", "est_y", "est_z", "gt_x", "gt_y", "gt_z", "traj_err", "est_vx", "est_vy", "est_vz",
    "dc_mean", "ess", "keyframe", "log_evidence",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Number of per-source column groups in a trace.
fn source_slots(trace: &Trace) -> usize {
    trace
        .records
        .iter()
        .map(|r| match &r.truth {
            Some(g) => g.sources.len(),
            None => r.estimate.sources.len(),
        })
        .max()
        .unwrap_or(0)
}

/// Estimate shown in source slot `k`: with ground truth, the estimate nearest
/// to true source `k`; without, the `k`-th estimate.
fn slot_estimate(r: &TraceRecord, k: usize) -> (Option<Vec3>, Option<f64>) {
    match &r.truth {
        Some(g) => {
            let Some(s) = g.sources.get(k) else {
                return (None, None);
            };
            r.estimate
                .sources
                .iter()
                .map(|e| (*e, (e - s).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map_or((None, None), |(e, d)| (Some(e), Some(d)))
        }
        None => (r.estimate.sources.get(k).copied(), None),
    }
}

pub fn write_trace<W: Write>(trace: &Trace, out: W) -> Result<()> {
    let slots = source_slots(trace);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = TRACE_COLUMNS.iter().map(|s| s.to_string()).collect();
    for k in 0..slots {
        for c in ["x", "y", "z", "err"] {
            header.push(format!("src{k}_{c}"));
        }
    }
    let csv_err = |e: csv::Error| Error::Data(format!("trace output: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in &trace.records {
        let e = &r.estimate;
        let gt = r.truth.as_ref().map(|g| g.position);
        let mut row = vec![
            r.step.to_string(),
            e.t.to_string(),
            e.position.x.to_string(),
            e.position.y.to_string(),
            e.position.z.to_string(),
            opt(gt.map(|p| p.x)),
            opt(gt.map(|p| p.y)),
            opt(gt.map(|p| p.z)),
            opt(r.trajectory_error()),
            e.velocity.x.to_string(),
            e.velocity.y.to_string(),
            e.velocity.z.to_string(),
            e.d_c_mean.to_string(),
            e.ess.to_string(),
            u8::from(e.keyframe).to_string(),
            e.log_evidence.to_string(),
        ];
        for k in 0..slots {
            let (p, d) = slot_estimate(r, k);
            row.extend([opt(p.map(|p| p.x)), opt(p.map(|p| p.y)), opt(p.map(|p| p.z)), opt(d)]);
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("trace output: {e}")))
}

pub fn save_trace(trace: &Trace, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace(trace, BufWriter::new(file)).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// The columns of a trace file that the metrics need.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceTable {
    pub steps: Vec<usize>,
    /// `None` where the trace carries no ground truth.
    pub traj_err: Vec<Option<f64>>,
    pub dc_mean: Vec<f64>,
    /// `source_err[k][step]`.
    pub source_err: Vec<Vec<Option<f64>>>,
}

impl TraceTable {
    pub fn from_trace(trace: &Trace) -> Self {
        let slots = source_slots(trace);
        Self {
            steps: trace.records.iter().map(|r| r.step).collect(),
            traj_err: trace.records.iter().map(TraceRecord::trajectory_error).collect(),
            dc_mean: trace.records.iter().map(|r| r.estimate.d_c_mean).collect(),
            source_err: (0..slots)
                .map(|k| trace.records.iter().map(|r| slot_estimate(r, k).1).collect())
                .collect(),
        }
    }
}

/// Reads the metric columns of a trace file.
pub fn read_trace<R: std::io::Read>(input: R, path: &Path) -> Result<TraceTable> {
    let schema = |line: usize, message: String| Error::Schema {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(|e| schema(1, e.to_string()))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| schema(1, format!("missing column {name}")))
    };
    let (c_step, c_err, c_dc) = (col("step")?, col("traj_err")?, col("dc_mean")?);
    let mut src_cols = Vec::new();
    while let Ok(c) = col(&format!("src{}_err", src_cols.len())) {
        src_cols.push(c);
    }
    let mut table = TraceTable {
        source_err: vec![Vec::new(); src_cols.len()],
        ..Default::default()
    };
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| schema(line, e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let num = |c: usize| -> Result<Option<f64>> {
            match field(c) {
                "" => Ok(None),
                s => s
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| schema(line, format!("column {}: {s:?} is not a number", &header[c]))),
            }
        };
        table.steps.push(
            field(c_step)
                .parse()
                .map_err(|_| schema(line, format!("step {:?} is not an integer", field(c_step))))?,
        );
        table.traj_err.push(num(c_err)?);
        table
            .dc_mean
            .push(num(c_dc)?.ok_or_else(|| schema(line, "dc_mean is empty".into()))?);
        for (k, c) in src_cols.iter().enumerate() {
            table.source_err[k].push(num(*c)?);
        }
    }
    Ok(table)
}

pub fn load_trace(path: &Path) -> Result<TraceTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(BufReader::new(file), path)
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub steps: usize,
    pub mean_error: f64,
    pub max_error: f64,
    /// First step from which every source error stays below
    /// [`SOURCE_CONVERGENCE_THRESHOLD`].
    pub source_convergence_step: Option<usize>,
    /// First step from which the rolling critical-distance spread stays below
    /// [`DC_RELATIVE_STD`] of its mean.
    pub dc_convergence_step: Option<usize>,
    pub final_dc: f64,
}

/// Position of the first element of the all-true suffix of `ok`.
fn stays_from(ok: &[bool]) -> Option<usize> {
    let tail = ok.iter().rev().take_while(|b| **b).count();
    (tail > 0).then(|| ok.len() - tail)
}

/// Population standard deviation over mean for each full window ending at
/// index `i >= window - 1`; `None` before that.
pub fn rolling_relative_std(values: &[f64], window: usize) -> Vec<Option<f64>> {
    (0..values.len())
        .map(|i| {
            if window == 0 || i + 1 < window {
                return None;
            }
            let w = &values[i + 1 - window..=i];
            let mean = w.iter().sum::<f64>() / window as f64;
            let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / window as f64;
            Some(var.sqrt() / mean)
        })
        .collect()
}

impl MetricsReport {
    pub fn from_table(t: &TraceTable) -> Result<Self> {
        if t.steps.is_empty() {
            return Err(Error::Data("trace has no records".into()));
        }
        let errs: Vec<f64> = t
            .traj_err
            .iter()
            .map(|e| e.ok_or_else(|| Error::Data("trace has no ground truth".into())))
            .collect::<Result<_>>()?;
        let mean_error = errs.iter().sum::<f64>() / errs.len() as f64;
        let max_error = errs.iter().copied().fold(0.0, f64::max);
        let source_ok: Vec<bool> = (0..t.steps.len())
            .map(|i| {
                !t.source_err.is_empty()
                    && t.source_err
                        .iter()
                        .all(|s| s[i].is_some_and(|e| e < SOURCE_CONVERGENCE_THRESHOLD))
            })
            .collect();
        let dc_ok: Vec<bool> = rolling_relative_std(&t.dc_mean, DC_WINDOW)
            .iter()
            .map(|r| r.is_some_and(|r| r < DC_RELATIVE_STD))
            .collect();
        Ok(Self {
            steps: t.steps.len(),
            mean_error,
            max_error,
            source_convergence_step: stays_from(&source_ok).map(|i| t.steps[i]),
            dc_convergence_step: stays_from(&dc_ok).map(|i| t.steps[i]),
            final_dc: *t.dc_mean.last().expect("non-empty"),
        })
    }

    pub fn from_trace(trace: &Trace) -> Result<Self> {
        Self::from_table(&TraceTable::from_trace(trace))
    }

    fn step_text(s: Option<usize>) -> String {
        s.map_or_else(|| NOT_CONVERGED.to_string(), |s| s.to_string())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "steps,mean_traj_err,max_traj_err,source_convergence_step,dc_convergence_step,final_dc")?;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            self.steps,
            self.mean_error,
            self.max_error,
            Self::step_text(self.source_convergence_step),
            Self::step_text(self.dc_convergence_step),
            self.final_dc
        )?;
        out.flush()
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "steps                    {}", self.steps)?;
        writeln!(f, "mean trajectory error    {:.4} m", self.mean_error)?;
        writeln!(f, "max trajectory error     {:.4} m", self.max_error)?;
        writeln!(f, "source convergence step  {}", Self::step_text(self.source_convergence_step))?;
        writeln!(f, "d_c convergence step     {}", Self::step_text(self.dc_convergence_step))?;
        write!(f, "final d_c                {:.4} m", self.final_dc)
    }
}

// ---------------------------------------------------------------------------
// commands

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub particles: Option<usize>,
    pub mode: Option<Mode>,
    pub threads: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut FileConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.particles {
            cfg.particles = p;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
    }
}

fn load_config(path: Option<&Path>, ov: &Overrides) -> Result<FileConfig> {
    let mut cfg = match path {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    ov.apply(&mut cfg);
    Ok(cfg)
}

/// Generates a scenario from a config and writes it as a frame file.
pub fn cmd_simulate(config: Option<&Path>, out: &Path, ov: &Overrides) -> Result<Scenario> {
    let cfg = load_config(config, ov)?;
    let scenario = generate_scenario(&cfg.scenario())?;
    save_frames(&scenario, out)?;
    Ok(scenario)
}

/// Runs the filter over a frame file and writes the trace.
pub fn cmd_run(frames: &Path, config: Option<&Path>, out: &Path, ov: &Overrides) -> Result<Trace> {
    let cfg = load_config(config, ov)?;
    let scenario = load_frames(frames)?;
    let mut engine_cfg = cfg.engine();
    engine_cfg.threads = ov.threads;
    let trace = engine::run(&scenario.frames, &scenario.initial, &engine_cfg)?;
    save_trace(&trace, out)?;
    Ok(trace)
}

/// Computes metrics for a trace file, optionally writing them as CSV.
pub fn cmd_eval(trace: &Path, out: Option<&Path>) -> Result<MetricsReport> {
    let report = MetricsReport::from_table(&load_trace(trace)?)?;
    if let Some(path) = out {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        report.write_csv(BufWriter::new(file)).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

/// One row of a particle sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub particles: usize,
    /// `(seed, mean trajectory error, max trajectory error)` per replicate.
    pub replicates: Vec<(u64, f64, f64)>,
}

impl SweepRow {
    pub fn mean_error(&self) -> f64 {
        self.replicates.iter().map(|r| r.1).sum::<f64>() / self.replicates.len() as f64
    }

    pub fn max_error(&self) -> f64 {
        self.replicates.iter().map(|r| r.2).fold(0.0, f64::max)
    }
}

/// Runs every particle count on `replicates` scenarios with seeds
/// `seed, seed + 1, ...`. Each replicate uses the same seed for the scenario
/// and the filter.
pub fn sweep(cfg: &FileConfig, counts: &[usize], replicates: usize, threads: Option<usize>) -> Result<Vec<SweepRow>> {
    if counts.is_empty() {
        return Err(Error::Config("sweep needs at least one particle count".into()));
    }
    if replicates == 0 {
        return Err(Error::Config("sweep needs at least one replicate".into()));
    }
    let seeds: Vec<u64> = (0..replicates as u64).map(|r| cfg.seed + r).collect();
    let work = || -> Result<Vec<SweepRow>> {
        let scenarios: Vec<Scenario> = seeds
            .par_iter()
            .map(|&seed| generate_scenario(&ScenarioConfig { seed, ..cfg.scenario() }))
            .collect::<Result<_>>()?;
        let jobs: Vec<(usize, usize)> = counts
            .iter()
            .flat_map(|&c| (0..replicates).map(move |r| (c, r)))
            .collect();
        let results: Vec<(u64, f64, f64)> = jobs
            .par_iter()
            .map(|&(particles, r)| {
                let seed = seeds[r];
                let engine_cfg = EngineConfig {
                    particles,
                    seed,
                    ..cfg.engine()
                };
                let sc = &scenarios[r];
                let trace = engine::run(&sc.frames, &sc.initial, &engine_cfg)?;
                let m = MetricsReport::from_trace(&trace)?;
                Ok((seed, m.mean_error, m.max_error))
            })
            .collect::<Result<_>>()?;
        Ok(counts
            .iter()
            .zip(results.chunks(replicates))
            .map(|(&particles, reps)| SweepRow {
                particles,
                replicates: reps.to_vec(),
            })
            .collect())
    };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

pub fn write_sweep<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    let Some(first) = rows.first() else {
        return Ok(());
    };
    let mut header = vec!["particles".to_string()];
    header.extend(first.replicates.iter().map(|r| format!("mean_err_seed{}", r.0)));
    header.extend(["mean_err".to_string(), "max_err".to_string()]);
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        let mut fields = vec![row.particles.to_string()];
        fields.extend(row.replicates.iter().map(|r| r.1.to_string()));
        fields.extend([row.mean_error().to_string(), row.max_error().to_string()]);
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()
}

/// Particle sweep driven by a config file; writes the summary table.
pub fn cmd_sweep(
    config: Option<&Path>,
    counts: &[usize],
    replicates: usize,
    out: &Path,
    ov: &Overrides,
) -> Result<Vec<SweepRow>> {
    let cfg = load_config(config, ov)?;
    let rows = sweep(&cfg, counts, replicates, ov.threads)?;
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    write_sweep(&rows, BufWriter::new(file)).map_err(|e| Error::io(out, e))?;
    Ok(rows)
}


#[cfg(test)]
mod pipeline_tests {
    use super::*;
    use proptest::prelude::*;

    fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
        let path = dir.join("run.toml");
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn simulate_is_byte_identical_for_a_seed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "steps = 20\nseed = 4\n");
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        let sc = cmd_simulate(Some(&cfg), &a, &Overrides::default()).unwrap();
        cmd_simulate(Some(&cfg), &b, &Overrides::default()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(load_frames(&a).unwrap(), sc);

        let c = dir.path().join("c.jsonl");
        cmd_simulate(Some(&cfg), &c, &Overrides { seed: Some(5), ..Default::default() }).unwrap();
        assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    }

    #[test]
    fn reference_config_gives_105_frames() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("f.jsonl");
        let sc = cmd_simulate(None, &out, &Overrides::default()).unwrap();
        assert_eq!(sc.frames.len(), 105);
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 106);
    }

    #[test]
    fn run_and_eval_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "steps = 30\nparticles = 4\n");
        let frames = dir.path().join("f.jsonl");
        let trace_path = dir.path().join("t.csv");
        let metrics = dir.path().join("m.csv");
        let sc = cmd_simulate(Some(&cfg), &frames, &Overrides::default()).unwrap();
        for mode in [Mode::Dd, Mode::BearingOnly] {
            let trace = cmd_run(&frames, Some(&cfg), &trace_path, &Overrides { mode: Some(mode), ..Default::default() }).unwrap();
            assert_eq!(trace.records.len(), sc.frames.len());
            let csv = std::fs::read_to_string(&trace_path).unwrap();
            assert_eq!(csv.lines().count(), sc.frames.len() + 1);
            assert!(csv.lines().next().unwrap().ends_with("src0_x,src0_y,src0_z,src0_err"));

            let report = cmd_eval(&trace_path, Some(&metrics)).unwrap();
            let direct: Vec<f64> = trace.records.iter().map(|r| r.trajectory_error().unwrap()).collect();
            let mean = direct.iter().sum::<f64>() / direct.len() as f64;
            assert!((report.mean_error - mean).abs() <= 1e-12 * mean.max(1.0));
            assert_eq!(report.steps, 30);
            assert!(std::fs::read_to_string(&metrics).unwrap().starts_with("steps,mean_traj_err"));
        }
    }

    #[test]
    fn worker_count_does_not_change_the_trace() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "steps = 15\n");
        let frames = dir.path().join("f.jsonl");
        cmd_simulate(Some(&cfg), &frames, &Overrides::default()).unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        cmd_run(&frames, Some(&cfg), &a, &Overrides { particles: Some(3), ..Default::default() }).unwrap();
        cmd_run(&frames, Some(&cfg), &b, &Overrides { particles: Some(3), threads: Some(2), ..Default::default() }).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn command_errors_map_to_exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x");
        let bad = write_config(dir.path(), "unknown_thing = 3\n");
        let err = cmd_simulate(Some(&bad), &out, &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("unknown_thing"));

        let zero = write_config(dir.path(), "steps = 0\n");
        assert_eq!(cmd_simulate(Some(&zero), &out, &Overrides::default()).unwrap_err().exit_code(), 2);

        let missing = dir.path().join("missing.jsonl");
        assert_eq!(cmd_run(&missing, None, &out, &Overrides::default()).unwrap_err().exit_code(), 3);

        let junk = dir.path().join("junk.jsonl");
        std::fs::write(&junk, "{\"format\": \"ddslam-frames-1\"}\n").unwrap();
        match cmd_run(&junk, None, &out, &Overrides::default()).unwrap_err() {
            Error::Schema { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other}"),
        }

        let no_truth = dir.path().join("nt.csv");
        std::fs::write(&no_truth, "step,traj_err,dc_mean\n0,,1.5\n").unwrap();
        assert_eq!(cmd_eval(&no_truth, None).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn sweep_table_shape() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "steps = 12\n");
        let out = dir.path().join("sweep.csv");
        let rows = cmd_sweep(Some(&cfg), &[2, 4, 6], 2, &out, &Overrides::default()).unwrap();
        assert_eq!(rows.len(), 3);
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), "particles,mean_err_seed1,mean_err_seed2,mean_err,max_err");

        let single = cmd_sweep(Some(&cfg), &[3], 1, &out, &Overrides::default()).unwrap();
        assert_eq!(single.len(), 1);
        assert!(cmd_sweep(Some(&cfg), &[], 1, &out, &Overrides::default()).is_err());
    }

    #[test]
    fn config_file_round_trip() {
        let mut cfg = FileConfig::default();
        cfg.particles = 7;
        cfg.doa_noise_deg = 3.5;
        cfg.trajectory = TrajectoryMode::StationarySegment;
        assert_eq!(FileConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn frame_files_round_trip_bit_for_bit(seed in 0u64..1000, steps in 1usize..8, clutter in 0.0..3.0f64) {
            let sc = generate_scenario(&ScenarioConfig { seed, steps, clutter_rate: clutter, attitude_noise_std: 0.01, ..Default::default() }).unwrap();
            let mut buf = Vec::new();
            write_frames(&sc, &mut buf).unwrap();
            let back = read_frames(buf.as_slice(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.initial.attitude.matrix(), sc.initial.attitude.matrix());
            for (a, b) in back.frames.iter().zip(&sc.frames) {
                prop_assert_eq!(a.t.to_bits(), b.t.to_bits());
                for (x, y) in a.doas.iter().zip(&b.doas) {
                    prop_assert_eq!(x.azimuth.to_bits(), y.azimuth.to_bits());
                    prop_assert_eq!(x.elevation.to_bits(), y.elevation.to_bits());
                }
            }
            prop_assert_eq!(back, sc);
        }
    }
}
