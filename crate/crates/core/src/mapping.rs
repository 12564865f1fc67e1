//! Gaussian-mixture source map.
//!
//! Each particle owns a [`SourceMap`]: a weighted set of 3-D Gaussians whose
//! total weight approximates the expected number of sources. New components
//! are born along every measured DoA ray, existing weights are re-scored
//! against the DoAs of the current keyframe, and the mixture is kept compact
//! by merging and pruning. Source positions are extracted by clustering the
//! components around the heaviest ones.

use std::cmp::Ordering;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    angle_between, cartesian_to_spherical, max_eigenvalue, robot_to_world, rotation_to_euler,
    spherical_to_cartesian, world_to_robot, Mat3, RotationMatrix, Spherical, Vec3,
};

/// Added to singular covariances before inversion.
const REGULARIZATION: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec3,
    pub cov: Mat3,
}

/// How radii of newborn components are drawn along a DoA ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BirthMode {
    /// `r ~ U(r_min, r_max)`; the component density thins with range.
    #[default]
    UniformRadius,
    /// `r = r_min * sqrt(U(1, r_max^2 / r_min^2))`; uniform per unit area of
    /// the birth sector.
    SqrtUniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapConfig {
    pub birth_mode: BirthMode,
    pub r_min: f64,
    pub r_max: f64,
    pub births_per_doa: usize,
    /// Isotropic position variance of a newborn component, m^2.
    pub birth_variance: f64,
    /// Detection probability.
    pub p_d: f64,
    /// Expected number of false DoAs per frame.
    pub clutter_rate: f64,
    /// Keyframe thresholds: translation (m), DoA set change (rad), rotation (rad).
    pub kf_distance: f64,
    pub kf_doa: f64,
    pub kf_rotation: f64,
    /// Largest accepted jump of a source estimate between frames, m.
    pub limit_distance: f64,
    /// Number of consecutive rejections after which the limiting filter
    /// accepts the new estimate anyway.
    pub limit_max_rejections: u32,
    /// DoA variance, rad^2.
    pub doa_variance: f64,
    pub max_components: usize,
    pub prune_threshold: f64,
    /// Mahalanobis merge threshold.
    pub merge_threshold: f64,
    /// Minimum cluster weight for a confirmed source.
    pub source_weight_threshold: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            birth_mode: BirthMode::UniformRadius,
            r_min: 0.3,
            // diagonal of a 6 x 6 x 3 m room
            r_max: 9.0,
            births_per_doa: 20,
            birth_variance: 0.04,
            p_d: 0.95,
            clutter_rate: 0.5,
            kf_distance: 0.25,
            kf_doa: 5f64.to_radians(),
            kf_rotation: 5f64.to_radians(),
            limit_distance: 0.2,
            limit_max_rejections: 3,
            doa_variance: 2f64.to_radians().powi(2),
            max_components: 100,
            prune_threshold: 1e-5,
            merge_threshold: 4.0,
            source_weight_threshold: 0.5,
        }
    }
}

/// Weighted Gaussian mixture plus its reduction limits.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceMap {
    pub components: Vec<GaussianComponent>,
    pub max_components: usize,
    pub prune_threshold: f64,
    pub merge_threshold: f64,
}

impl SourceMap {
    pub fn new(cfg: &MapConfig) -> Self {
        Self {
            components: Vec::new(),
            max_components: cfg.max_components,
            prune_threshold: cfg.prune_threshold,
            merge_threshold: cfg.merge_threshold,
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Weighted centroid of all components.
    pub fn centroid(&self) -> Option<Vec3> {
        let w = self.total_weight();
        if !(w > 0.0) {
            return None;
        }
        Some(self.components.iter().map(|c| c.mean * c.weight).sum::<Vec3>() / w)
    }
}

/// Pose and DoA set of the last keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeState {
    pub position: Vec3,
    pub doas: Vec<Spherical>,
    pub attitude: RotationMatrix,
    pub time: f64,
}

/// Draws newborn components along a DoA measured from the given pose.
pub fn birth_components<R: Rng + ?Sized>(
    robot_pos: &Vec3,
    attitude: &RotationMatrix,
    doa: &Spherical,
    cfg: &MapConfig,
    rng: &mut R,
) -> Vec<GaussianComponent> {
    let n = cfg.births_per_doa;
    if n == 0 {
        return Vec::new();
    }
    let jitter = Normal::new(0.0, cfg.doa_variance.max(0.0).sqrt()).expect("finite std");
    let weight = 1.0 / n as f64;
    (0..n)
        .map(|_| {
            let az = doa.azimuth + jitter.sample(rng);
            let el = doa.elevation + jitter.sample(rng);
            let r = sample_birth_radius(cfg, rng);
            let local = spherical_to_cartesian(&Spherical::new(az, el, r));
            GaussianComponent {
                weight,
                mean: robot_to_world(&local, robot_pos, attitude),
                cov: Mat3::identity() * cfg.birth_variance,
            }
        })
        .collect()
}

/// Radius of one newborn component.
pub fn sample_birth_radius<R: Rng + ?Sized>(cfg: &MapConfig, rng: &mut R) -> f64 {
    if cfg.r_max <= cfg.r_min {
        return cfg.r_min;
    }
    match cfg.birth_mode {
        BirthMode::UniformRadius => rng.random_range(cfg.r_min..cfg.r_max),
        BirthMode::SqrtUniform => {
            let hi = (cfg.r_max / cfg.r_min).powi(2);
            cfg.r_min * rng.random_range(1.0..hi).sqrt()
        }
    }
}

/// Distance between two components at ranges `r` and `r + dr` from the robot
/// separated by angle `dgamma`.
pub fn component_distance(r: f64, dr: f64, dgamma: f64) -> f64 {
    let r2 = r + dr;
    (r * r + r2 * r2 - 2.0 * r * r2 * dgamma.cos()).max(0.0).sqrt()
}

fn inverse_regularized(m: &Mat3) -> Mat3 {
    m.try_inverse()
        .filter(|inv| inv.iter().all(|x| x.is_finite()))
        .or_else(|| (m + Mat3::identity() * REGULARIZATION).try_inverse())
        .unwrap_or_else(|| Mat3::identity() / REGULARIZATION)
}

/// Heaviest component first; ties broken on the mean so the order does not
/// depend on storage order.
fn heavier_first(a: &GaussianComponent, b: &GaussianComponent) -> Ordering {
    b.weight
        .total_cmp(&a.weight)
        .then_with(|| a.mean.x.total_cmp(&b.mean.x))
        .then_with(|| a.mean.y.total_cmp(&b.mean.y))
        .then_with(|| a.mean.z.total_cmp(&b.mean.z))
}

/// Moment-matched merge of nearby components.
///
/// Repeatedly takes the heaviest remaining component `j` and merges every `i`
/// with `(m_i - m_j)^T P_i^-1 (m_i - m_j) <= U` into one Gaussian with the
/// same total weight, mean and second moment.
pub fn merge_components(map: SourceMap) -> SourceMap {
    let SourceMap {
        mut components,
        max_components,
        prune_threshold,
        merge_threshold,
    } = map;
    components.sort_by(heavier_first);
    let inverses: Vec<Mat3> = components.iter().map(|c| inverse_regularized(&c.cov)).collect();
    let mut used = vec![false; components.len()];
    let mut merged = Vec::new();

    for j in 0..components.len() {
        if used[j] {
            continue;
        }
        let anchor = components[j].mean;
        let group: Vec<usize> = (j..components.len())
            .filter(|&i| {
                if used[i] {
                    return false;
                }
                let d = components[i].mean - anchor;
                (d.transpose() * inverses[i] * d)[(0, 0)] <= merge_threshold
            })
            .collect();
        for &i in &group {
            used[i] = true;
        }
        if group.len() == 1 {
            merged.push(components[j].clone());
            continue;
        }
        let weight: f64 = group.iter().map(|&i| components[i].weight).sum();
        let mean = if weight > 0.0 {
            group.iter().map(|&i| components[i].mean * components[i].weight).sum::<Vec3>() / weight
        } else {
            group.iter().map(|&i| components[i].mean).sum::<Vec3>() / group.len() as f64
        };
        let cov = if weight > 0.0 {
            group
                .iter()
                .map(|&i| {
                    let c = &components[i];
                    let d = c.mean - mean;
                    (c.cov + d * d.transpose()) * c.weight
                })
                .sum::<Mat3>()
                / weight
        } else {
            components[j].cov
        };
        merged.push(GaussianComponent { weight, mean, cov });
    }

    SourceMap {
        components: merged,
        max_components,
        prune_threshold,
        merge_threshold,
    }
}

/// Drops components lighter than the prune threshold and keeps at most
/// `max_components` of the heaviest. Weights are not renormalised.
pub fn reduce(map: SourceMap) -> SourceMap {
    let SourceMap {
        mut components,
        max_components,
        prune_threshold,
        merge_threshold,
    } = map;
    components.retain(|c| c.weight >= prune_threshold);
    if components.len() > max_components {
        components.sort_by(heavier_first);
        components.truncate(max_components);
    }
    SourceMap {
        components,
        max_components,
        prune_threshold,
        merge_threshold,
    }
}

/// Direction of a world point as seen from the robot.
fn predicted_direction(point: &Vec3, robot_pos: &Vec3, attitude: &RotationMatrix) -> Spherical {
    cartesian_to_spherical(&world_to_robot(point, robot_pos, attitude))
}

/// Angular likelihood of a DoA `angle` radians away from a predicted bearing,
/// per steradian.
pub fn bearing_likelihood(angle: f64, variance: f64) -> f64 {
    (-0.5 * angle * angle / variance).exp() / (2.0 * PI * variance)
}

/// Per-steradian clutter intensity.
fn clutter_density(cfg: &MapConfig) -> f64 {
    cfg.clutter_rate / (4.0 * PI)
}

/// Likelihood matrix `g[m][j]` of DoA `m` under component `j`.
fn likelihoods(doas: &[Spherical], robot_pos: &Vec3, attitude: &RotationMatrix, map: &SourceMap, cfg: &MapConfig) -> Vec<Vec<f64>> {
    let dirs: Vec<Spherical> = map
        .components
        .iter()
        .map(|c| predicted_direction(&c.mean, robot_pos, attitude))
        .collect();
    doas.iter()
        .map(|doa| {
            dirs.iter()
                .map(|d| bearing_likelihood(angle_between(doa, d), cfg.doa_variance))
                .collect()
        })
        .collect()
}

/// Natural log of the DoA evidence of a particle,
/// `-lambda - p_d W + sum_m ln(lambda / 4pi + p_d sum_j w_j g_j(omega_m))`
/// where `W` is the total (predicted) map weight.
pub fn doa_log_evidence(
    doas: &[Spherical],
    robot_pos: &Vec3,
    attitude: &RotationMatrix,
    map: &SourceMap,
    cfg: &MapConfig,
) -> f64 {
    let kappa = clutter_density(cfg);
    let g = likelihoods(doas, robot_pos, attitude, map, cfg);
    let mut log_l = -cfg.clutter_rate - cfg.p_d * map.total_weight();
    for row in &g {
        let support: f64 = row.iter().zip(&map.components).map(|(g, c)| c.weight * g).sum();
        log_l += (kappa + cfg.p_d * support).ln();
    }
    log_l
}

/// DoA evidence of a particle; see [`doa_log_evidence`].
pub fn doa_evidence(
    doas: &[Spherical],
    robot_pos: &Vec3,
    attitude: &RotationMatrix,
    map: &SourceMap,
    cfg: &MapConfig,
) -> f64 {
    doa_log_evidence(doas, robot_pos, attitude, map, cfg).exp()
}

/// Re-scores component weights against the DoAs of a keyframe:
/// `w_j <- (1 - p_d) w_j + sum_m p_d w_j g_jm / (kappa + sum_k p_d w_k g_km)`.
/// Means and covariances are left untouched.
pub fn update_weights(
    map: SourceMap,
    doas: &[Spherical],
    robot_pos: &Vec3,
    attitude: &RotationMatrix,
    cfg: &MapConfig,
) -> SourceMap {
    let kappa = clutter_density(cfg);
    let g = likelihoods(doas, robot_pos, attitude, &map, cfg);
    let mut next: Vec<f64> = map.components.iter().map(|c| (1.0 - cfg.p_d) * c.weight).collect();
    for row in &g {
        let denom = kappa
            + cfg.p_d
                * row
                    .iter()
                    .zip(&map.components)
                    .map(|(g, c)| c.weight * g)
                    .sum::<f64>();
        if !(denom > 0.0) {
            continue;
        }
        for (j, c) in map.components.iter().enumerate() {
            next[j] += cfg.p_d * c.weight * row[j] / denom;
        }
    }
    let mut map = map;
    for (c, w) in map.components.iter_mut().zip(next) {
        c.weight = w;
    }
    map
}

/// Largest great-circle angle between greedily matched DoAs of two sets. A
/// size mismatch returns `unmatched`.
pub fn doa_set_distance(a: &[Spherical], b: &[Spherical], unmatched: f64) -> f64 {
    if a.len() != b.len() {
        return unmatched;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(a.len() * b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            pairs.push((angle_between(x, y), i, j));
        }
    }
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for (d, i, j) in pairs {
        if used_a[i] || used_b[j] {
            continue;
        }
        used_a[i] = true;
        used_b[j] = true;
        worst = worst.max(d);
    }
    worst
}

/// Whether the current frame differs enough from the last keyframe in
/// translation, DoA set or rotation to become a keyframe itself.
pub fn keyframe_check(
    position: &Vec3,
    attitude: &RotationMatrix,
    doas: &[Spherical],
    kf: &KeyframeState,
    cfg: &MapConfig,
) -> bool {
    let moved = (position - kf.position).norm();
    let doa_change = doa_set_distance(doas, &kf.doas, cfg.kf_doa + 1.0);
    let relative = attitude * kf.attitude.inverse();
    let turned = rotation_to_euler(&relative).norm();
    moved > cfg.kf_distance || doa_change > cfg.kf_doa || turned > cfg.kf_rotation
}

/// Keeps `s_new` unless it jumped more than `s_lf` from `s_prev`.
pub fn limiting_filter(s_new: &Vec3, s_prev: &Vec3, s_lf: f64) -> Vec3 {
    if (s_new - s_prev).norm() <= s_lf {
        *s_new
    } else {
        *s_prev
    }
}

/// A source estimate tracked across frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTrack {
    pub position: Vec3,
    /// Consecutive frames in which the limiting filter rejected the cluster.
    pub rejections: u32,
    /// Consecutive frames without a confirmed cluster.
    pub missed: u32,
}

impl SourceTrack {
    pub fn new(position: Vec3) -> Self {
        Self {
            position,
            rejections: 0,
            missed: 0,
        }
    }
}

/// Clusters the mixture into confirmed sources: `(centroid, weight)` pairs.
///
/// Seeds at the heaviest unassigned component, absorbs every unassigned
/// component within `3 * sqrt(max eigenvalue)` of the seed covariance and
/// keeps clusters heavier than the confirmation threshold.
pub fn cluster_sources(map: &SourceMap, cfg: &MapConfig) -> Vec<(Vec3, f64)> {
    let mut comps: Vec<&GaussianComponent> = map.components.iter().collect();
    comps.sort_by(|a, b| heavier_first(a, b));
    let mut used = vec![false; comps.len()];
    let mut out = Vec::new();
    for s in 0..comps.len() {
        if used[s] {
            continue;
        }
        let seed = comps[s];
        let gate = 3.0 * max_eigenvalue(&seed.cov).max(0.0).sqrt();
        let mut weight = 0.0;
        let mut acc = Vec3::zeros();
        for i in s..comps.len() {
            if used[i] || (comps[i].mean - seed.mean).norm() > gate {
                continue;
            }
            used[i] = true;
            weight += comps[i].weight;
            acc += comps[i].mean * comps[i].weight;
        }
        if weight > cfg.source_weight_threshold {
            out.push((acc / weight, weight));
        }
    }
    out
}

/// Confirmed source estimates, passed through the limiting filter against
/// the previous tracks.
///
/// Clusters are paired one-to-one with previous tracks by increasing
/// distance. A paired cluster that jumps further than the filter threshold
/// is rejected, unless it has been rejected for more than
/// `limit_max_rejections` consecutive frames. Previous tracks without a
/// cluster are held for up to `limit_max_rejections` frames.
pub fn estimate_sources(map: &SourceMap, prev: &[SourceTrack], cfg: &MapConfig) -> Vec<SourceTrack> {
    let clusters: Vec<Vec3> = cluster_sources(map, cfg).into_iter().map(|(p, _)| p).collect();
    filter_tracks(&clusters, prev, cfg)
}

/// Limiting-filter bookkeeping of [`estimate_sources`] applied to given
/// source positions.
pub fn filter_tracks(clusters: &[Vec3], prev: &[SourceTrack], cfg: &MapConfig) -> Vec<SourceTrack> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (c, pos) in clusters.iter().enumerate() {
        for (p, track) in prev.iter().enumerate() {
            pairs.push(((pos - track.position).norm(), c, p));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut cluster_track: Vec<Option<usize>> = vec![None; clusters.len()];
    let mut track_used = vec![false; prev.len()];
    for (_, c, p) in pairs {
        if cluster_track[c].is_some() || track_used[p] {
            continue;
        }
        cluster_track[c] = Some(p);
        track_used[p] = true;
    }

    let mut out = Vec::with_capacity(clusters.len());
    for (c, pos) in clusters.iter().enumerate() {
        match cluster_track[c] {
            None => out.push(SourceTrack::new(*pos)),
            Some(p) => {
                let track = &prev[p];
                let kept = limiting_filter(pos, &track.position, cfg.limit_distance);
                if kept == *pos || track.rejections >= cfg.limit_max_rejections {
                    out.push(SourceTrack::new(*pos));
                } else {
                    out.push(SourceTrack {
                        position: track.position,
                        rejections: track.rejections + 1,
                        missed: 0,
                    });
                }
            }
        }
    }
    for (p, track) in prev.iter().enumerate() {
        if !track_used[p] && track.missed < cfg.limit_max_rejections {
            out.push(SourceTrack {
                missed: track.missed + 1,
                ..track.clone()
            });
        }
    }
    out
}
