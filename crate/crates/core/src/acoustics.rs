//! Direct-to-reverberant ratio (DRR) to distance conversion.
//!
//! At the critical distance the direct and reverberant energies are equal, so
//! the broadband DRR falls with the square of the source distance and a
//! distance follows from `d = d_c / sqrt(eta)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// DRR estimates for one frame: `windows[m][mu]` is the DRR measured in the
/// direction of DoA `m` over windowed signal frame `mu`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DrrWindowSet {
    pub windows: Vec<Vec<f64>>,
}

impl DrrWindowSet {
    pub fn new(windows: Vec<Vec<f64>>) -> Result<Self> {
        let set = Self { windows };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for (m, w) in self.windows.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::Data(format!("DoA {m} has no DRR windows")));
            }
            if let Some(eta) = w.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
                return Err(Error::Data(format!("DoA {m} has non-positive DRR {eta}")));
            }
        }
        Ok(())
    }

    pub fn num_doas(&self) -> usize {
        self.windows.len()
    }
}

/// Room and transducer properties that fix the critical distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoomAcoustics {
    pub source_directivity: f64,
    pub receiver_directivity: f64,
    /// Room volume in m^3.
    pub volume: f64,
    /// Reverberation time in seconds.
    pub t60: f64,
}

/// Source distance implied by a DRR measurement.
pub fn drr_to_distance(eta: f64, d_c: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::Data(format!("DRR must be positive, got {eta}")));
    }
    if !(d_c > 0.0) {
        return Err(Error::Data(format!("critical distance must be positive, got {d_c}")));
    }
    Ok(d_c / eta.sqrt())
}

/// DRR that a source at `distance` produces for critical distance `d_c`.
pub fn distance_to_drr(distance: f64, d_c: f64) -> f64 {
    let ratio = d_c / distance;
    ratio * ratio
}

/// `0.1 * sqrt(rho_s rho_r) * sqrt(V / (pi T60))`.
pub fn critical_distance(room: &RoomAcoustics) -> f64 {
    0.1 * (room.source_directivity * room.receiver_directivity).sqrt()
        * (room.volume / (PI * room.t60)).sqrt()
}

/// Clamps how far a distance sample may move from the previous estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateLimiter {
    /// Maximum robot speed in m/s.
    pub max_speed: f64,
    /// Relative slack on top of `max_speed * dt`.
    pub margin: f64,
}

impl Default for RateLimiter {
    fn default() -> Self {
        Self {
            max_speed: 2.0,
            margin: 0.5,
        }
    }
}

impl RateLimiter {
    pub fn limit(&self, distance: f64, prev: Option<f64>, dt: f64) -> f64 {
        match prev {
            Some(p) => {
                let bound = self.max_speed * dt * (1.0 + self.margin);
                distance.clamp(p - bound, p + bound)
            }
            None => distance,
        }
    }
}

/// Per-window distance samples for every DoA, `out[m][mu]`.
///
/// `prev[m]` is the last fused distance of whatever source DoA `m` is
/// associated with, if any. Non-positive DRR values produce an error.
pub fn distance_samples(
    windows: &DrrWindowSet,
    d_c_hat: f64,
    prev: &[Option<f64>],
    limiter: &RateLimiter,
    dt: f64,
) -> Result<Vec<Vec<f64>>> {
    windows
        .windows
        .iter()
        .enumerate()
        .map(|(m, w)| {
            let p = prev.get(m).copied().flatten();
            w.iter()
                .map(|&eta| drr_to_distance(eta, d_c_hat).map(|d| limiter.limit(d, p, dt)))
                .collect()
        })
        .collect()
}
