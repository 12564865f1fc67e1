//! One keyframe of the locating step: EKF updates for several DRR windows of
//! the same DoA, then Gaussian-mixture fusion of the candidates.
//!
//! ```bash
//! cargo run --example ekf_locating
//! ```

use ddslam::acoustics::{distance_to_drr, drr_to_distance};
use ddslam::geometry::{cartesian_to_spherical, world_to_robot, Mat3, RotationMatrix, Vec3};
use ddslam::locating::{ekf_observe, ekf_update, gmm_fuse, log_particle_alpha, LocatingConfig, Measurement};

fn main() -> ddslam::Result<()> {
    let cfg = LocatingConfig::default();
    let source = Vec3::new(3.0, 3.0, 1.5);
    let truth = Vec3::new(1.0, 1.0, 1.0);
    let attitude = RotationMatrix::identity();
    let d_c = 1.5139;

    // dead reckoning has drifted by 0.3 m
    let x_pred = truth + Vec3::new(0.3, -0.2, 0.0);
    let v_pred = Vec3::new(1.0, 0.0, 0.0);
    let cov_pred = Mat3::identity() * 0.1;
    let q_x = Mat3::identity() * 0.1;

    let seen = cartesian_to_spherical(&world_to_robot(&source, &truth, &attitude));
    let obs = ekf_observe(&x_pred, &attitude, &source)?;
    let mut candidates = Vec::new();
    for offset in [-0.2, -0.1, 0.0, 0.1, 0.2] {
        let eta = distance_to_drr(seen.radius + offset, d_c);
        let meas = Measurement {
            azimuth: seen.azimuth,
            elevation: seen.elevation,
            distance: Some(drr_to_distance(eta, d_c)?),
        };
        candidates.push(ekf_update(&x_pred, &v_pred, &cov_pred, &obs, &meas, 1.0, &cfg)?);
    }
    let fused = gmm_fuse(&candidates, &x_pred, &q_x, &v_pred, cfg.smoothing)?;
    println!("predicted error {:.3} m", (x_pred - truth).norm());
    println!("fused error     {:.3} m", (fused.x - truth).norm());
    println!("fusion weights  {:.3?}", fused.weights);
    println!("log alpha       {:.3}", log_particle_alpha(&fused.x, &x_pred, &q_x));
    Ok(())
}
