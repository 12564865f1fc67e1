//! Preintegrates one second of IMU samples from a simulated turn and dead
//! reckons across it, once from clean and once from noisy samples.
//!
//! ```bash
//! cargo run --example preintegration
//! ```

use ddslam::imu::{dead_reckon, preintegrate, ImuNoiseConfig, IncrementFrame};
use ddslam::sim::{generate_scenario, ScenarioConfig};

fn main() -> ddslam::Result<()> {
    let noise = ImuNoiseConfig::default();
    for (label, accel, gyro) in [("clean", 0.0, 0.0), ("noisy", 1e-3, 1e-2)] {
        let sc = generate_scenario(&ScenarioConfig {
            accel_variance: accel,
            gyro_variance: gyro,
            steps: 10,
            seed: 4,
            ..Default::default()
        })?;
        let mut state = sc.initial.clone();
        let mut t = 0.0;
        println!("{label}:");
        for frame in &sc.frames {
            let pre = preintegrate(&frame.imu, t, &noise)?;
            state = dead_reckon(&state, &pre, &noise.gravity, IncrementFrame::Start);
            t = frame.t;
            let truth = frame.truth.as_ref().expect("simulated frames carry truth");
            println!(
                "  t = {:>4.1} s  |dV| = {:.3} m/s  position error {:.2e} m  trace(cov_pos) {:.2e}",
                frame.t,
                pre.d_vel.norm(),
                (state.position - truth.position).norm(),
                pre.cov_pos.trace()
            );
        }
    }
    Ok(())
}
