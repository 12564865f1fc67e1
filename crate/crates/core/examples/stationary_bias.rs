//! Robot and source both still for 15 frames. Prints the distance from the
//! robot to the weighted centroid of the map, with and without keyframes.
//!
//! ```bash
//! cargo run --example stationary_bias
//! ```

use ddslam::engine::{Engine, EngineConfig};
use ddslam::sim::{generate_scenario, ScenarioConfig, TrajectoryMode};

fn main() -> ddslam::Result<()> {
    let sc = generate_scenario(&ScenarioConfig {
        mode: TrajectoryMode::StationarySegment,
        stationary_start: 0,
        stationary_steps: 15,
        steps: 15,
        p_d: 1.0,
        clutter_rate: 0.0,
        doa_noise_std: 0.0,
        ..Default::default()
    })?;
    let true_range = (sc.frames[0].truth.as_ref().expect("truth").sources[0] - sc.initial.position).norm();
    println!("true source range {true_range:.2} m");
    for keyframes in [false, true] {
        let mut engine = Engine::new(EngineConfig { keyframes, ..Default::default() }, &sc.initial, 0.0)?;
        let mut line = Vec::new();
        for frame in &sc.frames {
            engine.step(frame)?;
            let best = engine
                .particles()
                .iter()
                .max_by(|a, b| a.beta.total_cmp(&b.beta))
                .expect("particles");
            let c = best.map.centroid().expect("map has components");
            line.push(format!("{:.2}", (c - sc.initial.position).norm()));
        }
        println!("keyframes {keyframes:<5}: {}", line.join(" "));
    }
    Ok(())
}
