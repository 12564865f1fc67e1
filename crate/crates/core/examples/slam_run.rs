//! Full SLAM on the reference scenario, DoA + DRR against the bearing-only
//! ablation on the same frames.
//!
//! ```bash
//! cargo run --release --example slam_run -- 1 2 3
//! ```

use std::time::Instant;

use ddslam::engine::{run, EngineConfig, Mode};
use ddslam::io::MetricsReport;
use ddslam::sim::{generate_scenario, ScenarioConfig};

fn main() -> ddslam::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![1] } else { seeds };
    for seed in seeds {
        let sc = generate_scenario(&ScenarioConfig { seed, ..Default::default() })?;
        println!("seed {seed}, true d_c {:.3} m", sc.critical_distance);
        for mode in [Mode::Dd, Mode::BearingOnly] {
            let started = Instant::now();
            let trace = run(&sc.frames, &sc.initial, &EngineConfig { seed, mode, ..Default::default() })?;
            let m = MetricsReport::from_trace(&trace)?;
            let worst_source = trace
                .records
                .iter()
                .skip(15)
                .filter_map(|r| r.source_errors()?.first().copied().flatten())
                .fold(0.0, f64::max);
            println!(
                "  {mode:?}: mean {:.3} m, max {:.3} m, worst source error after step 15 {worst_source:.3} m, final d_c {:.3} m ({:.2} s)",
                m.mean_error,
                m.max_error,
                m.final_dc,
                started.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
