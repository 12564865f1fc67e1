//! Generates the reference scenario, writes it as a frame file and reads it
//! back.
//!
//! ```bash
//! cargo run --example simulate -- /tmp/frames.jsonl
//! ```

use std::path::PathBuf;

use ddslam::io::{load_frames, save_frames};
use ddslam::sim::{generate_scenario, ScenarioConfig};

fn main() -> ddslam::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("ddslam_frames.jsonl"));
    let cfg = ScenarioConfig::default();
    let sc = generate_scenario(&cfg)?;
    save_frames(&sc, &path)?;
    let back = load_frames(&path)?;

    let doas: usize = sc.frames.iter().map(|f| f.doas.len()).sum();
    let samples: usize = sc.frames.iter().map(|f| f.imu.len()).sum();
    println!("{} frames, {samples} IMU samples, {doas} DoAs (clutter included)", sc.frames.len());
    println!("critical distance {:.4} m", sc.critical_distance);
    println!("wrote {} and read it back identically: {}", path.display(), back == sc);
    Ok(())
}
