//! Trajectory error against particle count, averaged over seed replicates.
//!
//! ```bash
//! cargo run --release --example particle_sweep
//! ```

use ddslam::io::{sweep, FileConfig};

fn main() -> ddslam::Result<()> {
    let rows = sweep(&FileConfig::default(), &[5, 8, 10, 15, 20], 5, None)?;
    println!("particles  mean error  max error");
    for row in &rows {
        println!("{:>9}  {:>10.4}  {:>9.4}", row.particles, row.mean_error(), row.max_error());
    }
    Ok(())
}
