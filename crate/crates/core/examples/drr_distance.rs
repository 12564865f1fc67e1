//! Critical distance of a room and DRR-based distances with the rate limiter.
//!
//! ```bash
//! cargo run --example drr_distance
//! ```

use ddslam::acoustics::{critical_distance, distance_samples, distance_to_drr, drr_to_distance, DrrWindowSet, RateLimiter, RoomAcoustics};

fn main() -> ddslam::Result<()> {
    let room = RoomAcoustics {
        source_directivity: 1.0,
        receiver_directivity: 1.0,
        volume: 6.0 * 6.0 * 3.0,
        t60: 0.15,
    };
    let d_c = critical_distance(&room);
    println!("critical distance {d_c:.4} m");

    for d in [0.5, 1.0, d_c, 3.0, 6.0] {
        let eta = distance_to_drr(d, d_c);
        println!("  d = {d:.3} m  DRR = {eta:.4} ({:+.2} dB)  back to {:.3} m", 10.0 * eta.log10(), drr_to_distance(eta, d_c)?);
    }

    // a wrong critical distance scales every distance by the same factor
    let eta = distance_to_drr(2.0, d_c);
    for guess in [1.0, d_c, 2.5] {
        println!("  d_c guess {guess:.3} -> {:.3} m", drr_to_distance(eta, guess)?);
    }

    // an outlier window is clamped to within max_speed * dt * (1 + margin)
    let limiter = RateLimiter::default();
    let windows = DrrWindowSet::new(vec![vec![distance_to_drr(2.1, d_c), distance_to_drr(9.0, d_c)]])?;
    let d = distance_samples(&windows, d_c, &[Some(2.0)], &limiter, 0.5)?;
    println!("limited window distances: {:.3?}", d[0]);
    Ok(())
}
