//! Frame conventions: world/robot transforms, Euler angles and spherical
//! directions.
//!
//! ```bash
//! cargo run --example geometry
//! ```

use ddslam::geometry::{
    cartesian_to_spherical, euler_to_rotation, robot_to_world, rotation_to_euler, world_to_robot, EulerAngles, Vec3,
};

fn main() {
    let robot = Vec3::new(1.0, 1.0, 1.0);
    let attitude = euler_to_rotation(&EulerAngles::new(0.0, 0.0, 90f64.to_radians()));
    let source = Vec3::new(3.0, 3.0, 1.5);

    let local = world_to_robot(&source, &robot, &attitude);
    let dir = cartesian_to_spherical(&local);
    println!("source in robot frame: {:.3?}", local.as_slice());
    println!(
        "azimuth {:.2} deg, elevation {:.2} deg, range {:.3} m",
        dir.azimuth.to_degrees(),
        dir.elevation.to_degrees(),
        dir.radius
    );

    let back = robot_to_world(&local, &robot, &attitude);
    println!("round trip error: {:.2e} m", (back - source).norm());

    let e = rotation_to_euler(&attitude);
    println!("euler: roll {:.1} pitch {:.1} yaw {:.1} deg", e.roll.to_degrees(), e.pitch.to_degrees(), e.yaw.to_degrees());
}
