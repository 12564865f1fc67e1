pub mod acoustics;
pub mod error;
pub mod geometry;
pub mod imu;
pub mod mapping;
pub mod locating;
pub mod sim;
pub mod engine;
pub mod io;

pub use engine::{run, Engine, EngineConfig, Mode, SlamEstimate, Trace, TraceRecord};
pub use error::{Error, Result};
pub use sim::{generate_scenario, MeasurementFrame, Scenario, ScenarioConfig};
