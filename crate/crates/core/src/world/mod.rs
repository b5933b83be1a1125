//! Deterministic 2-D driving world.

pub mod collision;
pub mod geom;
pub mod map;
pub mod ppm;
pub mod raycast;
pub mod render;
pub mod rng;
pub mod state;
pub mod ttc;
pub mod vehicle;

use thiserror::Error;

pub use collision::{detect_collisions, obb_overlap, BodyId};
pub use geom::{wrap_angle, Obb, Vec2};
pub use map::MapSpec;
pub use raycast::{raycast, RangeScan};
pub use render::{render_sensor, CameraConfig, SensorFrame};
pub use rng::CounterRng;
pub use state::{step, Agent, Behavior, WorldState, Weather};
pub use ttc::{closest_approach, min_ttc};
pub use vehicle::{ControlCommand, ControlSource, VehicleClass, VehicleState};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("state corruption: {0}")]
    StateCorruption(String),
    #[error("time step must be positive and finite, got {0}")]
    InvalidDt(f64),
    #[error("camera dimensions must be positive")]
    InvalidCamera,
    #[error("range scan needs at least one beam")]
    InvalidScan,
    #[error("invalid map: {0}")]
    InvalidMap(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("frame has {got} values, expected {expected}")]
    FrameShape { expected: usize, got: usize },
    #[error("frame values must lie in [0, 1]")]
    FrameRange,
    #[error("ppm: {0}")]
    Ppm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
