use serde::{Deserialize, Serialize};

use super::geom::{wrap_angle, Obb, Vec2};

pub const WHEELBASE: f64 = 2.5;
pub const A_MAX: f64 = 3.0;
pub const V_MAX: f64 = 20.0;
pub const STEER_MAX: f64 = 0.6;
pub const DEFAULT_DT: f64 = 0.05;

/// Body classes that can appear in the world. The perception label space is
/// these three plus "none", see [`crate::stack::ObstacleClass`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleClass {
    Car,
    Truck,
    Pedestrian,
}

impl VehicleClass {
    pub const ALL: [VehicleClass; 3] = [VehicleClass::Car, VehicleClass::Truck, VehicleClass::Pedestrian];

    /// (length, width) in meters.
    pub fn default_dims(self) -> (f64, f64) {
        match self {
            VehicleClass::Car => (4.5, 1.8),
            VehicleClass::Truck => (8.0, 2.5),
            VehicleClass::Pedestrian => (1.0, 1.0),
        }
    }

    pub fn color(self) -> [f64; 3] {
        match self {
            VehicleClass::Car => [0.85, 0.10, 0.10],
            VehicleClass::Truck => [0.10, 0.30, 0.85],
            VehicleClass::Pedestrian => [0.95, 0.85, 0.10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub steer: f64,
    pub length: f64,
    pub width: f64,
    pub class: VehicleClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture_ref: Option<String>,
}

impl VehicleState {
    pub fn new(class: VehicleClass, position: Vec2, heading: f64, speed: f64) -> Self {
        let (length, width) = class.default_dims();
        Self {
            position,
            heading: wrap_angle(heading),
            speed,
            steer: 0.0,
            length,
            width,
            class,
            texture_ref: None,
        }
    }

    pub fn footprint(&self) -> Obb {
        Obb::new(self.position, self.heading, self.length, self.width)
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::from_angle(self.heading) * self.speed
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite()
            && self.heading.is_finite()
            && self.speed.is_finite()
            && self.steer.is_finite()
            && self.length.is_finite()
            && self.width.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSource {
    Autonomy,
    Human,
}

/// Normalized actuation request. Components are clamped at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawCommand")]
pub struct ControlCommand {
    throttle: f64,
    steer_cmd: f64,
    pub source: ControlSource,
}

#[derive(Deserialize)]
struct RawCommand {
    throttle: f64,
    steer_cmd: f64,
    source: ControlSource,
}

impl From<RawCommand> for ControlCommand {
    fn from(r: RawCommand) -> Self {
        ControlCommand::new(r.throttle, r.steer_cmd, r.source)
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

impl ControlCommand {
    pub fn new(throttle: f64, steer_cmd: f64, source: ControlSource) -> Self {
        Self {
            throttle: clamp_unit(throttle),
            steer_cmd: clamp_unit(steer_cmd),
            source,
        }
    }

    pub fn autonomy(throttle: f64, steer_cmd: f64) -> Self {
        Self::new(throttle, steer_cmd, ControlSource::Autonomy)
    }

    pub fn idle() -> Self {
        Self::autonomy(0.0, 0.0)
    }

    pub fn throttle(&self) -> f64 {
        self.throttle
    }

    pub fn steer_cmd(&self) -> f64 {
        self.steer_cmd
    }

    /// Steering angle in radians.
    pub fn steer_angle(&self) -> f64 {
        self.steer_cmd * STEER_MAX
    }
}

/// Kinematic bicycle update for a single vehicle.
pub fn step_vehicle(v: &VehicleState, cmd: &ControlCommand, dt: f64) -> VehicleState {
    let steer = cmd.steer_angle();
    let speed = (v.speed + A_MAX * cmd.throttle() * dt).clamp(0.0, V_MAX);
    let heading = wrap_angle(v.heading + (v.speed / WHEELBASE) * steer.tan() * dt);
    let (s, c) = heading.sin_cos();
    let position = Vec2::new(v.position.x + speed * c * dt, v.position.y + speed * s * dt);
    VehicleState {
        position,
        heading,
        speed,
        steer,
        ..v.clone()
    }
}
