//! The driving stack under test: perception networks, planner and decision rule.

pub mod dataset;
pub mod loss;
pub mod model;
pub mod planner;
pub mod tensor;
pub mod train;
pub mod weights;
pub mod zoo;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{synthesize_dataset, LabeledFrame};
pub use loss::{backward_input, loss, LossKind, Target};
pub use model::{ForwardCache, LayerSpec, Model, ModelSpec, PerceptionOutput, Task};
pub use planner::{decide, pure_pursuit, DeciderConfig};
pub use tensor::Tensor;
pub use train::{train, TrainRecipe, TrainReport};
pub use weights::{load_weights, save_weights};
pub use zoo::ModularStack;

use crate::world::geom::Vec2;
use crate::world::raycast::RangeScan;
use crate::world::render::SensorFrame;
use crate::world::vehicle::{ControlCommand, VehicleClass, VehicleState};

pub const NUM_CLASSES: usize = 4;

/// Label space of the obstacle classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleClass {
    None = 0,
    Car = 1,
    Truck = 2,
    Pedestrian = 3,
}

impl ObstacleClass {
    pub const ALL: [ObstacleClass; 4] = [
        ObstacleClass::None,
        ObstacleClass::Car,
        ObstacleClass::Truck,
        ObstacleClass::Pedestrian,
    ];

    pub fn from_index(i: usize) -> Self {
        Self::ALL.get(i).copied().unwrap_or(ObstacleClass::None)
    }

    pub fn vehicle_class(self) -> Option<VehicleClass> {
        match self {
            ObstacleClass::None => None,
            ObstacleClass::Car => Some(VehicleClass::Car),
            ObstacleClass::Truck => Some(VehicleClass::Truck),
            ObstacleClass::Pedestrian => Some(VehicleClass::Pedestrian),
        }
    }
}

impl From<VehicleClass> for ObstacleClass {
    fn from(c: VehicleClass) -> Self {
        match c {
            VehicleClass::Car => ObstacleClass::Car,
            VehicleClass::Truck => ObstacleClass::Truck,
            VehicleClass::Pedestrian => ObstacleClass::Pedestrian,
        }
    }
}

pub struct StackInput<'a> {
    pub frame: &'a SensorFrame,
    pub scan: &'a RangeScan,
    pub ego: &'a VehicleState,
    pub route: &'a [Vec2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackOutput {
    pub command: ControlCommand,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane_offset: Option<f64>,
}

/// Sensor in, command out. Any driving stack plugs into the harness through this.
pub trait DrivingStack: Send + Sync {
    fn act(&self, input: &StackInput<'_>) -> Result<StackOutput, ModelError>;

    /// Differentiable perception model exposed to gradient attacks, if any.
    fn white_box(&self) -> Option<&Model> {
        None
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("incompatible layer stack: {0}")]
    Incompatible(String),
    #[error("input shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("forward cache does not belong to this model")]
    StaleCache,
    #[error("label {0} out of range")]
    LabelOutOfRange(usize),
    #[error("loss kind does not match the model task")]
    LossMismatch,
    #[error("non-finite network output")]
    NonFinite,
    #[error("training diverged in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset synthesis failed: {0}")]
    Dataset(#[from] crate::world::WorldError),
}

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    Version(u32),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tensor name mismatch: {0}")]
    Name(String),
    #[error("truncated weight file")]
    Truncated,
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
    #[error("bad model spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
