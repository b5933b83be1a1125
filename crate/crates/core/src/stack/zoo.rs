//! Default network architectures and the on-disk stack bundle.

use std::fs;
use std::path::Path;

use super::model::{LayerSpec, Model, ModelSpec, Task};
use super::planner::{decide, DeciderConfig};
use super::weights::{load_weights, save_weights};
use super::{DrivingStack, ModelError, StackInput, StackOutput, WeightsError, NUM_CLASSES};
use crate::world::render::CameraConfig;

/// Two conv blocks and two dense layers over a 64×64 RGB frame.
pub fn classifier_spec() -> ModelSpec {
    ModelSpec {
        task: Task::ObstacleClassifier,
        input_shape: [3, 64, 64],
        layers: vec![
            LayerSpec::Conv2d {
                kernel: 3,
                stride: 2,
                out_channels: 8,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Conv2d {
                kernel: 3,
                stride: 1,
                out_channels: 16,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { out: 32 },
            LayerSpec::Relu,
            LayerSpec::Dense { out: NUM_CLASSES },
            LayerSpec::Softmax,
        ],
    }
}

/// One conv block and two dense layers producing a scalar lane offset.
pub fn regressor_spec() -> ModelSpec {
    ModelSpec {
        task: Task::LaneRegressor,
        input_shape: [3, 64, 64],
        layers: vec![
            LayerSpec::Conv2d {
                kernel: 3,
                stride: 2,
                out_channels: 8,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { out: 16 },
            LayerSpec::Relu,
            LayerSpec::Dense { out: 1 },
        ],
    }
}

pub const CLASSIFIER_FILE: &str = "classifier.advw";
pub const REGRESSOR_FILE: &str = "regressor.advw";
pub const DECIDER_FILE: &str = "decider.json";

/// Perception networks plus the rule-based decider.
#[derive(Debug, Clone)]
pub struct ModularStack {
    pub classifier: Model,
    pub regressor: Option<Model>,
    pub decider: DeciderConfig,
}

impl ModularStack {
    pub fn new(classifier: Model) -> Self {
        Self {
            classifier,
            regressor: None,
            decider: DeciderConfig::default(),
        }
    }

    /// Reads a stack directory. Specs are stored next to the weights as
    /// `<name>.spec.json`; missing specs fall back to the defaults above.
    pub fn load(dir: &Path) -> Result<Self, WeightsError> {
        let spec_or = |name: &str, default: ModelSpec| -> Result<ModelSpec, WeightsError> {
            let p = dir.join(format!("{name}.spec.json"));
            if p.exists() {
                serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| WeightsError::Spec(e.to_string()))
            } else {
                Ok(default)
            }
        };
        let classifier = load_weights(&dir.join(CLASSIFIER_FILE), &spec_or("classifier", classifier_spec())?)?;
        let reg_path = dir.join(REGRESSOR_FILE);
        let regressor = if reg_path.exists() {
            Some(load_weights(&reg_path, &spec_or("regressor", regressor_spec())?)?)
        } else {
            None
        };
        let dec_path = dir.join(DECIDER_FILE);
        let decider = if dec_path.exists() {
            serde_json::from_str(&fs::read_to_string(dec_path)?).map_err(|e| WeightsError::Spec(e.to_string()))?
        } else {
            DeciderConfig::default()
        };
        Ok(Self {
            classifier,
            regressor,
            decider,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), WeightsError> {
        fs::create_dir_all(dir)?;
        save_weights(&self.classifier, &dir.join(CLASSIFIER_FILE))?;
        fs::write(dir.join("classifier.spec.json"), pretty(self.classifier.spec()))?;
        if let Some(r) = &self.regressor {
            save_weights(r, &dir.join(REGRESSOR_FILE))?;
            fs::write(dir.join("regressor.spec.json"), pretty(r.spec()))?;
        }
        fs::write(dir.join(DECIDER_FILE), pretty(&self.decider))?;
        Ok(())
    }
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializes")
}

impl DrivingStack for ModularStack {
    fn act(&self, input: &StackInput<'_>) -> Result<StackOutput, ModelError> {
        let classes = self.classifier.predict(input.frame)?;
        let lane_offset = match &self.regressor {
            Some(r) => match r.predict(input.frame)? {
                super::PerceptionOutput::Offset(v) => Some(v),
                _ => None,
            },
            None => None,
        };
        let command = decide(&classes, input.scan, &self.decider, input.route, input.ego);
        Ok(StackOutput {
            command,
            classes: Some(classes.values()),
            lane_offset,
        })
    }

    fn white_box(&self) -> Option<&Model> {
        Some(&self.classifier)
    }
}

/// Camera every zoo model expects.
pub fn default_camera() -> CameraConfig {
    CameraConfig::default()
}
