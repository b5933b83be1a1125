//! Minibatch SGD with seeded shuffling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{synthesize_dataset, LabeledFrame};
use super::zoo::classifier_spec;
use crate::world::CameraConfig;
use super::loss::{default_kind, loss_and_param_grads, Target};
use super::model::{Model, PerceptionOutput};
use super::tensor::Tensor;
use super::ModelError;

pub const BATCH_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Classifier only.
    pub final_accuracy: Option<f64>,
    /// Regressor only.
    pub final_mse: Option<f64>,
}

/// Everything that determines a trained classifier. The default is the reference
/// stack used throughout the test suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecipe {
    pub frames: usize,
    pub dataset_seed: u64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            frames: 2000,
            dataset_seed: 7,
            init_seed: 1,
            shuffle_seed: 3,
            epochs: 10,
            lr: 0.1,
        }
    }
}

impl TrainRecipe {
    pub fn dataset(&self, cam: &CameraConfig) -> Result<Vec<LabeledFrame>, ModelError> {
        Ok(synthesize_dataset(self.frames, self.dataset_seed, cam)?)
    }

    /// Synthesizes the dataset and trains a fresh default classifier on it.
    pub fn train_classifier(&self, cam: &CameraConfig) -> Result<(Model, TrainReport), ModelError> {
        let data = self.dataset(cam)?;
        let init = Model::init(classifier_spec(), self.init_seed)?;
        train(&init, &data, self.epochs, self.lr, self.shuffle_seed)
    }
}

fn inputs(model: &Model, data: &[LabeledFrame]) -> Result<Vec<Tensor>, ModelError> {
    data.iter().map(|f| model.frame_to_input(&f.frame)).collect()
}

/// Returns the trained copy of `model`; the input is left untouched.
pub fn train(model: &Model, data: &[LabeledFrame], epochs: usize, lr: f64, seed: u64) -> Result<(Model, TrainReport), ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let kind = default_kind(model);
    let xs = inputs(model, data)?;
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(BATCH_SIZE) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| loss_and_param_grads(&model, &xs[i], data[i].label, kind))
                .collect();
            // Reduce in batch order so the sum is bit-reproducible.
            let mut acc: Option<Vec<Tensor>> = None;
            for r in results {
                let (l, _, g) = r?;
                if !l.is_finite() {
                    return Err(ModelError::Divergence { epoch });
                }
                total += l;
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let scale = lr / batch.len() as f64;
            let grads = acc.unwrap();
            for (p, g) in model.params_mut().iter_mut().zip(&grads) {
                for (w, gv) in p.data.iter_mut().zip(&g.data) {
                    *w -= scale * gv;
                }
                p.round_to_f32();
                if !p.all_finite() {
                    return Err(ModelError::Divergence { epoch });
                }
            }
        }
        epoch_losses.push(total / data.len() as f64);
    }
    let (final_accuracy, final_mse) = evaluate(&model, data)?;
    Ok((
        model,
        TrainReport {
            epoch_losses,
            final_accuracy,
            final_mse,
        },
    ))
}

/// (accuracy, mse) on a dataset; whichever does not apply to the task is `None`.
pub fn evaluate(model: &Model, data: &[LabeledFrame]) -> Result<(Option<f64>, Option<f64>), ModelError> {
    let outs: Vec<_> = data
        .par_iter()
        .map(|f| model.predict(&f.frame))
        .collect::<Result<_, _>>()?;
    let mut correct = 0usize;
    let mut sq = 0.0;
    for (o, f) in outs.iter().zip(data) {
        match (o, f.label) {
            (PerceptionOutput::Classes(_), Target::Class(y)) => correct += (o.argmax() == Some(y)) as usize,
            (PerceptionOutput::Offset(v), Target::Value(y)) => sq += (v - y) * (v - y),
            _ => return Err(ModelError::LossMismatch),
        }
    }
    let n = data.len() as f64;
    Ok(match model.task() {
        super::model::Task::ObstacleClassifier => (Some(correct as f64 / n), None),
        super::model::Task::LaneRegressor => (None, Some(sq / n)),
    })
}
