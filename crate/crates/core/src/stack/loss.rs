use serde::{Deserialize, Serialize};

use super::model::{ForwardCache, Model, PerceptionOutput};
use super::tensor::Tensor;
use super::ModelError;

/// Probability floor inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    SquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Class(usize),
    Value(f64),
}

pub fn loss(output: &PerceptionOutput, target: Target, kind: LossKind) -> Result<f64, ModelError> {
    match (output, target, kind) {
        (PerceptionOutput::Classes(p), Target::Class(y), LossKind::CrossEntropy) => {
            let py = *p.get(y).ok_or(ModelError::LabelOutOfRange(y))?;
            Ok(-py.max(PROB_FLOOR).ln())
        }
        (PerceptionOutput::Offset(v), Target::Value(y), LossKind::SquaredError) => Ok((v - y) * (v - y)),
        _ => Err(ModelError::LossMismatch),
    }
}

/// d loss / d model output.
pub fn loss_output_grad(output: &PerceptionOutput, target: Target, kind: LossKind) -> Result<Tensor, ModelError> {
    match (output, target, kind) {
        (PerceptionOutput::Classes(p), Target::Class(y), LossKind::CrossEntropy) => {
            let py = *p.get(y).ok_or(ModelError::LabelOutOfRange(y))?;
            let mut g = Tensor::zeros(&[p.len()]);
            if py >= PROB_FLOOR {
                g.data[y] = -1.0 / py;
            }
            Ok(g)
        }
        (PerceptionOutput::Offset(v), Target::Value(y), LossKind::SquaredError) => {
            Ok(Tensor::from_vec(&[1], vec![2.0 * (v - y)]).unwrap())
        }
        _ => Err(ModelError::LossMismatch),
    }
}

pub fn default_kind(model: &Model) -> LossKind {
    match model.task() {
        super::model::Task::ObstacleClassifier => LossKind::CrossEntropy,
        super::model::Task::LaneRegressor => LossKind::SquaredError,
    }
}

fn output_from_cache(model: &Model, cache: &ForwardCache) -> PerceptionOutput {
    let out = cache.output();
    match model.task() {
        super::model::Task::ObstacleClassifier => PerceptionOutput::Classes(out.data.clone()),
        super::model::Task::LaneRegressor => PerceptionOutput::Offset(out.data[0]),
    }
}

/// Gradient of the loss with respect to the network input (CHW layout).
pub fn backward_input(model: &Model, cache: &ForwardCache, target: Target, kind: LossKind) -> Result<Tensor, ModelError> {
    let out = output_from_cache(model, cache);
    let g = loss_output_grad(&out, target, kind)?;
    Ok(model.backward(cache, &g, false)?.0)
}

/// Loss value and parameter gradients for one sample.
pub fn loss_and_param_grads(
    model: &Model,
    input: &Tensor,
    target: Target,
    kind: LossKind,
) -> Result<(f64, PerceptionOutput, Vec<Tensor>), ModelError> {
    let (out, cache) = model.forward_tensor(input)?;
    let l = loss(&out, target, kind)?;
    let g = loss_output_grad(&out, target, kind)?;
    let (_, pg) = model.backward(&cache, &g, true)?;
    Ok((l, out, pg.unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_values() {
        let sure = PerceptionOutput::Classes(vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(loss(&sure, Target::Class(1), LossKind::CrossEntropy).unwrap(), 0.0);
        let uniform = PerceptionOutput::Classes(vec![0.25; 4]);
        let l = loss(&uniform, Target::Class(2), LossKind::CrossEntropy).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);
        let l = loss(&sure, Target::Class(0), LossKind::CrossEntropy).unwrap();
        assert_eq!(l, -(1e-12f64).ln());
    }

    #[test]
    fn squared_error_and_errors() {
        let o = PerceptionOutput::Offset(0.7);
        assert_eq!(loss(&o, Target::Value(0.7), LossKind::SquaredError).unwrap(), 0.0);
        assert!(matches!(
            loss(&PerceptionOutput::Classes(vec![0.25; 4]), Target::Class(4), LossKind::CrossEntropy),
            Err(ModelError::LabelOutOfRange(4))
        ));
        assert!(matches!(
            loss(&o, Target::Value(0.0), LossKind::CrossEntropy),
            Err(ModelError::LossMismatch)
        ));
    }
}
