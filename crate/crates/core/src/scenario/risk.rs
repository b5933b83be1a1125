use serde::{Deserialize, Serialize};

use super::ScenarioSpec;
use crate::digest::float_or_inf;
use crate::harness::{run_episode, EpisodeOptions, EpisodeRecord, Executor, HarnessError};
use crate::stack::DrivingStack;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskWeights {
    pub w_coll: f64,
    pub w_ttc: f64,
    pub w_prox: f64,
}

impl Default for RiskWeights {
    fn default() -> Self {
        Self {
            w_coll: 10.0,
            w_ttc: 1.0,
            w_prox: 1.0,
        }
    }
}

impl RiskWeights {
    pub fn is_valid(&self) -> bool {
        [self.w_coll, self.w_ttc, self.w_prox].iter().all(|w| w.is_finite() && *w >= 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub collision: bool,
    #[serde(with = "float_or_inf")]
    pub min_ttc: f64,
    #[serde(with = "float_or_inf")]
    pub closest_approach: f64,
    pub route_completion: f64,
    pub objective: f64,
}

/// J = w_coll·[collision] + w_ttc/(1 + min_ttc) + w_prox·exp(−closest_approach).
/// Infinite TTC or distance contribute 0.
pub fn objective(collision: bool, min_ttc: f64, closest_approach: f64, w: &RiskWeights) -> f64 {
    let coll = if collision { w.w_coll } else { 0.0 };
    let ttc = if min_ttc.is_finite() { w.w_ttc / (1.0 + min_ttc) } else { 0.0 };
    let prox = if closest_approach.is_finite() {
        w.w_prox * (-closest_approach).exp()
    } else {
        0.0
    };
    coll + ttc + prox
}

impl RiskReport {
    pub fn from_record(record: &EpisodeRecord, w: &RiskWeights) -> Self {
        let m = crate::harness::compute_metrics(record);
        let min_ttc = if m.collision { 0.0 } else { m.min_ttc };
        Self {
            collision: m.collision,
            min_ttc,
            closest_approach: m.closest_approach,
            route_completion: m.route_completion,
            objective: objective(m.collision, min_ttc, m.closest_approach, w),
        }
    }
}

/// Runs the closed loop on `scenario` and scores it.
pub fn rollout_risk(
    scenario: &ScenarioSpec,
    stack: &dyn DrivingStack,
    executor: &mut dyn Executor,
    weights: &RiskWeights,
    opts: &EpisodeOptions,
) -> Result<(RiskReport, EpisodeRecord), HarnessError> {
    let (record, _) = run_episode(scenario, stack, executor, opts)?;
    Ok((RiskReport::from_record(&record, weights), record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_limits() {
        let w = RiskWeights::default();
        assert_eq!(objective(false, f64::INFINITY, f64::INFINITY, &w), 0.0);
        assert_eq!(objective(true, 0.0, 0.0, &w), 12.0);
        assert!((objective(false, 1.0, 1.0, &w) - (0.5 + (-1.0f64).exp())).abs() < 1e-15);
    }
}
