//! Risk-driven evolution of a seed scenario.
//!
//! A (1+1) hill climb: the cut-in parameters of the adversary and of up to `n`
//! background vehicles receive Gaussian mutations clamped to their bounds, new
//! background vehicles are occasionally introduced at free spawn points, and a
//! candidate replaces the incumbent only if it strictly raises the risk objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::proposer::{propose_adversary, AdversaryProposal, Proposer};
use super::risk::{rollout_risk, RiskReport, RiskWeights};
use super::spec::AgentSpec;
use super::{ScenarioError, ScenarioSpec};
use crate::harness::episode::run_digest;
use crate::harness::{EpisodeOptions, Executor, HarnessError};
use crate::stack::DrivingStack;
use crate::world::state::{Behavior, AGGRESSIVENESS_BOUNDS, LATERAL_SHIFT_BOUNDS, TRIGGER_GAP_BOUNDS};
use crate::world::vehicle::VehicleClass;

/// Minimum distance between a new background agent and any other vehicle at spawn.
pub const SPAWN_CLEARANCE: f64 = 8.0;
pub const BACKGROUND_SPEED: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutationScales {
    pub trigger_gap: f64,
    pub lateral_shift: f64,
    pub aggressiveness: f64,
}

impl Default for MutationScales {
    fn default() -> Self {
        Self {
            trigger_gap: 5.0,
            lateral_shift: 1.0,
            aggressiveness: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub iterations: usize,
    pub scales: MutationScales,
    /// Background vehicles mutated jointly with the adversary; new ones are
    /// introduced while fewer exist.
    pub n_background: usize,
    pub introduce_probability: f64,
    pub weights: RiskWeights,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            scales: MutationScales::default(),
            n_background: 1,
            introduce_probability: 0.25,
            weights: RiskWeights::default(),
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let s = &self.scales;
        let scales_ok = [s.trigger_gap, s.lateral_shift, s.aggressiveness]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !scales_ok {
            return Err(ScenarioError::Invalid("mutation scales must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.introduce_probability) {
            return Err(ScenarioError::Invalid("introduce_probability must lie in [0, 1]".into()));
        }
        if !self.weights.is_valid() {
            return Err(ScenarioError::Invalid("risk weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutInParams {
    pub trigger_gap: f64,
    pub lateral_shift: f64,
    pub aggressiveness: f64,
}

impl CutInParams {
    pub fn of(b: &Behavior) -> Option<Self> {
        match *b {
            Behavior::CutIn {
                trigger_gap,
                lateral_shift,
                aggressiveness,
            } => Some(Self {
                trigger_gap,
                lateral_shift,
                aggressiveness,
            }),
            Behavior::Waypoints { .. } => None,
        }
    }

    pub fn behavior(&self) -> Behavior {
        Behavior::CutIn {
            trigger_gap: self.trigger_gap,
            lateral_shift: self.lateral_shift,
            aggressiveness: self.aggressiveness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    /// 0 is the seed scenario.
    pub iteration: usize,
    pub accepted: bool,
    pub params: CutInParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub introduced_agent: Option<usize>,
    pub report: RiskReport,
    /// Objective of the incumbent after this iteration.
    pub best_objective: f64,
    pub run_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionResult {
    pub scenario: ScenarioSpec,
    pub adversary: AdversaryProposal,
    pub seed_report: RiskReport,
    pub best_report: RiskReport,
    pub lineage: Vec<LineageEntry>,
}

impl EvolutionResult {
    pub fn lineage_jsonl(&self) -> String {
        self.lineage
            .iter()
            .map(|e| serde_json::to_string(e).expect("lineage serializes") + "\n")
            .collect()
    }

    /// Objectives of accepted candidates in order, starting with the seed.
    pub fn accepted_objectives(&self) -> Vec<f64> {
        self.lineage
            .iter()
            .filter(|e| e.accepted)
            .map(|e| e.report.objective)
            .collect()
    }
}

fn clamp_to((lo, hi): (f64, f64), v: f64) -> f64 {
    v.clamp(lo, hi)
}

fn mutate(p: &CutInParams, s: &MutationScales, rng: &mut ChaCha8Rng) -> CutInParams {
    let mut jitter = |scale: f64| {
        if scale == 0.0 {
            0.0
        } else {
            Normal::new(0.0, scale).expect("finite scale").sample(rng)
        }
    };
    CutInParams {
        trigger_gap: clamp_to(TRIGGER_GAP_BOUNDS, p.trigger_gap + jitter(s.trigger_gap)),
        lateral_shift: clamp_to(LATERAL_SHIFT_BOUNDS, p.lateral_shift + jitter(s.lateral_shift)),
        aggressiveness: clamp_to(AGGRESSIVENESS_BOUNDS, p.aggressiveness + jitter(s.aggressiveness)),
    }
}

/// Map spawn points at least [`SPAWN_CLEARANCE`] from the ego and every agent.
pub fn free_spawn_points(scenario: &ScenarioSpec) -> Result<Vec<crate::world::map::Pose>, ScenarioError> {
    let map = scenario.load_map()?;
    let occupied: Vec<_> = std::iter::once(scenario.ego.spawn.position())
        .chain(scenario.agents.iter().map(|a| a.spawn.position()))
        .collect();
    Ok(map
        .spawn_points
        .iter()
        .map(|s| s.pose)
        .filter(|p| occupied.iter().all(|o| o.distance(p.position()) >= SPAWN_CLEARANCE))
        .collect())
}

/// The first `n` agents other than the adversary.
fn background_indices(s: &ScenarioSpec, adversary: usize, n: usize) -> Vec<usize> {
    (0..s.agents.len()).filter(|&i| i != adversary).take(n).collect()
}

/// Evolves `seed` against `stack`. Deterministic for a fixed config and proposer reply.
pub fn evolve(
    seed: &ScenarioSpec,
    stack: &dyn DrivingStack,
    cfg: &EvolutionConfig,
    proposer: &Proposer,
    executor: &mut dyn Executor,
    opts: &EpisodeOptions,
) -> Result<EvolutionResult, HarnessError> {
    cfg.validate()?;
    seed.validate()?;
    let adversary = propose_adversary(seed, proposer)?;
    let adv = adversary.agent_index;

    let mut incumbent = seed.clone();
    if CutInParams::of(&incumbent.agents[adv].behavior).is_none() {
        incumbent.agents[adv].behavior = Behavior::benign_cruise();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (seed_report, _) = rollout_risk(&incumbent, stack, executor, &cfg.weights, opts)?;
    let mut best = seed_report.clone();
    let mut lineage = vec![LineageEntry {
        iteration: 0,
        accepted: true,
        params: CutInParams::of(&incumbent.agents[adv].behavior).expect("cut-in"),
        introduced_agent: None,
        report: seed_report.clone(),
        best_objective: best.objective,
        run_digest: run_digest(&incumbent, opts),
    }];

    for iteration in 1..=cfg.iterations {
        let mut cand = incumbent.clone();
        let params = mutate(&CutInParams::of(&cand.agents[adv].behavior).expect("cut-in"), &cfg.scales, &mut rng);
        cand.agents[adv].behavior = params.behavior();

        for i in background_indices(&cand, adv, cfg.n_background) {
            if let Some(p) = CutInParams::of(&cand.agents[i].behavior) {
                cand.agents[i].behavior = mutate(&p, &cfg.scales, &mut rng).behavior();
            }
        }

        let mut introduced_agent = None;
        let n_bg = cand.agents.len() - 1;
        if n_bg < cfg.n_background && rng.random::<f64>() < cfg.introduce_probability {
            let free = free_spawn_points(&cand)?;
            if !free.is_empty() {
                let pose = free[rng.random_range(0..free.len())];
                cand.agents.push(AgentSpec {
                    class: VehicleClass::Car,
                    spawn: pose,
                    speed: BACKGROUND_SPEED,
                    behavior: Behavior::benign_cruise(),
                });
                introduced_agent = Some(cand.agents.len() - 1);
            }
        }

        let (report, _) = rollout_risk(&cand, stack, executor, &cfg.weights, opts)?;
        let accepted = report.objective > best.objective;
        if accepted {
            best = report.clone();
            incumbent = cand.clone();
        }
        lineage.push(LineageEntry {
            iteration,
            accepted,
            params,
            introduced_agent,
            report,
            best_objective: best.objective,
            run_digest: run_digest(&cand, opts),
        });
    }

    incumbent.name = format!("{}_evolved", seed.name);
    Ok(EvolutionResult {
        scenario: incumbent,
        adversary,
        seed_report,
        best_report: best,
        lineage,
    })
}
