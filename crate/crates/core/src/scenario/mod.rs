//! Scenario schema, adversary selection and risk-driven scenario evolution.

use thiserror::Error;

use crate::world::WorldError;

pub mod evolve;
pub mod proposer;
pub mod risk;
pub mod spec;

pub use evolve::{evolve, EvolutionConfig, EvolutionResult, LineageEntry, MutationScales};
pub use proposer::{propose_adversary, AdversaryProposal, ExternalProposer, ProposalSource, Proposer};
pub use risk::{objective, rollout_risk, RiskReport, RiskWeights};
pub use spec::{builtin, AgentSpec, AttackBinding, EgoSpec, MapRef, ScenarioSpec, SCENARIO_SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unsupported scenario schema version {0}")]
    Schema(u32),
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown scenario or map {0}")]
    Unknown(String),
    #[error("scenario has no agents")]
    NoAgents,
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
