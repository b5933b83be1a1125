//! Choosing which traffic agent to turn into the adversary.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::spec::SCENARIO_SCHEMA_VERSION;
use super::{ScenarioError, ScenarioSpec};
use crate::world::geom::{polyline_length, project_onto_polyline};
use crate::world::state::{advance_with_ego, Behavior};

pub const ENV_PROPOSER_URL: &str = "ADSANDBOX_PROPOSER_URL";
pub const ENV_PROPOSER_TIMEOUT_MS: &str = "ADSANDBOX_PROPOSER_TIMEOUT_MS";
pub const DEFAULT_PROPOSER_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    Heuristic,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryProposal {
    pub agent_index: usize,
    pub rationale: String,
    pub source: ProposalSource,
    /// Set when an external proposer failed and the heuristic was used instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalProposer {
    pub endpoint: String,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum Proposer {
    #[default]
    Heuristic,
    External(ExternalProposer),
}

impl Proposer {
    /// External proposer if the endpoint variable is set, heuristic otherwise.
    pub fn from_env() -> Self {
        match std::env::var(ENV_PROPOSER_URL) {
            Ok(url) if !url.is_empty() => {
                let timeout = std::env::var(ENV_PROPOSER_TIMEOUT_MS)
                    .ok()
                    .and_then(|s| s.parse::<u64>().ok())
                    .map(Duration::from_millis)
                    .unwrap_or(DEFAULT_PROPOSER_TIMEOUT);
                Proposer::External(ExternalProposer { endpoint: url, timeout })
            }
            _ => Proposer::Heuristic,
        }
    }
}

/// For each agent, the smallest distance from its center to the ego route while every
/// agent drives its benign version (cut-ins without lateral shift) for the episode.
pub fn benign_route_distances(scenario: &ScenarioSpec) -> Result<Vec<f64>, ScenarioError> {
    let mut world = scenario.build_world()?;
    for a in &mut world.agents {
        if let Behavior::CutIn { lateral_shift, .. } = &mut a.behavior {
            *lateral_shift = 0.0;
        }
    }
    let route = &scenario.ego.route;
    let dt = scenario.dt();
    let mut best = vec![f64::INFINITY; world.agents.len()];
    for tick in 0..=scenario.episode_ticks {
        for (b, a) in best.iter_mut().zip(&world.agents) {
            *b = b.min(project_onto_polyline(a.vehicle.position, route).0);
        }
        if tick < scenario.episode_ticks {
            let ego = world.ego.clone();
            world = advance_with_ego(&world, ego, dt);
        }
    }
    Ok(best)
}

pub fn heuristic_proposal(scenario: &ScenarioSpec) -> Result<AdversaryProposal, ScenarioError> {
    if scenario.agents.is_empty() {
        return Err(ScenarioError::NoAgents);
    }
    let d = benign_route_distances(scenario)?;
    let mut best = 0;
    for (i, v) in d.iter().enumerate() {
        if *v < d[best] {
            best = i;
        }
    }
    Ok(AdversaryProposal {
        agent_index: best,
        rationale: format!("closest benign approach to the ego route: {:.3} m", d[best]),
        source: ProposalSource::Heuristic,
        warning: None,
    })
}

#[derive(Debug, Serialize)]
struct AgentSummary {
    index: usize,
    class: crate::world::vehicle::VehicleClass,
    x: f64,
    y: f64,
    heading: f64,
    speed: f64,
}

#[derive(Debug, Serialize)]
struct RouteSummary {
    start: [f64; 2],
    end: [f64; 2],
    length: f64,
}

#[derive(Debug, Serialize)]
struct ProposerRequest {
    schema_version: u32,
    agents: Vec<AgentSummary>,
    ego_route: RouteSummary,
}

#[derive(Debug, Deserialize)]
struct ProposerReply {
    agent_index: usize,
    #[serde(default)]
    rationale: String,
}

fn request_for(scenario: &ScenarioSpec) -> ProposerRequest {
    let r = &scenario.ego.route;
    let (s, e) = (r[0], r[r.len() - 1]);
    ProposerRequest {
        schema_version: SCENARIO_SCHEMA_VERSION,
        agents: scenario
            .agents
            .iter()
            .enumerate()
            .map(|(index, a)| AgentSummary {
                index,
                class: a.class,
                x: a.spawn.x,
                y: a.spawn.y,
                heading: a.spawn.heading,
                speed: a.speed,
            })
            .collect(),
        ego_route: RouteSummary {
            start: [s.x, s.y],
            end: [e.x, e.y],
            length: polyline_length(r),
        },
    }
}

/// POSTs the scenario summary and returns the proposed index and rationale.
pub fn external_proposer_call(p: &ExternalProposer, scenario: &ScenarioSpec) -> Result<(usize, String), String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(p.timeout))
        .build()
        .into();
    let mut resp = agent
        .post(&p.endpoint)
        .send_json(request_for(scenario))
        .map_err(|e| format!("request failed: {e}"))?;
    let reply: ProposerReply = resp
        .body_mut()
        .read_json()
        .map_err(|e| format!("malformed reply: {e}"))?;
    Ok((reply.agent_index, reply.rationale))
}

/// Picks the adversary. External failures of any kind fall back to the heuristic and
/// are reported in `warning`.
pub fn propose_adversary(scenario: &ScenarioSpec, proposer: &Proposer) -> Result<AdversaryProposal, ScenarioError> {
    if scenario.agents.is_empty() {
        return Err(ScenarioError::NoAgents);
    }
    let Proposer::External(ext) = proposer else {
        return heuristic_proposal(scenario);
    };
    let warning = match external_proposer_call(ext, scenario) {
        Ok((i, rationale)) if i < scenario.agents.len() => {
            return Ok(AdversaryProposal {
                agent_index: i,
                rationale,
                source: ProposalSource::External,
                warning: None,
            })
        }
        Ok((i, _)) => format!("external proposer returned index {i} for {} agents", scenario.agents.len()),
        Err(e) => e,
    };
    log::warn!("falling back to heuristic proposer: {warning}");
    let mut p = heuristic_proposal(scenario)?;
    p.warning = Some(warning);
    Ok(p)
}
