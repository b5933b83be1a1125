use std::path::Path;

use serde::{Deserialize, Serialize};

use super::record::{EpisodeRecord, Insertion};
use super::HarnessError;
use crate::world::ppm;
use crate::world::render::{render_sensor, CameraConfig};
use crate::world::state::{advance_with_ego, step_ego, Agent, WorldState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub ticks_checked: u64,
    /// Tick whose recorded control no longer reproduces the recorded next state
    /// (or whose recorded state already disagrees).
    pub first_divergence: Option<u64>,
    pub detail: String,
}

impl ReplayReport {
    pub fn matched(&self) -> bool {
        self.first_divergence.is_none()
    }
}

/// Re-simulates a record from its scenario and recorded controls. `visit` sees every
/// pre-control world.
pub fn replay_with(record: &EpisodeRecord, mut visit: impl FnMut(&WorldState) -> Result<(), HarnessError>) -> Result<ReplayReport, HarnessError> {
    let dt = record.header.dt;
    let mut world = record.header.scenario.build_world()?;
    let diverged = |tick: u64, checked: u64, detail: String| ReplayReport {
        ticks_checked: checked,
        first_divergence: Some(tick),
        detail,
    };
    for (i, t) in record.ticks.iter().enumerate() {
        for ins in &t.insertions {
            if let Insertion::Agent(a) = ins {
                world.agents.push(Agent::new(a.vehicle(), a.behavior.clone()));
            }
        }
        if world.digest() != t.state_digest {
            return Ok(diverged(t.tick, i as u64, "recorded state differs".into()));
        }
        visit(&world)?;
        let next = match step_ego(&world.ego, &t.control, dt) {
            Ok(ego) => advance_with_ego(&world, ego, dt),
            Err(e) => return Ok(diverged(t.tick, i as u64, e.to_string())),
        };
        if next.digest() != t.next_digest {
            return Ok(diverged(t.tick, i as u64 + 1, "control does not reproduce the next state".into()));
        }
        world = next;
    }
    let n = record.ticks.len() as u64;
    if world.digest() != record.summary.final_digest {
        return Ok(diverged(n, n, "final state differs".into()));
    }
    Ok(ReplayReport {
        ticks_checked: n,
        first_divergence: None,
        detail: "full match".into(),
    })
}

pub fn replay(record: &EpisodeRecord) -> Result<ReplayReport, HarnessError> {
    replay_with(record, |_| Ok(()))
}

/// Replays and writes the native sensor frame of every tick as `frame_NNNNN.ppm`.
pub fn replay_frames(record: &EpisodeRecord, dir: &Path, cam: &CameraConfig) -> Result<ReplayReport, HarnessError> {
    std::fs::create_dir_all(dir)?;
    replay_with(record, |w| {
        let f = render_sensor(w, cam)?;
        let path = dir.join(format!("frame_{:05}.ppm", w.tick));
        std::fs::write(path, ppm::encode(f.width, f.height, &f.pixels))?;
        Ok(())
    })
}
