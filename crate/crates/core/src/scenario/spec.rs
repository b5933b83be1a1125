use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ScenarioError;
use crate::attacks::{AttackConfig, PatchSpec};
use crate::world::geom::Vec2;
use crate::world::map::{MapSpec, Pose, LANE_WIDTH};
use crate::world::state::{Agent, Behavior, Weather, WorldState};
use crate::world::vehicle::{VehicleClass, VehicleState, DEFAULT_DT, V_MAX};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapRef {
    Builtin(String),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoSpec {
    pub spawn: Pose,
    #[serde(default)]
    pub speed: f64,
    /// Route polyline; the first point is the start and the last the goal.
    pub route: Vec<Vec2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub class: VehicleClass,
    pub spawn: Pose,
    #[serde(default)]
    pub speed: f64,
    pub behavior: Behavior,
}

impl AgentSpec {
    pub fn vehicle(&self) -> VehicleState {
        VehicleState::new(self.class, self.spawn.position(), self.spawn.heading, self.speed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackBinding {
    Digital(AttackConfig),
    Patch(PatchSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub schema_version: u32,
    pub name: String,
    pub map: MapRef,
    pub ego: EgoSpec,
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub weather: Weather,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackBinding>,
    pub episode_ticks: u64,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Self = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        if s.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(ScenarioError::Schema(s.schema_version));
        }
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        let mut s = Self::from_json(&text)?;
        // Map paths are relative to the scenario file.
        if let MapRef::Path(p) = &s.map {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    s.map = MapRef::Path(dir.join(p));
                }
            }
        }
        Ok(s)
    }

    /// Loads a file if `name` is an existing path, otherwise looks up a built-in.
    pub fn resolve(name: &str) -> Result<Self, ScenarioError> {
        let p = Path::new(name);
        if p.exists() {
            return Self::load(p);
        }
        builtin(name).ok_or_else(|| ScenarioError::Unknown(name.to_string()))
    }

    pub fn load_map(&self) -> Result<MapSpec, ScenarioError> {
        let map = match &self.map {
            MapRef::Builtin(name) => MapSpec::builtin(name).ok_or_else(|| ScenarioError::Unknown(format!("map {name}")))?,
            MapRef::Path(p) => MapSpec::load(p)?,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<MapSpec, ScenarioError> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(ScenarioError::Schema(self.schema_version));
        }
        let map = self.load_map()?;
        let invalid = |msg: String| Err(ScenarioError::Invalid(msg));
        if self.ego.route.len() < 2 || self.ego.route.iter().any(|p| !p.is_finite()) {
            return invalid("ego route needs at least two finite points".into());
        }
        if !map.on_road(self.ego.spawn.position()) {
            return invalid("ego spawn is off the road".into());
        }
        if !(0.0..=V_MAX).contains(&self.ego.speed) {
            return invalid(format!("ego speed {} out of range", self.ego.speed));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if !map.on_road(a.spawn.position()) {
                return invalid(format!("agent {i} spawn is off the road"));
            }
            if !(0.0..=V_MAX).contains(&a.speed) {
                return invalid(format!("agent {i} speed {} out of range", a.speed));
            }
            if !a.behavior.within_bounds() {
                return invalid(format!("agent {i} behavior outside bounds"));
            }
        }
        if !self.weather.is_valid() {
            return invalid("weather out of range".into());
        }
        if self.episode_ticks == 0 {
            return invalid("episode_ticks must be positive".into());
        }
        match &self.attack {
            Some(AttackBinding::Digital(cfg)) => cfg.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?,
            Some(AttackBinding::Patch(p)) => {
                if p.attachment.agent >= self.agents.len() {
                    return invalid(format!("patch targets missing agent {}", p.attachment.agent));
                }
                p.texture.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            }
            None => {}
        }
        Ok(map)
    }

    pub fn initial_ego(&self) -> VehicleState {
        VehicleState::new(VehicleClass::Car, self.ego.spawn.position(), self.ego.spawn.heading, self.ego.speed)
    }

    pub fn build_world(&self) -> Result<WorldState, ScenarioError> {
        let map = self.validate()?;
        let mut w = WorldState::new(Arc::new(map), self.initial_ego(), self.seed);
        w.weather = self.weather;
        w.agents = self
            .agents
            .iter()
            .map(|a| Agent::new(a.vehicle(), a.behavior.clone()))
            .collect();
        Ok(w)
    }

    pub fn dt(&self) -> f64 {
        DEFAULT_DT
    }
}

fn pose(x: f64, y: f64) -> Pose {
    Pose { x, y, heading: 0.0 }
}

fn straight_route() -> Vec<Vec2> {
    vec![Vec2::new(0.0, 0.0), Vec2::new(150.0, 0.0)]
}

/// Ego alone on the straight road.
pub fn ego_only() -> ScenarioSpec {
    ScenarioSpec {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: "ego_only".into(),
        map: MapRef::Builtin("straight".into()),
        ego: EgoSpec {
            spawn: pose(0.0, 0.0),
            speed: 10.0,
            route: straight_route(),
        },
        agents: vec![],
        weather: Weather::default(),
        attack: None,
        episode_ticks: 400,
        seed: 1,
    }
}

/// A slower car 60 m ahead in the left lane that never leaves its lane.
pub fn cutin_benign() -> ScenarioSpec {
    ScenarioSpec {
        name: "cutin_benign".into(),
        agents: vec![AgentSpec {
            class: VehicleClass::Car,
            spawn: pose(60.0, LANE_WIDTH),
            speed: 8.0,
            behavior: Behavior::benign_cruise(),
        }],
        episode_ticks: 300,
        ..ego_only()
    }
}

/// Two lead vehicles in the left lane plus one in the ego lane far ahead.
pub fn dense_traffic() -> ScenarioSpec {
    let cruise = |class, x: f64, y: f64, speed| AgentSpec {
        class,
        spawn: pose(x, y),
        speed,
        behavior: Behavior::benign_cruise(),
    };
    ScenarioSpec {
        name: "dense_traffic".into(),
        agents: vec![
            cruise(VehicleClass::Car, 40.0, LANE_WIDTH, 7.0),
            cruise(VehicleClass::Truck, 70.0, LANE_WIDTH, 6.0),
            cruise(VehicleClass::Car, 90.0, 0.0, 9.0),
        ],
        episode_ticks: 300,
        seed: 2,
        ..ego_only()
    }
}

pub fn builtin(name: &str) -> Option<ScenarioSpec> {
    match name {
        "ego_only" => Some(ego_only()),
        "cutin_benign" => Some(cutin_benign()),
        "dense_traffic" => Some(dense_traffic()),
        _ => None,
    }
}

pub fn builtin_names() -> &'static [&'static str] {
    &["ego_only", "cutin_benign", "dense_traffic"]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate_and_roundtrip() {
        for name in builtin_names() {
            let s = builtin(name).unwrap();
            s.validate().unwrap();
            assert_eq!(ScenarioSpec::from_json(&s.to_json()).unwrap(), s);
            let w = s.build_world().unwrap();
            assert_eq!(w.agents.len(), s.agents.len());
        }
    }

    #[test]
    fn rejects_invalid() {
        let mut s = cutin_benign();
        s.agents[0].spawn.y = 40.0;
        assert!(matches!(s.validate(), Err(ScenarioError::Invalid(_))));
        let mut s = cutin_benign();
        s.agents[0].behavior = Behavior::CutIn {
            trigger_gap: 100.0,
            lateral_shift: 0.0,
            aggressiveness: 1.0,
        };
        assert!(s.validate().is_err());
        let mut s = cutin_benign();
        s.schema_version = 9;
        assert!(matches!(ScenarioSpec::from_json(&s.to_json()), Err(ScenarioError::Schema(9))));
        let mut s = ego_only();
        s.map = MapRef::Builtin("nowhere".into());
        assert!(s.validate().is_err());
    }
}
