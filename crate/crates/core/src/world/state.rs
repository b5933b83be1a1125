use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::geom::{wrap_angle, Vec2};
use super::map::MapSpec;
use super::rng::CounterRng;
use super::vehicle::{step_vehicle, ControlCommand, VehicleState};
use super::WorldError;

/// Declared bounds for the three cut-in parameters.
pub const TRIGGER_GAP_BOUNDS: (f64, f64) = (0.0, 60.0);
pub const LATERAL_SHIFT_BOUNDS: (f64, f64) = (-8.0, 8.0);
pub const AGGRESSIVENESS_BOUNDS: (f64, f64) = (0.5, 6.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedWaypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

/// Scripted motion of a traffic agent.
///
/// A cut-in agent drives straight along its spawn heading at constant speed. Once
/// it is ahead of the ego by no more than `trigger_gap` meters it moves sideways by
/// `lateral_shift` meters (positive = left of its heading) using a bang-bang lateral
/// acceleration profile of magnitude `aggressiveness`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Behavior {
    CutIn {
        trigger_gap: f64,
        lateral_shift: f64,
        aggressiveness: f64,
    },
    Waypoints {
        waypoints: Vec<TimedWaypoint>,
    },
}

impl Behavior {
    pub fn benign_cruise() -> Self {
        Behavior::CutIn {
            trigger_gap: 0.0,
            lateral_shift: 0.0,
            aggressiveness: AGGRESSIVENESS_BOUNDS.0,
        }
    }

    pub fn within_bounds(&self) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v.is_finite() && v >= lo && v <= hi;
        match self {
            Behavior::CutIn {
                trigger_gap,
                lateral_shift,
                aggressiveness,
            } => {
                inside(*trigger_gap, TRIGGER_GAP_BOUNDS)
                    && inside(*lateral_shift, LATERAL_SHIFT_BOUNDS)
                    && inside(*aggressiveness, AGGRESSIVENESS_BOUNDS)
            }
            Behavior::Waypoints { waypoints } => {
                !waypoints.is_empty()
                    && waypoints.windows(2).all(|w| w[1].t > w[0].t)
                    && waypoints.iter().all(|w| w.t.is_finite() && w.x.is_finite() && w.y.is_finite())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutInPhase {
    Cruise,
    Shifting,
    Done,
}

/// Progress of an agent along its behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorCursor {
    pub anchor: Vec2,
    pub lane_heading: f64,
    pub longitudinal: f64,
    pub lateral: f64,
    pub lateral_vel: f64,
    pub phase: CutInPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub vehicle: VehicleState,
    pub behavior: Behavior,
    pub cursor: BehaviorCursor,
}

impl Agent {
    pub fn new(vehicle: VehicleState, behavior: Behavior) -> Self {
        let cursor = BehaviorCursor {
            anchor: vehicle.position,
            lane_heading: vehicle.heading,
            longitudinal: 0.0,
            lateral: 0.0,
            lateral_vel: 0.0,
            phase: CutInPhase::Cruise,
        };
        let mut agent = Self {
            vehicle,
            behavior,
            cursor,
        };
        if let Behavior::Waypoints { waypoints } = &agent.behavior {
            let (p, h, s) = waypoint_pose(waypoints, 0.0, agent.vehicle.heading);
            agent.vehicle.position = p;
            agent.vehicle.heading = h;
            agent.vehicle.speed = s;
        }
        agent
    }

    fn is_finite(&self) -> bool {
        let c = &self.cursor;
        self.vehicle.is_finite()
            && c.anchor.is_finite()
            && c.lane_heading.is_finite()
            && c.longitudinal.is_finite()
            && c.lateral.is_finite()
            && c.lateral_vel.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weather {
    /// Fog extinction coefficient, 1/m.
    pub fog_beta: f64,
    /// Global brightness multiplier in [0, 1].
    pub brightness: f64,
}

impl Default for Weather {
    fn default() -> Self {
        Self {
            fog_beta: 0.0,
            brightness: 1.0,
        }
    }
}

impl Weather {
    pub fn is_valid(&self) -> bool {
        self.fog_beta.is_finite() && self.fog_beta >= 0.0 && (0.0..=1.0).contains(&self.brightness)
    }
}

/// Complete simulation state. Stepping is a pure function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub tick: u64,
    pub time: f64,
    pub ego: VehicleState,
    pub agents: Vec<Agent>,
    pub weather: Weather,
    pub rng: CounterRng,
    pub map: Arc<MapSpec>,
}

impl WorldState {
    pub fn new(map: Arc<MapSpec>, ego: VehicleState, seed: u64) -> Self {
        Self {
            tick: 0,
            time: 0.0,
            ego,
            agents: Vec::new(),
            weather: Weather::default(),
            rng: CounterRng::new(seed),
            map,
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if !self.ego.is_finite() {
            return Err(WorldError::StateCorruption("ego state is not finite".into()));
        }
        if let Some(i) = self.agents.iter().position(|a| !a.is_finite()) {
            return Err(WorldError::StateCorruption(format!("agent {i} state is not finite")));
        }
        if !self.weather.is_valid() {
            return Err(WorldError::StateCorruption("weather out of range".into()));
        }
        if !self.time.is_finite() {
            return Err(WorldError::StateCorruption("clock is not finite".into()));
        }
        Ok(())
    }

    /// SHA-256 over the dynamic state (everything except the static map).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.tick.to_le_bytes());
        h.update(self.time.to_bits().to_le_bytes());
        hash_vehicle(&mut h, &self.ego);
        h.update((self.agents.len() as u64).to_le_bytes());
        for a in &self.agents {
            hash_vehicle(&mut h, &a.vehicle);
            let c = &a.cursor;
            for v in [c.anchor.x, c.anchor.y, c.lane_heading, c.longitudinal, c.lateral, c.lateral_vel] {
                h.update(v.to_bits().to_le_bytes());
            }
            h.update([c.phase as u8]);
        }
        h.update(self.weather.fog_beta.to_bits().to_le_bytes());
        h.update(self.weather.brightness.to_bits().to_le_bytes());
        h.update(self.rng.key.to_le_bytes());
        h.update(self.rng.counter.to_le_bytes());
        hex::encode(h.finalize())
    }
}

fn hash_vehicle(h: &mut Sha256, v: &VehicleState) {
    for x in [v.position.x, v.position.y, v.heading, v.speed, v.steer, v.length, v.width] {
        h.update(x.to_bits().to_le_bytes());
    }
    h.update([v.class as u8]);
    if let Some(t) = &v.texture_ref {
        h.update(t.as_bytes());
    }
    h.update([0xff]);
}

/// Position, heading and speed of a timed-waypoint agent at time `t`.
fn waypoint_pose(wps: &[TimedWaypoint], t: f64, prev_heading: f64) -> (Vec2, f64, f64) {
    let first = wps[0];
    if t <= first.t || wps.len() == 1 {
        let heading = if wps.len() > 1 {
            let d = Vec2::new(wps[1].x - first.x, wps[1].y - first.y);
            if d.norm_sq() > 0.0 {
                d.y.atan2(d.x)
            } else {
                prev_heading
            }
        } else {
            prev_heading
        };
        return (Vec2::new(first.x, first.y), heading, 0.0);
    }
    for w in wps.windows(2) {
        let (a, b) = (w[0], w[1]);
        if t <= b.t {
            let u = (t - a.t) / (b.t - a.t);
            let d = Vec2::new(b.x - a.x, b.y - a.y);
            let heading = if d.norm_sq() > 0.0 { d.y.atan2(d.x) } else { prev_heading };
            let p = Vec2::new(a.x + d.x * u, a.y + d.y * u);
            return (p, heading, d.norm() / (b.t - a.t));
        }
    }
    let last = wps[wps.len() - 1];
    (Vec2::new(last.x, last.y), prev_heading, 0.0)
}

fn step_agent(agent: &Agent, ego: &VehicleState, new_time: f64, dt: f64) -> Agent {
    let mut next = agent.clone();
    match &agent.behavior {
        Behavior::CutIn {
            trigger_gap,
            lateral_shift,
            aggressiveness,
        } => {
            let c = &mut next.cursor;
            let dir = Vec2::from_angle(c.lane_heading);
            let left = dir.perp();
            if c.phase == CutInPhase::Cruise {
                let gap = (agent.vehicle.position - ego.position).dot(dir);
                if gap >= 0.0 && gap <= *trigger_gap {
                    c.phase = CutInPhase::Shifting;
                }
            }
            if c.phase == CutInPhase::Shifting {
                let remaining = lateral_shift - c.lateral;
                if remaining == 0.0 {
                    c.lateral_vel = 0.0;
                    c.phase = CutInPhase::Done;
                } else {
                    let toward = remaining.signum();
                    let stopping = c.lateral_vel * c.lateral_vel / (2.0 * aggressiveness);
                    let moving_toward = c.lateral_vel * toward > 0.0;
                    let accel = if moving_toward && stopping >= remaining.abs() {
                        -toward * aggressiveness
                    } else {
                        toward * aggressiveness
                    };
                    c.lateral_vel += accel * dt;
                    c.lateral += c.lateral_vel * dt;
                    let overshoot = (lateral_shift - c.lateral) * toward <= 0.0;
                    let stalled = c.lateral_vel * toward <= 0.0 && moving_toward;
                    if overshoot || stalled {
                        c.lateral = *lateral_shift;
                        c.lateral_vel = 0.0;
                        c.phase = CutInPhase::Done;
                    }
                }
            }
            c.longitudinal += agent.vehicle.speed * dt;
            next.vehicle.position = c.anchor + dir * c.longitudinal + left * c.lateral;
            next.vehicle.heading = wrap_angle(c.lane_heading + c.lateral_vel.atan2(agent.vehicle.speed));
        }
        Behavior::Waypoints { waypoints } => {
            let (p, h, s) = waypoint_pose(waypoints, new_time, agent.vehicle.heading);
            next.vehicle.position = p;
            next.vehicle.heading = wrap_angle(h);
            next.vehicle.speed = s;
        }
    }
    next
}

/// Advances the traffic agents by one tick given the pre-step world.
pub fn step_agents(world: &WorldState, dt: f64) -> Vec<Agent> {
    let new_time = (world.tick + 1) as f64 * dt;
    world
        .agents
        .iter()
        .map(|a| step_agent(a, &world.ego, new_time, dt))
        .collect()
}

/// Assembles the post-step world from an already-advanced ego. The executor layer
/// uses this to combine an externally computed ego with locally simulated agents.
pub fn advance_with_ego(world: &WorldState, ego: VehicleState, dt: f64) -> WorldState {
    let agents = step_agents(world, dt);
    let mut rng = world.rng;
    rng.next_u64();
    let tick = world.tick + 1;
    WorldState {
        tick,
        time: tick as f64 * dt,
        ego,
        agents,
        weather: world.weather,
        rng,
        map: world.map.clone(),
    }
}

fn check_dt(dt: f64) -> Result<(), WorldError> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(WorldError::InvalidDt(dt))
    }
}

/// Advances the whole world one tick.
pub fn step(world: &WorldState, ego_cmd: &ControlCommand, dt: f64) -> Result<WorldState, WorldError> {
    check_dt(dt)?;
    world.validate()?;
    let ego = step_vehicle(&world.ego, ego_cmd, dt);
    let next = advance_with_ego(world, ego, dt);
    next.validate()?;
    Ok(next)
}

/// Ego-only part of [`step`], as run by an executor.
pub fn step_ego(ego: &VehicleState, cmd: &ControlCommand, dt: f64) -> Result<VehicleState, WorldError> {
    check_dt(dt)?;
    if !ego.is_finite() {
        return Err(WorldError::StateCorruption("ego state is not finite".into()));
    }
    let next = step_vehicle(ego, cmd, dt);
    if !next.is_finite() {
        return Err(WorldError::StateCorruption("ego update produced non-finite values".into()));
    }
    Ok(next)
}
