//! The closed loop: render, attack, perceive, decide, actuate, log.

use serde::{Deserialize, Serialize};

use super::executor::Executor;
use super::metrics::{compute_metrics, Metrics};
use super::record::{
    AttackMeta, Event, EventKind, EpisodeRecord, Insertion, PoseRecord, RecordHeader, Summary, Termination, TickRecord,
    RECORD_SCHEMA_VERSION,
};
use super::HarnessError;
use crate::attacks::{render_fused, run_attack, AttackConfig, PatchSpec};
use crate::digest::json_digest;
use crate::scenario::spec::AttackBinding;
use crate::scenario::ScenarioSpec;
use crate::stack::dataset::visible_class;
use crate::stack::{DrivingStack, StackInput};
use crate::world::collision::{detect_collisions, BodyId};
use crate::world::geom::{polyline_length, project_onto_polyline, Vec2};
use crate::world::raycast::raycast;
use crate::world::render::{apply_weather, rasterize, CameraConfig, SensorFrame};
use crate::world::state::{advance_with_ego, Agent, WorldState};
use crate::world::ttc::{circle_gap, pair_ttc};
use crate::world::vehicle::{ControlCommand, ControlSource};

/// The episode ends once the ego is this close to the last route point.
pub const ROUTE_END_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub camera: CameraConfig,
    pub n_beams: usize,
    pub fov: f64,
    pub max_range: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            camera: CameraConfig::default(),
            n_beams: 31,
            fov: 1.2,
            max_range: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOptions {
    /// Group label used by aggregation (e.g. "clean", "pgd").
    pub label: String,
    /// Identifies the stack under test in the record header.
    pub stack_id: String,
    pub sensors: SensorConfig,
    /// Copied into the record header; does not affect the trace.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub config_digest: String,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        Self {
            label: "default".into(),
            stack_id: "unnamed".into(),
            sensors: SensorConfig::default(),
            config_digest: String::new(),
        }
    }
}

/// Digest of everything that determines an episode's trace.
pub fn run_digest(scenario: &ScenarioSpec, opts: &EpisodeOptions) -> String {
    json_digest(&serde_json::json!({
        "scenario": scenario,
        "label": opts.label,
        "stack_id": opts.stack_id,
        "sensors": opts.sensors,
    }))
}

fn min_risk(world: &WorldState) -> (f64, f64) {
    world.agents.iter().fold((f64::INFINITY, f64::INFINITY), |(t, g), a| {
        (t.min(pair_ttc(&world.ego, &a.vehicle)), g.min(circle_gap(&world.ego, &a.vehicle)))
    })
}

/// Fraction of the route covered by the ego's projection onto it.
pub fn route_progress(route: &[Vec2], ego: Vec2) -> f64 {
    let len = polyline_length(route);
    if len <= 0.0 {
        return 1.0;
    }
    let (_, s) = project_onto_polyline(ego, route);
    (s / len).clamp(0.0, 1.0)
}

/// Stepwise episode driver. `run_episode` loops it; the session server drives it
/// interactively.
pub struct Episode<'a> {
    stack: &'a dyn DrivingStack,
    executor: &'a mut dyn Executor,
    header: RecordHeader,
    sensors: SensorConfig,
    world: WorldState,
    route: Vec<Vec2>,
    dt: f64,
    digital: Option<AttackConfig>,
    patch: Option<PatchSpec>,
    human: Option<ControlCommand>,
    pending_insertions: Vec<Insertion>,
    pending_events: Vec<Event>,
    ticks: Vec<TickRecord>,
    done: Option<Termination>,
    detail: String,
    warned_black_box: bool,
}

impl<'a> Episode<'a> {
    pub fn start(
        scenario: &ScenarioSpec,
        stack: &'a dyn DrivingStack,
        executor: &'a mut dyn Executor,
        opts: &EpisodeOptions,
    ) -> Result<Self, HarnessError> {
        let world = scenario.build_world()?;
        let dt = scenario.dt();
        executor.load(scenario, dt)?;
        let (digital, patch) = match &scenario.attack {
            Some(AttackBinding::Digital(c)) => (Some(c.clone()), None),
            Some(AttackBinding::Patch(p)) => (None, Some(p.clone())),
            None => (None, None),
        };
        let header = RecordHeader {
            schema_version: RECORD_SCHEMA_VERSION,
            run_digest: run_digest(scenario, opts),
            dt,
            label: opts.label.clone(),
            executor: executor.kind(),
            stack_id: opts.stack_id.clone(),
            config_digest: opts.config_digest.clone(),
            scenario: scenario.clone(),
        };
        Ok(Self {
            stack,
            executor,
            header,
            sensors: opts.sensors.clone(),
            route: scenario.ego.route.clone(),
            world,
            dt,
            digital,
            patch,
            human: None,
            pending_insertions: Vec::new(),
            pending_events: Vec::new(),
            ticks: Vec::new(),
            done: None,
            detail: String::new(),
            warned_black_box: false,
        })
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn tick(&self) -> u64 {
        self.world.tick
    }

    pub fn termination(&self) -> Option<Termination> {
        self.done
    }

    pub fn ticks(&self) -> &[TickRecord] {
        &self.ticks
    }

    pub fn is_human(&self) -> bool {
        self.human.is_some()
    }

    pub fn is_attacked(&self) -> bool {
        self.digital.is_some() || self.patch.is_some()
    }

    fn event(&mut self, kind: EventKind, detail: impl Into<String>) {
        self.pending_events.push(Event {
            kind,
            tick: self.world.tick,
            detail: detail.into(),
        });
    }

    /// Hands control to the human from the next executed tick on.
    pub fn takeover(&mut self) -> bool {
        if self.human.is_some() {
            return false;
        }
        self.human = Some(ControlCommand::new(0.0, 0.0, ControlSource::Human));
        self.event(EventKind::Takeover, "");
        true
    }

    pub fn release(&mut self) -> bool {
        if self.human.take().is_none() {
            return false;
        }
        self.event(EventKind::Release, "");
        true
    }

    /// Updates the human command; ignored outside takeover.
    pub fn human_control(&mut self, throttle: f64, steer: f64) -> bool {
        match self.human.as_mut() {
            Some(c) => {
                *c = ControlCommand::new(throttle, steer, ControlSource::Human);
                true
            }
            None => false,
        }
    }

    pub fn note(&mut self, kind: EventKind, detail: impl Into<String>) {
        self.event(kind, detail);
    }

    /// Queues a world edit for the next tick after validating it.
    pub fn insert(&mut self, ins: Insertion) -> Result<(), HarnessError> {
        let pending_agents = self
            .pending_insertions
            .iter()
            .filter(|i| matches!(i, Insertion::Agent(_)))
            .count();
        match &ins {
            Insertion::Agent(a) => {
                if !self.world.map.on_road(a.spawn.position()) {
                    return Err(HarnessError::Invalid("agent spawn is off the road".into()));
                }
                if !a.behavior.within_bounds() || !(0.0..=crate::world::vehicle::V_MAX).contains(&a.speed) {
                    return Err(HarnessError::Invalid("agent parameters out of bounds".into()));
                }
            }
            Insertion::Patch(p) => {
                let n = self.world.agents.len() + pending_agents;
                if p.attachment.agent >= n {
                    return Err(HarnessError::Invalid(format!("no agent {}", p.attachment.agent)));
                }
                p.texture.validate().map_err(|e| HarnessError::Invalid(e.to_string()))?;
            }
        }
        self.event(EventKind::Attack, match &ins {
            Insertion::Agent(_) => "agent inserted",
            Insertion::Patch(_) => "patch inserted",
        });
        self.pending_insertions.push(ins);
        Ok(())
    }

    fn perceive(&mut self) -> Result<(SensorFrame, Option<Vec<f64>>, usize, Option<AttackMeta>), HarnessError> {
        let cam = &self.sensors.camera;
        let raster = rasterize(&self.world, cam)?;
        let truth = visible_class(&self.world, &raster) as usize;
        let native = apply_weather(&raster.raw, &raster, self.world.weather.brightness);
        let patched = match &self.patch {
            Some(p) if p.validate(&self.world).is_ok() => Some(render_fused(&self.world, p, cam)?.0),
            _ => None,
        };
        let attacked = patched.is_some() || self.digital.is_some();
        if !attacked {
            return Ok((native, None, truth, None));
        }
        let Some(model) = self.stack.white_box() else {
            if !self.warned_black_box {
                self.warned_black_box = true;
                self.event(EventKind::Warning, "stack exposes no white-box model; attack skipped");
            }
            return Ok((patched.unwrap_or(native), None, truth, None));
        };
        let clean = model.predict(&native)?.values();
        let mut frame = patched.unwrap_or_else(|| native.clone());
        let mut method = "patch".to_string();
        if let Some(cfg) = &self.digital {
            let cfg = AttackConfig {
                seed: cfg.seed.wrapping_add(self.world.tick),
                ..cfg.clone()
            };
            frame = run_attack(model, &frame, truth, &cfg)?;
            method = cfg.method.name().to_string();
        }
        let meta = AttackMeta {
            method,
            linf: frame.max_abs_diff(&native),
        };
        Ok((frame, Some(clean), truth, Some(meta)))
    }

    /// Runs one tick. After an executor failure the episode is marked truncated and
    /// the error is returned.
    pub fn step(&mut self) -> Result<&TickRecord, HarnessError> {
        if let Some(t) = self.done {
            return Err(HarnessError::Finished(t));
        }
        let insertions = std::mem::take(&mut self.pending_insertions);
        for ins in &insertions {
            match ins {
                Insertion::Agent(a) => self.world.agents.push(Agent::new(a.vehicle(), a.behavior.clone())),
                Insertion::Patch(p) => self.patch = Some(p.clone()),
            }
        }
        let state_digest = self.world.digest();
        let (frame, clean, truth, attack) = self.perceive()?;
        let s = &self.sensors;
        let scan = raycast(&self.world, s.n_beams, s.fov, s.max_range)?;
        let out = self.stack.act(&StackInput {
            frame: &frame,
            scan: &scan,
            ego: &self.world.ego,
            route: &self.route,
        })?;
        let control = self.human.unwrap_or(out.command);
        let (ttc, gap) = min_risk(&self.world);
        let tick = self.world.tick;
        let ego = match self.executor.apply(tick, &self.world.ego, &control, self.dt) {
            Ok(e) => e,
            Err(e) => {
                self.done = Some(Termination::Truncated);
                self.detail = e.to_string();
                return Err(e);
            }
        };
        let next = advance_with_ego(&self.world, ego, self.dt);
        next.validate()?;
        let mut events = std::mem::take(&mut self.pending_events);
        for (a, b) in detect_collisions(&next) {
            if a == BodyId::Ego || b == BodyId::Ego {
                events.push(Event {
                    kind: EventKind::Collision,
                    tick,
                    detail: format!("{a:?}-{b:?}"),
                });
                self.done = Some(Termination::Collision);
            }
        }
        if self.done.is_none() {
            let goal = *self.route.last().expect("validated route");
            if next.ego.position.distance(goal) <= ROUTE_END_RADIUS {
                self.done = Some(Termination::RouteEnd);
            } else if next.tick >= self.header.scenario.episode_ticks {
                self.done = Some(Termination::TickLimit);
            }
        }
        let record = TickRecord {
            tick,
            state_digest,
            ego: PoseRecord::from(&self.world.ego),
            agents: self.world.agents.iter().map(|a| PoseRecord::from(&a.vehicle)).collect(),
            control,
            perception: out.classes,
            clean_perception: clean,
            ground_truth: truth,
            attack,
            ttc,
            gap,
            insertions,
            events,
            next_digest: next.digest(),
        };
        self.world = next;
        self.ticks.push(record);
        Ok(self.ticks.last().expect("just pushed"))
    }

    /// Closes the record. A still-running episode ends with `Termination::Ended`.
    pub fn finish(mut self) -> (EpisodeRecord, Metrics) {
        self.executor.close();
        let termination = self.done.unwrap_or(Termination::Ended);
        let mut ticks = self.ticks;
        if !self.pending_events.is_empty() {
            if let Some(last) = ticks.last_mut() {
                last.events.append(&mut self.pending_events);
            }
        }
        if termination == Termination::Truncated {
            if let Some(last) = ticks.last_mut() {
                last.events.push(Event {
                    kind: EventKind::Truncated,
                    tick: last.tick,
                    detail: self.detail.clone(),
                });
            }
        }
        let (final_ttc, final_gap) = min_risk(&self.world);
        let route_completion = if termination == Termination::RouteEnd {
            1.0
        } else {
            route_progress(&self.route, self.world.ego.position)
        };
        let summary = Summary {
            ticks: ticks.len() as u64,
            termination,
            truncated: termination == Termination::Truncated,
            final_ego: PoseRecord::from(&self.world.ego),
            final_digest: self.world.digest(),
            final_ttc,
            final_gap,
            route_completion,
            detail: self.detail,
        };
        let record = EpisodeRecord {
            header: self.header,
            ticks,
            summary,
        };
        let metrics = compute_metrics(&record);
        (record, metrics)
    }
}

/// Runs a whole episode. Executor failures after the handshake produce a truncated
/// record rather than an error.
pub fn run_episode(
    scenario: &ScenarioSpec,
    stack: &dyn DrivingStack,
    executor: &mut dyn Executor,
    opts: &EpisodeOptions,
) -> Result<(EpisodeRecord, Metrics), HarnessError> {
    let mut ep = Episode::start(scenario, stack, executor, opts)?;
    while ep.termination().is_none() {
        if let Err(e) = ep.step().map(|_| ()) {
            if ep.termination() == Some(Termination::Truncated) {
                break;
            }
            return Err(e);
        }
    }
    Ok(ep.finish())
}
