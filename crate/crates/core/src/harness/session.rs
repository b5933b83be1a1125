//! Interactive session server.
//!
//! One WebSocket connection drives one episode. Client and server exchange JSON text
//! messages tagged by `type`. A session runs either in real time (one tick per `dt`
//! while not paused) or in lock-step, where the client advances it with `STEP`.

use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use super::episode::{Episode, EpisodeOptions};
use super::executor::SilExecutor;
use super::metrics::Metrics;
use super::record::{Event, EventKind, Insertion, PoseRecord, Termination};
use super::HarnessError;
use crate::attacks::PatchSpec;
use crate::digest::float_or_inf;
use crate::scenario::spec::AgentSpec;
use crate::scenario::ScenarioSpec;
use crate::stack::DrivingStack;
use crate::world::map::Pose;
use crate::world::render::render_sensor;
use crate::world::state::Behavior;
use crate::world::vehicle::{ControlSource, VehicleClass};

pub const SESSION_PROTOCOL_VERSION: u32 = 1;
/// Upper bound on ticks a single `STEP` may request.
pub const MAX_STEP_TICKS: u64 = 10_000;
/// Thumbnails keep every `THUMBNAIL_STRIDE`-th pixel in each direction.
pub const THUMBNAIL_STRIDE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Named(String),
    Inline(Box<ScenarioSpec>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinConfig {
    /// Built-in name, file path or inline scenario; the server default if absent.
    #[serde(default)]
    pub scenario: Option<ScenarioRef>,
    #[serde(default)]
    pub label: Option<String>,
    /// Advance only on `STEP` instead of in real time.
    #[serde(default)]
    pub lockstep: bool,
    #[serde(default)]
    pub version: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Patch,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchParams {
    pub agent: usize,
    #[serde(default = "default_fill")]
    pub fill: f64,
    #[serde(default = "default_texels_per_meter")]
    pub texels_per_meter: f64,
    #[serde(default = "default_color")]
    pub color: [f64; 3],
}

fn default_fill() -> f64 {
    0.8
}

fn default_texels_per_meter() -> f64 {
    4.0
}

fn default_color() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentParams {
    pub class: VehicleClass,
    pub spawn: Pose,
    #[serde(default)]
    pub speed: f64,
    #[serde(default)]
    pub behavior: Option<Behavior>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum ClientMessage {
    Join {
        #[serde(default)]
        config: JoinConfig,
    },
    Pause,
    Resume,
    Takeover,
    Release,
    HumanControl {
        throttle: f64,
        steer: f64,
    },
    InsertArtifact {
        kind: ArtifactKind,
        params: serde_json::Value,
    },
    /// Advances `ticks` ticks; the only way time moves in lock-step sessions.
    Step {
        #[serde(default = "one")]
        ticks: u64,
    },
    End,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thumbnail {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB bytes, hex-encoded.
    pub rgb: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveMetrics {
    pub ticks: u64,
    pub takeover_count: u64,
    pub collision: bool,
    #[serde(with = "float_or_inf")]
    pub min_ttc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ServerMessage {
    Snapshot {
        tick: u64,
        ego: PoseRecord,
        agents: Vec<PoseRecord>,
        source: ControlSource,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        perception: Option<Vec<f64>>,
        thumbnail: Thumbnail,
        metrics: LiveMetrics,
    },
    Event {
        event: Event,
    },
    Summary {
        metrics: Metrics,
        termination: Termination,
        record: String,
        digest: String,
    },
    Error {
        text: String,
    },
}

impl ServerMessage {
    fn error(text: impl Into<String>) -> Self {
        ServerMessage::Error { text: text.into() }
    }
}

/// Describes the message set for clients.
pub fn session_schema() -> serde_json::Value {
    serde_json::json!({
        "version": SESSION_PROTOCOL_VERSION,
        "transport": "websocket, one JSON text message per frame, tagged by \"type\"",
        "client": {
            "JOIN": {"config": {"scenario": "name | path | inline ScenarioSpec (optional)", "label": "string (optional)", "lockstep": "bool", "version": "u32 (optional)"}},
            "PAUSE": {}, "RESUME": {}, "TAKEOVER": {}, "RELEASE": {},
            "HUMAN_CONTROL": {"throttle": "[-1, 1]", "steer": "[-1, 1]"},
            "INSERT_ARTIFACT": {"kind": "patch | agent",
                "params": {"patch": {"agent": "index", "fill": "(0, 1]", "texels_per_meter": "> 0", "color": "[r, g, b]"},
                           "agent": {"class": "car | truck | pedestrian", "spawn": {"x": "m", "y": "m", "heading": "rad"}, "speed": "m/s", "behavior": "optional"}}},
            "STEP": {"ticks": "u64, default 1"},
            "END": {}
        },
        "server": {
            "SNAPSHOT": {"tick": "u64", "ego": "pose", "agents": "[pose]", "source": "autonomy | human", "perception": "[f64] (optional)", "thumbnail": {"width": "px", "height": "px", "rgb": "hex"}, "metrics": {"ticks": "u64", "takeover_count": "u64", "collision": "bool", "min_ttc": "f64 | \"inf\""}},
            "EVENT": {"event": {"kind": "collision | takeover | release | attack | pause | resume | warning | truncated", "tick": "u64", "detail": "string"}},
            "SUMMARY": {"metrics": "Metrics", "termination": "string", "record": "path", "digest": "hex"},
            "ERROR": {"text": "string"}
        }
    })
}

pub struct SessionServerConfig {
    pub stack: Arc<dyn DrivingStack>,
    pub default_scenario: ScenarioSpec,
    pub records_dir: PathBuf,
    pub options: EpisodeOptions,
    /// Longest silence tolerated from a lock-step or paused client.
    pub idle_timeout: Duration,
}

impl SessionServerConfig {
    pub fn new(stack: Arc<dyn DrivingStack>, default_scenario: ScenarioSpec, records_dir: PathBuf) -> Self {
        Self {
            stack,
            default_scenario,
            records_dir,
            options: EpisodeOptions::default(),
            idle_timeout: Duration::from_secs(600),
        }
    }
}

/// Handle to a running session server. Each connection gets its own thread and world.
pub struct SessionServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<thread::JoinHandle<()>>,
}

impl SessionServer {
    pub fn start(addr: &str, cfg: SessionServerConfig) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(&cfg.records_dir)?;
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let cfg = Arc::new(cfg);
        let counter = Arc::new(AtomicU64::new(0));
        let accept = thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let cfg = cfg.clone();
                let id = counter.fetch_add(1, Ordering::SeqCst);
                thread::spawn(move || {
                    let _ = stream.set_nodelay(true);
                    let shutdown = stream.try_clone();
                    if let Ok(ws) = tungstenite::accept(stream) {
                        if let Err(e) = run_session(ws, &cfg, id) {
                            log::warn!("session {id}: {e}");
                        }
                    }
                    if let Ok(s) = shutdown {
                        let _ = s.shutdown(Shutdown::Both);
                    }
                });
            }
        });
        Ok(Self {
            addr: local,
            stop,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for SessionServer {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop();
        }
    }
}

type Ws = WebSocket<TcpStream>;

enum Incoming {
    Message(ClientMessage),
    Malformed(String),
    Idle,
    Closed,
}

fn send(ws: &mut Ws, msg: &ServerMessage) -> Result<(), HarnessError> {
    let text = serde_json::to_string(msg).map_err(|e| HarnessError::Protocol(e.to_string()))?;
    ws.send(Message::text(text)).map_err(|_| HarnessError::Disconnected)
}

fn receive(ws: &mut Ws, timeout: Duration) -> Incoming {
    let _ = ws.get_mut().set_read_timeout(Some(timeout.max(Duration::from_millis(1))));
    loop {
        match ws.read() {
            Ok(Message::Text(t)) => {
                return match serde_json::from_str(&t) {
                    Ok(m) => Incoming::Message(m),
                    Err(e) => Incoming::Malformed(e.to_string()),
                }
            }
            Ok(Message::Binary(_)) => return Incoming::Malformed("binary messages are not supported".into()),
            Ok(Message::Close(_)) => return Incoming::Closed,
            Ok(_) => continue,
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
            {
                return Incoming::Idle
            }
            Err(_) => return Incoming::Closed,
        }
    }
}

fn resolve_scenario(r: &Option<ScenarioRef>, default: &ScenarioSpec) -> Result<ScenarioSpec, HarnessError> {
    let s = match r {
        None => default.clone(),
        Some(ScenarioRef::Named(n)) => ScenarioSpec::resolve(n)?,
        Some(ScenarioRef::Inline(s)) => (**s).clone(),
    };
    s.validate()?;
    Ok(s)
}

fn thumbnail(ep: &Episode<'_>, opts: &EpisodeOptions) -> Thumbnail {
    let Ok(f) = render_sensor(ep.world(), &opts.sensors.camera) else {
        return Thumbnail {
            width: 0,
            height: 0,
            rgb: String::new(),
        };
    };
    let (w, h) = (f.width.div_ceil(THUMBNAIL_STRIDE), f.height.div_ceil(THUMBNAIL_STRIDE));
    let mut bytes = Vec::with_capacity(w * h * 3);
    for r in (0..f.height).step_by(THUMBNAIL_STRIDE) {
        for c in (0..f.width).step_by(THUMBNAIL_STRIDE) {
            for k in 0..3 {
                bytes.push((f.pixels[(r * f.width + c) * 3 + k] * 255.0).round() as u8);
            }
        }
    }
    Thumbnail {
        width: w,
        height: h,
        rgb: hex::encode(bytes),
    }
}

struct Live {
    takeovers: u64,
    collision: bool,
    min_ttc: f64,
}

/// Runs one tick and reports it. Events the client has not already been told about
/// (collisions, warnings) are forwarded.
fn step_and_report(ws: &mut Ws, ep: &mut Episode<'_>, live: &mut Live, opts: &EpisodeOptions) -> Result<(), HarnessError> {
    let rec = match ep.step().cloned() {
        Ok(r) => r,
        Err(e) if ep.termination() == Some(Termination::Truncated) => {
            return send(ws, &ServerMessage::error(e.to_string()));
        }
        Err(e) => return Err(e),
    };
    live.min_ttc = live.min_ttc.min(rec.ttc);
    for ev in &rec.events {
        match ev.kind {
            EventKind::Collision => live.collision = true,
            EventKind::Warning | EventKind::Truncated => {}
            _ => continue,
        }
        send(ws, &ServerMessage::Event { event: ev.clone() })?;
    }
    send(
        ws,
        &ServerMessage::Snapshot {
            tick: rec.tick,
            ego: PoseRecord::from(&ep.world().ego),
            agents: ep.world().agents.iter().map(|a| PoseRecord::from(&a.vehicle)).collect(),
            source: rec.control.source,
            perception: rec.perception.clone(),
            thumbnail: thumbnail(ep, opts),
            metrics: LiveMetrics {
                ticks: ep.ticks().len() as u64,
                takeover_count: live.takeovers,
                collision: live.collision,
                min_ttc: live.min_ttc,
            },
        },
    )
}

fn insert_artifact(ep: &mut Episode<'_>, kind: ArtifactKind, params: serde_json::Value) -> Result<(), String> {
    let ins = match kind {
        ArtifactKind::Patch => {
            let p: PatchParams = serde_json::from_value(params).map_err(|e| e.to_string())?;
            if !(p.fill > 0.0 && p.fill <= 1.0) || !(p.texels_per_meter > 0.0 && p.texels_per_meter <= 64.0) {
                return Err("patch fill or texel density out of range".into());
            }
            let spec = PatchSpec::centered(ep.world(), p.agent, p.fill, p.texels_per_meter, p.color).map_err(|e| e.to_string())?;
            Insertion::Patch(spec)
        }
        ArtifactKind::Agent => {
            let a: AgentParams = serde_json::from_value(params).map_err(|e| e.to_string())?;
            Insertion::Agent(AgentSpec {
                class: a.class,
                spawn: a.spawn,
                speed: a.speed,
                behavior: a.behavior.unwrap_or_else(Behavior::benign_cruise),
            })
        }
    };
    ep.insert(ins).map_err(|e| e.to_string())
}

fn ack(ws: &mut Ws, ep: &Episode<'_>, kind: EventKind) -> Result<(), HarnessError> {
    let event = Event {
        kind,
        tick: ep.tick(),
        detail: String::new(),
    };
    send(ws, &ServerMessage::Event { event })
}

fn run_session(mut ws: Ws, cfg: &SessionServerConfig, id: u64) -> Result<(), HarnessError> {
    let join = loop {
        match receive(&mut ws, cfg.idle_timeout) {
            Incoming::Message(ClientMessage::Join { config }) => {
                if config.version.is_some_and(|v| v != SESSION_PROTOCOL_VERSION) {
                    send(&mut ws, &ServerMessage::error(format!("unsupported session version, server speaks {SESSION_PROTOCOL_VERSION}")))?;
                    continue;
                }
                match resolve_scenario(&config.scenario, &cfg.default_scenario) {
                    Ok(s) => break (config, s),
                    Err(e) => send(&mut ws, &ServerMessage::error(e.to_string()))?,
                }
            }
            Incoming::Message(_) => send(&mut ws, &ServerMessage::error("send JOIN first"))?,
            Incoming::Malformed(e) => send(&mut ws, &ServerMessage::error(format!("malformed message: {e}")))?,
            Incoming::Idle | Incoming::Closed => return Ok(()),
        }
    };
    let (config, scenario) = join;
    let mut opts = cfg.options.clone();
    if let Some(l) = &config.label {
        opts.label = l.clone();
    }
    let mut executor = SilExecutor;
    let mut ep = Episode::start(&scenario, &*cfg.stack, &mut executor, &opts)?;
    let dt = Duration::from_secs_f64(scenario.dt());
    let mut paused = false;
    let mut live = Live {
        takeovers: 0,
        collision: false,
        min_ttc: f64::INFINITY,
    };
    let mut ended_by_client = false;

    while ep.termination().is_none() {
        let realtime = !config.lockstep && !paused;
        let timeout = if realtime { dt } else { cfg.idle_timeout };
        let msg = match receive(&mut ws, timeout) {
            Incoming::Message(m) => m,
            Incoming::Malformed(e) => {
                send(&mut ws, &ServerMessage::error(format!("malformed message: {e}")))?;
                continue;
            }
            Incoming::Idle if realtime => {
                step_and_report(&mut ws, &mut ep, &mut live, &opts)?;
                continue;
            }
            Incoming::Idle | Incoming::Closed => break,
        };
        match msg {
            ClientMessage::Join { .. } => send(&mut ws, &ServerMessage::error("already joined"))?,
            ClientMessage::Pause | ClientMessage::Resume => {
                let pause = matches!(msg, ClientMessage::Pause);
                if pause == paused {
                    send(&mut ws, &ServerMessage::error(if pause { "already paused" } else { "not paused" }))?;
                    continue;
                }
                paused = pause;
                let kind = if pause { EventKind::Pause } else { EventKind::Resume };
                ep.note(kind, "");
                ack(&mut ws, &ep, kind)?;
            }
            ClientMessage::Takeover => {
                if ep.takeover() {
                    live.takeovers += 1;
                    ack(&mut ws, &ep, EventKind::Takeover)?;
                } else {
                    send(&mut ws, &ServerMessage::error("already in takeover"))?;
                }
            }
            ClientMessage::Release => {
                if ep.release() {
                    ack(&mut ws, &ep, EventKind::Release)?;
                } else {
                    send(&mut ws, &ServerMessage::error("not in takeover"))?;
                }
            }
            ClientMessage::HumanControl { throttle, steer } => {
                if !throttle.is_finite() || !steer.is_finite() {
                    send(&mut ws, &ServerMessage::error("control values must be finite"))?;
                } else if !ep.human_control(throttle, steer) {
                    send(&mut ws, &ServerMessage::error("HUMAN_CONTROL outside takeover"))?;
                }
            }
            ClientMessage::InsertArtifact { kind, params } => match insert_artifact(&mut ep, kind, params) {
                Ok(()) => ack(&mut ws, &ep, EventKind::Attack)?,
                Err(e) => send(&mut ws, &ServerMessage::error(format!("artifact rejected: {e}")))?,
            },
            ClientMessage::Step { ticks } => {
                if ticks > MAX_STEP_TICKS {
                    send(&mut ws, &ServerMessage::error(format!("at most {MAX_STEP_TICKS} ticks per STEP")))?;
                    continue;
                }
                for _ in 0..ticks {
                    if ep.termination().is_some() {
                        break;
                    }
                    step_and_report(&mut ws, &mut ep, &mut live, &opts)?;
                }
            }
            ClientMessage::End => {
                ended_by_client = true;
                break;
            }
        }
    }

    let (record, metrics) = ep.finish();
    let path = cfg.records_dir.join(format!("session_{id:04}.jsonl"));
    record.save(&path)?;
    let summary = ServerMessage::Summary {
        metrics,
        termination: record.summary.termination,
        record: path.display().to_string(),
        digest: record.digest(),
    };
    let _ = send(&mut ws, &summary);
    if ended_by_client || record.summary.termination != Termination::Ended {
        let _ = ws.close(None);
        let _ = ws.flush();
    }
    Ok(())
}
