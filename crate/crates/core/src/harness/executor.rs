//! The executor layer: where the ego's control command becomes motion.
//!
//! The harness keeps the authoritative world and simulates traffic; an executor only
//! advances the ego vehicle. The in-process executor calls the dynamics directly. The
//! HIL executor sends each command to an external process and waits for the resulting
//! ego state (lock-step).

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::protocol::{
    read_frame, decode_message, read_message, step_command, write_message, ExecutorMessage, FrameError, HexVehicle,
    PROTOCOL_VERSION,
};
use super::HarnessError;
use crate::digest::{f64_from_hex, f64_to_hex};
use crate::scenario::ScenarioSpec;
use crate::world::state::step_ego;
use crate::world::vehicle::{ControlCommand, VehicleState};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);

pub trait Executor: Send {
    /// Short tag recorded in episode headers.
    fn kind(&self) -> String;

    /// Prepares the executor for a new episode.
    fn load(&mut self, scenario: &ScenarioSpec, dt: f64) -> Result<(), HarnessError>;

    /// Applies `cmd` at `tick` and returns the ego state for `tick + 1`.
    fn apply(&mut self, tick: u64, ego: &VehicleState, cmd: &ControlCommand, dt: f64) -> Result<VehicleState, HarnessError>;

    fn close(&mut self) {}
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SilExecutor;

impl Executor for SilExecutor {
    fn kind(&self) -> String {
        "sil".into()
    }

    fn load(&mut self, _scenario: &ScenarioSpec, _dt: f64) -> Result<(), HarnessError> {
        Ok(())
    }

    fn apply(&mut self, _tick: u64, ego: &VehicleState, cmd: &ControlCommand, dt: f64) -> Result<VehicleState, HarnessError> {
        Ok(step_ego(ego, cmd, dt)?)
    }
}

/// Client side of the executor protocol.
pub struct HilExecutor {
    addr: SocketAddr,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl HilExecutor {
    /// Connects and performs the HELLO handshake.
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, HarnessError> {
        let sock = addr
            .to_socket_addrs()
            .map_err(|e| HarnessError::Address(format!("{addr}: {e}")))?
            .next()
            .ok_or_else(|| HarnessError::Address(addr.to_string()))?;
        let stream = TcpStream::connect_timeout(&sock, timeout)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        let mut ex = Self {
            addr: sock,
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        };
        ex.send(&ExecutorMessage::Hello {
            version: PROTOCOL_VERSION,
        })?;
        match ex.recv()? {
            ExecutorMessage::Hello { version } if version == PROTOCOL_VERSION => Ok(ex),
            ExecutorMessage::Hello { version } => Err(HarnessError::Version {
                ours: PROTOCOL_VERSION,
                theirs: version,
            }),
            other => Err(unexpected(other)),
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    fn send(&mut self, msg: &ExecutorMessage) -> Result<(), HarnessError> {
        write_message(&mut self.writer, msg).map_err(|e| frame_to_harness(map_write(e)))
    }

    fn recv(&mut self) -> Result<ExecutorMessage, HarnessError> {
        read_message(&mut self.reader).map_err(frame_to_harness)
    }
}

fn map_write(e: std::io::Error) -> FrameError {
    match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => FrameError::Timeout,
        _ => FrameError::Closed,
    }
}

fn frame_to_harness(e: FrameError) -> HarnessError {
    match e {
        FrameError::Timeout => HarnessError::Timeout,
        FrameError::Closed | FrameError::Truncated => HarnessError::Disconnected,
        other => HarnessError::Protocol(other.to_string()),
    }
}

fn unexpected(msg: ExecutorMessage) -> HarnessError {
    match msg {
        ExecutorMessage::Error { code, text } => HarnessError::Remote { code, text },
        other => HarnessError::Protocol(format!("unexpected message {other:?}")),
    }
}

impl Executor for HilExecutor {
    fn kind(&self) -> String {
        "hil".into()
    }

    fn load(&mut self, scenario: &ScenarioSpec, dt: f64) -> Result<(), HarnessError> {
        self.send(&ExecutorMessage::Load {
            scenario: Box::new(scenario.clone()),
            dt: f64_to_hex(dt),
        })?;
        match self.recv()? {
            ExecutorMessage::Event { kind, .. } if kind == "loaded" => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    fn apply(&mut self, tick: u64, ego: &VehicleState, cmd: &ControlCommand, _dt: f64) -> Result<VehicleState, HarnessError> {
        self.send(&ExecutorMessage::step(tick, cmd))?;
        match self.recv()? {
            ExecutorMessage::State { tick: t, ego: hex } if t == tick => hex
                .decode_onto(ego)
                .ok_or_else(|| HarnessError::Protocol("bad float encoding in STATE".into())),
            ExecutorMessage::State { tick: t, .. } => Err(HarnessError::Protocol(format!("STATE for tick {t}, expected {tick}"))),
            other => Err(unexpected(other)),
        }
    }

    fn close(&mut self) {
        let _ = self.send(&ExecutorMessage::Bye);
        let _ = self.writer.get_ref().shutdown(Shutdown::Both);
    }
}

impl Drop for HilExecutor {
    fn drop(&mut self) {
        let _ = self.writer.get_ref().shutdown(Shutdown::Both);
    }
}

/// Reference executor: runs the ego dynamics on behalf of a remote harness.
#[derive(Debug, Clone)]
pub struct ExecutorServerConfig {
    /// Idle limit per read; a silent client is disconnected after it.
    pub read_timeout: Duration,
    /// Answer HELLO with this version (tests use it to provoke a mismatch).
    pub version: u32,
}

impl Default for ExecutorServerConfig {
    fn default() -> Self {
        Self {
            read_timeout: Duration::from_secs(10),
            version: PROTOCOL_VERSION,
        }
    }
}

struct Session {
    ego: Option<VehicleState>,
    dt: f64,
    tick: u64,
    greeted: bool,
}

enum Reply {
    Send(ExecutorMessage),
    SendAndClose(ExecutorMessage),
    Close,
}

fn handle(session: &mut Session, msg: ExecutorMessage, cfg: &ExecutorServerConfig) -> Reply {
    use ExecutorMessage as M;
    if !session.greeted {
        return match msg {
            M::Hello { version } if version == cfg.version => {
                session.greeted = true;
                Reply::Send(M::Hello { version: cfg.version })
            }
            M::Hello { version } => Reply::SendAndClose(M::error(
                "version",
                format!("executor speaks version {}, client sent {version}", cfg.version),
            )),
            _ => Reply::SendAndClose(M::error("handshake", "expected HELLO")),
        };
    }
    match msg {
        M::Load { scenario, dt } => {
            let Some(dt) = f64_from_hex(&dt).filter(|d| *d > 0.0 && d.is_finite()) else {
                return Reply::SendAndClose(M::error("malformed", "bad dt"));
            };
            if let Err(e) = scenario.validate() {
                return Reply::SendAndClose(M::error("scenario", e.to_string()));
            }
            session.ego = Some(scenario.initial_ego());
            session.dt = dt;
            session.tick = 0;
            Reply::Send(M::Event {
                kind: "loaded".into(),
                payload: serde_json::Value::Null,
            })
        }
        M::Step {
            tick,
            throttle,
            steer,
            source,
        } => {
            let Some(ego) = session.ego.as_ref() else {
                return Reply::SendAndClose(M::error("state", "STEP before LOAD"));
            };
            if tick != session.tick {
                return Reply::SendAndClose(M::error("tick", format!("expected tick {}, got {tick}", session.tick)));
            }
            let Some(cmd) = step_command(&throttle, &steer, source) else {
                return Reply::SendAndClose(M::error("malformed", "bad float encoding"));
            };
            match step_ego(ego, &cmd, session.dt) {
                Ok(next) => {
                    let hex = HexVehicle::encode(&next);
                    session.ego = Some(next);
                    session.tick += 1;
                    Reply::Send(M::State { tick, ego: hex })
                }
                Err(e) => Reply::SendAndClose(M::error("dynamics", e.to_string())),
            }
        }
        M::Bye => Reply::Close,
        M::Hello { .. } => Reply::SendAndClose(M::error("handshake", "duplicate HELLO")),
        _ => Reply::SendAndClose(M::error("unexpected", "message not valid from a client")),
    }
}

/// Serves one connection until BYE, error or disconnect. Never panics on input.
pub fn serve_connection<S: Read + Write>(stream: S, cfg: &ExecutorServerConfig) {
    let mut stream = stream;
    let mut session = Session {
        ego: None,
        dt: 0.0,
        tick: 0,
        greeted: false,
    };
    loop {
        let body = match read_frame(&mut stream) {
            Ok(b) => b,
            Err(FrameError::Closed) | Err(FrameError::Timeout) | Err(FrameError::Io(_)) => return,
            Err(e) => {
                let _ = write_message(&mut stream, &ExecutorMessage::error("malformed", e.to_string()));
                return;
            }
        };
        let msg = match decode_message(&body) {
            Ok(m) => m,
            Err(e) => {
                let _ = write_message(&mut stream, &ExecutorMessage::error("malformed", e.to_string()));
                return;
            }
        };
        match handle(&mut session, msg, cfg) {
            Reply::Send(m) => {
                if write_message(&mut stream, &m).is_err() {
                    return;
                }
            }
            Reply::SendAndClose(m) => {
                let _ = write_message(&mut stream, &m);
                return;
            }
            Reply::Close => return,
        }
    }
}

/// Handle to a running reference executor.
pub struct ExecutorServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<thread::JoinHandle<()>>,
}

impl ExecutorServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves connections on threads.
    pub fn start(addr: &str, cfg: ExecutorServerConfig) -> Result<Self, HarnessError> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let cfg = cfg.clone();
                thread::spawn(move || {
                    let _ = stream.set_read_timeout(Some(cfg.read_timeout));
                    let _ = stream.set_write_timeout(Some(cfg.read_timeout));
                    let _ = stream.set_nodelay(true);
                    let shutdown = stream.try_clone();
                    serve_connection(stream, &cfg);
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

    /// Blocks on the accept loop (used by the standalone executor process).
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ExecutorServer {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::spec::ego_only;
    use crate::world::geom::Vec2;
    use crate::world::vehicle::VehicleClass;

    fn start() -> ExecutorServer {
        ExecutorServer::start("127.0.0.1:0", ExecutorServerConfig::default()).unwrap()
    }

    #[test]
    fn handshake_and_steps_match_sil() {
        let server = start();
        let mut hil = HilExecutor::connect(&server.addr().to_string(), DEFAULT_TIMEOUT).unwrap();
        let scenario = ego_only();
        hil.load(&scenario, 0.05).unwrap();
        let mut sil = SilExecutor;
        let mut ego = scenario.initial_ego();
        for tick in 0..100 {
            let cmd = ControlCommand::autonomy((tick as f64 * 0.37).sin(), (tick as f64 * 0.11).cos());
            let a = hil.apply(tick, &ego, &cmd, 0.05).unwrap();
            let b = sil.apply(tick, &ego, &cmd, 0.05).unwrap();
            assert_eq!(a, b);
            ego = a;
        }
        hil.close();
    }

    #[test]
    fn version_mismatch_is_refused() {
        let server = ExecutorServer::start(
            "127.0.0.1:0",
            ExecutorServerConfig {
                version: 99,
                ..Default::default()
            },
        )
        .unwrap();
        let err = HilExecutor::connect(&server.addr().to_string(), DEFAULT_TIMEOUT).err().unwrap();
        assert!(matches!(err, HarnessError::Remote { ref code, .. } if code == "version"), "{err:?}");
    }

    #[test]
    fn wrong_tick_is_an_error() {
        let server = start();
        let mut hil = HilExecutor::connect(&server.addr().to_string(), DEFAULT_TIMEOUT).unwrap();
        hil.load(&ego_only(), 0.05).unwrap();
        let ego = VehicleState::new(VehicleClass::Car, Vec2::ZERO, 0.0, 0.0);
        let err = hil.apply(5, &ego, &ControlCommand::idle(), 0.05).err().unwrap();
        assert!(matches!(err, HarnessError::Remote { ref code, .. } if code == "tick"));
    }

    #[test]
    fn silent_server_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let _hold = thread::spawn(move || {
            let c = listener.accept();
            thread::sleep(Duration::from_millis(800));
            drop(c);
        });
        let err = HilExecutor::connect(&addr, Duration::from_millis(200)).err().unwrap();
        assert!(matches!(err, HarnessError::Timeout), "{err:?}");
    }
}
