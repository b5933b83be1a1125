//! Executor wire protocol: 4-byte big-endian length prefix followed by a UTF-8 JSON
//! message. Floats that feed the dynamics travel as hex-encoded IEEE-754 bit patterns.

use std::io::{self, ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{f64_from_hex, f64_to_hex};
use crate::scenario::ScenarioSpec;
use crate::world::vehicle::{ControlCommand, ControlSource, VehicleState};

pub const PROTOCOL_VERSION: u32 = 1;

/// Upper bound on a frame body; longer length prefixes are rejected unread.
pub const MAX_FRAME: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HexVehicle {
    pub x: String,
    pub y: String,
    pub heading: String,
    pub speed: String,
    pub steer: String,
}

impl HexVehicle {
    pub fn encode(v: &VehicleState) -> Self {
        Self {
            x: f64_to_hex(v.position.x),
            y: f64_to_hex(v.position.y),
            heading: f64_to_hex(v.heading),
            speed: f64_to_hex(v.speed),
            steer: f64_to_hex(v.steer),
        }
    }

    /// Overwrites the dynamic fields of `base` with the decoded values.
    pub fn decode_onto(&self, base: &VehicleState) -> Option<VehicleState> {
        let mut v = base.clone();
        v.position.x = f64_from_hex(&self.x)?;
        v.position.y = f64_from_hex(&self.y)?;
        v.heading = f64_from_hex(&self.heading)?;
        v.speed = f64_from_hex(&self.speed)?;
        v.steer = f64_from_hex(&self.steer)?;
        Some(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum ExecutorMessage {
    Hello {
        version: u32,
    },
    Load {
        scenario: Box<ScenarioSpec>,
        dt: String,
    },
    Step {
        tick: u64,
        throttle: String,
        steer: String,
        source: ControlSource,
    },
    State {
        tick: u64,
        ego: HexVehicle,
    },
    Event {
        kind: String,
        #[serde(default)]
        payload: serde_json::Value,
    },
    Error {
        code: String,
        text: String,
    },
    Bye,
}

impl ExecutorMessage {
    pub fn step(tick: u64, cmd: &ControlCommand) -> Self {
        ExecutorMessage::Step {
            tick,
            throttle: f64_to_hex(cmd.throttle()),
            steer: f64_to_hex(cmd.steer_cmd()),
            source: cmd.source,
        }
    }

    pub fn error(code: &str, text: impl Into<String>) -> Self {
        ExecutorMessage::Error {
            code: code.into(),
            text: text.into(),
        }
    }
}

/// Decodes the command carried by a STEP message.
pub fn step_command(throttle: &str, steer: &str, source: ControlSource) -> Option<ControlCommand> {
    Some(ControlCommand::new(f64_from_hex(throttle)?, f64_from_hex(steer)?, source))
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("connection closed")]
    Closed,
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("connection closed mid-frame")]
    Truncated,
    #[error("timed out waiting for a frame")]
    Timeout,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(io::Error),
}

fn map_io(e: io::Error, mid_frame: bool) -> FrameError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => FrameError::Timeout,
        ErrorKind::UnexpectedEof if mid_frame => FrameError::Truncated,
        ErrorKind::UnexpectedEof => FrameError::Closed,
        ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted | ErrorKind::BrokenPipe => FrameError::Closed,
        _ => FrameError::Io(e),
    }
}

pub fn encode_frame(msg: &ExecutorMessage) -> Vec<u8> {
    let body = serde_json::to_vec(msg).expect("message serializes");
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn write_message<W: Write>(w: &mut W, msg: &ExecutorMessage) -> io::Result<()> {
    w.write_all(&encode_frame(msg))?;
    w.flush()
}

/// Reads one raw frame body.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>, FrameError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Err(FrameError::Closed),
            Ok(0) => return Err(FrameError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(map_io(e, got > 0)),
        }
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(FrameError::TooLarge(n));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body).map_err(|e| map_io(e, true))?;
    Ok(body)
}

pub fn decode_message(body: &[u8]) -> Result<ExecutorMessage, FrameError> {
    let text = std::str::from_utf8(body).map_err(|e| FrameError::Malformed(e.to_string()))?;
    serde_json::from_str(text).map_err(|e| FrameError::Malformed(e.to_string()))
}

pub fn read_message<R: Read>(r: &mut R) -> Result<ExecutorMessage, FrameError> {
    decode_message(&read_frame(r)?)
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use super::*;
    use crate::world::geom::Vec2;
    use crate::world::vehicle::VehicleClass;

    #[test]
    fn frame_roundtrip() {
        let cmd = ControlCommand::autonomy(0.1 + 0.2, -1.0 / 3.0);
        let msg = ExecutorMessage::step(7, &cmd);
        let bytes = encode_frame(&msg);
        assert_eq!(&bytes[..4], &((bytes.len() - 4) as u32).to_be_bytes());
        let back = read_message(&mut Cursor::new(bytes)).unwrap();
        assert_eq!(back, msg);
        let ExecutorMessage::Step { throttle, steer, source, .. } = back else { panic!() };
        assert_eq!(step_command(&throttle, &steer, source).unwrap(), cmd);
    }

    #[test]
    fn vehicle_hex_is_exact() {
        let v = VehicleState::new(VehicleClass::Car, Vec2::new(0.1, -1e-300), 3.0f64.sqrt(), 7.25);
        let back = HexVehicle::encode(&v).decode_onto(&v).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn bad_frames() {
        assert!(matches!(read_frame(&mut Cursor::new(vec![])), Err(FrameError::Closed)));
        assert!(matches!(read_frame(&mut Cursor::new(vec![0, 0])), Err(FrameError::Truncated)));
        assert!(matches!(read_frame(&mut Cursor::new(vec![0, 0, 0, 9, b'{'])), Err(FrameError::Truncated)));
        assert!(matches!(read_frame(&mut Cursor::new(vec![0xff; 8])), Err(FrameError::TooLarge(_))));
        assert!(matches!(decode_message(b"\xff\xfe"), Err(FrameError::Malformed(_))));
        assert!(matches!(decode_message(br#"{"type":"HELLO"}"#), Err(FrameError::Malformed(_))));
        assert!(matches!(decode_message(br#"{"type":"NOPE"}"#), Err(FrameError::Malformed(_))));
    }
}
