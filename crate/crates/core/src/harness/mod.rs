//! Closed-loop evaluation engine.
//!
//! * high level: [`run_episode`] and the interactive [`session`] server;
//! * middle: [`Episode`], which owns the world, traffic, attacks and the record;
//! * low level: [`Executor`] implementations that turn commands into ego motion,
//!   in-process ([`SilExecutor`]) or over the wire protocol ([`HilExecutor`]).

use thiserror::Error;

use crate::attacks::AttackError;
use crate::scenario::ScenarioError;
use crate::stack::ModelError;
use crate::world::WorldError;

pub mod episode;
pub mod executor;
pub mod metrics;
pub mod protocol;
pub mod record;
pub mod replay;
pub mod session;

pub use episode::{run_episode, Episode, EpisodeOptions, SensorConfig};
pub use executor::{Executor, ExecutorServer, ExecutorServerConfig, HilExecutor, SilExecutor, DEFAULT_TIMEOUT};
pub use metrics::{aggregate, compute_metrics, format_table, GroupRow, Metrics};
pub use record::{EpisodeRecord, Event, EventKind, Insertion, Termination};
pub use replay::{replay, ReplayReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("executor timed out")]
    Timeout,
    #[error("executor disconnected")]
    Disconnected,
    #[error("protocol version mismatch: ours {ours}, theirs {theirs}")]
    Version { ours: u32, theirs: u32 },
    #[error("executor error {code}: {text}")]
    Remote { code: String, text: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("bad executor address {0}")]
    Address(String),
    #[error("episode already finished ({0:?})")]
    Finished(Termination),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("bad record: {0}")]
    Record(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
