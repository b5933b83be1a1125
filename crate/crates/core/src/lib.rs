//! Closed-loop adversarial testing sandbox for autonomous-driving stacks.
//!
//! The crate is organized along the loop it runs:
//!
//! * [`world`]: deterministic 2-D simulator (dynamics, collisions, sensors, risk geometry).
//! * [`stack`]: the driving stack under test (perception networks, planner, decision rule).
//! * [`attacks`]: digital perturbation attacks and the fused-render patch attack.
//! * [`scenario`]: scenario schema, adversary selection and risk-driven evolution.
//! * [`harness`]: the episode loop, SIL/HIL executors, records, replay and metrics.

pub mod attacks;
pub mod digest;
pub mod harness;
pub mod scenario;
pub mod stack;
pub mod world;
