//! Merge-point supervision analytics for mixed human/AV highway traffic.
//!
//! The crate simulates a lane-resolved highway network with an Intelligent
//! Driver Model, flags merges where an AV and target-lane traffic could meet
//! within a short horizon, turns those flags into supervision tasks, and
//! sizes remote-operator teams with the Erlang loss formula.

pub mod demand;
pub mod error;
pub mod network;
pub mod queueing;
pub mod safety;
pub mod scenario;
pub mod sim;
pub mod synthetic;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/demand.md")]
    mod demand {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/safety.md")]
    mod safety {}
    #[doc = include_str!("../../../book/src/queueing.md")]
    mod queueing {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
}
