//! Deterministic discrete-event simulation of an execution-layer peer
//! discovery and connection stack, together with the attack framework
//! and analytical estimators built on top of it.

pub mod ids;
pub mod table;

pub use ids::{NodeId, NodeRecord, SubnetKey};

/// Simulated time in milliseconds.
pub type SimTime = u64;

pub mod time {
    use super::SimTime;

    pub const MILLIS: SimTime = 1;
    pub const SECOND: SimTime = 1000;
    pub const MINUTE: SimTime = 60 * SECOND;
    pub const HOUR: SimTime = 60 * MINUTE;
    pub const DAY: SimTime = 24 * HOUR;

    pub fn fmt(t: SimTime) -> String {
        let s = t / SECOND;
        format!("{:02}:{:02}:{:02}.{:03}", s / 3600, s / 60 % 60, s % 60, t % 1000)
    }
}
