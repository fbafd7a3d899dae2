//! Non-intrusive load monitoring for commercial buildings.
//!
//! The crate covers the full chain from a six-channel aggregate power
//! measurement to device-level explanations and short-term forecasts:
//!
//! * [`ingest`] loads and gap-fills measurements, [`events`] finds switching
//!   events on the total active-power derivative.
//! * [`clustering`], [`duration`] and [`profiles`] turn events into device
//!   profiles; [`extraction`] wires them together.
//! * [`disagg`] explains a series as a state-changes matrix with a particle
//!   swarm, [`forecast`] predicts the next 15 minutes from device states.
//! * [`metrics`] scores both against measurements and persistence baselines,
//!   [`synth`] generates labeled scenarios.

pub mod clustering;
pub mod config;
pub mod disagg;
pub mod duration;
pub mod error;
pub mod events;
pub mod extraction;
pub mod forecast;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod profiles;
pub mod synth;
pub mod workflow;

pub use error::{Error, Result};
pub use model::{
    reconstruct, DeviceProfile, Epsilon, PowerSeries, StateChange, StateChangesMatrix, StateKind, Vec6,
};
