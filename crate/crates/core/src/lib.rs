//! Simulator of a two-stage, late-binding, pilot-based provisioning and
//! matchmaking infrastructure for heterogeneous (multi-architecture CPU and
//! GPU) compute pools.
//!
//! * [`adlang`]: attribute ads and the matchmaking expression language.
//! * [`model`]: jobs, devices, nodes, site policies, factory entries.
//! * [`frontend`]: first matchmaking stage (pilot pressure, cancellation).
//! * [`sitesim`]: compute elements, pilots and partitionable slots.
//! * [`negotiator`]: second matchmaking stage (jobs onto registered slots).
//! * [`engine`]: the discrete-event loop, scenario files, metrics, reports.

pub mod adlang;
pub mod engine;
pub mod frontend;
pub mod model;
pub mod negotiator;
pub mod sitesim;
