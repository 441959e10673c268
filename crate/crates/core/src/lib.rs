//! Deterministic simulator of a small-satellite correlated photon pair
//! payload: source and detector physics, liquid-crystal polarization
//! rotators, thermal and power housekeeping, the autonomous controller,
//! flash telemetry, and the polarization-correlation analysis.

// `!(x > 0.0)` is used on purpose so NaN lands on the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod controller;
pub mod lc_optics;
pub mod physics;
pub mod scenarios;
pub mod telemetry;
pub mod thermal_power;
