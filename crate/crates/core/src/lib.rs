//! Simulation and analysis of energy-intensive batch heat treatment with
//! stochastic minimum-energy requirements.
//!
//! The crate is organised bottom-up:
//!
//! * [`curvekit`] – energy-input curves, cumulation and inversion
//! * [`randkit`] – seeded streams, log-normal variates, normal quantiles
//! * [`stoppol`] – sensor-driven, fixed-time and ideal stopping policies
//! * [`chamber`] – the two stopping problems of one batch with rework
//! * [`plantsim`] – order flow through a single chamber over a horizon
//! * [`sweep`] – full-factorial experiment grids and resumable execution
//! * [`metrics`] – KPI aggregation, intervals, costs and Pareto fronts
//! * [`calib`] – back-calculation of expected requirements from inspections

pub mod calib;
pub mod chamber;
pub mod curvekit;
pub mod metrics;
pub mod plantsim;
pub mod randkit;
pub mod stoppol;
pub mod sweep;
