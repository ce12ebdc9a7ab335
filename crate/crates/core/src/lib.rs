//! Core library: feeder model with an AC power-flow oracle, a small convex
//! solver, resource models, scenario forecasting, day-ahead scheduling, the
//! real-time tracking controller and the closed-loop simulator.

pub mod day_ahead;
pub mod forecasting;
pub mod grid;
pub mod qp;
pub mod realtime_mpc;
pub mod resources;
pub mod simulator;
