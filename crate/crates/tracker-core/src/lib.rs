//! Core library: world-model tracking controller, plant simulation, PID
//! baseline, and the training/evaluation orchestration behind the CLI.

pub mod nn;
pub mod orch;
pub mod pid;
pub mod plant;
pub mod policy;
pub mod reward;
pub mod trajectory;
pub mod world_model;
