//! Core simulation, policy, training and distribution layers for mmoforge.

pub mod config;
pub mod world;
pub mod agents;
pub mod engine;
pub mod obsio;
pub mod scripted;
pub mod neural;
pub mod trainer;
pub mod ascend;
pub mod telemetry;
