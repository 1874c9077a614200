//! Event-driven simulation engine.

pub mod config;
pub mod machine;
pub mod queue;
pub mod report;
