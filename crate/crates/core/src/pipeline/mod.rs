//! The event-driven detection loop and its artifacts.

pub mod container;
pub mod dataset;
pub mod experiment;
pub mod report;
pub mod stream;
