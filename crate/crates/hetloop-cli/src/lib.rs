//! Pipeline driver for the `hetloop` library: configuration, staged execution
//! with cached artifacts, and the consolidated report.

pub mod config;
pub mod pipeline;
pub mod report;
