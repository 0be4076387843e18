//! Pipeline driver for the city layout toolkit: stage commands, SVG
//! rendering and the HTTP service.

pub mod commands;
pub mod config;
pub mod render;
pub mod server;

pub use config::PipelineConfig;
