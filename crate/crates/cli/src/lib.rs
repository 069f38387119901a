//! Operator surface for the SAE workbench: config parsing, run drivers,
//! presets, manifests and plot output.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod presets;
pub mod svg;
