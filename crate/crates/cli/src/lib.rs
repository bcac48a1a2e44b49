//! Service and command-line front end for the person retrieval engine.

pub mod commands;
pub mod config;
pub mod service;

pub use config::{EngineConfig, CONFIG_ENV};
