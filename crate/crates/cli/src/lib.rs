//! Command-line orchestration of the annotation and extraction pipeline.

pub mod app;
pub mod commands;
pub mod config;
pub mod files;
