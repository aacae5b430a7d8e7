//! Experiment runner for LLM survey studies.
//!
//! [`orchestrator::plan_run`] expands a config into a unit inventory,
//! [`orchestrator::run`] executes it against a chat-completions endpoint
//! (or the bundled [`mock`] server) and writes a resumable output
//! directory, and [`api`] exposes the same operations over HTTP.

pub mod api;
pub mod client;
pub mod config;
pub mod mock;
pub mod orchestrator;
pub mod store;
pub mod wire;
