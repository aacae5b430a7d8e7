//! Core engine for running questionnaire-style experiments against chat
//! models: instruments and personas, prompt rendering under three
//! presentation modes, perturbations, response-method compilation, answer
//! parsing and alignment metrics.
//!
//! Everything in this crate is pure and I/O-free apart from the file
//! loaders, so it also builds for `wasm32-unknown-unknown`.

pub mod canonical;
pub mod chat;
pub mod distribution;
pub mod methods;
pub mod metrics;
pub mod parsers;
pub mod perturbation;
pub mod presentation;
pub mod rng;
pub mod survey;
pub mod template;
