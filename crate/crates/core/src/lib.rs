//! Survival prediction agent over whole-slide images and gene profiles:
//! hierarchical report generation, chain-of-thought case banks, retrieval and
//! dichotomy-based inference, plus the survival statistics used to evaluate it.

pub mod backend;
pub mod bank;
pub mod bundled;
pub mod config;
pub mod cot;
pub mod datamodel;
pub mod error;
pub mod experiment;
pub mod gene;
pub mod inference;
pub mod manifest;
pub mod retrieval;
pub mod sidecar;
pub mod survstats;
pub mod synth;
pub mod wsi;

pub use error::{Error, Result};
