//! Configuration, manifests, feature cache, checkpoints, the synthetic
//! corpus and the command implementations behind the `lsl` binary.

pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod synth;
