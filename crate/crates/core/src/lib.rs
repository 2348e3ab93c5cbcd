//! Error-recycling fine-tuning for flow-matching models on synthetic
//! sequential latents.
//!
//! A small velocity network is trained to transport Gaussian noise to short
//! "clips" produced by a rotation system. Error-recycling training corrupts
//! its inputs with the network's own curated errors, replayed from a
//! timestep-gridded bank, while regressing a velocity that always points
//! back at the clean clip. Long autoregressive rollouts measure how much the
//! generated clips drift.

pub mod cli_harness;
pub mod error;
pub mod error_bank;
pub mod error_recycling;
pub mod flow_matching;
pub mod numerics;
pub mod rollout;
pub mod synth_data;
pub mod velocity_net;

pub use error::{Error, Result};
