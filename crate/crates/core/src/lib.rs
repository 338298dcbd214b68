//! Frame-precise hand-object touch spotting.
//!
//! An end-to-end pipeline for detecting the exact frame at which a hand
//! first contacts an object in short egocentric-style videos: synthetic
//! benchmark generation, a hand-context cross-attention model with temporal
//! reasoning and three prediction heads, multi-task supervision with
//! Gaussian soft labels, offset-refinement and soft-NMS post-processing,
//! and strict frame-tolerance average-precision evaluation.

pub mod autograd;
pub mod config;
pub mod data;
pub mod rng;
pub mod eval;
pub mod infer;
pub mod model;
pub mod postprocess;
pub mod supervision;
pub mod synth;
pub mod train;
pub mod types;
