//! Weakly supervised grounding of referring expressions in synthetic 3D scenes.
//!
//! The crate is organized as a pipeline:
//!
//! * [`numcore`] — dense f64 tensors with exact reverse-mode gradients.
//! * [`geometry`] — axis-aligned 3D boxes, IoU, and a spatial relation library.
//! * [`synthworld`] — synthetic scene/query benchmark generator and dataset I/O.
//! * [`queryparse`] — rule-based noun-phrase and relation extraction plus
//!   negative-query construction.
//! * [`model`] — proposal encoder, text encoder, cross-attention fusion,
//!   category classifier, and relation head.
//! * [`objectives`] — the weakly supervised training losses.
//! * [`engine`] — training loop, inference decision rule, evaluation, ablations.
//! * [`config`] / [`cli`] — flat key/value configuration and the command-line
//!   front end.

pub mod cli;
pub mod config;
pub mod engine;
pub mod geometry;
pub mod model;
pub mod numcore;
pub mod objectives;
pub mod queryparse;
pub mod synthworld;
