//! FlashLips core: a two-stage real-time lip-sync pipeline exercised
//! end-to-end on a procedural synthetic talking-face world.
//!
//! Stage 1 is a one-step latent editor that rewrites only the mouth region of
//! a face latent under the control of a compact lips-pose vector, trained
//! first with masked reconstruction and then refined mask-free on its own
//! pseudo-pairs. Stage 2 is a flow-matching transformer that maps streaming
//! audio features to lips-pose trajectories. Everything runs on a small
//! deterministic CPU tensor engine so the full pipeline trains and verifies
//! on one machine.

pub mod bench;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod flow;
pub mod lips;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod stage1;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
