//! Global pixel transformers for virtual staining.
//!
//! A from-scratch implementation of attention-based resampling layers
//! (down / same / up), the dense-block U-shaped network built from them,
//! the multi-scale patch input, masked multi-task training with a small
//! reverse-mode differentiation engine, sliding-window whole-image
//! prediction and the Pearson / confusion-matrix evaluation harness.
//!
//! Everything runs on the CPU in plain Rust. Runnable walkthroughs of
//! each capability live in `crates/core/examples/`:
//!
//! ```bash
//! cargo run --example attention_layers
//! cargo run --example train_synthetic
//! ```
//!
//! The `gpt-stain` binary wraps the same pipeline as subcommands.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data_io;
pub mod dense_block;
pub mod error;
pub mod evaluation;
pub mod gpt_layer;
pub mod gradcheck;
pub mod inference;
pub mod multiscale;
pub mod network;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Matrix, Scalar, Shape, Tensor};
