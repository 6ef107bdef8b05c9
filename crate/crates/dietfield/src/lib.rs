//! Few-shot view synthesis from a handful of posed images.
//!
//! A single scene is represented as a differentiable volumetric radiance
//! field. Training combines a pixel reconstruction loss at observed camera
//! poses with a semantic consistency loss computed at *arbitrary* poses
//! through an image-embedding network, so the field receives supervision
//! even where no pixel ground truth exists.
//!
//! The crate is self-contained: it ships its own dense-tensor math with
//! reverse-mode automatic differentiation ([`diffcore`]), a volume renderer
//! ([`render`]), a Vision Transformer encoder that loads weights from a
//! versioned container ([`semantic`]), and a training loop ([`trainer`]).
//! The `dietfield` binary exposes the pipeline as CLI subcommands.
//!
//! See the `book/` directory for a guided tour; its code snippets are
//! compiled as doctests through the [`guide`] module.

pub mod commands;
pub mod config;
pub mod diffcore;
pub mod field;
pub mod fixture;
pub mod guide;
pub mod losses;
pub mod metrics;
pub mod posedist;
pub mod render;
pub mod scene;
pub mod semantic;
pub mod trainer;

pub use diffcore::{Tape, Tensor};
