//! Desk-scale laboratory for attention sinks in masked diffusion language
//! models.
//!
//! The crate trains tiny transformers either as masked diffusion models
//! (bidirectional attention, iterative unmasking) or as autoregressive
//! models (causal attention), decodes them while capturing every attention
//! map, and analyzes where attention sinks form, how they move across
//! denoising steps, and what happens when attention toward them is masked.
//!
//! Module map:
//!
//! - [`numerics`]: matrices, softmax, rotary embeddings, loss, Adam.
//! - [`model`]: the transformer, attention capture and logit overrides.
//! - [`diffusion`]: masking schedule, corruption and training.
//! - [`decoding`]: block semi-autoregressive, shifted any-position and
//!   autoregressive decoding with per-step traces.
//! - [`sinkmetrics`]: cumulative scores, sink detection, trajectories.
//! - [`intervention`]: top-K sink masking during generation.
//! - [`evalharness`]: synthetic tasks, exact-match grading, tables.
//! - [`tracefile`]: the `DLMT` binary trace format and CSV import.
//! - [`cli`]: the `dlmscope` command line.

mod binio;
pub mod cli;
pub mod decoding;
pub mod diffusion;
pub mod error;
pub mod evalharness;
pub mod intervention;
pub mod model;
pub mod numerics;
pub mod sinkmetrics;
pub mod tracefile;
pub mod vocab;

pub use error::{Error, Result};
