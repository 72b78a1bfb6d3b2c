//! Desk-scale testbed for robust two-modality object detection in bird's-eye
//! view.
//!
//! The library builds a complete, deterministic pipeline around two
//! complementary synthetic sensors: a GEO view with accurate geometry but
//! ambiguous semantics, and a SEM view with sharp semantics but noisy,
//! occlusion-prone geometry. On top of that world it implements:
//!
//! - modality-agnostic decoding ([`decoder`]): one shared transformer decoder
//!   run as three branches (both modalities, GEO only, SEM only) over one
//!   shared query set, so the decoder learns to detect from any surviving
//!   sensor;
//! - proximity-based modality ensemble ([`ensemble`]): a single
//!   cross-attention layer that fuses the three branches' box features, with
//!   attention logits biased by a learnable linear function of inter-box
//!   center distance;
//! - bipartite set matching and losses ([`matching`]): Hungarian assignment,
//!   focal classification loss and L1 box regression;
//! - a center-distance mAP evaluator with a reduced composite score
//!   ([`eval`]), plus robustness and ablation scenario runners;
//! - a two-stage training pipeline ([`train`]) that first optimizes the
//!   decoding branches and then trains the ensemble with everything else
//!   frozen.
//!
//! Everything is pure f64 on the CPU and bit-reproducible for a fixed
//! (config, seed, build) triple. The `duodet` binary exposes the pipeline as
//! CLI subcommands; see the book under `book/` for a guided tour.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod ensemble;
pub mod eval;
pub mod error;
pub mod matching;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod tokens;
pub mod train;
pub mod world;

#[cfg(doctest)]
mod book;

pub use error::{Error, Result};
