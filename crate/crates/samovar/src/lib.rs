//! Linear-attention time-series forecasting with an exact dynamic-VAR reading of
//! the model internals.
//!
//! The library trains three forecaster variants over patched multichannel series
//! (`attn_stack`), and can reconstruct the per-head VAR weight matrices that a
//! trained forecaster applies to its first-layer inputs (`interpret`), so the fast
//! recurrent forward pass and the explicit weight form can be checked against each
//! other numerically.
//!
//! Module map:
//! - [`autodiff`]: dense reverse-mode tensor engine (f32/f64) with a finite-difference
//!   gradient checker.
//! - [`var_math`]: vector-autoregressive process sampling, simulation and
//!   ground-truth contribution maps.
//! - [`synth_bench`]: deterministic synthetic train/validation example streams.
//! - [`ingest`]: CSV loading, chronological splits, windowing.
//! - [`tokenizer`]: patching, per-token normalization, interleaved exogenous/
//!   endogenous token construction, output projection.
//! - [`attn_stack`]: the three model variants and their parameter store.
//! - [`interpret`]: explicit VAR weights, influence paths, contribution heatmaps.
//! - [`train_eval`]: AdamW, LR schedule, training loop, evaluation metrics.
//! - [`checkpoint`]: binary weight serialization.
//! - [`cli`]: command surface used by the `samovar` binary.

pub mod attn_stack;
pub mod checkpoint;
pub mod cli;
pub mod autodiff;
pub mod ingest;
pub mod interpret;
pub mod model;
pub mod params;
pub mod synth_bench;
pub mod tokenizer;
pub mod train_eval;
pub mod var_math;

pub use autodiff::{Graph, Scalar, Tensor};
