//! Layout-aware fusion of text tokens and image patches.
//!
//! Tokens and patches are aligned by entropic optimal transport, fused with
//! a cross-attention path under a per-token gate, and passed through a
//! Gaussian bottleneck before tagging. Everything differentiates through the
//! small reverse-mode engine in [`autodiff`]. [`synthdoc`] generates the
//! form-like documents the model is trained and tested on.

pub mod autodiff;
pub mod labels;
pub mod ot;
pub mod fusion;
pub mod vib;
pub mod seeds;
pub mod synthdoc;
pub mod model;
pub mod trainer;
pub mod model_io;
pub mod diagnostics;
