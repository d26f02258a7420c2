//! Proximal self-expression on Vision Transformer class tokens.
//!
//! The crate provides a small dense linear-algebra backbone with reverse-mode
//! differentiation ([`linalg`]), the unrolled proximal-gradient self-expression
//! layer ([`prox`]), a desk-scale Vision Transformer ([`vit`]), end-to-end
//! training and placement sweeps ([`train`]), feature-geometry diagnostics based
//! on exact optimal transport and t-SNE ([`geometry`]), and dataset generation
//! and IDX loading ([`data`]).

pub mod data;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod prox;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use linalg::Matrix;
