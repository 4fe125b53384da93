//! Information-bottleneck analysis of contrastive projection heads.
//!
//! A contrastive pipeline factors as a Markov chain
//! `Y -> X -> Z1 -> Z2 -> R`: labels generate inputs, the encoder produces
//! `Z1`, the projector produces `Z2`, and the loss couples `Z2` to the
//! self-supervised targets `R`. The downstream value of the encoder features
//! is sandwiched by
//!
//! ```text
//! I(Z1;R) - I(Z1;Z2) + I(R;Y)  <=  I(Y;Z1)  <=  I(Y;Z2) - I(Z1;Z2) + H(Z1)
//! ```
//!
//! so a good projector behaves like an information bottleneck: it keeps what
//! the objective needs and drops the rest. This crate turns that analysis
//! into executable pieces:
//!
//! - [`tensor`] — dense matrices, Gram kernels, and a Jacobi eigensolver;
//! - [`exact`] — exact Shannon quantities on small discrete chains and
//!   exhaustive verification of the bounds above;
//! - [`minfo`] — matrix-based Rényi entropy / mutual information with
//!   analytic gradients, plus the empirical bound estimators;
//! - [`nn`] — a small reverse-mode engine with the contrastive losses and
//!   the three bottlenecked projector variants (bottleneck regularizer,
//!   finite scalar quantization, top-k sparse autoencoder);
//! - [`harness`] — synthetic-data training runs, online linear probes,
//!   parameter sweeps, and rank-correlation reporting.
//!
//! Everything is `no_std + alloc`; the companion CLI crate carries file
//! formats and process orchestration.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod exact;
pub mod harness;
pub mod minfo;
pub mod nn;
pub mod tensor;

pub use tensor::{DenseMatrix, GramKernel};
