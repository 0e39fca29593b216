//! Differentiable architecture search for lightweight segmentation networks.
//!
//! The crate implements the full search stack in plain Rust with `f64`
//! arithmetic on a reverse-mode tape:
//!
//! - [`tensor`] — dense tensors, the autodiff tape, and the candidate
//!   operation primitives (convolutions, pooling, normalization, resampling).
//! - [`searchspace`] — the cell DAG, the supernet (stem + independent cells +
//!   dense fusion cell + classifier), discrete genotypes and their canonical
//!   serialization.
//! - [`relax`] — Gumbel-softmax relaxation of the per-edge operation choice
//!   and the temperature schedule.
//! - [`ggm`] — graph-convolution guided communication of architecture
//!   parameters between adjacent cells.
//! - [`latency`] — latency lookup tables (measured or analytic) and the
//!   differentiable expected-latency loss term.
//! - [`engine`] — the single-level search loop, optimizers, decoding,
//!   finetuning, and the random-search / ablation drivers.
//! - [`data`] — deterministic synthetic segmentation tasks, augmentation,
//!   and the mean-IoU metric.
//!
//! Everything is deterministic given a seed: all randomness flows through
//! named [`rng`] streams and all reductions run in a fixed order, so two runs
//! with the same configuration produce bitwise-identical results.
//!
//! The crate is `no_std`-compatible (`alloc` required); the `std` feature
//! only enables conveniences, and `parallel` adds deterministic batch
//! parallelism via rayon.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod engine;
pub mod ggm;
pub mod latency;
pub mod math;
pub mod relax;
pub mod rng;
pub mod searchspace;
pub mod tensor;

use alloc::string::String;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
    #[error("missing weights for parametric operation {0}")]
    MissingWeights(String),
    #[error("invalid stride {stride} for {op}")]
    InvalidStride { op: String, stride: usize },
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("latency table has no entry for {0}")]
    LutMissingEntry(String),
    #[error("latency table does not match genotype topology: {0}")]
    LutTopologyMismatch(String),
    #[error("timer resolution {granularity_us} us is too coarse for measured mode")]
    TimerTooCoarse { granularity_us: f64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("search diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },
    #[error("latency band {lo_us}..{hi_us} us infeasible after {tries} samples")]
    BandInfeasible { lo_us: f64, hi_us: f64, tries: usize },
    #[error("variable is not connected to this tape")]
    NotOnTape,
}

pub type Result<T> = core::result::Result<T, Error>;
