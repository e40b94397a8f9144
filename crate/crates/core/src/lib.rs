//! Desk-scale pruning and reconstruction kernels for tiny decoder-only
//! transformers.
//!
//! The crate is `no_std` (with `alloc`) and fully deterministic: every
//! operation is a pure function of its inputs and an explicit seed, and all
//! transcendental math goes through `libm` so results do not depend on the
//! host's libm. File formats, reports, and the command-line front end live in
//! the companion `srlab` crate.
//!
//! Layout:
//! - [`tensor`], [`graph`], [`adam`] — dense f32 tensors, reverse-mode
//!   autodiff, Adam with a linear-decay schedule
//! - [`model`] — a small pre-norm decoder-only transformer split into blocks
//! - [`pruning`] — magnitude / activation-aware masks with exact kept counts
//! - [`recon`] — layer-wise least squares, block-wise gradient
//!   reconstruction, global propagation, cross-block stitching
//! - [`calib`] — byte-level tokens, corpus sampling, model self-generation
//! - [`eval`] — perplexity, generalization gap, parameter accounting

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adam;
pub mod calib;
pub mod eval;
pub mod fdcheck;
pub mod graph;
pub mod model;
pub mod pruning;
pub mod recon;
pub mod rng;
pub mod solver;
pub mod tensor;
pub mod tokens;

use alloc::string::String;

/// Crate-wide error type. Variants mirror the distinct failure contracts of
/// the public operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An operation received tensors whose shapes do not fit it.
    ShapeMismatch {
        op: &'static str,
        detail: String,
    },
    /// A public operation produced a NaN or infinity from finite inputs.
    NonFinite {
        op: &'static str,
    },
    /// `backward` was called on a loss node that is not a scalar.
    NonScalarLoss {
        numel: usize,
    },
    /// A configuration violated its invariants.
    InvalidConfig(String),
    /// A token id at or above the vocabulary size.
    TokenOutOfRange {
        id: u32,
        vocab: u32,
    },
    EmptyCalibration,
    /// The corpus is shorter than one sample window.
    CorpusTooShort {
        corpus_len: usize,
        window: usize,
    },
    /// Activation norms are required for the requested scoring method.
    MissingNorms,
    /// A least-squares system stayed singular after ridge damping.
    SingularSystem {
        layer: String,
    },
    /// The reconstruction loss became non-finite.
    NanLoss {
        block: usize,
        step: usize,
    },
    /// Cross-block reconstruction needs at least two blocks.
    CrUnavailable {
        n_blocks: usize,
    },
    /// Self-generation exceeded its retry cap; names the rejecting filter.
    GenerationRetryCap {
        filter: String,
        cap: usize,
    },
    /// Sequence lengths of two token sets disagree.
    SeqLenMismatch {
        left: usize,
        right: usize,
    },
    /// An internal contract that must hold by construction was violated.
    InvariantViolation(String),
}

impl core::fmt::Display for Error {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in `{op}`: {detail}")
            }
            Error::NonFinite { op } => {
                write!(f, "non-finite values produced by `{op}`")
            }
            Error::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::TokenOutOfRange { id, vocab } => {
                write!(f, "token id {id} out of range for vocabulary {vocab}")
            }
            Error::EmptyCalibration => write!(f, "calibration set is empty"),
            Error::CorpusTooShort { corpus_len, window } => {
                write!(f, "corpus has {corpus_len} tokens, need at least {window}")
            }
            Error::MissingNorms => {
                write!(f, "activation norms are required for wanda scoring")
            }
            Error::SingularSystem { layer } => {
                write!(f, "singular least-squares system in layer `{layer}`")
            }
            Error::NanLoss { block, step } => {
                write!(f, "non-finite loss at block {block}, step {step}")
            }
            Error::CrUnavailable { n_blocks } => {
                write!(f, "cross-block reconstruction needs >= 2 blocks, model has {n_blocks}")
            }
            Error::GenerationRetryCap { filter, cap } => {
                write!(f, "generation filter `{filter}` rejected {cap} consecutive attempts")
            }
            Error::SeqLenMismatch { left, right } => {
                write!(f, "sequence length mismatch: {left} vs {right}")
            }
            Error::InvariantViolation(msg) => write!(f, "invariant violation: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
