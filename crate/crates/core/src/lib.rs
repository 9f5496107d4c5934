//! Desk-scale laboratory for studying modality interference in a toy
//! multimodal transformer.
//!
//! The crate provides, end to end:
//!
//! - a tiny reverse-mode autodiff tape over dense `f64` matrices ([`tensor`]),
//!   with an independent finite-difference oracle ([`gradcheck`]);
//! - a deterministic two-modality transformer with a frozen vision encoder,
//!   a trainable projector and a restricted answer head ([`model`]);
//! - a synthetic two-modality MCQA benchmark generator that plants a
//!   controllable text shortcut and ships heuristic perturbation operators
//!   ([`synth`]);
//! - masked adversarial perturbation in embedding space via raw-gradient PGD
//!   ([`adv`]);
//! - the training objectives: cross-entropy, adversarial loss and
//!   KL/JS consistency regularization ([`objectives`]);
//! - a mixture trainer covering an eight-method ablation grid ([`trainer`]);
//! - perturbation-based causal diagnostics, including the prediction-change
//!   rate and a training-cost overhead model ([`diagnostics`]).
//!
//! Everything is seeded: the same configuration and seed reproduce checkpoints,
//! metrics and reports byte for byte.

pub mod adv;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod seeds;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
