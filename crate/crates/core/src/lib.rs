//! Episodic cross-domain few-shot meta-learning with style-transfer task
//! augmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffcore`]: dense f64 tensors, a define-by-run reverse-mode tape,
//!   SGD/Adam and a central finite-difference checker.
//! * [`worldgen`]: a synthetic multi-domain benchmark whose domains share
//!   class content but differ by parametric style transforms, plus N-way
//!   K-shot episode sampling.
//! * [`augment`]: Dirichlet mixing weights, multi-task interpolation,
//!   task style statistics and style transfer, and feature modulation.
//! * [`model`]: a split-forward MLP encoder with metric-based heads.
//! * [`metatrain`]: the two-stage meta-training loop, evaluation,
//!   the style-invariance diagnostic and checkpointing.
//! * [`theorylab`]: Monte-Carlo checks of the closed-form mixing variances,
//!   the concentration sweep and the total-variance decomposition.

pub mod augment;
pub mod diffcore;
pub mod error;
pub mod metatrain;
pub mod model;
pub mod rng;
pub mod theorylab;
pub mod worldgen;

pub use error::{Error, Result};

/// Engine version embedded in every artifact for provenance.
pub const ENGINE_VERSION: &str = concat!("taml-core ", env!("CARGO_PKG_VERSION"));
