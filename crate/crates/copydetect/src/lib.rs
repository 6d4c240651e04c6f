//! Answer-copying detection for multiple-choice exams.
//!
//! The crate is organized around a pipeline:
//!
//! 1. [`dataio`] ingests answer keys and per-student response files and
//!    persists fitted models and detection results.
//! 2. [`models`] fits two behavioral response models (a nominal response
//!    model estimated by marginal maximum likelihood, and a
//!    proportion-correct model in the style of Wesolowsky) and exposes
//!    per-item, per-option answer probabilities for every student.
//! 3. [`pbd`] is the exact Poisson-binomial engine behind the similarity
//!    tests: pmf, tails, critical values, and the likelihood-ratio
//!    machinery that makes "reject for many identical answers" an optimal
//!    test.
//! 4. [`indices`] builds per-pair match profiles and computes the eight
//!    index variants (omega/gamma families, conditional/unconditional,
//!    exact/standardized tails).
//! 5. [`mtp`] applies Benjamini-Hochberg control per examination room and
//!    flags rooms where copying looks massive.
//! 6. [`simulate`] reproduces the Monte-Carlo validation protocol:
//!    cross-room null pairs for type-I error and copy injection for power
//!    curves, on real or synthetic data.

pub mod dataio;
pub mod indices;
pub mod models;
pub mod mtp;
pub mod pbd;
pub mod simulate;

pub use dataio::{ExamDesign, ResponseMatrix, StudentRecord, MISSING_CHAR};
pub use indices::{IndexVariant, PairResult, Scorer};
pub use pbd::{CopySet, MatchProfile};
