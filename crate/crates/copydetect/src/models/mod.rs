//! Behavioral response models.
//!
//! Two models turn raw answer data into per-item, per-option response
//! probabilities for every student:
//!
//! - [`NominalModel`]: softmax over options with per-option intercept and
//!   slope in a latent ability, fitted by marginal maximum likelihood (EM
//!   over a fixed Gauss-Hermite quadrature of the standard-normal prior);
//!   abilities are scored by the posterior mean (EAP).
//! - [`WesolowskyModel`]: each student's chance of a correct answer is a
//!   one-parameter transform of the item's observed proportion correct,
//!   with incorrect options split by their observed shares.

mod nominal;
mod quadrature;
mod wesolowsky;

pub use nominal::{
    fit_nominal_mml, AbilityEstimate, ItemFlag, NominalItem, NominalModel, NrmFit, NrmFitConfig,
};
pub use quadrature::GaussHermite;
pub use wesolowsky::{
    fit_wesolowsky, solve_students, WesolowskyItemModel, WesolowskyModel, WesolowskyStudent,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("insufficient examinees: {found} records, {required} required")]
    InsufficientExaminees { found: usize, required: usize },
    #[error("at least {required} records required, found {found}")]
    TooFewRecords { found: usize, required: usize },
    #[error("invalid model parameters: {0}")]
    BadParameters(String),
    #[error("invalid fit configuration: {0}")]
    BadConfig(String),
    #[error("model covers {model_items} items x {model_options} options, data has {data_items} x {data_options}")]
    DimensionMismatch {
        model_items: usize,
        model_options: usize,
        data_items: usize,
        data_options: usize,
    },
}
