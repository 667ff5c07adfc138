//! Robust ComBat harmonization of tabular diffusion-MRI features.
//!
//! Moving sites are projected onto a normative all-HC reference with
//! empirical-Bayes site-effect estimates. Pathological subjects can be kept
//! out of the estimation by statistical filters or a trained MLP detector.
//! The crate also ships a synthetic multi-site simulator and the evaluation
//! harness used to compare filters.

pub mod cohort;
pub mod combat;
pub mod error;
pub mod eval;
pub mod filters;
pub mod mlp;
pub mod seeding;
pub mod stats;
pub mod synth;
pub mod taxonomy;

pub use cohort::{load_cohort, save_cohort, split_dataset, CohortDataset, CohortSchema, Group, SubjectRecord};
pub use combat::{
    estimate_site_effects, fit_normative_model, harmonize, inject_bias, pairwise_harmonize, standardize, EbConfig,
    Harmonizer, NormativeModel, PairwiseComBat, ResidualMatrix, SiteEffects,
};
pub use error::{Error, ErrorClass, Result};
pub use filters::{apply_filter, FilterMask, FilterMethod, FilterSpec, OutlierDetector};
pub use taxonomy::{Direction, FeatureTaxonomy};

pub(crate) fn hex_digest(hasher: sha2::Sha256) -> String {
    use sha2::Digest;
    hex::encode(hasher.finalize())
}
