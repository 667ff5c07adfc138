//! Subject-level outlier detector.
//!
//! A small fully connected network scores how likely each subject is to be
//! pathological from its within-site z-scored features. Because the inputs
//! are standardized per site, the detector sees deviations relative to the
//! site's own distribution and never raw scanner offsets.

pub mod config;
pub mod network;
pub mod train;

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cohort::CohortDataset;
use crate::error::{Error, Result};
use crate::filters::{FilterMask, OutlierDetector};
use crate::stats;

pub use config::NetworkConfig;
pub use network::{Gradients, Mlp, Mode};
pub use train::{train, Adam, TrainingData, TrainingLog};

/// Version of the model file layout.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Per-feature z-scores within one site (unbiased standard deviation).
/// Features without spread map to 0.
pub fn standardize_within_site(site: &CohortDataset) -> Result<Array2<f64>> {
    if site.len() < 2 {
        return Err(Error::SiteTooSmall(site.len()));
    }
    let mut x = site.feature_matrix();
    for mut col in x.columns_mut() {
        let values = col.to_vec();
        let mean = stats::mean(&values);
        let sd = stats::std_dev(&values);
        if sd <= 1e-12 * mean.abs().max(f64::MIN_POSITIVE) {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|y| (y - mean) / sd);
        }
    }
    Ok(x)
}

/// Standardizes each site separately and stacks them with labels
/// (1 = pathology). Subjects without a group label are rejected.
pub fn training_data(data: &CohortDataset) -> Result<TrainingData> {
    let mut parts = Vec::new();
    for (_, site) in data.by_site() {
        let x = standardize_within_site(&site)?;
        let labels = site
            .subjects()
            .iter()
            .map(|s| match &s.group {
                crate::cohort::Group::Unknown => Err(Error::MissingGroupLabel(s.subject_id.clone())),
                g => Ok(f64::from(u8::from(g.is_pathology()))),
            })
            .collect::<Result<Vec<_>>>()?;
        parts.push(TrainingData { x, labels });
    }
    if parts.is_empty() {
        return Ok(TrainingData {
            x: Array2::zeros((0, data.n_features())),
            labels: Vec::new(),
        });
    }
    TrainingData::concat(&parts)
}

/// A trained network bound to the feature layout it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpDetector {
    pub format_version: u32,
    pub taxonomy_fingerprint: String,
    pub network: Mlp,
}

/// Per-subject decision of the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierPrediction {
    pub mask: FilterMask,
    pub probabilities: Vec<f64>,
}

impl MlpDetector {
    /// Trains on multi-site datasets; each site is standardized on its own.
    pub fn train(train_sites: &CohortDataset, val_sites: &CohortDataset, config: &NetworkConfig) -> Result<(Self, TrainingLog)> {
        if train_sites.n_features() != config.input_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input features", config.input_dim),
                got: train_sites.n_features().to_string(),
            });
        }
        let (network, log) = train(&training_data(train_sites)?, &training_data(val_sites)?, config)?;
        Ok((
            Self {
                format_version: MODEL_FORMAT_VERSION,
                taxonomy_fingerprint: train_sites.taxonomy().fingerprint(),
                network,
            },
            log,
        ))
    }

    pub fn weight_hash(&self) -> String {
        self.network.weight_hash()
    }

    fn check_site(&self, site: &CohortDataset) -> Result<()> {
        if site.taxonomy().fingerprint() != self.taxonomy_fingerprint {
            return Err(Error::ModelMismatch(format!(
                "model fingerprint {}…, data fingerprint {}…",
                &self.taxonomy_fingerprint[..12.min(self.taxonomy_fingerprint.len())],
                &site.taxonomy().fingerprint()[..12]
            )));
        }
        Ok(())
    }

    /// Pathology probability of each subject of one site.
    pub fn probabilities(&self, site: &CohortDataset) -> Result<Vec<f64>> {
        self.check_site(site)?;
        let x = standardize_within_site(site)?;
        Ok(self.network.logits(&x)?.mapv(network::sigmoid).to_vec())
    }

    /// Excludes subjects whose probability exceeds `threshold`.
    pub fn predict_outliers(&self, site: &CohortDataset, threshold: f64) -> Result<OutlierPrediction> {
        let probabilities = self.probabilities(site)?;
        let keep = probabilities.iter().map(|&p| p <= threshold).collect();
        Ok(OutlierPrediction {
            mask: FilterMask::PerSubject(keep),
            probabilities,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_reader(std::io::BufReader::new(file))?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelMismatch(format!(
                "file format version {} (expected {MODEL_FORMAT_VERSION})",
                model.format_version
            )));
        }
        model.network.config.validate()?;
        Ok(model)
    }
}

impl OutlierDetector for MlpDetector {
    fn include(&self, site: &CohortDataset, threshold: f64) -> Result<Vec<bool>> {
        Ok(self.probabilities(site)?.into_iter().map(|p| p <= threshold).collect())
    }
}
