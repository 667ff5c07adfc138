//! Bundle × metric feature layout.
//!
//! Features are laid out bundle-major: feature `v` belongs to bundle
//! `v / M` and metric `v % M`, and is named `<bundle>__<metric>`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Separator between bundle and metric in a feature name.
pub const FEATURE_SEPARATOR: &str = "__";

/// How a diffusion metric moves in disease. Selects the tail trimmed by the
/// one-sided filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    IncreasesWithPathology,
    DecreasesWithPathology,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::IncreasesWithPathology => 1.0,
            Direction::DecreasesWithPathology => -1.0,
        }
    }
}

/// White-matter bundles of the default 43-bundle atlas layout.
pub const DEFAULT_BUNDLES: [&str; 43] = [
    "AC", "AF_L", "AF_R", "ATR_L", "ATR_R", "CC_Fr_1", "CC_Fr_2", "CC_Pr_Po", "CC_Pa", "CC_Oc",
    "CC_Te", "CG_L", "CG_R", "CST_L", "CST_R", "FPT_L", "FPT_R", "FX_L", "FX_R", "ICP_L", "ICP_R",
    "IFOF_L", "IFOF_R", "ILF_L", "ILF_R", "MCP", "MdLF_L", "MdLF_R", "OR_L", "OR_R", "POPT_L",
    "POPT_R", "SCP_L", "SCP_R", "SLF_L", "SLF_R", "STT_L", "STT_R", "UF_L", "UF_R", "VOF_L",
    "VOF_R", "PC",
];

/// The ten diffusion metrics; `t` suffix marks free-water corrected variants.
pub const DEFAULT_METRICS: [&str; 10] =
    ["ad", "adt", "afd", "fa", "fat", "fw", "md", "mdt", "rd", "rdt"];

/// Built-in pathological direction for the known metrics.
pub fn default_direction(metric: &str) -> Option<Direction> {
    match metric.to_ascii_lowercase().as_str() {
        "md" | "mdt" | "rd" | "rdt" | "fw" | "ad" | "adt" => Some(Direction::IncreasesWithPathology),
        "fa" | "fat" | "afd" => Some(Direction::DecreasesWithPathology),
        _ => None,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "TaxonomySpec", into = "TaxonomySpec")]
pub struct FeatureTaxonomy {
    bundles: Vec<String>,
    metrics: Vec<String>,
    directions: Vec<Direction>,
    names: Vec<String>,
    index: HashMap<String, usize>,
}

/// Serialized form of a taxonomy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomySpec {
    pub bundles: Vec<String>,
    pub metrics: Vec<String>,
    pub directions: Vec<Direction>,
}

impl TryFrom<TaxonomySpec> for FeatureTaxonomy {
    type Error = Error;

    fn try_from(spec: TaxonomySpec) -> Result<Self> {
        FeatureTaxonomy::new(spec.bundles, spec.metrics, spec.directions)
    }
}

impl From<FeatureTaxonomy> for TaxonomySpec {
    fn from(t: FeatureTaxonomy) -> Self {
        TaxonomySpec {
            bundles: t.bundles,
            metrics: t.metrics,
            directions: t.directions,
        }
    }
}

impl PartialEq for FeatureTaxonomy {
    fn eq(&self, other: &Self) -> bool {
        self.bundles == other.bundles
            && self.metrics == other.metrics
            && self.directions == other.directions
    }
}

impl FeatureTaxonomy {
    /// `directions[m]` is the pathological direction of `metrics[m]`.
    pub fn new(bundles: Vec<String>, metrics: Vec<String>, directions: Vec<Direction>) -> Result<Self> {
        if bundles.is_empty() || metrics.is_empty() {
            return Err(Error::InvalidTaxonomy("need at least one bundle and one metric".into()));
        }
        if directions.len() != metrics.len() {
            return Err(Error::InvalidTaxonomy(format!(
                "{} metrics but {} direction entries",
                metrics.len(),
                directions.len()
            )));
        }
        for name in bundles.iter().chain(metrics.iter()) {
            if name.is_empty() || name.contains(FEATURE_SEPARATOR) || name.contains(',') {
                return Err(Error::InvalidTaxonomy(format!("invalid identifier `{name}`")));
            }
        }
        let mut names = Vec::with_capacity(bundles.len() * metrics.len());
        let mut index = HashMap::with_capacity(bundles.len() * metrics.len());
        for b in &bundles {
            for m in &metrics {
                let name = format!("{b}{FEATURE_SEPARATOR}{m}");
                if index.insert(name.clone(), names.len()).is_some() {
                    return Err(Error::InvalidTaxonomy(format!("duplicate feature `{name}`")));
                }
                names.push(name);
            }
        }
        Ok(Self {
            bundles,
            metrics,
            directions,
            names,
            index,
        })
    }

    /// Builds a taxonomy using the built-in direction map; fails on metrics
    /// without a known direction.
    pub fn with_default_directions(bundles: Vec<String>, metrics: Vec<String>) -> Result<Self> {
        let directions = metrics
            .iter()
            .map(|m| {
                default_direction(m).ok_or_else(|| {
                    Error::InvalidTaxonomy(format!("no pathological direction known for metric `{m}`"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bundles, metrics, directions)
    }

    /// 43 bundles × 10 metrics = 430 features.
    pub fn dmri_default() -> Self {
        Self::with_default_directions(
            DEFAULT_BUNDLES.iter().map(|s| s.to_string()).collect(),
            DEFAULT_METRICS.iter().map(|s| s.to_string()).collect(),
        )
        .expect("default taxonomy is valid")
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn n_bundles(&self) -> usize {
        self.bundles.len()
    }

    pub fn n_metrics(&self) -> usize {
        self.metrics.len()
    }

    pub fn bundles(&self) -> &[String] {
        &self.bundles
    }

    pub fn metrics(&self) -> &[String] {
        &self.metrics
    }

    pub fn feature_names(&self) -> &[String] {
        &self.names
    }

    pub fn feature_name(&self, v: usize) -> &str {
        &self.names[v]
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn index_of(&self, bundle: usize, metric: usize) -> usize {
        bundle * self.metrics.len() + metric
    }

    pub fn bundle_of(&self, v: usize) -> usize {
        v / self.metrics.len()
    }

    pub fn metric_of(&self, v: usize) -> usize {
        v % self.metrics.len()
    }

    pub fn metric_index(&self, metric: &str) -> Option<usize> {
        self.metrics.iter().position(|m| m == metric)
    }

    pub fn bundle_index(&self, bundle: &str) -> Option<usize> {
        self.bundles.iter().position(|b| b == bundle)
    }

    pub fn metric_direction(&self, metric: usize) -> Direction {
        self.directions[metric]
    }

    pub fn feature_direction(&self, v: usize) -> Direction {
        self.directions[self.metric_of(v)]
    }

    /// Features of one metric, in bundle order.
    pub fn features_of_metric(&self, metric: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.bundles.len()).map(move |b| self.index_of(b, metric))
    }

    /// SHA-256 over the ordered feature names and directions. Used to refuse
    /// applying a trained model to a different feature layout.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for name in &self.names {
            hasher.update(name.as_bytes());
            hasher.update(b"\n");
        }
        for d in &self.directions {
            hasher.update(match d {
                Direction::IncreasesWithPathology => b"+",
                Direction::DecreasesWithPathology => b"-",
            });
        }
        crate::hex_digest(hasher)
    }
}
