//! Outlier filters deciding which residuals enter site-effect estimation.
//!
//! Bundle-level methods judge each feature column on its own and produce a
//! [`FilterMask::PerValue`]; subject-level methods (global scores, the MLP
//! detector and the HC oracle) drop whole subjects.

pub mod global;
pub mod trimming;
pub mod univariate;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortDataset, Group};
use crate::combat::ResidualMatrix;
use crate::error::{Error, Result};
use crate::taxonomy::FeatureTaxonomy;

pub use global::{filter_global_mad, filter_global_zscore};
pub use trimming::{filter_mms, filter_vs, survivor_floor};
pub use univariate::{filter_iqr, filter_mad, filter_qn, filter_sn, filter_zscore, FeatureStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FilterMethod {
    None,
    ZScore,
    Iqr,
    Mad,
    Sn,
    Qn,
    Mms,
    Vs,
    GlobalZScore,
    GlobalMad,
    Mlp,
    OracleHc,
}

impl FilterMethod {
    pub const ALL: [FilterMethod; 12] = [
        FilterMethod::None,
        FilterMethod::ZScore,
        FilterMethod::Iqr,
        FilterMethod::Mad,
        FilterMethod::Sn,
        FilterMethod::Qn,
        FilterMethod::Mms,
        FilterMethod::Vs,
        FilterMethod::GlobalZScore,
        FilterMethod::GlobalMad,
        FilterMethod::Mlp,
        FilterMethod::OracleHc,
    ];

    /// Report label.
    pub fn label(self) -> &'static str {
        match self {
            FilterMethod::None => "NO_FILTERING",
            FilterMethod::ZScore => "ZS",
            FilterMethod::Iqr => "IQR",
            FilterMethod::Mad => "MAD",
            FilterMethod::Sn => "SN",
            FilterMethod::Qn => "QN",
            FilterMethod::Mms => "MMS",
            FilterMethod::Vs => "VS",
            FilterMethod::GlobalZScore => "G_ZS",
            FilterMethod::GlobalMad => "G_MAD",
            FilterMethod::Mlp => "MLP",
            FilterMethod::OracleHc => "HC",
        }
    }

    /// Shipped threshold: the cut-off T or fence multiplier k, the
    /// convergence tolerance for the trimming filters, or the decision
    /// probability for the MLP.
    pub fn default_threshold(self) -> f64 {
        match self {
            FilterMethod::None | FilterMethod::OracleHc => 1.0,
            FilterMethod::ZScore | FilterMethod::Sn | FilterMethod::Qn => 3.0,
            FilterMethod::Iqr | FilterMethod::GlobalZScore => 1.5,
            FilterMethod::Mad | FilterMethod::GlobalMad => 3.5,
            FilterMethod::Mms => 1e-3,
            FilterMethod::Vs => 0.05,
            FilterMethod::Mlp => 0.5,
        }
    }

    pub fn is_subject_level(self) -> bool {
        matches!(
            self,
            FilterMethod::GlobalZScore | FilterMethod::GlobalMad | FilterMethod::Mlp | FilterMethod::OracleHc
        )
    }
}

impl fmt::Display for FilterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FilterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match key.as_str() {
            "none" | "no_filtering" => FilterMethod::None,
            "zs" | "zscore" | "z_score" => FilterMethod::ZScore,
            "iqr" => FilterMethod::Iqr,
            "mad" => FilterMethod::Mad,
            "sn" => FilterMethod::Sn,
            "qn" => FilterMethod::Qn,
            "mms" => FilterMethod::Mms,
            "vs" => FilterMethod::Vs,
            "g_zs" | "gzs" => FilterMethod::GlobalZScore,
            "g_mad" | "gmad" => FilterMethod::GlobalMad,
            "mlp" => FilterMethod::Mlp,
            "hc" | "oracle_hc" | "oraclehc" => FilterMethod::OracleHc,
            _ => return Err(Error::UnknownMethod(s.to_string())),
        })
    }
}

/// A filter method with its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub method: FilterMethod,
    pub threshold: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self::new(FilterMethod::None)
    }
}

impl FilterSpec {
    pub fn new(method: FilterMethod) -> Self {
        Self {
            method,
            threshold: method.default_threshold(),
        }
    }

    pub fn with_threshold(method: FilterMethod, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0) || !threshold.is_finite() {
            return Err(Error::InvalidThreshold(threshold));
        }
        Ok(Self { method, threshold })
    }

    pub fn label(&self) -> &'static str {
        self.method.label()
    }
}

/// Parses `method` or `method:threshold`, e.g. `mad`, `zs:2.5`.
impl FromStr for FilterSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None => Ok(FilterSpec::new(s.parse()?)),
            Some((m, t)) => {
                let t: f64 = t
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad threshold in filter `{s}`")))?;
                FilterSpec::with_threshold(m.parse()?, t)
            }
        }
    }
}

/// Subject-level detector for [`FilterMethod::Mlp`].
pub trait OutlierDetector: Send + Sync {
    /// Include flags (`true` = keep) for every subject of one site, computed
    /// from the site's raw features.
    fn include(&self, site: &CohortDataset, threshold: f64) -> Result<Vec<bool>>;
}

/// Which values are used for site-effect estimation.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterMask {
    /// Subjects × features flags.
    PerValue(Array2<bool>),
    /// One flag per subject, applied to every feature.
    PerSubject(Vec<bool>),
}

impl FilterMask {
    pub fn all(n_subjects: usize) -> Self {
        FilterMask::PerSubject(vec![true; n_subjects])
    }

    pub fn n_subjects(&self) -> usize {
        match self {
            FilterMask::PerValue(m) => m.nrows(),
            FilterMask::PerSubject(s) => s.len(),
        }
    }

    pub fn n_features(&self) -> Option<usize> {
        match self {
            FilterMask::PerValue(m) => Some(m.ncols()),
            FilterMask::PerSubject(_) => None,
        }
    }

    pub(crate) fn shape_description(&self) -> String {
        match self {
            FilterMask::PerValue(m) => format!("{}x{} value mask", m.nrows(), m.ncols()),
            FilterMask::PerSubject(s) => format!("{}-subject mask", s.len()),
        }
    }

    pub fn includes(&self, subject: usize, feature: usize) -> bool {
        match self {
            FilterMask::PerValue(m) => m[(subject, feature)],
            FilterMask::PerSubject(s) => s[subject],
        }
    }

    /// Broadcast to subjects × features flags.
    pub fn to_value_mask(&self, n_features: usize) -> Array2<bool> {
        match self {
            FilterMask::PerValue(m) => m.clone(),
            FilterMask::PerSubject(s) => Array2::from_shape_fn((s.len(), n_features), |(j, _)| s[j]),
        }
    }

    /// Included values per feature.
    pub fn included_per_feature(&self, n_features: usize) -> Vec<usize> {
        match self {
            FilterMask::PerValue(m) => m.columns().into_iter().map(|c| c.iter().filter(|&&b| b).count()).collect(),
            FilterMask::PerSubject(s) => vec![s.iter().filter(|&&b| b).count(); n_features],
        }
    }

    /// Fraction of each subject's values that were excluded.
    pub fn excluded_fraction(&self, subject: usize) -> f64 {
        match self {
            FilterMask::PerValue(m) => {
                let row = m.row(subject);
                row.iter().filter(|&&b| !b).count() as f64 / row.len().max(1) as f64
            }
            FilterMask::PerSubject(s) => f64::from(u8::from(!s[subject])),
        }
    }

    /// Writes `subject_id,<feature...>` rows of 0/1 flags.
    pub fn write_csv(&self, path: impl AsRef<Path>, subject_ids: &[String], taxonomy: &FeatureTaxonomy) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let v = taxonomy.n_features();
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["subject_id"];
        header.extend(taxonomy.feature_names().iter().map(String::as_str));
        w.write_record(&header).map_err(csv_err)?;
        for (j, id) in subject_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend((0..v).map(|f| if self.includes(j, f) { "1" } else { "0" }.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn per_column<F>(residuals: &ResidualMatrix, f: F) -> Result<Array2<bool>>
where
    F: Fn(usize, &[f64]) -> Result<Vec<bool>>,
{
    let (n, v) = residuals.z.dim();
    let mut mask = Array2::from_elem((n, v), true);
    for (feature, col) in residuals.z.columns().into_iter().enumerate() {
        let keep = f(feature, &col.to_vec())?;
        mask.column_mut(feature).assign(&ndarray::Array1::from(keep));
    }
    Ok(mask)
}

/// Runs the filter described by `spec` on one site's residuals.
///
/// `site` supplies the feature directions and, for the MLP, the raw
/// features the detector standardizes itself.
pub fn apply_filter(
    residuals: &ResidualMatrix,
    spec: &FilterSpec,
    site: &CohortDataset,
    detector: Option<&dyn OutlierDetector>,
) -> Result<FilterMask> {
    if !(spec.threshold > 0.0) {
        return Err(Error::InvalidThreshold(spec.threshold));
    }
    let t = spec.threshold;
    let taxonomy = site.taxonomy();
    let mask = match spec.method {
        FilterMethod::None => FilterMask::all(residuals.n_subjects()),
        FilterMethod::ZScore => FilterMask::PerValue(per_column(residuals, |_, c| filter_zscore(c, t))?),
        FilterMethod::Iqr => FilterMask::PerValue(per_column(residuals, |_, c| filter_iqr(c, t))?),
        FilterMethod::Mad => FilterMask::PerValue(per_column(residuals, |_, c| filter_mad(c, t))?),
        FilterMethod::Sn => FilterMask::PerValue(per_column(residuals, |_, c| filter_sn(c, t))?),
        FilterMethod::Qn => FilterMask::PerValue(per_column(residuals, |_, c| filter_qn(c, t))?),
        FilterMethod::Mms => FilterMask::PerValue(per_column(residuals, |v, c| {
            Ok(filter_mms(c, taxonomy.feature_direction(v), t)?.include)
        })?),
        FilterMethod::Vs => FilterMask::PerValue(per_column(residuals, |v, c| {
            Ok(filter_vs(c, taxonomy.feature_direction(v), t)?.include)
        })?),
        FilterMethod::GlobalZScore => FilterMask::PerSubject(filter_global_zscore(&residuals.z, t)?),
        FilterMethod::GlobalMad => FilterMask::PerSubject(filter_global_mad(&residuals.z, t)?),
        FilterMethod::OracleHc => FilterMask::PerSubject(
            residuals
                .groups
                .iter()
                .zip(&residuals.subject_ids)
                .map(|(g, id)| match g {
                    Group::Unknown => Err(Error::MissingGroupLabel(id.clone())),
                    g => Ok(g.is_hc()),
                })
                .collect::<Result<_>>()?,
        ),
        FilterMethod::Mlp => {
            let detector = detector.ok_or_else(|| Error::MissingDetector(spec.label().into()))?;
            let keep = detector.include(site, t)?;
            if keep.len() != residuals.n_subjects() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} subject flags", residuals.n_subjects()),
                    got: keep.len().to_string(),
                });
            }
            FilterMask::PerSubject(keep)
        }
    };
    let counts = mask.included_per_feature(residuals.n_features());
    if let Some((feature, &included)) = counts.iter().enumerate().find(|&(_, &c)| c < 2) {
        return Err(Error::MaskTooAggressive { feature, included });
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in FilterMethod::ALL {
            assert_eq!(m.label().parse::<FilterMethod>().unwrap(), m);
        }
        assert_eq!("oracle-hc".parse::<FilterMethod>().unwrap(), FilterMethod::OracleHc);
        assert!(matches!("bogus".parse::<FilterMethod>(), Err(Error::UnknownMethod(_))));
        let spec: FilterSpec = "zs:2.5".parse().unwrap();
        assert_eq!(spec.threshold, 2.5);
        assert!(matches!("mad:-1".parse::<FilterSpec>(), Err(Error::InvalidThreshold(_))));
    }

    #[test]
    fn shipped_thresholds() {
        assert_eq!(FilterSpec::new(FilterMethod::ZScore).threshold, 3.0);
        assert_eq!(FilterSpec::new(FilterMethod::Iqr).threshold, 1.5);
        assert_eq!(FilterSpec::new(FilterMethod::Mad).threshold, 3.5);
        assert_eq!(FilterSpec::new(FilterMethod::GlobalZScore).threshold, 1.5);
        assert_eq!(FilterSpec::new(FilterMethod::GlobalMad).threshold, 3.5);
    }

    #[test]
    fn per_subject_mask_broadcasts() {
        let m = FilterMask::PerSubject(vec![true, false, true]);
        let v = m.to_value_mask(4);
        for j in 0..3 {
            for f in 0..4 {
                assert_eq!(v[(j, f)], m.includes(j, f));
            }
        }
        assert_eq!(m.included_per_feature(2), vec![2, 2]);
    }
}
