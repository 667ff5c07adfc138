//! Harmonization error and distribution-overlap metrics.

use serde::{Deserialize, Serialize};

use crate::cohort::CohortDataset;
use crate::error::{Error, Result};
use crate::stats;

/// Per-feature standardized mean absolute error and its mean over features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdMae {
    pub per_feature: Vec<f64>,
    pub mean: f64,
}

fn check_subjects(a: &CohortDataset, b: &CohortDataset) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::SubjectMismatch(format!("{} vs {} subjects", a.len(), b.len())));
    }
    for (x, y) in a.subjects().iter().zip(b.subjects()) {
        if x.subject_id != y.subject_id {
            return Err(Error::SubjectMismatch(format!("`{}` vs `{}`", x.subject_id, y.subject_id)));
        }
    }
    if a.taxonomy() != b.taxonomy() {
        return Err(Error::TaxonomyMismatch("harmonized and ground truth differ".into()));
    }
    Ok(())
}

/// `(1/n) Σ_j |ŷ_jv − y_jv| / σ_ref,v` for every feature.
pub fn std_mae(harmonized: &CohortDataset, ground_truth: &CohortDataset, ref_std: &[f64]) -> Result<StdMae> {
    check_subjects(harmonized, ground_truth)?;
    if harmonized.is_empty() {
        return Err(Error::EmptyInput);
    }
    let v = harmonized.n_features();
    if ref_std.len() != v {
        return Err(Error::ShapeMismatch {
            expected: format!("{v} reference deviations"),
            got: ref_std.len().to_string(),
        });
    }
    if let Some(f) = ref_std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::ZeroReferenceStd(f));
    }
    let per_feature = feature_abs_errors(harmonized, ground_truth)
        .into_iter()
        .zip(ref_std)
        .map(|(e, s)| e / s)
        .collect::<Vec<_>>();
    let mean = stats::mean(&per_feature);
    Ok(StdMae { per_feature, mean })
}

/// Mean absolute difference per feature, in feature units.
pub(crate) fn feature_abs_errors(a: &CohortDataset, b: &CohortDataset) -> Vec<f64> {
    let v = a.n_features();
    let mut sum = vec![0.0; v];
    for (x, y) in a.subjects().iter().zip(b.subjects()) {
        for ((s, p), q) in sum.iter_mut().zip(&x.features).zip(&y.features) {
            *s += (p - q).abs();
        }
    }
    let n = a.len() as f64;
    sum.into_iter().map(|s| s / n).collect()
}

/// Mean of the largest `⌈fraction·len⌉` values.
pub fn worst_case(values: &[f64], fraction: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidRange(format!("worst-case fraction {fraction} not in (0, 1]")));
    }
    let mut s = values.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let k = ((fraction * s.len() as f64).ceil() as usize).clamp(1, s.len());
    Ok(stats::mean(&s[..k]))
}

/// Bhattacharyya distance between two univariate Gaussians given as
/// `(mean, std)`.
pub fn bhattacharyya_gaussian(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for s in [a.1, b.1] {
        if !(s > 0.0) {
            return Err(Error::NonPositiveStd(s));
        }
    }
    let (va, vb) = (a.1 * a.1, b.1 * b.1);
    let d = a.0 - b.0;
    Ok(0.25 * d * d / (va + vb) + 0.25 * (0.25 * (va / vb + vb / va + 2.0)).ln())
}

/// Standardized mean difference `(μ_patients − μ_controls) / σ_controls`.
pub fn standardized_difference(patients: &[f64], controls: &[f64]) -> Result<f64> {
    if patients.len() < 2 || controls.len() < 2 {
        return Err(Error::DegenerateControls);
    }
    let sd = stats::std_dev(controls);
    if !(sd > 0.0) {
        return Err(Error::DegenerateControls);
    }
    Ok((stats::mean(patients) - stats::mean(controls)) / sd)
}
