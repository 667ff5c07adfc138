//! Reference-anchored ComBat.
//!
//! A normative model `y = α + xᵀβ + σ·ε` is fit on an all-HC reference
//! cohort. A moving site is standardized against it, its additive (γ) and
//! multiplicative (δ) site effects are estimated with parametric empirical
//! Bayes on the values a [`FilterMask`] keeps, and every subject is mapped
//! back through the model with the effects removed.

use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortDataset, Group};
use crate::error::{Error, Result};
use crate::filters::{apply_filter, FilterMask, FilterSpec, OutlierDetector};

/// Cap on the inverse-gamma shape; reached when every feature has the same
/// δ̂², which makes the prior a point mass at that value.
const LAMBDA_MAX: f64 = 1e10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormativeModel {
    pub alpha: Array1<f64>,
    /// V × C covariate coefficients.
    pub beta: Array2<f64>,
    /// Residual standard deviation; 0 marks a degenerate feature.
    pub sigma: Array1<f64>,
    pub covariate_names: Vec<String>,
    pub taxonomy_fingerprint: String,
}

impl NormativeModel {
    pub fn n_features(&self) -> usize {
        self.alpha.len()
    }

    /// Features with positive residual variance. The others are passed
    /// through harmonization untouched.
    pub fn is_active(&self, v: usize) -> bool {
        self.sigma[v] > 0.0
    }

    pub fn degenerate_features(&self) -> Vec<usize> {
        (0..self.n_features()).filter(|&v| !self.is_active(v)).collect()
    }

    /// Expected value `α + xᵀβ` for every subject × feature.
    pub fn predict(&self, covariates: &Array2<f64>) -> Array2<f64> {
        covariates.dot(&self.beta.t()) + &self.alpha
    }

    fn check_dataset(&self, data: &CohortDataset) -> Result<()> {
        if data.taxonomy().fingerprint() != self.taxonomy_fingerprint {
            return Err(Error::TaxonomyMismatch(
                "dataset features differ from the normative model".into(),
            ));
        }
        if data.covariate_names() != self.covariate_names.as_slice() {
            return Err(Error::TaxonomyMismatch(format!(
                "covariates {:?} vs model {:?}",
                data.covariate_names(),
                self.covariate_names
            )));
        }
        Ok(())
    }
}

/// Ordinary least squares of every feature on `[1, covariates]` via a thin
/// QR factorization of the design.
pub fn fit_normative_model(reference: &CohortDataset) -> Result<NormativeModel> {
    let n = reference.len();
    let c = reference.covariate_names().len();
    let p = c + 1;
    if n < c + 2 {
        return Err(Error::TooFewSubjects { needed: c + 2, got: n });
    }
    let v = reference.n_features();
    let design = DMatrix::from_fn(n, p, |i, k| {
        if k == 0 {
            1.0
        } else {
            reference.subjects()[i].covariates[k - 1]
        }
    });
    let y = DMatrix::from_fn(n, v, |i, f| reference.subjects()[i].features[f]);

    let qr = design.clone().qr();
    let r = qr.r();
    for k in 0..p {
        let scale = design.column(k).norm();
        if scale == 0.0 || r[(k, k)].abs() <= 1e-10 * scale {
            return Err(Error::RankDeficientDesign);
        }
    }
    let qty = qr.q().transpose() * &y;
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficientDesign)?;
    let residuals = &y - &design * &coef;

    let dof = (n - p) as f64;
    let mut alpha = Array1::zeros(v);
    let mut beta = Array2::zeros((v, c));
    let mut sigma = Array1::zeros(v);
    for f in 0..v {
        alpha[f] = coef[(0, f)];
        for k in 0..c {
            beta[(f, k)] = coef[(k + 1, f)];
        }
        let rss: f64 = residuals.column(f).iter().map(|e| e * e).sum();
        let s = (rss / dof).sqrt();
        let scale = (y.column(f).norm_squared() / n as f64).sqrt().max(1.0);
        sigma[f] = if s <= 1e-12 * scale { 0.0 } else { s };
    }
    let model = NormativeModel {
        alpha,
        beta,
        sigma,
        covariate_names: reference.covariate_names().to_vec(),
        taxonomy_fingerprint: reference.taxonomy().fingerprint(),
    };
    let degenerate = model.degenerate_features();
    if degenerate.len() == v {
        return Err(Error::ZeroResidualVariance);
    }
    if !degenerate.is_empty() {
        log::warn!(
            "{} feature(s) have zero residual variance and are excluded from harmonization: {:?}",
            degenerate.len(),
            degenerate
                .iter()
                .map(|&f| reference.taxonomy().feature_name(f))
                .collect::<Vec<_>>()
        );
    }
    Ok(model)
}

/// Standardized residuals of one site against the normative model.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMatrix {
    /// Subjects × features; 0 for degenerate features.
    pub z: Array2<f64>,
    pub subject_ids: Vec<String>,
    pub groups: Vec<Group>,
    pub site_id: String,
}

impl ResidualMatrix {
    pub fn n_subjects(&self) -> usize {
        self.z.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.z.ncols()
    }
}

/// `z = (y − α − xᵀβ) / σ`.
pub fn standardize(site: &CohortDataset, model: &NormativeModel) -> Result<ResidualMatrix> {
    model.check_dataset(site)?;
    let mut z = site.feature_matrix() - model.predict(&site.covariate_matrix());
    for (v, mut col) in z.columns_mut().into_iter().enumerate() {
        let s = model.sigma[v];
        if s > 0.0 {
            col.mapv_inplace(|e| e / s);
        } else {
            col.fill(0.0);
        }
    }
    Ok(ResidualMatrix {
        z,
        subject_ids: site.subject_ids(),
        groups: site.groups(),
        site_id: site.site_ids().join("+"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EbConfig {
    /// Shrink the raw estimates; when false, `γ* = γ̂` and `δ* = δ̂`.
    pub empirical_bayes: bool,
    /// Convergence threshold on the largest change of `γ*` or `δ*²`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EbConfig {
    fn default() -> Self {
        Self {
            empirical_bayes: true,
            tol: 1e-4,
            max_iter: 100,
        }
    }
}

/// Site-level hyperparameters: Normal(γ̄, τ²) prior on γ and
/// InverseGamma(λ, θ) prior on δ².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EbHyper {
    pub gamma_bar: f64,
    pub tau_sq: f64,
    pub lambda: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteEffects {
    pub gamma_hat: Vec<f64>,
    pub delta_hat: Vec<f64>,
    pub gamma_star: Vec<f64>,
    pub delta_star: Vec<f64>,
    pub hyper: EbHyper,
    pub n_used: Vec<usize>,
    /// Features that took part in estimation; degenerate ones keep γ = 0, δ = 1.
    pub active: Vec<bool>,
    pub iterations: usize,
}

impl SiteEffects {
    /// Neutral effects: harmonization becomes the identity.
    pub fn identity(n_features: usize) -> Self {
        Self {
            gamma_hat: vec![0.0; n_features],
            delta_hat: vec![1.0; n_features],
            gamma_star: vec![0.0; n_features],
            delta_star: vec![1.0; n_features],
            hyper: EbHyper {
                gamma_bar: 0.0,
                tau_sq: 0.0,
                lambda: LAMBDA_MAX,
                theta: LAMBDA_MAX - 1.0,
            },
            n_used: vec![0; n_features],
            active: vec![true; n_features],
            iterations: 0,
        }
    }
}

fn sample_mean_var(x: &[f64]) -> (f64, f64) {
    let m = crate::stats::mean(x);
    (m, crate::stats::variance(x))
}

/// Location/scale site effects from the included residuals, shrunk by
/// parametric empirical Bayes.
///
/// `active` flags features to estimate (`None` = all); inactive features get
/// neutral effects and do not enter the hyperparameters.
pub fn estimate_site_effects(
    residuals: &ResidualMatrix,
    mask: &FilterMask,
    eb: &EbConfig,
    active: Option<&[bool]>,
) -> Result<SiteEffects> {
    let (n, v) = residuals.z.dim();
    if mask.n_subjects() != n || mask.n_features().is_some_and(|m| m != v) {
        return Err(Error::ShapeMismatch {
            expected: format!("mask for {n}x{v} residuals"),
            got: mask.shape_description(),
        });
    }
    let active: Vec<bool> = active.map_or_else(|| vec![true; v], <[bool]>::to_vec);

    let mut effects = SiteEffects::identity(v);
    effects.active = active.clone();
    // Sum of squares about γ̂ lets the iteration evaluate Σ(z − γ)² in O(1).
    let mut ss_hat = vec![0.0; v];
    let mut values = Vec::with_capacity(n);
    for f in 0..v {
        values.clear();
        values.extend((0..n).filter(|&j| mask.includes(j, f)).map(|j| residuals.z[(j, f)]));
        effects.n_used[f] = values.len();
        if !active[f] {
            continue;
        }
        if values.len() < 2 {
            return Err(Error::MaskTooAggressive {
                feature: f,
                included: values.len(),
            });
        }
        let (g, d2) = sample_mean_var(&values);
        effects.gamma_hat[f] = g;
        effects.delta_hat[f] = d2.sqrt();
        ss_hat[f] = d2 * (values.len() - 1) as f64;
    }

    let idx: Vec<usize> = (0..v).filter(|&f| active[f]).collect();
    if idx.is_empty() {
        return Ok(effects);
    }
    let g_hat: Vec<f64> = idx.iter().map(|&f| effects.gamma_hat[f]).collect();
    let d2_hat: Vec<f64> = idx.iter().map(|&f| effects.delta_hat[f].powi(2)).collect();
    let (gamma_bar, tau_sq) = sample_mean_var(&g_hat);
    let (m, s2) = sample_mean_var(&d2_hat);
    if m <= 0.0 {
        return Err(Error::NonPositiveDelta { feature: idx[0], value: 0.0 });
    }
    let lambda = if s2 > 0.0 { (m * m / s2 + 2.0).min(LAMBDA_MAX) } else { LAMBDA_MAX };
    let theta = m * (lambda - 1.0);
    effects.hyper = EbHyper {
        gamma_bar,
        tau_sq,
        lambda,
        theta,
    };

    if !eb.empirical_bayes {
        for &f in &idx {
            effects.gamma_star[f] = effects.gamma_hat[f];
            effects.delta_star[f] = effects.delta_hat[f];
        }
        return Ok(effects);
    }

    let mut g_star = g_hat.clone();
    let mut d2_star = d2_hat.clone();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut change: f64 = 0.0;
        for (k, &f) in idx.iter().enumerate() {
            let nf = effects.n_used[f] as f64;
            let g_new = (nf * tau_sq * g_hat[k] + d2_star[k] * gamma_bar) / (nf * tau_sq + d2_star[k]);
            let ss = ss_hat[f] + nf * (g_hat[k] - g_new).powi(2);
            let d2_new = (theta + 0.5 * ss) / (nf / 2.0 + lambda - 1.0);
            change = change.max((g_new - g_star[k]).abs()).max((d2_new - d2_star[k]).abs());
            g_star[k] = g_new;
            d2_star[k] = d2_new;
        }
        if change < eb.tol {
            break;
        }
        if iterations >= eb.max_iter {
            return Err(Error::EbNonConvergence { iterations, change });
        }
    }
    for (k, &f) in idx.iter().enumerate() {
        effects.gamma_star[f] = g_star[k];
        effects.delta_star[f] = d2_star[k].sqrt();
    }
    effects.iterations = iterations;
    Ok(effects)
}

/// `y = σ/δ*·(z − γ*) + α + xᵀβ` for every subject, including any the mask
/// excluded from estimation. Degenerate features pass through unchanged.
pub fn harmonize(site: &CohortDataset, model: &NormativeModel, effects: &SiteEffects) -> Result<CohortDataset> {
    let residuals = standardize(site, model)?;
    harmonize_residuals(site, model, &residuals, effects)
}

/// [`harmonize`] reusing residuals already computed for `site`.
pub fn harmonize_residuals(
    site: &CohortDataset,
    model: &NormativeModel,
    residuals: &ResidualMatrix,
    effects: &SiteEffects,
) -> Result<CohortDataset> {
    model.check_dataset(site)?;
    let v = model.n_features();
    if effects.gamma_star.len() != v || residuals.z.dim() != (site.len(), v) {
        return Err(Error::ShapeMismatch {
            expected: format!("{v} features"),
            got: format!("{} effects", effects.gamma_star.len()),
        });
    }
    let mut out = site.feature_matrix();
    let mean = model.predict(&site.covariate_matrix());
    for f in (0..v).filter(|&f| model.is_active(f) && effects.active[f]) {
        let scale = model.sigma[f] / effects.delta_star[f];
        let g = effects.gamma_star[f];
        for j in 0..site.len() {
            out[(j, f)] = scale * (residuals.z[(j, f)] - g) + mean[(j, f)];
        }
    }
    site.with_features(&out)
}

/// Inverse of harmonization with known effects:
/// `ỹ = α + xᵀβ + γ + δ·(y − α − xᵀβ)`.
pub fn inject_bias(data: &CohortDataset, model: &NormativeModel, gamma: &[f64], delta: &[f64]) -> Result<CohortDataset> {
    model.check_dataset(data)?;
    let v = model.n_features();
    if gamma.len() != v || delta.len() != v {
        return Err(Error::ShapeMismatch {
            expected: format!("{v} site effects"),
            got: format!("gamma {} / delta {}", gamma.len(), delta.len()),
        });
    }
    if let Some(f) = delta.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::NonPositiveDelta { feature: f, value: delta[f] });
    }
    let mean = model.predict(&data.covariate_matrix());
    let mut y = data.feature_matrix();
    for ((j, f), value) in y.indexed_iter_mut() {
        let mu = mean[(j, f)];
        *value = mu + gamma[f] + delta[f] * (*value - mu);
    }
    data.with_features(&y)
}

/// Everything produced when one moving site is harmonized.
#[derive(Debug, Clone)]
pub struct HarmonizedSite {
    pub harmonized: CohortDataset,
    pub effects: SiteEffects,
    pub mask: FilterMask,
}

/// Fits the normative model on `reference` and projects `moving` onto it.
pub fn pairwise_harmonize(
    moving: &CohortDataset,
    reference: &CohortDataset,
    filter: &FilterSpec,
    eb: &EbConfig,
    detector: Option<&dyn OutlierDetector>,
) -> Result<HarmonizedSite> {
    let combat = PairwiseComBat::fit(reference, *eb)?;
    combat.harmonize_with(moving, filter, detector)
}

/// A method that maps one moving site into a common space. Alternative
/// estimators (covariance correction, GAM covariates, ...) can implement
/// this to be compared by the evaluation harness.
pub trait Harmonizer: Send + Sync {
    fn name(&self) -> &str;
    fn harmonize_site(&self, site: &CohortDataset) -> Result<HarmonizedSite>;
}

/// Pairwise ComBat against a fixed normative reference.
#[derive(Clone)]
pub struct PairwiseComBat {
    model: Arc<NormativeModel>,
    eb: EbConfig,
    filter: FilterSpec,
    detector: Option<Arc<dyn OutlierDetector>>,
}

impl std::fmt::Debug for PairwiseComBat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PairwiseComBat")
            .field("eb", &self.eb)
            .field("filter", &self.filter)
            .field("detector", &self.detector.is_some())
            .finish()
    }
}

impl PairwiseComBat {
    /// Rejects references containing non-HC subjects.
    pub fn fit(reference: &CohortDataset, eb: EbConfig) -> Result<Self> {
        if let Some(s) = reference.subjects().iter().find(|s| !s.group.is_hc()) {
            return Err(Error::InvalidConfig(format!(
                "reference must contain only HC subjects; `{}` is labelled `{}`",
                s.subject_id, s.group
            )));
        }
        Ok(Self::from_model(Arc::new(fit_normative_model(reference)?), eb))
    }

    pub fn from_model(model: Arc<NormativeModel>, eb: EbConfig) -> Self {
        Self {
            model,
            eb,
            filter: FilterSpec::default(),
            detector: None,
        }
    }

    pub fn with_filter(mut self, filter: FilterSpec, detector: Option<Arc<dyn OutlierDetector>>) -> Self {
        self.filter = filter;
        self.detector = detector;
        self
    }

    pub fn model(&self) -> &NormativeModel {
        &self.model
    }

    pub fn harmonize_with(
        &self,
        moving: &CohortDataset,
        filter: &FilterSpec,
        detector: Option<&dyn OutlierDetector>,
    ) -> Result<HarmonizedSite> {
        let residuals = standardize(moving, &self.model)?;
        let mask = apply_filter(&residuals, filter, moving, detector)?;
        let active: Vec<bool> = (0..self.model.n_features()).map(|f| self.model.is_active(f)).collect();
        let effects = estimate_site_effects(&residuals, &mask, &self.eb, Some(&active))?;
        let harmonized = harmonize_residuals(moving, &self.model, &residuals, &effects)?;
        Ok(HarmonizedSite {
            harmonized,
            effects,
            mask,
        })
    }
}

impl Harmonizer for PairwiseComBat {
    fn name(&self) -> &str {
        "pairwise-combat"
    }

    fn harmonize_site(&self, site: &CohortDataset) -> Result<HarmonizedSite> {
        self.harmonize_with(site, &self.filter, self.detector.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{SubjectRecord, DEFAULT_COVARIATES};
    use crate::filters::FilterMethod;
    use crate::seeding::rng;
    use crate::taxonomy::FeatureTaxonomy;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn taxonomy() -> Arc<FeatureTaxonomy> {
        Arc::new(
            FeatureTaxonomy::with_default_directions(
                vec!["AC".into(), "CST_L".into()],
                vec!["fa".into(), "md".into(), "rd".into()],
            )
            .unwrap(),
        )
    }

    fn normal(r: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(r)
    }

    /// Subjects from `y = 1 + 0.01·age + 0.2·sex − 0.1·hand + 0.5·ε`, with an
    /// optional per-feature `(γ, δ)` distortion of the noise.
    fn cohort(n: usize, site: &str, seed: u64, effect: Option<(&[f64], &[f64])>) -> CohortDataset {
        let tax = taxonomy();
        let v = tax.n_features();
        let mut r = rng(seed);
        let subjects = (0..n)
            .map(|j| {
                let cov = vec![r.random_range(20.0..80.0), f64::from(u8::from(r.random_bool(0.5))), f64::from(u8::from(r.random_bool(0.2)))];
                let features = (0..v)
                    .map(|f| {
                        let mu = 1.0 + f as f64 + 0.01 * cov[0] + 0.2 * cov[1] - 0.1 * cov[2];
                        let e = 0.5 * normal(&mut r);
                        match effect {
                            Some((g, d)) => mu + g[f] + d[f] * e,
                            None => mu + e,
                        }
                    })
                    .collect();
                SubjectRecord {
                    subject_id: format!("{site}-{j}"),
                    site_id: site.into(),
                    group: Group::Hc,
                    covariates: cov,
                    features,
                }
            })
            .collect();
        CohortDataset::new(tax, DEFAULT_COVARIATES.iter().map(|s| s.to_string()).collect(), subjects).unwrap()
    }

    /// Solves `A x = b` by Gauss-Jordan elimination with partial pivoting.
    fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in 0..n {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    for k in col..n {
                        a[row][k] -= f * a[col][k];
                    }
                    b[row] -= f * b[col];
                }
            }
        }
        (0..n).map(|i| b[i] / a[i][i]).collect()
    }

    #[test]
    fn ols_matches_normal_equations() {
        let reference = cohort(80, "ref", 1, None);
        let model = fit_normative_model(&reference).unwrap();
        let rows: Vec<Vec<f64>> = reference
            .subjects()
            .iter()
            .map(|s| std::iter::once(1.0).chain(s.covariates.iter().copied()).collect())
            .collect();
        let p = 4;
        let xtx: Vec<Vec<f64>> = (0..p).map(|a| (0..p).map(|b| rows.iter().map(|r| r[a] * r[b]).sum()).collect()).collect();
        for f in 0..reference.n_features() {
            let y: Vec<f64> = reference.subjects().iter().map(|s| s.features[f]).collect();
            let xty = (0..p).map(|a| rows.iter().zip(&y).map(|(r, y)| r[a] * y).sum()).collect();
            let coef = solve(xtx.clone(), xty);
            assert!((model.alpha[f] - coef[0]).abs() < 1e-9);
            for k in 0..3 {
                assert!((model.beta[(f, k)] - coef[k + 1]).abs() < 1e-9);
            }
            let rss: f64 = rows
                .iter()
                .zip(&y)
                .map(|(r, y)| (y - (0..p).map(|a| r[a] * coef[a]).sum::<f64>()).powi(2))
                .sum();
            assert!((model.sigma[f] - (rss / (80.0 - 4.0)).sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn collinear_covariates_are_rejected() {
        let reference = cohort(30, "ref", 2, None);
        let subjects = reference
            .subjects()
            .iter()
            .map(|s| SubjectRecord {
                covariates: vec![s.covariates[0], s.covariates[1], s.covariates[1]],
                ..s.clone()
            })
            .collect();
        let dup = CohortDataset::new(reference.taxonomy_arc().clone(), reference.covariate_names().to_vec(), subjects).unwrap();
        assert!(matches!(fit_normative_model(&dup), Err(Error::RankDeficientDesign)));
        let few = reference.select(&[0, 1, 2, 3]);
        assert!(matches!(fit_normative_model(&few), Err(Error::TooFewSubjects { needed: 5, got: 4 })));
    }

    #[test]
    fn standardize_is_elementwise() {
        let model = fit_normative_model(&cohort(60, "ref", 3, None)).unwrap();
        let site = cohort(25, "site", 4, None);
        let res = standardize(&site, &model).unwrap();
        for (j, s) in site.subjects().iter().enumerate() {
            for f in 0..site.n_features() {
                let mu = model.alpha[f] + (0..3).map(|k| model.beta[(f, k)] * s.covariates[k]).sum::<f64>();
                assert!((res.z[(j, f)] - (s.features[f] - mu) / model.sigma[f]).abs() < 1e-12);
            }
        }
    }

    /// Straightforward EB: recomputes every sum from the included values on
    /// each iteration and runs to a tight fixed point.
    fn eb_oracle(cols: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let var = |x: &[f64]| {
            let m = mean(x);
            x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
        };
        let gh: Vec<f64> = cols.iter().map(|c| mean(c)).collect();
        let dh: Vec<f64> = cols.iter().map(|c| var(c)).collect();
        let (gbar, t2) = (mean(&gh), var(&gh));
        let (m, s2) = (mean(&dh), var(&dh));
        let lambda = (m * m + 2.0 * s2) / s2;
        let theta = (m * m * m + m * s2) / s2;
        let mut g = gh.clone();
        let mut d = dh.clone();
        for _ in 0..100_000 {
            let mut change: f64 = 0.0;
            for (k, c) in cols.iter().enumerate() {
                let n = c.len() as f64;
                let gn = (t2 * n * gh[k] + d[k] * gbar) / (t2 * n + d[k]);
                let ss: f64 = c.iter().map(|z| (z - gn).powi(2)).sum();
                let dn = (theta + ss / 2.0) / (n / 2.0 + lambda - 1.0);
                change = change.max((gn - g[k]).abs()).max((dn - d[k]).abs());
                g[k] = gn;
                d[k] = dn;
            }
            if change < 1e-15 {
                break;
            }
        }
        (g, d.iter().map(|x| x.sqrt()).collect())
    }

    fn random_problem(seed: u64, n: usize, v: usize) -> (ResidualMatrix, FilterMask) {
        let mut r = rng(seed);
        let shift: Vec<f64> = (0..v).map(|_| normal(&mut r)).collect();
        let scale: Vec<f64> = (0..v).map(|_| r.random_range(0.5..2.0)).collect();
        let z = Array2::from_shape_fn((n, v), |(_, f)| shift[f] + scale[f] * normal(&mut r));
        let mask = Array2::from_shape_fn((n, v), |_| r.random_bool(0.8));
        let res = ResidualMatrix {
            z,
            subject_ids: (0..n).map(|j| j.to_string()).collect(),
            groups: vec![Group::Hc; n],
            site_id: "s".into(),
        };
        (res, FilterMask::PerValue(mask))
    }

    fn included(res: &ResidualMatrix, mask: &FilterMask) -> Vec<Vec<f64>> {
        (0..res.n_features())
            .map(|f| (0..res.n_subjects()).filter(|&j| mask.includes(j, f)).map(|j| res.z[(j, f)]).collect())
            .collect()
    }

    #[test]
    fn eb_matches_independent_fixed_point() {
        let tight = EbConfig {
            empirical_bayes: true,
            tol: 1e-14,
            max_iter: 100_000,
        };
        for seed in 0..20 {
            let (res, mask) = random_problem(seed, 40, 12);
            let fx = estimate_site_effects(&res, &mask, &tight, None).unwrap();
            let (g, d) = eb_oracle(&included(&res, &mask));
            for f in 0..12 {
                assert!((fx.gamma_star[f] - g[f]).abs() < 1e-8, "gamma {f}");
                assert!((fx.delta_star[f] - d[f]).abs() < 1e-8, "delta {f}");
            }
        }
    }

    #[test]
    fn shrinkage_is_convex() {
        for seed in 100..200 {
            let (res, mask) = random_problem(seed, 30, 10);
            let fx = estimate_site_effects(&res, &mask, &EbConfig::default(), None).unwrap();
            let gbar = fx.hyper.gamma_bar;
            for f in 0..10 {
                let (lo, hi) = if fx.gamma_hat[f] < gbar { (fx.gamma_hat[f], gbar) } else { (gbar, fx.gamma_hat[f]) };
                assert!(fx.gamma_star[f] >= lo - 1e-12 && fx.gamma_star[f] <= hi + 1e-12, "seed {seed} feature {f}");
            }
        }
    }

    /// Feature 0 is built from pairs `c ± a`, each new pair sized so the
    /// sample variance stays put. Dropping pairs then leaves γ̂ and δ̂ of
    /// every feature unchanged and only the count moves.
    #[test]
    fn fewer_subjects_shrink_harder() {
        for seed in 300..320 {
            let mut r = rng(seed);
            let base_pairs = 6;
            let extra_pairs = 5;
            let n = 2 * (base_pairs + extra_pairs);
            let (mut res, _) = random_problem(seed, n, 8);
            let c = 3.0 * normal(&mut r);
            let mut offsets: Vec<f64> = (0..base_pairs).map(|_| r.random_range(0.2..2.0)).collect();
            for _ in 0..extra_pairs {
                let k = 2 * offsets.len();
                let var = 2.0 * offsets.iter().map(|a| a * a).sum::<f64>() / (k as f64 - 1.0);
                offsets.push(var.sqrt());
            }
            for (i, a) in offsets.iter().enumerate() {
                res.z[(2 * i, 0)] = c + a;
                res.z[(2 * i + 1, 0)] = c - a;
            }
            let tight = EbConfig {
                empirical_bayes: true,
                tol: 1e-13,
                max_iter: 100_000,
            };
            let mut previous: Option<SiteEffects> = None;
            for kept_pairs in (base_pairs..=base_pairs + extra_pairs).rev() {
                let mask = FilterMask::PerValue(Array2::from_shape_fn((n, 8), |(j, f)| f != 0 || j < 2 * kept_pairs));
                let fx = estimate_site_effects(&res, &mask, &tight, None).unwrap();
                if let Some(prev) = &previous {
                    assert!((fx.gamma_hat[0] - prev.gamma_hat[0]).abs() < 1e-12);
                    assert!((fx.delta_hat[0] - prev.delta_hat[0]).abs() < 1e-12);
                    let gbar = fx.hyper.gamma_bar;
                    assert!((gbar - prev.hyper.gamma_bar).abs() < 1e-12);
                    let (now, before) = (fx.gamma_star[0] - gbar, prev.gamma_star[0] - gbar);
                    assert!(now * before > 0.0 && now.abs() < before.abs(), "seed {seed}, {kept_pairs} pairs");
                }
                previous = Some(fx);
            }
        }
    }

    #[test]
    fn masked_values_do_not_matter() {
        let (res, mask) = random_problem(7, 35, 8);
        let base = estimate_site_effects(&res, &mask, &EbConfig::default(), None).unwrap();
        let mut garbage = res.clone();
        let mut r = rng(8);
        for ((j, f), z) in garbage.z.indexed_iter_mut() {
            if !mask.includes(j, f) {
                *z = r.random_range(-1e9..1e9);
            }
        }
        assert_eq!(estimate_site_effects(&garbage, &mask, &EbConfig::default(), None).unwrap(), base);
    }

    #[test]
    fn disabled_eb_returns_raw_estimates() {
        let (res, mask) = random_problem(9, 30, 6);
        let eb = EbConfig {
            empirical_bayes: false,
            ..EbConfig::default()
        };
        let fx = estimate_site_effects(&res, &mask, &eb, None).unwrap();
        assert_eq!(fx.gamma_star, fx.gamma_hat);
        assert_eq!(fx.delta_star, fx.delta_hat);
    }

    #[test]
    fn too_aggressive_mask_is_an_error() {
        let (res, _) = random_problem(10, 10, 3);
        let mut m = Array2::from_elem((10, 3), true);
        for j in 1..10 {
            m[(j, 2)] = false;
        }
        let err = estimate_site_effects(&res, &FilterMask::PerValue(m), &EbConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::MaskTooAggressive { feature: 2, included: 1 }));
    }

    #[test]
    fn non_convergence_is_reported() {
        let (res, mask) = random_problem(11, 30, 6);
        let eb = EbConfig {
            empirical_bayes: true,
            tol: 0.0,
            max_iter: 3,
        };
        assert!(matches!(
            estimate_site_effects(&res, &mask, &eb, None),
            Err(Error::EbNonConvergence { iterations: 3, .. })
        ));
    }

    #[test]
    fn injection_is_inverted_by_known_effects() {
        let model = fit_normative_model(&cohort(60, "ref", 12, None)).unwrap();
        let site = cohort(20, "site", 13, None);
        let v = site.n_features();
        let gamma: Vec<f64> = (0..v).map(|f| 0.3 * f as f64 - 0.7).collect();
        let delta: Vec<f64> = (0..v).map(|f| 0.8 + 0.1 * f as f64).collect();
        let biased = inject_bias(&site, &model, &gamma, &delta).unwrap();
        let z0 = standardize(&site, &model).unwrap().z;
        let z1 = standardize(&biased, &model).unwrap().z;
        for ((j, f), z) in z1.indexed_iter() {
            let expected = gamma[f] / model.sigma[f] + delta[f] * z0[(j, f)];
            assert!((z - expected).abs() < 1e-10);
        }
        let mut effects = SiteEffects::identity(v);
        effects.gamma_star = (0..v).map(|f| gamma[f] / model.sigma[f]).collect();
        effects.delta_star = delta.clone();
        let back = harmonize(&biased, &model, &effects).unwrap();
        for (a, b) in back.feature_matrix().iter().zip(site.feature_matrix().iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(matches!(inject_bias(&site, &model, &gamma, &vec![0.0; v]), Err(Error::NonPositiveDelta { .. })));
    }

    #[test]
    fn large_site_recovers_injected_effects() {
        let v = 6;
        let gamma: Vec<f64> = (0..v).map(|f| 0.25 * f as f64 - 0.5).collect();
        let delta: Vec<f64> = (0..v).map(|f| 0.8 + 0.08 * f as f64).collect();
        let reference = cohort(400, "ref", 14, None);
        let combat = PairwiseComBat::fit(&reference, EbConfig::default()).unwrap();
        let truth = cohort(3000, "site", 15, None);
        let biased = cohort(3000, "site", 15, Some((&gamma, &delta)));
        let out = combat.harmonize_with(&biased, &FilterSpec::default(), None).unwrap();
        let sigma = &combat.model().sigma;
        for f in 0..v {
            // The reference fit has its own sampling error, so allow a few
            // standard errors of the n = 400 estimates.
            assert!((out.effects.gamma_hat[f] - gamma[f] / sigma[f]).abs() < 0.2, "gamma {f}");
            assert!((out.effects.delta_hat[f] / (delta[f] * 0.5 / sigma[f]) - 1.0).abs() < 0.1, "delta {f}");
        }
        let err: f64 = out
            .harmonized
            .feature_matrix()
            .iter()
            .zip(truth.feature_matrix().iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / (3000.0 * v as f64);
        assert!(err < 0.1 * 0.5, "mean abs error {err}");
    }

    #[test]
    fn pipeline_equals_its_parts() {
        let reference = cohort(60, "ref", 16, None);
        let site = cohort(40, "site", 17, None);
        let spec = FilterSpec::new(FilterMethod::Mad);
        let out = pairwise_harmonize(&site, &reference, &spec, &EbConfig::default(), None).unwrap();
        let model = fit_normative_model(&reference).unwrap();
        let res = standardize(&site, &model).unwrap();
        let mask = apply_filter(&res, &spec, &site, None).unwrap();
        let fx = estimate_site_effects(&res, &mask, &EbConfig::default(), Some(&[true; 6])).unwrap();
        assert_eq!(out.mask, mask);
        assert_eq!(out.effects, fx);
        assert_eq!(out.harmonized, harmonize(&site, &model, &fx).unwrap());
    }

    #[test]
    fn degenerate_features_pass_through() {
        let reference = cohort(40, "ref", 18, None);
        let flatten = |d: &CohortDataset| {
            let mut y = d.feature_matrix();
            y.column_mut(0).fill(2.5);
            d.with_features(&y).unwrap()
        };
        let combat = PairwiseComBat::fit(&flatten(&reference), EbConfig::default()).unwrap();
        assert_eq!(combat.model().degenerate_features(), vec![0]);
        let site = cohort(30, "site", 19, None);
        let mut y = site.feature_matrix();
        y.column_mut(0).mapv_inplace(|x| x * 3.0);
        let site = site.with_features(&y).unwrap();
        let out = combat.harmonize_with(&site, &FilterSpec::default(), None).unwrap();
        assert_eq!(out.harmonized.feature_matrix().column(0), site.feature_matrix().column(0));
        assert!(!out.effects.active[0]);
    }

    #[test]
    fn reference_must_be_healthy() {
        let reference = cohort(30, "ref", 20, None);
        let mut subjects = reference.subjects().to_vec();
        subjects[3].group = Group::Pathology("AD".into());
        let bad = CohortDataset::new(reference.taxonomy_arc().clone(), reference.covariate_names().to_vec(), subjects).unwrap();
        assert!(matches!(PairwiseComBat::fit(&bad, EbConfig::default()), Err(Error::InvalidConfig(_))));
    }
}
