//! Synthetic multi-site cohorts.
//!
//! A ground-truth normative model generates healthy controls; pathology
//! profiles shift selected features by a number of reference standard
//! deviations. Control sites are drawn from a pool at a fixed disease ratio
//! and distorted with additive/multiplicative site effects, keeping the
//! undistorted values as ground truth.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortDataset, Group, SubjectRecord, DEFAULT_COVARIATES};
use crate::combat::{inject_bias, NormativeModel};
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng};
use crate::taxonomy::{FeatureTaxonomy, FEATURE_SEPARATOR};

/// Covariate distribution of simulated subjects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateSampler {
    /// Uniform age range in years.
    pub age_range: (f64, f64),
    /// Probability of sex = 1.
    pub p_sex: f64,
    /// Probability of handedness = 1 (left-handed).
    pub p_left_handed: f64,
}

impl Default for CovariateSampler {
    fn default() -> Self {
        Self {
            age_range: (18.0, 88.0),
            p_sex: 0.5,
            p_left_handed: 0.1,
        }
    }
}

impl CovariateSampler {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let age = rng.random_range(self.age_range.0..=self.age_range.1);
        let sex = f64::from(u8::from(rng.random_bool(self.p_sex)));
        let hand = f64::from(u8::from(rng.random_bool(self.p_left_handed)));
        vec![age, sex, hand]
    }

    /// Variances of (age, sex, handedness).
    fn variances(&self) -> [f64; 3] {
        let w = self.age_range.1 - self.age_range.0;
        [w * w / 12.0, self.p_sex * (1.0 - self.p_sex), self.p_left_handed * (1.0 - self.p_left_handed)]
    }

    fn mid_age(&self) -> f64 {
        0.5 * (self.age_range.0 + self.age_range.1)
    }
}

/// Parameters of the ground-truth normative model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthConfig {
    /// Typical value of each metric at mid age; unknown metrics use 1.0.
    pub metric_base: BTreeMap<String, f64>,
    /// Per-feature multiplicative jitter of the base value.
    pub base_jitter: (f64, f64),
    /// Residual standard deviation as a fraction of the feature level.
    pub noise_cv: (f64, f64),
    /// Age effect strength `|β_age|·sd(age)/σ`; the sign follows the metric's
    /// pathological direction, so ageing resembles degeneration.
    pub age_effect: (f64, f64),
    /// Sex coefficient standard deviation, in units of σ.
    pub sex_effect_sd: f64,
    /// Handedness coefficient standard deviation, in units of σ.
    pub handedness_effect_sd: f64,
    pub covariates: CovariateSampler,
}

impl Default for TruthConfig {
    fn default() -> Self {
        let metric_base = [
            ("ad", 1.2),
            ("adt", 1.1),
            ("afd", 0.35),
            ("fa", 0.45),
            ("fat", 0.55),
            ("fw", 0.15),
            ("md", 0.8),
            ("mdt", 0.7),
            ("rd", 0.6),
            ("rdt", 0.5),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            metric_base,
            base_jitter: (0.8, 1.2),
            noise_cv: (0.03, 0.06),
            age_effect: (3.0, 4.5),
            sex_effect_sd: 0.3,
            handedness_effect_sd: 0.1,
            covariates: CovariateSampler::default(),
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64), positive: bool) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) || (positive && lo <= 0.0) {
        return Err(Error::InvalidRange(format!("{name} = [{lo}, {hi}]")));
    }
    Ok(())
}

/// A pathology as standardized shifts.
///
/// Keys of `shifts` are either a feature name (`IFOF_L__afd`), applied to
/// that feature only, or a metric name (`afd`), applied to a random subset of
/// bundles. Values are in units of the reference population's standard
/// deviation of the feature; their signs must agree with the metric's
/// pathological direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathologyProfile {
    pub label: String,
    pub shifts: BTreeMap<String, f64>,
    /// Standard deviation of the per-subject severity multiplier (mean 1,
    /// truncated at 0).
    pub subject_variability: f64,
}

impl PathologyProfile {
    pub fn new(label: &str, shifts: &[(&str, f64)], subject_variability: f64) -> Self {
        Self {
            label: label.to_string(),
            shifts: shifts.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            subject_variability,
        }
    }

    /// Widespread degeneration: diffusivities and free water up, anisotropy
    /// and fiber density down, with +1.02 SD free water in the anterior
    /// commissure.
    pub fn ad_like() -> Self {
        Self::new(
            "AD",
            &[
                ("AC__fw", 1.02),
                ("fw", 2.2),
                ("md", 1.8),
                ("mdt", 1.5),
                ("rd", 1.6),
                ("rdt", 1.3),
                ("ad", 1.2),
                ("adt", 1.0),
                ("fa", -1.4),
                ("fat", -1.1),
                ("afd", -1.2),
            ],
            0.3,
        )
    }

    /// Axonal injury: fiber density and anisotropy down, with −1.31 SD fiber
    /// density in the left IFOF.
    pub fn tbi_like() -> Self {
        Self::new(
            "TBI",
            &[
                ("IFOF_L__afd", -1.31),
                ("afd", -1.8),
                ("fa", -1.6),
                ("fat", -1.3),
                ("md", 1.2),
                ("rd", 1.4),
                ("fw", 1.3),
            ],
            0.3,
        )
    }

    /// Mild, sparse changes.
    pub fn mci_like() -> Self {
        Self::new("MCI", &[("fw", 0.5), ("md", 0.4), ("fa", -0.3)], 0.3)
    }

    pub fn shipped() -> Vec<Self> {
        vec![Self::ad_like(), Self::tbi_like(), Self::mci_like()]
    }

    /// Per-feature shifts in standard-deviation units. Metric-level keys pick
    /// `round(bundle_fraction·B)` (at least one) bundles at random; feature
    /// keys override.
    pub fn resolve(&self, taxonomy: &FeatureTaxonomy, bundle_fraction: f64, seed: u64) -> Result<Vec<f64>> {
        let mut rng = rng(seed);
        let mut out = vec![0.0; taxonomy.n_features()];
        let n_pick = ((bundle_fraction * taxonomy.n_bundles() as f64).round() as usize).clamp(1, taxonomy.n_bundles());
        let check_sign = |metric: usize, value: f64, key: &str| {
            if value != 0.0 && value.signum() != taxonomy.metric_direction(metric).sign() {
                return Err(Error::InvalidConfig(format!(
                    "profile `{}`: shift {value} for `{key}` contradicts the metric's pathological direction",
                    self.label
                )));
            }
            Ok(())
        };
        let mut bundles: Vec<usize> = (0..taxonomy.n_bundles()).collect();
        for (key, &value) in self.shifts.iter().filter(|(k, _)| !k.contains(FEATURE_SEPARATOR)) {
            let m = taxonomy
                .metric_index(key)
                .ok_or_else(|| Error::InvalidConfig(format!("profile `{}`: unknown metric `{key}`", self.label)))?;
            check_sign(m, value, key)?;
            bundles.shuffle(&mut rng);
            for &b in &bundles[..n_pick] {
                out[taxonomy.index_of(b, m)] = value;
            }
        }
        for (key, &value) in self.shifts.iter().filter(|(k, _)| k.contains(FEATURE_SEPARATOR)) {
            let v = taxonomy
                .feature_index(key)
                .ok_or_else(|| Error::InvalidConfig(format!("profile `{}`: unknown feature `{key}`", self.label)))?;
            check_sign(taxonomy.metric_of(v), value, key)?;
            out[v] = value;
        }
        Ok(out)
    }
}

/// Ground-truth generator for healthy and pathological subjects.
#[derive(Debug, Clone)]
pub struct Simulator {
    taxonomy: Arc<FeatureTaxonomy>,
    truth: NormativeModel,
    covariates: CovariateSampler,
    marginal_sd: Vec<f64>,
}

impl Simulator {
    pub fn new(taxonomy: Arc<FeatureTaxonomy>, config: &TruthConfig, seed: u64) -> Result<Self> {
        check_range("base_jitter", config.base_jitter, true)?;
        check_range("noise_cv", config.noise_cv, true)?;
        check_range("age_effect", config.age_effect, false)?;
        check_range("age_range", config.covariates.age_range, false)?;
        let cov = config.covariates;
        let var = cov.variances();
        let sd_age = var[0].sqrt();
        let mut rng = rng(seed);
        let v = taxonomy.n_features();
        let mut alpha = Array1::zeros(v);
        let mut beta = Array2::zeros((v, 3));
        let mut sigma = Array1::zeros(v);
        let mut marginal_sd = Vec::with_capacity(v);
        let uniform = |(lo, hi): (f64, f64), rng: &mut ChaCha8Rng| if lo == hi { lo } else { rng.random_range(lo..hi) };
        for f in 0..v {
            let metric = &taxonomy.metrics()[taxonomy.metric_of(f)];
            let base = config.metric_base.get(metric).copied().unwrap_or(1.0) * uniform(config.base_jitter, &mut rng);
            let s = base * uniform(config.noise_cv, &mut rng);
            let k = uniform(config.age_effect, &mut rng);
            let b_age = taxonomy.feature_direction(f).sign() * k * s / sd_age;
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let b_sex = z1 * config.sex_effect_sd * s;
            let b_hand = z2 * config.handedness_effect_sd * s;
            alpha[f] = base - b_age * cov.mid_age();
            beta[(f, 0)] = b_age;
            beta[(f, 1)] = b_sex;
            beta[(f, 2)] = b_hand;
            sigma[f] = s;
            marginal_sd.push((s * s + b_age * b_age * var[0] + b_sex * b_sex * var[1] + b_hand * b_hand * var[2]).sqrt());
        }
        let truth = NormativeModel {
            alpha,
            beta,
            sigma,
            covariate_names: DEFAULT_COVARIATES.iter().map(|s| s.to_string()).collect(),
            taxonomy_fingerprint: taxonomy.fingerprint(),
        };
        Ok(Self {
            taxonomy,
            truth,
            covariates: cov,
            marginal_sd,
        })
    }

    pub fn taxonomy(&self) -> &Arc<FeatureTaxonomy> {
        &self.taxonomy
    }

    /// The generative model; not available to the harmonizer, which fits its
    /// own from a finite reference sample.
    pub fn truth(&self) -> &NormativeModel {
        &self.truth
    }

    /// Population standard deviation of each feature over the covariate
    /// distribution; the unit of pathology shifts.
    pub fn marginal_sd(&self) -> &[f64] {
        &self.marginal_sd
    }

    fn empty(&self) -> CohortDataset {
        CohortDataset::new(self.taxonomy.clone(), self.truth.covariate_names.clone(), Vec::new())
            .expect("empty dataset is valid")
    }

    fn draw_subject(&self, id: String, site: &str, group: Group, shift: Option<(&[f64], f64)>, rng: &mut ChaCha8Rng) -> SubjectRecord {
        let covariates = self.covariates.sample(rng);
        let t = &self.truth;
        let features = (0..self.taxonomy.n_features())
            .map(|f| {
                let eps: f64 = StandardNormal.sample(rng);
                let mut y = t.alpha[f] + (0..3).map(|k| t.beta[(f, k)] * covariates[k]).sum::<f64>() + t.sigma[f] * eps;
                if let Some((s, m)) = shift {
                    y += m * s[f] * self.marginal_sd[f];
                }
                y
            })
            .collect();
        SubjectRecord {
            subject_id: id,
            site_id: site.to_string(),
            group,
            covariates,
            features,
        }
    }

    /// Healthy controls from the ground-truth model.
    pub fn sample_hc(&self, n: usize, site_id: &str, seed: u64) -> CohortDataset {
        let mut rng = rng(seed);
        let subjects = (0..n)
            .map(|j| self.draw_subject(format!("{site_id}-hc{j:05}"), site_id, Group::Hc, None, &mut rng))
            .collect();
        CohortDataset::new(self.taxonomy.clone(), self.truth.covariate_names.clone(), subjects)
            .expect("simulated subjects are valid")
    }

    /// Pathological subjects: healthy draws plus `m·shift_v·sd_v`, with a
    /// per-subject severity `m = max(0, N(1, variability))`.
    pub fn sample_pathology(&self, profile: &PathologyProfile, shifts: &[f64], n: usize, site_id: &str, seed: u64) -> Result<CohortDataset> {
        if shifts.len() != self.taxonomy.n_features() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} shifts", self.taxonomy.n_features()),
                got: shifts.len().to_string(),
            });
        }
        let severity = Normal::new(1.0, profile.subject_variability)
            .map_err(|_| Error::InvalidConfig(format!("profile `{}`: invalid variability", profile.label)))?;
        let mut rng = rng(seed);
        let tag = profile.label.to_ascii_lowercase();
        let subjects = (0..n)
            .map(|j| {
                let m = severity.sample(&mut rng).max(0.0);
                let group = Group::Pathology(profile.label.clone());
                self.draw_subject(format!("{site_id}-{tag}{j:05}"), site_id, group, Some((shifts, m)), &mut rng)
            })
            .collect();
        CohortDataset::new(self.taxonomy.clone(), self.truth.covariate_names.clone(), subjects)
    }
}

/// Options of [`generate_pool`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub n_hc: usize,
    pub n_per_profile: usize,
    /// Fraction of bundles affected by a metric-level shift.
    pub bundle_fraction: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            n_hc: 1000,
            n_per_profile: 300,
            bundle_fraction: 0.2,
        }
    }
}

/// Per-feature shift vectors of `profiles`, with bundle subsets drawn from
/// `seed` exactly as [`generate_pool`] does for the same seed.
pub fn resolve_profiles(sim: &Simulator, profiles: &[PathologyProfile], bundle_fraction: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    profiles
        .iter()
        .enumerate()
        .map(|(p, profile)| profile.resolve(&sim.taxonomy, bundle_fraction, derive_seed(seed, &[1, p as u64])))
        .collect()
}

/// Healthy and pathological subjects from the ground-truth model. All
/// subjects get site id `pool`.
pub fn generate_pool(sim: &Simulator, profiles: &[PathologyProfile], config: &PoolConfig, seed: u64) -> Result<CohortDataset> {
    if config.n_hc == 0 || (!profiles.is_empty() && config.n_per_profile == 0) {
        return Err(Error::InvalidConfig("pool counts must be at least 1".into()));
    }
    let shifts = resolve_profiles(sim, profiles, config.bundle_fraction, seed)?;
    let mut subjects = sim.sample_hc(config.n_hc, "pool", derive_seed(seed, &[0])).into_subjects();
    for (p, (profile, shift)) in profiles.iter().zip(&shifts).enumerate() {
        let part = sim.sample_pathology(profile, shift, config.n_per_profile, "pool", derive_seed(seed, &[2, p as u64]))?;
        subjects.extend(part.into_subjects());
    }
    if subjects.is_empty() {
        return Ok(sim.empty());
    }
    CohortDataset::new(sim.taxonomy.clone(), sim.truth.covariate_names.clone(), subjects)
}

/// Samples `n_subjects` without replacement: `round(n·ratio)` pathology
/// subjects, each from a uniformly chosen profile, and healthy controls for
/// the rest. Subjects are relabelled to `site_id`.
pub fn sample_control_site(pool: &CohortDataset, n_subjects: usize, disease_ratio: f64, seed: u64, site_id: &str) -> Result<CohortDataset> {
    if !(0.0..1.0).contains(&disease_ratio) {
        return Err(Error::InvalidRange(format!("disease ratio {disease_ratio} not in [0, 1)")));
    }
    let n_path = (n_subjects as f64 * disease_ratio).round() as usize;
    let n_hc = n_subjects - n_path;
    let mut rng = rng(seed);
    let mut by_label: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut hc = Vec::new();
    for (i, s) in pool.subjects().iter().enumerate() {
        match &s.group {
            Group::Hc => hc.push(i),
            Group::Pathology(label) => by_label.entry(label.clone()).or_default().push(i),
            Group::Unknown => {}
        }
    }
    if hc.len() < n_hc {
        return Err(Error::PoolExhausted {
            label: "HC".into(),
            needed: n_hc,
            available: hc.len(),
        });
    }
    let mut chosen: Vec<usize> = hc.choose_multiple(&mut rng, n_hc).copied().collect();
    if n_path > 0 {
        let labels: Vec<String> = by_label.keys().cloned().collect();
        if labels.is_empty() {
            return Err(Error::PoolExhausted {
                label: "pathology".into(),
                needed: n_path,
                available: 0,
            });
        }
        let mut wanted: BTreeMap<&str, usize> = BTreeMap::new();
        for _ in 0..n_path {
            *wanted.entry(labels.choose(&mut rng).expect("non-empty").as_str()).or_default() += 1;
        }
        for (label, count) in wanted {
            let members = &by_label[label];
            if members.len() < count {
                return Err(Error::PoolExhausted {
                    label: label.to_string(),
                    needed: count,
                    available: members.len(),
                });
            }
            chosen.extend(members.choose_multiple(&mut rng, count).copied());
        }
    }
    chosen.shuffle(&mut rng);
    let subjects = chosen
        .into_iter()
        .map(|i| SubjectRecord {
            site_id: site_id.to_string(),
            ..pool.subjects()[i].clone()
        })
        .collect();
    CohortDataset::new(pool.taxonomy_arc().clone(), pool.covariate_names().to_vec(), subjects)
}

/// Distribution of injected site effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectRanges {
    /// Standard deviation of γ_v in units of the model's σ_v.
    pub gamma_scale: f64,
    /// Uniform range of δ_v.
    pub delta_range: (f64, f64),
}

impl Default for EffectRanges {
    fn default() -> Self {
        Self {
            gamma_scale: 1.5,
            delta_range: (0.8, 1.25),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteEffectSample {
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
    pub seed: u64,
}

/// `γ_v ~ N(0, (gamma_scale·σ_v)²)`, `δ_v ~ U(delta_range)`.
pub fn sample_site_effects(model: &NormativeModel, ranges: &EffectRanges, seed: u64) -> Result<SiteEffectSample> {
    check_range("delta_range", ranges.delta_range, true)?;
    if !(ranges.gamma_scale >= 0.0 && ranges.gamma_scale.is_finite()) {
        return Err(Error::InvalidRange(format!("gamma_scale = {}", ranges.gamma_scale)));
    }
    let mut rng = rng(seed);
    let (lo, hi) = ranges.delta_range;
    let uniform = (lo < hi).then(|| Uniform::new(lo, hi).expect("range checked"));
    let mut gamma = Vec::with_capacity(model.n_features());
    let mut delta = Vec::with_capacity(model.n_features());
    for &s in model.sigma.iter() {
        let z: f64 = StandardNormal.sample(&mut rng);
        gamma.push(z * ranges.gamma_scale * s);
        delta.push(uniform.map_or(lo, |u| u.sample(&mut rng)));
    }
    Ok(SiteEffectSample { gamma, delta, seed })
}

/// Keeps every subject and adds `factor − 1` noisy copies of it, with
/// Gaussian noise of standard deviation `noise_scale·σ_v` per feature.
pub fn augment(dataset: &CohortDataset, noise_scale: f64, factor: usize, sigma: &[f64], seed: u64) -> Result<CohortDataset> {
    if !(noise_scale >= 0.0) || factor == 0 {
        return Err(Error::InvalidConfig(format!("augment: noise_scale {noise_scale}, factor {factor}")));
    }
    if sigma.len() != dataset.n_features() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} feature deviations", dataset.n_features()),
            got: sigma.len().to_string(),
        });
    }
    let mut rng = rng(seed);
    let mut subjects = Vec::with_capacity(dataset.len() * factor);
    for s in dataset.subjects() {
        subjects.push(s.clone());
        for k in 1..factor {
            let features = s
                .features
                .iter()
                .zip(sigma)
                .map(|(y, sd)| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    y + noise_scale * sd * e
                })
                .collect();
            subjects.push(SubjectRecord {
                subject_id: format!("{}~aug{k}", s.subject_id),
                features,
                ..s.clone()
            });
        }
    }
    CohortDataset::new(dataset.taxonomy_arc().clone(), dataset.covariate_names().to_vec(), subjects)
}

/// Control-site grid parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub ratios: Vec<f64>,
    pub sites_per_ratio: usize,
    pub n_subjects: usize,
    pub effects: EffectRanges,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.03, 0.10, 0.30, 0.50, 0.70, 0.80],
            sites_per_ratio: 40,
            n_subjects: 100,
            effects: EffectRanges::default(),
        }
    }
}

/// One generated control site.
#[derive(Debug, Clone)]
pub struct GridSite {
    pub site_id: String,
    pub ratio: f64,
    pub seed: u64,
    /// Values after site-effect injection; the harmonizer's input.
    pub biased: CohortDataset,
    /// Values before injection.
    pub ground_truth: CohortDataset,
    pub effects: SiteEffectSample,
}

impl GridSite {
    /// Subjects per group label.
    pub fn profile_mix(&self) -> BTreeMap<String, usize> {
        let mut mix = BTreeMap::new();
        for s in self.ground_truth.subjects() {
            *mix.entry(s.group.to_string()).or_default() += 1;
        }
        mix
    }

    pub fn n_hc(&self) -> usize {
        self.ground_truth.subjects().iter().filter(|s| s.group.is_hc()).count()
    }
}

/// Builds one biased control site: sample subjects, sample effects, inject.
pub fn build_site(pool: &CohortDataset, model: &NormativeModel, site_id: &str, ratio: f64, n_subjects: usize, effects: &EffectRanges, seed: u64) -> Result<GridSite> {
    let ground_truth = sample_control_site(pool, n_subjects, ratio, derive_seed(seed, &[0]), site_id)?;
    let sample = sample_site_effects(model, effects, derive_seed(seed, &[1]))?;
    let biased = inject_bias(&ground_truth, model, &sample.gamma, &sample.delta)?;
    Ok(GridSite {
        site_id: site_id.to_string(),
        ratio,
        seed,
        biased,
        ground_truth,
        effects: sample,
    })
}

/// `sites_per_ratio` sites for every ratio, seeds derived from `seed`,
/// `(ratio index, site index)`. Sites are generated in parallel; the result
/// does not depend on scheduling.
pub fn build_experiment_grid(pool: &CohortDataset, model: &NormativeModel, config: &GridConfig, seed: u64) -> Result<Vec<GridSite>> {
    let cells: Vec<(usize, usize)> = (0..config.ratios.len())
        .flat_map(|r| (0..config.sites_per_ratio).map(move |s| (r, s)))
        .collect();
    cells
        .into_par_iter()
        .map(|(r, s)| {
            let ratio = config.ratios[r];
            let site_id = format!("r{:02}-s{s:03}", (ratio * 100.0).round() as u32);
            let site_seed = derive_seed(seed, &[r as u64, s as u64]);
            build_site(pool, model, &site_id, ratio, config.n_subjects, &config.effects, site_seed)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub site_id: String,
    pub seed: u64,
    pub ratio: f64,
    pub n_subjects: usize,
    pub n_hc: usize,
    pub profile_mix: BTreeMap<String, usize>,
    pub gamma_mean_abs: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub biased_path: String,
    pub ground_truth_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridManifest {
    pub master_seed: u64,
    pub config_hash: String,
    pub sites: Vec<ManifestEntry>,
}

/// Writes `<site>_biased.csv` and `<site>_truth.csv` under `dir` and returns
/// the manifest with paths relative to `dir`.
pub fn write_grid(grid: &[GridSite], dir: &Path, master_seed: u64, config_hash: &str) -> Result<GridManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sites = Vec::with_capacity(grid.len());
    for site in grid {
        let biased_path = format!("{}_biased.csv", site.site_id);
        let ground_truth_path = format!("{}_truth.csv", site.site_id);
        crate::cohort::save_cohort(&site.biased, dir.join(&biased_path))?;
        crate::cohort::save_cohort(&site.ground_truth, dir.join(&ground_truth_path))?;
        let g = &site.effects;
        sites.push(ManifestEntry {
            site_id: site.site_id.clone(),
            seed: site.seed,
            ratio: site.ratio,
            n_subjects: site.ground_truth.len(),
            n_hc: site.n_hc(),
            profile_mix: site.profile_mix(),
            gamma_mean_abs: g.gamma.iter().map(|x| x.abs()).sum::<f64>() / g.gamma.len().max(1) as f64,
            delta_min: g.delta.iter().copied().fold(f64::INFINITY, f64::min),
            delta_max: g.delta.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            biased_path,
            ground_truth_path,
        });
    }
    Ok(GridManifest {
        master_seed,
        config_hash: config_hash.to_string(),
        sites,
    })
}
