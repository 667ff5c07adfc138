//! End-to-end simulation study: a reference cohort and normative model, a
//! subject pool split into evaluation and detector-training halves, the
//! control-site grid, the site-size sweep and the held-out-site bootstrap.

use std::sync::Arc;

use rand::seq::{IndexedMutRandom, IndexedRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{split_dataset, CohortDataset};
use crate::combat::{inject_bias, EbConfig, NormativeModel, PairwiseComBat};
use crate::error::{Error, Result};
use crate::filters::{FilterMethod, FilterSpec, OutlierDetector};
use crate::mlp::{MlpDetector, NetworkConfig, TrainingLog};
use crate::seeding::{derive_seed, rng};
use crate::stats;
use crate::synth::{
    augment, build_experiment_grid, build_site, generate_pool, resolve_profiles, sample_site_effects, EffectRanges,
    GridConfig, GridSite, PathologyProfile, PoolConfig, Simulator, TruthConfig,
};
use crate::taxonomy::FeatureTaxonomy;

use super::metrics::bhattacharyya_gaussian;
use super::{reference_std, run_experiment, BhattacharyyaEntry, EvaluationReport, RunMetadata};

/// How detector training sets are built from a labelled pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorTrainingConfig {
    /// Train/validation/test split of the pool, applied before augmentation
    /// so that noisy copies never cross splits.
    pub split: [f64; 3],
    pub augment_factor: usize,
    /// Augmentation noise in units of the fitted residual σ.
    pub noise_scale: f64,
    pub n_train_sites: usize,
    pub n_val_sites: usize,
    pub train_site_size: usize,
    pub val_site_size: usize,
    /// Uniform range of the disease ratio of synthetic training sites.
    pub ratio_range: (f64, f64),
    pub effects: EffectRanges,
}

impl Default for DetectorTrainingConfig {
    fn default() -> Self {
        Self {
            split: [0.8, 0.1, 0.1],
            augment_factor: 3,
            noise_scale: 0.05,
            n_train_sites: 40,
            n_val_sites: 10,
            train_site_size: 100,
            val_site_size: 50,
            ratio_range: (0.0, 0.9),
            effects: EffectRanges::default(),
        }
    }
}

/// Control sites of several sizes at high disease ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SizeSweepConfig {
    pub sizes: Vec<usize>,
    pub ratios: Vec<f64>,
    pub sites_per_cell: usize,
}

impl Default for SizeSweepConfig {
    fn default() -> Self {
        Self {
            sizes: vec![20, 30, 40, 50, 60],
            ratios: vec![0.5, 0.7, 0.8],
            sites_per_cell: 40,
        }
    }
}

/// A family of clinical sites sharing the same pathologies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteFamily {
    pub name: String,
    pub labels: Vec<String>,
}

/// Held-out clinical sites: in every iteration one site per family is held
/// out, a detector is trained on the others and the held-out sites are
/// harmonized and compared with the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub families: Vec<SiteFamily>,
    pub sites_per_family: usize,
    pub site_size: usize,
    /// Uniform range of the pathological fraction of a clinical site.
    pub prevalence_range: (f64, f64),
    pub filters: Vec<String>,
    pub detector: DetectorTrainingConfig,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        let family = |name: &str, labels: &[&str]| SiteFamily {
            name: name.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        };
        Self {
            iterations: 30,
            families: vec![
                family("adni", &["AD", "MCI"]),
                family("tbi", &["TBI"]),
                family("mixed", &["AD", "TBI", "MCI"]),
            ],
            sites_per_family: 3,
            site_size: 120,
            prevalence_range: (0.3, 0.7),
            filters: vec!["none".into(), "mlp".into()],
            detector: DetectorTrainingConfig {
                split: [0.7, 0.15, 0.15],
                n_train_sites: 20,
                n_val_sites: 5,
                val_site_size: 30,
                ..DetectorTrainingConfig::default()
            },
            max_epochs: 15,
            early_stop_patience: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub seed: u64,
    pub truth: TruthConfig,
    pub profiles: Vec<PathologyProfile>,
    pub pool: PoolConfig,
    pub n_reference: usize,
    pub grid: GridConfig,
    pub filters: Vec<String>,
    pub eb: EbConfig,
    pub network: NetworkConfig,
    pub detector_training: DetectorTrainingConfig,
    pub size_sweep: SizeSweepConfig,
    pub bootstrap: BootstrapConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            truth: TruthConfig::default(),
            profiles: PathologyProfile::shipped(),
            pool: PoolConfig::default(),
            n_reference: 100,
            grid: GridConfig::default(),
            filters: FilterMethod::ALL.iter().map(|m| m.label().to_ascii_lowercase()).collect(),
            eb: EbConfig::default(),
            network: NetworkConfig::default(),
            detector_training: DetectorTrainingConfig::default(),
            size_sweep: SizeSweepConfig::default(),
            bootstrap: BootstrapConfig::default(),
        }
    }
}

impl StudyConfig {
    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        crate::hex_digest(h)
    }

    pub fn filter_specs(&self) -> Result<Vec<FilterSpec>> {
        parse_filters(&self.filters)
    }
}

fn parse_filters(names: &[String]) -> Result<Vec<FilterSpec>> {
    names.iter().map(|s| s.parse()).collect()
}

fn needs_detector(filters: &[FilterSpec]) -> bool {
    filters.iter().any(|f| f.method == FilterMethod::Mlp)
}

/// Training, validation and test sets for the detector, each a concatenation
/// of biased synthetic sites.
#[derive(Debug, Clone)]
pub struct DetectorData {
    pub train: CohortDataset,
    pub val: CohortDataset,
    pub test: CohortDataset,
}

/// Prefixes subject IDs with their site so that sites sampled from the same
/// pool can be stacked.
fn qualify_ids(site: &CohortDataset) -> Result<CohortDataset> {
    let subjects = site
        .subjects()
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.subject_id = format!("{}/{}", s.site_id, s.subject_id);
            s
        })
        .collect();
    CohortDataset::new(site.taxonomy_arc().clone(), site.covariate_names().to_vec(), subjects)
}

fn synthetic_sites(
    pool: &CohortDataset,
    model: &NormativeModel,
    prefix: &str,
    count: usize,
    size: usize,
    config: &DetectorTrainingConfig,
    seed: u64,
) -> Result<CohortDataset> {
    let (lo, hi) = config.ratio_range;
    if !(0.0..1.0).contains(&lo) || !(lo..1.0).contains(&hi) {
        return Err(Error::InvalidRange(format!("training ratio range [{lo}, {hi}]")));
    }
    let sites = (0..count)
        .into_par_iter()
        .map(|k| {
            let site_seed = derive_seed(seed, &[k as u64]);
            let ratio = if lo == hi { lo } else { rng(derive_seed(site_seed, &[9])).random_range(lo..hi) };
            let site = build_site(pool, model, &format!("{prefix}{k:03}"), ratio, size, &config.effects, site_seed)?;
            qualify_ids(&site.biased)
        })
        .collect::<Result<Vec<_>>>()?;
    CohortDataset::concat(&sites.iter().collect::<Vec<_>>())
}

/// Splits `pool`, augments each part and draws biased synthetic sites.
pub fn detector_data(
    pool: &CohortDataset,
    model: &NormativeModel,
    config: &DetectorTrainingConfig,
    seed: u64,
) -> Result<DetectorData> {
    let [train, val, test] = split_dataset(pool, config.split, derive_seed(seed, &[0]))?;
    let sigma = model.sigma.to_vec();
    let grow = |d: &CohortDataset, k: u64| augment(d, config.noise_scale, config.augment_factor, &sigma, derive_seed(seed, &[1, k]));
    let (train, val, test) = (grow(&train, 0)?, grow(&val, 1)?, grow(&test, 2)?);
    let n_test = config.n_val_sites.max(1);
    Ok(DetectorData {
        train: synthetic_sites(&train, model, "train-", config.n_train_sites, config.train_site_size, config, derive_seed(seed, &[2]))?,
        val: synthetic_sites(&val, model, "val-", config.n_val_sites, config.val_site_size, config, derive_seed(seed, &[3]))?,
        test: synthetic_sites(&test, model, "test-", n_test, config.val_site_size, config, derive_seed(seed, &[4]))?,
    })
}

/// Everything shared by the experiments of one study.
#[derive(Debug, Clone)]
pub struct Study {
    pub config: StudyConfig,
    pub config_hash: String,
    pub simulator: Simulator,
    pub reference: CohortDataset,
    pub combat: PairwiseComBat,
    pub ref_std: Vec<f64>,
    pub pool: CohortDataset,
    /// Pool half used to draw evaluation sites.
    pub eval_pool: CohortDataset,
    /// Pool half used to train the detector.
    pub train_pool: CohortDataset,
    /// Per-feature shift vector of every profile, as used by the pool.
    pub profile_shifts: Vec<Vec<f64>>,
}

impl Study {
    pub fn build(config: StudyConfig) -> Result<Self> {
        Self::build_with_taxonomy(config, Arc::new(FeatureTaxonomy::dmri_default()))
    }

    pub fn build_with_taxonomy(config: StudyConfig, taxonomy: Arc<FeatureTaxonomy>) -> Result<Self> {
        let seed = config.seed;
        let config_hash = config.hash();
        let simulator = Simulator::new(taxonomy, &config.truth, derive_seed(seed, &[0]))?;
        let reference = simulator.sample_hc(config.n_reference, "reference", derive_seed(seed, &[1]));
        let combat = PairwiseComBat::fit(&reference, config.eb)?;
        let ref_std = reference_std(&reference);
        let pool_seed = derive_seed(seed, &[2]);
        let pool = generate_pool(&simulator, &config.profiles, &config.pool, pool_seed)?;
        let profile_shifts = resolve_profiles(&simulator, &config.profiles, config.pool.bundle_fraction, pool_seed)?;
        let [eval_pool, train_pool, _] = split_dataset(&pool, [0.5, 0.5, 0.0], derive_seed(seed, &[3]))?;
        log::info!(
            "study: {} features, reference n = {}, pool n = {} (config {})",
            simulator.taxonomy().n_features(),
            reference.len(),
            pool.len(),
            &config_hash[..12]
        );
        Ok(Self {
            config,
            config_hash,
            simulator,
            reference,
            combat,
            ref_std,
            pool,
            eval_pool,
            train_pool,
            profile_shifts,
        })
    }

    pub fn taxonomy(&self) -> &FeatureTaxonomy {
        self.simulator.taxonomy()
    }

    pub fn model(&self) -> &NormativeModel {
        self.combat.model()
    }

    pub fn metadata(&self) -> RunMetadata {
        RunMetadata {
            master_seed: self.config.seed,
            config_hash: self.config_hash.clone(),
            metrics: self.taxonomy().metrics().to_vec(),
            n_features: self.taxonomy().n_features(),
        }
    }

    /// The control-site grid drawn from the evaluation pool.
    pub fn grid(&self) -> Result<Vec<GridSite>> {
        build_experiment_grid(&self.eval_pool, self.model(), &self.config.grid, derive_seed(self.config.seed, &[4]))
    }

    /// Detector training data drawn from the training pool.
    pub fn detector_data(&self) -> Result<DetectorData> {
        detector_data(&self.train_pool, self.model(), &self.config.detector_training, derive_seed(self.config.seed, &[6]))
    }

    /// Trains a detector on [`Self::detector_data`] with the given
    /// initialization/shuffling seed.
    pub fn train_detector(&self, training_seed: u64) -> Result<(MlpDetector, TrainingLog)> {
        let data = self.detector_data()?;
        self.train_detector_on(&data, training_seed)
    }

    pub fn train_detector_on(&self, data: &DetectorData, training_seed: u64) -> Result<(MlpDetector, TrainingLog)> {
        let config = NetworkConfig {
            input_dim: self.taxonomy().n_features(),
            seed: training_seed,
            ..self.config.network.clone()
        };
        MlpDetector::train(&data.train, &data.val, &config)
    }

    /// Runs every configured filter on `grid`.
    pub fn evaluate(&self, grid: &[GridSite], detector: Option<&dyn OutlierDetector>) -> Result<EvaluationReport> {
        run_experiment(grid, &self.combat, &self.ref_std, &self.config.filter_specs()?, detector, self.metadata())
    }

    /// Sites of every (size, ratio) of the sweep, from the evaluation pool.
    pub fn size_sweep_grid(&self) -> Result<Vec<GridSite>> {
        let sweep = &self.config.size_sweep;
        let seed = derive_seed(self.config.seed, &[5]);
        let mut cells = Vec::new();
        for &size in &sweep.sizes {
            for (r, &ratio) in sweep.ratios.iter().enumerate() {
                for s in 0..sweep.sites_per_cell {
                    cells.push((size, r, ratio, s));
                }
            }
        }
        cells
            .into_par_iter()
            .map(|(size, r, ratio, s)| {
                let id = format!("n{size}-r{:02}-s{s:03}", (ratio * 100.0).round() as u32);
                let site_seed = derive_seed(seed, &[size as u64, r as u64, s as u64]);
                build_site(&self.eval_pool, self.model(), &id, ratio, size, &self.config.grid.effects, site_seed)
            })
            .collect()
    }

    pub fn run_size_sweep(&self, detector: Option<&dyn OutlierDetector>) -> Result<EvaluationReport> {
        self.evaluate(&self.size_sweep_grid()?, detector)
    }

    /// Clinical sites of the bootstrap, family by family. Subjects are drawn
    /// fresh from the simulator so that no subject appears in two sites.
    pub fn clinical_sites(&self) -> Result<Vec<(usize, GridSite)>> {
        let boot = &self.config.bootstrap;
        let seed = derive_seed(self.config.seed, &[7, 0]);
        let (lo, hi) = boot.prevalence_range;
        if !(0.0..1.0).contains(&lo) || !(lo..1.0).contains(&hi) {
            return Err(Error::InvalidRange(format!("prevalence range [{lo}, {hi}]")));
        }
        let mut out = Vec::new();
        for (f, family) in boot.families.iter().enumerate() {
            let profiles = family
                .labels
                .iter()
                .map(|label| {
                    self.config
                        .profiles
                        .iter()
                        .position(|p| &p.label == label)
                        .ok_or_else(|| Error::InvalidConfig(format!("family `{}`: unknown profile `{label}`", family.name)))
                })
                .collect::<Result<Vec<_>>>()?;
            if profiles.is_empty() {
                return Err(Error::InvalidConfig(format!("family `{}` has no profiles", family.name)));
            }
            for k in 0..boot.sites_per_family {
                let site_seed = derive_seed(seed, &[f as u64, k as u64]);
                let site_id = format!("{}-{k}", family.name);
                let mut r = rng(site_seed);
                let prevalence = if lo == hi { lo } else { r.random_range(lo..hi) };
                let n_path = (boot.site_size as f64 * prevalence).round() as usize;
                let mut counts = vec![0usize; profiles.len()];
                for _ in 0..n_path {
                    *counts.choose_mut(&mut r).expect("non-empty") += 1;
                }
                let mut subjects = self
                    .simulator
                    .sample_hc(boot.site_size - n_path, &site_id, derive_seed(site_seed, &[1]))
                    .into_subjects();
                for (i, (&p, &count)) in profiles.iter().zip(&counts).enumerate() {
                    let part = self.simulator.sample_pathology(
                        &self.config.profiles[p],
                        &self.profile_shifts[p],
                        count,
                        &site_id,
                        derive_seed(site_seed, &[2, i as u64]),
                    )?;
                    subjects.extend(part.into_subjects());
                }
                let ground_truth = CohortDataset::new(
                    self.simulator.taxonomy().clone(),
                    self.reference.covariate_names().to_vec(),
                    subjects,
                )?;
                let effects = sample_site_effects(self.model(), &self.config.grid.effects, derive_seed(site_seed, &[3]))?;
                let biased = inject_bias(&ground_truth, self.model(), &effects.gamma, &effects.delta)?;
                out.push((
                    f,
                    GridSite {
                        site_id,
                        ratio: n_path as f64 / boot.site_size as f64,
                        seed: site_seed,
                        biased,
                        ground_truth,
                        effects,
                    },
                ));
            }
        }
        Ok(out)
    }

    /// Covariate-adjusted values `y − xβ̂` of the healthy controls of `data`.
    fn adjusted_hc(&self, data: &CohortDataset) -> Vec<Vec<f64>> {
        let beta = &self.model().beta;
        let v = data.n_features();
        let mut cols = vec![Vec::new(); v];
        for s in data.subjects().iter().filter(|s| s.group.is_hc()) {
            for (f, col) in cols.iter_mut().enumerate() {
                let fit: f64 = s.covariates.iter().enumerate().map(|(k, x)| beta[(f, k)] * x).sum();
                col.push(s.features[f] - fit);
            }
        }
        cols
    }

    /// Mean over bundles of the Gaussian Bhattacharyya distance between the
    /// healthy controls of `data` and the reference, per metric.
    pub fn hc_distance_per_metric(&self, data: &CohortDataset) -> Result<Vec<f64>> {
        let moments = |cols: Vec<Vec<f64>>| cols.into_iter().map(|c| (stats::mean(&c), stats::std_dev(&c))).collect::<Vec<_>>();
        let site = moments(self.adjusted_hc(data));
        let reference = moments(self.adjusted_hc(&self.reference));
        let tax = self.taxonomy();
        (0..tax.n_metrics())
            .map(|m| {
                let d = tax
                    .features_of_metric(m)
                    .filter(|&v| self.model().is_active(v))
                    .map(|v| bhattacharyya_gaussian(site[v], reference[v]))
                    .collect::<Result<Vec<_>>>()?;
                Ok(stats::mean(&d))
            })
            .collect()
    }

    /// Held-out-site bootstrap. Returns a report whose `bhattacharyya` holds
    /// harmonized distances and `raw_bhattacharyya` the unharmonized ones.
    pub fn run_bootstrap(&self) -> Result<EvaluationReport> {
        let boot = &self.config.bootstrap;
        let filters = parse_filters(&boot.filters)?;
        let sites = self.clinical_sites()?;
        let n_families = boot.families.len();
        if boot.sites_per_family < 2 {
            return Err(Error::InvalidConfig("bootstrap needs at least two sites per family".into()));
        }
        let entries = (0..boot.iterations)
            .into_par_iter()
            .map(|it| self.bootstrap_iteration(it, &sites, n_families, &filters))
            .collect::<Result<Vec<_>>>()?;
        let mut report = EvaluationReport::new(self.metadata());
        for (harmonized, raw) in entries {
            report.bhattacharyya.extend(harmonized);
            report.raw_bhattacharyya.extend(raw);
        }
        Ok(report)
    }

    fn bootstrap_iteration(
        &self,
        it: usize,
        sites: &[(usize, GridSite)],
        n_families: usize,
        filters: &[FilterSpec],
    ) -> Result<(Vec<BhattacharyyaEntry>, Vec<BhattacharyyaEntry>)> {
        let boot = &self.config.bootstrap;
        let seed = derive_seed(self.config.seed, &[7, 1, it as u64]);
        let mut r = rng(seed);
        let held_out: Vec<usize> = (0..n_families)
            .map(|f| {
                let members: Vec<usize> = (0..sites.len()).filter(|&i| sites[i].0 == f).collect();
                *members.choose(&mut r).expect("family has sites")
            })
            .collect();
        let detector = if needs_detector(filters) {
            let train_parts: Vec<&CohortDataset> = (0..sites.len())
                .filter(|i| !held_out.contains(i))
                .map(|i| &sites[i].1.ground_truth)
                .collect();
            let pool = CohortDataset::concat(&train_parts)?;
            let data = detector_data(&pool, self.model(), &boot.detector, derive_seed(seed, &[1]))?;
            let config = NetworkConfig {
                input_dim: self.taxonomy().n_features(),
                max_epochs: boot.max_epochs,
                early_stop_patience: boot.early_stop_patience,
                seed: derive_seed(seed, &[2]),
                ..self.config.network.clone()
            };
            Some(MlpDetector::train(&data.train, &data.val, &config)?.0)
        } else {
            None
        };
        let metrics = self.taxonomy().metrics();
        let entries = |site: &GridSite, filter: &str, distances: Vec<f64>| -> Vec<BhattacharyyaEntry> {
            distances
                .into_iter()
                .zip(metrics)
                .map(|(distance, metric)| BhattacharyyaEntry {
                    iteration: it,
                    site_id: site.site_id.clone(),
                    filter: filter.to_string(),
                    metric: metric.clone(),
                    distance,
                })
                .collect()
        };
        let mut harmonized = Vec::new();
        let mut raw = Vec::new();
        for &i in &held_out {
            let site = &sites[i].1;
            raw.extend(entries(site, "RAW", self.hc_distance_per_metric(&site.biased)?));
            for filter in filters {
                let det = detector.as_ref().map(|d| d as &dyn OutlierDetector);
                let out = self.combat.harmonize_with(&site.biased, filter, det)?;
                harmonized.extend(entries(site, filter.label(), self.hc_distance_per_metric(&out.harmonized)?));
            }
        }
        Ok((harmonized, raw))
    }
}
