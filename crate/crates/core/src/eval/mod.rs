//! Evaluation harness: harmonization error against ground truth on control
//! sites, and HC alignment with the reference on held-out sites.

pub mod metrics;
pub mod study;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::CohortDataset;
use crate::combat::PairwiseComBat;
use crate::error::{Error, Result};
use crate::filters::{FilterMask, FilterMethod, FilterSpec, OutlierDetector};
use crate::stats;
use crate::synth::GridSite;

pub use metrics::{bhattacharyya_gaussian, standardized_difference, std_mae, worst_case, StdMae};
pub use study::{BootstrapConfig, DetectorTrainingConfig, SizeSweepConfig, Study, StudyConfig};

/// Fraction of features averaged by the worst-case statistic.
pub const WORST_CASE_FRACTION: f64 = 0.10;

/// Outcome of harmonizing one site with one filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteResult {
    pub site_id: String,
    pub ratio: f64,
    pub n_subjects: usize,
    pub n_hc: usize,
    pub filter: String,
    /// STD_MAE per feature; `NaN` marks features excluded from aggregates.
    pub per_feature: Vec<f64>,
    pub mean: f64,
    pub worst_case: f64,
    /// Mean over bundles, per metric.
    pub per_metric: Vec<f64>,
    /// Excluded values among healthy controls, in subject equivalents.
    pub hc_excluded: f64,
    /// Excluded values among pathological subjects, in subject equivalents.
    pub pathology_excluded: f64,
    pub failed_features: usize,
    /// Set when the site could not be harmonized; statistics are then `NaN`.
    pub error: Option<String>,
}

/// Aggregate over the sites of one (size, ratio, filter) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub n_subjects: usize,
    pub ratio: f64,
    pub filter: String,
    pub n_sites: usize,
    pub n_failed: usize,
    /// Mean over sites of the per-site mean over features.
    pub mean_std_mae: f64,
    /// Mean over sites of the per-site top-10% mean.
    pub worst_case: f64,
    pub per_metric: Vec<f64>,
    pub mean_hc: f64,
    pub mean_hc_excluded: f64,
    pub mean_pathology_excluded: f64,
}

/// One HC-vs-reference distance of a held-out site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BhattacharyyaEntry {
    pub iteration: usize,
    pub site_id: String,
    pub filter: String,
    pub metric: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub master_seed: u64,
    pub config_hash: String,
    pub metrics: Vec<String>,
    pub n_features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub metadata: RunMetadata,
    pub sites: Vec<SiteResult>,
    pub bhattacharyya: Vec<BhattacharyyaEntry>,
    /// Distances before harmonization, for context.
    pub raw_bhattacharyya: Vec<BhattacharyyaEntry>,
}

fn ratio_key(r: f64) -> i64 {
    (r * 1e6).round() as i64
}

fn filter_rank(label: &str) -> usize {
    FilterMethod::ALL
        .iter()
        .position(|m| m.label() == label)
        .unwrap_or(usize::MAX)
}

impl EvaluationReport {
    pub fn new(metadata: RunMetadata) -> Self {
        Self {
            metadata,
            sites: Vec::new(),
            bhattacharyya: Vec::new(),
            raw_bhattacharyya: Vec::new(),
        }
    }

    /// Per-cell aggregates ordered by size, ratio and filter.
    pub fn summary(&self) -> Vec<CellSummary> {
        let mut cells: BTreeMap<(usize, i64, usize, String), Vec<&SiteResult>> = BTreeMap::new();
        for s in &self.sites {
            cells
                .entry((s.n_subjects, ratio_key(s.ratio), filter_rank(&s.filter), s.filter.clone()))
                .or_default()
                .push(s);
        }
        cells
            .into_values()
            .map(|rows| {
                let ok: Vec<&&SiteResult> = rows.iter().filter(|r| r.error.is_none()).collect();
                let avg = |f: &dyn Fn(&SiteResult) -> f64| {
                    if ok.is_empty() {
                        f64::NAN
                    } else {
                        ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
                    }
                };
                let n_metrics = self.metadata.metrics.len();
                let per_metric = (0..n_metrics).map(|m| avg(&|r| r.per_metric[m])).collect();
                CellSummary {
                    n_subjects: rows[0].n_subjects,
                    ratio: rows[0].ratio,
                    filter: rows[0].filter.clone(),
                    n_sites: rows.len(),
                    n_failed: rows.len() - ok.len(),
                    mean_std_mae: avg(&|r| r.mean),
                    worst_case: avg(&|r| r.worst_case),
                    per_metric,
                    mean_hc: avg(&|r| r.n_hc as f64),
                    mean_hc_excluded: avg(&|r| r.hc_excluded),
                    mean_pathology_excluded: avg(&|r| r.pathology_excluded),
                }
            })
            .collect()
    }

    /// The cell for `(ratio, filter)`, pooling all site sizes present.
    pub fn cell(&self, n_subjects: Option<usize>, ratio: f64, filter: &str) -> Option<CellSummary> {
        self.summary().into_iter().find(|c| {
            ratio_key(c.ratio) == ratio_key(ratio) && c.filter == filter && n_subjects.is_none_or(|n| n == c.n_subjects)
        })
    }

    /// Mean distance per `(filter, metric)` over iterations and sites.
    pub fn bhattacharyya_summary(&self) -> BTreeMap<(String, String), f64> {
        let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
        for e in self.bhattacharyya.iter().chain(&self.raw_bhattacharyya) {
            let a = acc.entry((e.filter.clone(), e.metric.clone())).or_default();
            a.0 += e.distance;
            a.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    /// Writes the per-cell table: one row per (size, ratio, filter).
    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header: Vec<String> = [
            "n_subjects",
            "ratio",
            "filter",
            "n_sites",
            "n_failed",
            "mean_std_mae",
            "worst_case_top10",
            "mean_hc",
            "hc_excluded",
            "pathology_excluded",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(self.metadata.metrics.iter().map(|m| format!("std_mae_{m}")));
        w.write_record(&header).map_err(csv_err)?;
        for c in self.summary() {
            let mut row = vec![
                c.n_subjects.to_string(),
                c.ratio.to_string(),
                c.filter.clone(),
                c.n_sites.to_string(),
                c.n_failed.to_string(),
                c.mean_std_mae.to_string(),
                c.worst_case.to_string(),
                c.mean_hc.to_string(),
                c.mean_hc_excluded.to_string(),
                c.mean_pathology_excluded.to_string(),
            ];
            row.extend(c.per_metric.iter().map(f64::to_string));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Writes the metric × filter table of mean Bhattacharyya distances.
    pub fn write_bhattacharyya_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let summary = self.bhattacharyya_summary();
        let mut filters: Vec<String> = summary.keys().map(|(f, _)| f.clone()).collect();
        filters.dedup();
        filters.sort_by_key(|f| (f != "RAW", filter_rank(f)));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["metric".to_string()];
        header.extend(filters.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for m in &self.metadata.metrics {
            let mut row = vec![m.clone()];
            for f in &filters {
                row.push(summary.get(&(f.clone(), m.clone())).map_or(String::new(), f64::to_string));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Standard deviation of each reference feature (unbiased).
pub fn reference_std(reference: &CohortDataset) -> Vec<f64> {
    reference
        .feature_matrix()
        .columns()
        .into_iter()
        .map(|c| stats::std_dev(&c.to_vec()))
        .collect()
}

fn excluded_by_group(mask: &FilterMask, site: &CohortDataset) -> (f64, f64) {
    let (mut hc, mut path) = (0.0, 0.0);
    for (j, s) in site.subjects().iter().enumerate() {
        let f = mask.excluded_fraction(j);
        if s.group.is_hc() {
            hc += f;
        } else {
            path += f;
        }
    }
    (hc, path)
}

/// Harmonizes `site` with one filter and scores it against ground truth.
/// Failures are recorded in the result instead of being returned.
pub fn evaluate_site(
    combat: &PairwiseComBat,
    ref_std: &[f64],
    site: &GridSite,
    filter: &FilterSpec,
    detector: Option<&dyn OutlierDetector>,
) -> SiteResult {
    let taxonomy = site.biased.taxonomy();
    let n_metrics = taxonomy.n_metrics();
    let mut result = SiteResult {
        site_id: site.site_id.clone(),
        ratio: site.ratio,
        n_subjects: site.ground_truth.len(),
        n_hc: site.n_hc(),
        filter: filter.label().to_string(),
        per_feature: Vec::new(),
        mean: f64::NAN,
        worst_case: f64::NAN,
        per_metric: vec![f64::NAN; n_metrics],
        hc_excluded: f64::NAN,
        pathology_excluded: f64::NAN,
        failed_features: 0,
        error: None,
    };
    let out = match combat.harmonize_with(&site.biased, filter, detector) {
        Ok(out) => out,
        Err(e) => {
            result.error = Some(e.to_string());
            return result;
        }
    };
    let abs = metrics::feature_abs_errors(&out.harmonized, &site.ground_truth);
    let per_feature: Vec<f64> = abs
        .iter()
        .zip(ref_std)
        .enumerate()
        .map(|(v, (e, s))| {
            if *s > 0.0 && combat.model().is_active(v) {
                e / s
            } else {
                f64::NAN
            }
        })
        .collect();
    let valid: Vec<f64> = per_feature.iter().copied().filter(|x| x.is_finite()).collect();
    result.failed_features = per_feature.len() - valid.len();
    if valid.is_empty() {
        result.error = Some("no feature could be scored".into());
        return result;
    }
    result.mean = stats::mean(&valid);
    result.worst_case = worst_case(&valid, WORST_CASE_FRACTION).expect("non-empty");
    for (m, slot) in result.per_metric.iter_mut().enumerate() {
        let vals: Vec<f64> = taxonomy
            .features_of_metric(m)
            .map(|v| per_feature[v])
            .filter(|x| x.is_finite())
            .collect();
        if !vals.is_empty() {
            *slot = stats::mean(&vals);
        }
    }
    let (hc, path) = excluded_by_group(&out.mask, &site.biased);
    result.hc_excluded = hc;
    result.pathology_excluded = path;
    result.per_feature = per_feature;
    result
}

/// Runs every filter on every site of a grid. `combat` carries the
/// normative model of the reference; `ref_std` its feature deviations.
pub fn run_experiment(
    grid: &[GridSite],
    combat: &PairwiseComBat,
    ref_std: &[f64],
    filters: &[FilterSpec],
    detector: Option<&dyn OutlierDetector>,
    metadata: RunMetadata,
) -> Result<EvaluationReport> {
    if filters.iter().any(|f| f.method == FilterMethod::Mlp) && detector.is_none() {
        return Err(Error::MissingDetector(FilterMethod::Mlp.label().into()));
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|s| (0..filters.len()).map(move |f| (s, f)))
        .collect();
    let sites: Vec<SiteResult> = jobs
        .into_par_iter()
        .map(|(s, f)| evaluate_site(combat, ref_std, &grid[s], &filters[f], detector))
        .collect();
    let failed = sites.iter().filter(|s| s.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} site/filter combination(s) failed and are excluded from aggregates");
    }
    let mut report = EvaluationReport::new(metadata);
    report.sites = sites;
    Ok(report)
}
