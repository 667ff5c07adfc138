//! Cohort records, the canonical CSV format and stratified splitting.
//!
//! The file layout is `subject_id,site_id,group,<covariates...>,<bundle>__<metric>...`.
//! `group` is `HC`, any other non-empty label for pathology, or empty when
//! unknown.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{FeatureTaxonomy, FEATURE_SEPARATOR};

/// Default covariates: age in years, sex and handedness coded 0/1.
pub const DEFAULT_COVARIATES: [&str; 3] = ["age", "sex", "handedness"];

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Hc,
    Pathology(String),
    /// No label in the source file.
    Unknown,
}

impl Group {
    pub fn parse(s: &str) -> Self {
        let s = s.trim();
        if s.is_empty() {
            Group::Unknown
        } else if s.eq_ignore_ascii_case("hc") {
            Group::Hc
        } else {
            Group::Pathology(s.to_string())
        }
    }

    pub fn is_hc(&self) -> bool {
        matches!(self, Group::Hc)
    }

    pub fn is_pathology(&self) -> bool {
        matches!(self, Group::Pathology(_))
    }

    /// Stratum key used by [`split_dataset`]: healthy vs pathological.
    fn stratum(&self) -> &'static str {
        match self {
            Group::Hc => "HC",
            Group::Pathology(_) => "pathology",
            Group::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Hc => f.write_str("HC"),
            Group::Pathology(label) => f.write_str(label),
            Group::Unknown => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub site_id: String,
    pub group: Group,
    pub covariates: Vec<f64>,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortDataset {
    taxonomy: Arc<FeatureTaxonomy>,
    covariate_names: Vec<String>,
    subjects: Vec<SubjectRecord>,
}

impl CohortDataset {
    /// Validates shapes, finiteness and subject-id uniqueness. Empty datasets
    /// are allowed in memory; [`load_cohort`] additionally rejects tiny sites.
    pub fn new(
        taxonomy: Arc<FeatureTaxonomy>,
        covariate_names: Vec<String>,
        subjects: Vec<SubjectRecord>,
    ) -> Result<Self> {
        let v = taxonomy.n_features();
        let c = covariate_names.len();
        let mut seen = HashSet::with_capacity(subjects.len());
        for (row, s) in subjects.iter().enumerate() {
            if !seen.insert(s.subject_id.as_str()) {
                return Err(Error::DuplicateSubjectId(s.subject_id.clone()));
            }
            if s.features.len() != v {
                return Err(Error::ShapeMismatch {
                    expected: format!("{v} features"),
                    got: format!("{} for subject `{}`", s.features.len(), s.subject_id),
                });
            }
            if s.covariates.len() != c {
                return Err(Error::ShapeMismatch {
                    expected: format!("{c} covariates"),
                    got: format!("{} for subject `{}`", s.covariates.len(), s.subject_id),
                });
            }
            if let Some(k) = s.covariates.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteValue {
                    row: row + 1,
                    column: covariate_names[k].clone(),
                });
            }
            if let Some(k) = s.features.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteValue {
                    row: row + 1,
                    column: taxonomy.feature_name(k).to_string(),
                });
            }
        }
        Ok(Self {
            taxonomy,
            covariate_names,
            subjects,
        })
    }

    pub fn taxonomy(&self) -> &FeatureTaxonomy {
        &self.taxonomy
    }

    pub fn taxonomy_arc(&self) -> &Arc<FeatureTaxonomy> {
        &self.taxonomy
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn into_subjects(self) -> Vec<SubjectRecord> {
        self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.taxonomy.n_features()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn groups(&self) -> Vec<Group> {
        self.subjects.iter().map(|s| s.group.clone()).collect()
    }

    /// Site ids in order of first appearance.
    pub fn site_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.subjects
            .iter()
            .filter(|s| seen.insert(s.site_id.as_str()))
            .map(|s| s.site_id.clone())
            .collect()
    }

    /// Subjects × features matrix.
    pub fn feature_matrix(&self) -> Array2<f64> {
        let v = self.n_features();
        let mut m = Array2::zeros((self.len(), v));
        for (mut row, s) in m.rows_mut().into_iter().zip(&self.subjects) {
            row.assign(&ndarray::ArrayView1::from(&s.features[..]));
        }
        m
    }

    /// Subjects × covariates matrix.
    pub fn covariate_matrix(&self) -> Array2<f64> {
        let c = self.covariate_names.len();
        let mut m = Array2::zeros((self.len(), c));
        for (mut row, s) in m.rows_mut().into_iter().zip(&self.subjects) {
            row.assign(&ndarray::ArrayView1::from(&s.covariates[..]));
        }
        m
    }

    /// Same subjects with features replaced row by row.
    pub fn with_features(&self, features: &Array2<f64>) -> Result<Self> {
        if features.dim() != (self.len(), self.n_features()) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.len(), self.n_features()),
                got: format!("{}x{}", features.nrows(), features.ncols()),
            });
        }
        let subjects = self
            .subjects
            .iter()
            .zip(features.rows())
            .map(|(s, row)| SubjectRecord {
                features: row.to_vec(),
                ..s.clone()
            })
            .collect();
        Self::new(self.taxonomy.clone(), self.covariate_names.clone(), subjects)
    }

    /// Subset keeping the given subjects in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            taxonomy: self.taxonomy.clone(),
            covariate_names: self.covariate_names.clone(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }

    pub fn filter<F: Fn(&SubjectRecord) -> bool>(&self, keep: F) -> Self {
        Self {
            taxonomy: self.taxonomy.clone(),
            covariate_names: self.covariate_names.clone(),
            subjects: self.subjects.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    /// Subjects of one site.
    pub fn site(&self, site_id: &str) -> Result<Self> {
        let out = self.filter(|s| s.site_id == site_id);
        if out.is_empty() {
            return Err(Error::EmptySite {
                site: site_id.to_string(),
                count: 0,
            });
        }
        Ok(out)
    }

    /// Splits by site, in order of first appearance.
    pub fn by_site(&self) -> Vec<(String, Self)> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, s) in self.subjects.iter().enumerate() {
            let k = *index.entry(s.site_id.as_str()).or_insert_with(|| {
                groups.push((s.site_id.clone(), Vec::new()));
                groups.len() - 1
            });
            groups[k].1.push(i);
        }
        groups
            .into_iter()
            .map(|(site, idx)| (site, self.select(&idx)))
            .collect()
    }

    /// Concatenates datasets sharing taxonomy and covariates.
    pub fn concat(parts: &[&CohortDataset]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyInput)?;
        let mut subjects = Vec::new();
        for p in parts {
            check_same_layout(first, p)?;
            subjects.extend(p.subjects.iter().cloned());
        }
        Self::new(first.taxonomy.clone(), first.covariate_names.clone(), subjects)
    }

    /// Rejects empty datasets and sites with fewer than two subjects.
    pub fn validate_sites(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptySite {
                site: "<any>".into(),
                count: 0,
            });
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &self.subjects {
            *counts.entry(s.site_id.as_str()).or_default() += 1;
        }
        match counts.into_iter().find(|&(_, c)| c < 2) {
            Some((site, count)) => Err(Error::EmptySite {
                site: site.to_string(),
                count,
            }),
            None => Ok(()),
        }
    }
}

/// Errors unless both datasets use the same feature layout and covariates.
pub fn check_same_layout(a: &CohortDataset, b: &CohortDataset) -> Result<()> {
    if a.taxonomy() != b.taxonomy() {
        return Err(Error::TaxonomyMismatch(format!(
            "{} vs {} features",
            a.n_features(),
            b.n_features()
        )));
    }
    if a.covariate_names != b.covariate_names {
        return Err(Error::TaxonomyMismatch(format!(
            "covariates {:?} vs {:?}",
            a.covariate_names, b.covariate_names
        )));
    }
    Ok(())
}

/// How [`load_cohort`] interprets the header.
#[derive(Debug, Clone)]
pub struct CohortSchema {
    /// Expected layout; `None` infers bundles and metrics from `__` columns
    /// with the built-in direction map.
    pub taxonomy: Option<Arc<FeatureTaxonomy>>,
    pub covariates: Vec<String>,
}

impl Default for CohortSchema {
    fn default() -> Self {
        Self {
            taxonomy: None,
            covariates: DEFAULT_COVARIATES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl CohortSchema {
    pub fn with_taxonomy(taxonomy: Arc<FeatureTaxonomy>) -> Self {
        Self {
            taxonomy: Some(taxonomy),
            ..Self::default()
        }
    }
}

fn infer_taxonomy(header: &csv::StringRecord) -> Result<FeatureTaxonomy> {
    let mut bundles: Vec<String> = Vec::new();
    let mut metrics: Vec<String> = Vec::new();
    for col in header.iter() {
        if let Some((b, m)) = col.trim().split_once(FEATURE_SEPARATOR) {
            if !bundles.iter().any(|x| x == b) {
                bundles.push(b.to_string());
            }
            if !metrics.iter().any(|x| x == m) {
                metrics.push(m.to_string());
            }
        }
    }
    if bundles.is_empty() {
        return Err(Error::MissingColumn("<bundle>__<metric>".into()));
    }
    FeatureTaxonomy::with_default_directions(bundles, metrics)
}

fn parse_number(raw: &str, row: usize, column: &str) -> Result<f64> {
    let value: f64 = raw.trim().parse().map_err(|_| Error::ParseValue {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })?;
    if !value.is_finite() {
        return Err(Error::NonFiniteValue {
            row,
            column: column.to_string(),
        });
    }
    Ok(value)
}

/// Reads and validates a cohort CSV. Row numbers in diagnostics count data
/// rows from 1.
pub fn load_cohort(path: impl AsRef<Path>, schema: &CohortSchema) -> Result<CohortDataset> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader.headers().map_err(csv_err)?.clone();
    let position: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let col = |name: &str| {
        position
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    let taxonomy = match &schema.taxonomy {
        Some(t) => t.clone(),
        None => Arc::new(infer_taxonomy(&header)?),
    };
    let id_col = col("subject_id")?;
    let site_col = col("site_id")?;
    let group_col = position.get("group").copied();
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    let feat_cols = taxonomy
        .feature_names()
        .iter()
        .map(|f| col(f))
        .collect::<Result<Vec<_>>>()?;

    let mut subjects = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row = i + 1;
        let field = |k: usize| record.get(k).unwrap_or("");
        let covariates = cov_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&k, name)| parse_number(field(k), row, name))
            .collect::<Result<Vec<_>>>()?;
        let features = feat_cols
            .iter()
            .zip(taxonomy.feature_names())
            .map(|(&k, name)| parse_number(field(k), row, name))
            .collect::<Result<Vec<_>>>()?;
        subjects.push(SubjectRecord {
            subject_id: field(id_col).to_string(),
            site_id: field(site_col).to_string(),
            group: group_col.map_or(Group::Unknown, |k| Group::parse(field(k))),
            covariates,
            features,
        });
    }
    let dataset = CohortDataset::new(taxonomy, schema.covariates.clone(), subjects)?;
    dataset.validate_sites()?;
    Ok(dataset)
}

/// Writes the canonical CSV. Reals use the shortest representation that
/// parses back to the same bits.
pub fn save_cohort(dataset: &CohortDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header = vec!["subject_id", "site_id", "group"];
    header.extend(dataset.covariate_names.iter().map(String::as_str));
    header.extend(dataset.taxonomy.feature_names().iter().map(String::as_str));
    writer.write_record(&header).map_err(csv_err)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for s in &dataset.subjects {
        row.clear();
        row.push(s.subject_id.clone());
        row.push(s.site_id.clone());
        row.push(s.group.to_string());
        row.extend(s.covariates.iter().map(|x| x.to_string()));
        row.extend(s.features.iter().map(|x| x.to_string()));
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Stratified (healthy vs pathological) split into train/validation/test.
///
/// Within each stratum the counts are `floor(size·fraction)` with leftover
/// subjects assigned by largest remainder, so each split's stratum share is
/// within one subject of the global share.
pub fn split_dataset(
    dataset: &CohortDataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<[CohortDataset; 3]> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0)
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidFractions(fractions));
    }
    let mut strata: BTreeMap<&'static str, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.subjects.iter().enumerate() {
        strata.entry(s.group.stratum()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (name, mut members) in strata {
        if members.len() < 3 {
            return Err(Error::StratumTooSmall {
                group: name.to_string(),
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let counts = largest_remainder(members.len(), &fractions);
        let mut start = 0;
        for (part, count) in parts.iter_mut().zip(counts) {
            part.extend_from_slice(&members[start..start + count]);
            start += count;
        }
    }
    Ok(parts.map(|mut idx| {
        idx.sort_unstable();
        dataset.select(&idx)
    }))
}

fn largest_remainder(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact = fractions.map(|f| f * n as f64);
    let mut counts = exact.map(|x| x.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[k] > 0.0 {
            counts[k] += 1;
            left -= 1;
        }
    }
    counts
}
