//! Per-feature filters on one site's residual column. Each returns an
//! include vector (`true` = keep for site-effect estimation).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Consistency constant of the modified z-score (Φ⁻¹(0.75)).
pub const MAD_Z_FACTOR: f64 = 0.6745;
/// Consistency constant of Rousseeuw–Croux Sn at the normal model.
pub const SN_FACTOR: f64 = 1.1926;
/// Consistency constant of Rousseeuw–Croux Qn at the normal model.
pub const QN_FACTOR: f64 = 2.2219;

/// Location and spread summaries of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    /// Unbiased standard deviation.
    pub std: f64,
    pub median: f64,
    /// Unscaled median absolute deviation.
    pub mad: f64,
    pub q1: f64,
    pub q3: f64,
}

impl FeatureStats {
    pub fn of(column: &[f64]) -> Result<Self> {
        require_len(column, 2)?;
        let s = stats::sorted(column);
        Ok(Self {
            mean: stats::mean(column),
            std: stats::std_dev(column),
            median: stats::median_sorted(&s),
            mad: stats::mad(column),
            q1: stats::quantile_sorted(&s, 0.25),
            q3: stats::quantile_sorted(&s, 0.75),
        })
    }
}

pub(crate) fn require_len(column: &[f64], min: usize) -> Result<()> {
    if column.len() < min {
        Err(Error::ColumnTooShort { len: column.len(), min })
    } else {
        Ok(())
    }
}

/// Keeps everything when `scale` is zero; otherwise keeps values whose
/// `|z − center| / scale` is at most `t`.
fn keep_within(column: &[f64], center: f64, scale: f64, t: f64) -> Vec<bool> {
    if scale <= 0.0 {
        return vec![true; column.len()];
    }
    column.iter().map(|z| (z - center).abs() / scale <= t).collect()
}

/// Classical z-score with the unbiased standard deviation.
pub fn filter_zscore(column: &[f64], t: f64) -> Result<Vec<bool>> {
    require_len(column, 2)?;
    Ok(keep_within(column, stats::mean(column), stats::std_dev(column), t))
}

/// Tukey fences `[Q1 − k·IQR, Q3 + k·IQR]` with linearly interpolated quartiles.
pub fn filter_iqr(column: &[f64], k: f64) -> Result<Vec<bool>> {
    require_len(column, 4)?;
    let s = stats::sorted(column);
    let q1 = stats::quantile_sorted(&s, 0.25);
    let q3 = stats::quantile_sorted(&s, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - k * iqr, q3 + k * iqr);
    Ok(column.iter().map(|&z| z >= lo && z <= hi).collect())
}

/// Modified z-score `0.6745·|z − median| / MAD`.
pub fn filter_mad(column: &[f64], t: f64) -> Result<Vec<bool>> {
    require_len(column, 2)?;
    let mad = stats::mad(column);
    if mad <= 0.0 {
        return Ok(vec![true; column.len()]);
    }
    let med = stats::median(column);
    Ok(column.iter().map(|z| MAD_Z_FACTOR * (z - med).abs() / mad <= t).collect())
}

/// `Sn = 1.1926 · lomed_j himed_k |z_j − z_k|`, with `k` running over all
/// values including `j`.
pub fn sn_scale(column: &[f64]) -> f64 {
    let n = column.len();
    let mut inner = Vec::with_capacity(n);
    let mut diffs = vec![0.0; n];
    for &zj in column {
        for (d, &zk) in diffs.iter_mut().zip(column) {
            *d = (zj - zk).abs();
        }
        diffs.sort_by(f64::total_cmp);
        inner.push(stats::high_median_sorted(&diffs));
    }
    inner.sort_by(f64::total_cmp);
    SN_FACTOR * stats::low_median_sorted(&inner)
}

/// `Qn = 2.2219 · Q1{|z_j − z_k| : j < k}` (interpolated first quartile).
pub fn qn_scale(column: &[f64]) -> f64 {
    let n = column.len();
    let mut diffs = Vec::with_capacity(n * (n - 1) / 2);
    for j in 0..n {
        for k in j + 1..n {
            diffs.push((column[j] - column[k]).abs());
        }
    }
    diffs.sort_by(f64::total_cmp);
    QN_FACTOR * stats::quantile_sorted(&diffs, 0.25)
}

pub fn filter_sn(column: &[f64], t: f64) -> Result<Vec<bool>> {
    require_len(column, 3)?;
    Ok(keep_within(column, stats::median(column), sn_scale(column), t))
}

pub fn filter_qn(column: &[f64], t: f64) -> Result<Vec<bool>> {
    require_len(column, 4)?;
    Ok(keep_within(column, stats::median(column), qn_scale(column), t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zscore_constant_and_outlier() {
        assert!(filter_zscore(&[2.0; 5], 3.0).unwrap().iter().all(|&b| b));
        let mut col: Vec<f64> = (0..30).map(|i| (i % 5) as f64 * 0.1).collect();
        col.push(50.0);
        let keep = filter_zscore(&col, 3.0).unwrap();
        assert!(!keep[30]);
        assert!(keep[..30].iter().all(|&b| b));
        assert!(matches!(filter_zscore(&[1.0], 3.0), Err(Error::ColumnTooShort { .. })));
    }

    #[test]
    fn iqr_hand_cases() {
        assert!(filter_iqr(&[1.0, 2.0, 3.0, 4.0, 5.0], 1.5).unwrap().iter().all(|&b| b));
        assert_eq!(
            filter_iqr(&[1.0, 2.0, 3.0, 4.0, 100.0], 1.5).unwrap(),
            vec![true, true, true, true, false]
        );
        assert!(filter_iqr(&[1.0, 2.0, 3.0], 1.5).is_err());
    }

    #[test]
    fn mad_hand_cases() {
        assert_eq!(
            filter_mad(&[1.0, 2.0, 3.0, 4.0, 100.0], 3.5).unwrap(),
            vec![true, true, true, true, false]
        );
        assert!(filter_mad(&[-1.0, 0.0, 1.0], 3.5).unwrap().iter().all(|&b| b));
        assert!(filter_mad(&[1.0, 1.0, 1.0, 9.0], 3.5).unwrap().iter().all(|&b| b));
    }

    #[test]
    fn sn_and_qn_small_set() {
        let col = [0.0, 1.0, 2.0, 3.0, 50.0];
        // Inner high medians: 2, 2, 1, 2, 48 -> sorted 1,2,2,2,48 -> low median 2.
        assert!((sn_scale(&col) - SN_FACTOR * 2.0).abs() < 1e-12);
        assert_eq!(filter_sn(&col, 3.0).unwrap(), vec![true, true, true, true, false]);
        // Pairwise diffs sorted: 1,1,1,2,2,3,47,48,49,50 -> Q1 at h = 2.25 -> 1.25.
        assert!((qn_scale(&col) - QN_FACTOR * 1.25).abs() < 1e-12);
        assert_eq!(filter_qn(&col, 3.0).unwrap(), vec![true, true, true, true, false]);
        assert!(filter_sn(&[3.0; 6], 3.0).unwrap().iter().all(|&b| b));
        assert!(filter_qn(&[3.0; 6], 3.0).unwrap().iter().all(|&b| b));
    }

    #[test]
    fn feature_stats_are_ordered() {
        let s = FeatureStats::of(&[4.0, 1.0, 3.0, 2.0, 10.0]).unwrap();
        assert_eq!(s.median, 3.0);
        assert_eq!((s.q1, s.q3), (2.0, 4.0));
        assert_eq!(s.mad, 1.0);
        assert!(s.std > 0.0);
    }
}
