//! Subject-level filters averaging per-feature deviation scores over all
//! bundles and metrics.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::filters::univariate::MAD_Z_FACTOR;
use crate::stats;

fn check_rows(z: &Array2<f64>) -> Result<()> {
    if z.nrows() < 2 {
        return Err(Error::ColumnTooShort { len: z.nrows(), min: 2 });
    }
    Ok(())
}

/// Mean over features of `|z − μ_v| / σ_v`; zero-spread features contribute 0.
pub fn mean_abs_zscore(z: &Array2<f64>) -> Result<Vec<f64>> {
    check_rows(z)?;
    let mut score = vec![0.0; z.nrows()];
    for col in z.axis_iter(Axis(1)) {
        let col = col.to_vec();
        let sd = stats::std_dev(&col);
        if sd > 0.0 {
            let mu = stats::mean(&col);
            for (s, x) in score.iter_mut().zip(&col) {
                *s += (x - mu).abs() / sd;
            }
        }
    }
    let v = z.ncols() as f64;
    Ok(score.into_iter().map(|s| s / v).collect())
}

/// Mean over features of the absolute modified z-score; zero-MAD features
/// contribute 0.
pub fn mean_abs_modified_zscore(z: &Array2<f64>) -> Result<Vec<f64>> {
    check_rows(z)?;
    let mut score = vec![0.0; z.nrows()];
    for col in z.axis_iter(Axis(1)) {
        let col = col.to_vec();
        let mad = stats::mad(&col);
        if mad > 0.0 {
            let med = stats::median(&col);
            for (s, x) in score.iter_mut().zip(&col) {
                *s += MAD_Z_FACTOR * (x - med).abs() / mad;
            }
        }
    }
    let v = z.ncols() as f64;
    Ok(score.into_iter().map(|s| s / v).collect())
}

pub fn filter_global_zscore(z: &Array2<f64>, t: f64) -> Result<Vec<bool>> {
    Ok(mean_abs_zscore(z)?.into_iter().map(|s| s <= t).collect())
}

pub fn filter_global_mad(z: &Array2<f64>, t: f64) -> Result<Vec<bool>> {
    Ok(mean_abs_modified_zscore(z)?.into_iter().map(|s| s <= t).collect())
}
