//! One-sided iterative trimming of the pathological tail.
//!
//! Both filters remove one value per iteration from the tail the metric's
//! pathological direction points to, recomputing the median each time, and
//! never go below [`survivor_floor`] values.

use crate::error::Result;
use crate::filters::univariate::require_len;
use crate::stats;
use crate::taxonomy::Direction;

/// Minimum number of values the trimming filters keep: `max(4, ⌈n/5⌉)`.
pub fn survivor_floor(n: usize) -> usize {
    4.max(n.div_ceil(5))
}

/// Outcome of a trimming run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimResult {
    pub include: Vec<bool>,
    /// Indices in removal order.
    pub removed: Vec<usize>,
}

fn trim<F>(column: &[f64], direction: Direction, converged: F) -> TrimResult
where
    F: Fn(&[f64]) -> bool,
{
    let n = column.len();
    let floor = survivor_floor(n);
    let mut include = vec![true; n];
    let mut removed = Vec::new();
    let mut kept: Vec<f64> = column.to_vec();
    loop {
        if converged(&kept) || kept.len() <= floor {
            break;
        }
        let pick = (0..n).filter(|&j| include[j]).reduce(|best, j| {
            let further = match direction {
                Direction::IncreasesWithPathology => column[j] > column[best],
                Direction::DecreasesWithPathology => column[j] < column[best],
            };
            if further {
                j
            } else {
                best
            }
        });
        let Some(j) = pick else { break };
        include[j] = false;
        removed.push(j);
        kept = (0..n).filter(|&k| include[k]).map(|k| column[k]).collect();
    }
    TrimResult { include, removed }
}

/// Stops once `|mean − median| ≤ tol·|median|`.
pub fn mms_converged(values: &[f64], tol: f64) -> bool {
    let med = stats::median(values);
    (stats::mean(values) - med).abs() <= tol * med.abs()
}

/// Mean absolute deviation below and above the median.
pub fn side_deviations(values: &[f64]) -> (f64, f64) {
    let med = stats::median(values);
    let side = |below: bool| {
        let d: Vec<f64> = values
            .iter()
            .filter(|&&z| if below { z < med } else { z > med })
            .map(|z| (z - med).abs())
            .collect();
        if d.is_empty() {
            0.0
        } else {
            stats::mean(&d)
        }
    };
    (side(true), side(false))
}

/// Stops once `|μ_left − μ_right| ≤ tol·(μ_left + μ_right)/2`.
pub fn vs_converged(values: &[f64], tol: f64) -> bool {
    let (left, right) = side_deviations(values);
    (left - right).abs() <= tol * (left + right) / 2.0
}

/// Mean-median similarity trimming.
pub fn filter_mms(column: &[f64], direction: Direction, tol: f64) -> Result<TrimResult> {
    require_len(column, 3)?;
    Ok(trim(column, direction, |v| mms_converged(v, tol)))
}

/// Variance-symmetry trimming.
pub fn filter_vs(column: &[f64], direction: Direction, tol: f64) -> Result<TrimResult> {
    require_len(column, 3)?;
    Ok(trim(column, direction, |v| vs_converged(v, tol)))
}
