//! Small descriptive statistics shared by the filters and the evaluation.

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased (n − 1) variance; 0 for fewer than two values.
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

pub fn std_dev(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

pub fn sorted(x: &[f64]) -> Vec<f64> {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Median of an already sorted slice (average of the two middle values).
pub fn median_sorted(s: &[f64]) -> f64 {
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn median(x: &[f64]) -> f64 {
    median_sorted(&sorted(x))
}

/// Lower of the two middle order statistics (the middle one for odd n).
pub fn low_median_sorted(s: &[f64]) -> f64 {
    s[(s.len() - 1) / 2]
}

/// Upper of the two middle order statistics (the middle one for odd n).
pub fn high_median_sorted(s: &[f64]) -> f64 {
    s[s.len() / 2]
}

/// Quantile by linear interpolation between order statistics
/// (h = (n − 1)p, the default convention of R and numpy).
pub fn quantile_sorted(s: &[f64], p: f64) -> f64 {
    let h = (s.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// Unscaled median absolute deviation about the median.
pub fn mad(x: &[f64]) -> f64 {
    let m = median(x);
    median(&x.iter().map(|v| (v - m).abs()).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_moments() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&x), 2.5);
        assert!((variance(&x) - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(median(&x), 2.5);
        assert_eq!(low_median_sorted(&x), 2.0);
        assert_eq!(high_median_sorted(&x), 3.0);
        assert_eq!(variance(&[7.0]), 0.0);
    }

    #[test]
    fn type7_quartiles() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&x, 0.25), 2.0);
        assert_eq!(quantile_sorted(&x, 0.75), 4.0);
        let y = [1.0, 2.0, 3.0, 4.0];
        assert!((quantile_sorted(&y, 0.25) - 1.75).abs() < 1e-15);
        assert!((quantile_sorted(&y, 0.75) - 3.25).abs() < 1e-15);
    }

    #[test]
    fn mad_of_small_set() {
        assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 100.0]), 1.0);
    }
}
