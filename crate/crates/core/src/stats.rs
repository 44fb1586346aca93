//! Summary statistics for replicated experiments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` for a single observation.
    pub sd: Option<f64>,
    /// Standard error of the mean; `None` for a single observation.
    pub se: Option<f64>,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let (sd, se) = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (Some(var.sqrt()), Some((var / n as f64).sqrt()))
    } else {
        (None, None)
    };
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(Summary {
        n,
        mean,
        sd,
        se,
        min,
        max,
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Percentile bootstrap CI for `mean(a²) − mean(b²)` resampling pairs jointly.
///
/// `a` and `b` are paired errors (estimate − truth) from the same replicate.
pub fn paired_mse_diff_ci(
    a: &[f64],
    b: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Option<(f64, f64, f64)> {
    if a.len() != b.len() || a.is_empty() || resamples == 0 {
        return None;
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * x - y * y).collect();
    let point = d.iter().sum::<f64>() / n as f64;
    let mut rng = rng_from_seed(seed);
    let mut boots: Vec<f64> = (0..resamples)
        .map(|_| {
            let mut s = 0.0;
            for _ in 0..n {
                s += d[rng.gen_range(0..n)];
            }
            s / n as f64
        })
        .collect();
    boots.sort_by(|x, y| x.total_cmp(y));
    let alpha = (1.0 - level) / 2.0;
    Some((
        point,
        quantile_sorted(&boots, alpha),
        quantile_sorted(&boots, 1.0 - alpha),
    ))
}

/// Fraction of pairs where `a < b`, ties counting one half.
pub fn paired_win_rate(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let score: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            if x < y {
                1.0
            } else if x == y {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Some(score / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_has_no_standard_error() {
        let s = summarize(&[2.5]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!(s.se.is_none());
        assert!(summarize(&[]).is_none());
    }

    #[test]
    fn summary_of_known_values() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.sd.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn win_rate_against_self_is_half() {
        let a = [0.1, 0.4, 0.2];
        assert_eq!(paired_win_rate(&a, &a), Some(0.5));
        assert_eq!(paired_win_rate(&[0.0, 1.0], &[1.0, 0.5]), Some(0.5));
    }

    #[test]
    fn bootstrap_ci_brackets_point_estimate() {
        let a: Vec<f64> = (0..200).map(|i| ((i * 37 % 17) as f64 - 8.0) * 0.01).collect();
        let b: Vec<f64> = a.iter().map(|v| v * 2.0).collect();
        let (point, lo, hi) = paired_mse_diff_ci(&a, &b, 500, 0.95, 1).unwrap();
        assert!(point < 0.0);
        assert!(lo <= point && point <= hi);
        assert!(hi < 0.0);
    }
}
