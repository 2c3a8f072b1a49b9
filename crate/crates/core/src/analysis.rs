//! Trend statistics over sweep results.

use statrs::distribution::{ContinuousCDF, StudentsT};

/// 1-based ranks, ties sharing their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    pub n: usize,
    /// One-sided p-value for `rho < 0` from the t approximation.
    pub p_negative: f64,
}

pub fn spearman(x: &[f64], y: &[f64]) -> Spearman {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    let rho = pearson(&ranks(x), &ranks(y));
    let p_negative = if n < 3 || !rho.is_finite() {
        f64::NAN
    } else if rho <= -1.0 {
        0.0
    } else if rho >= 1.0 {
        1.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        StudentsT::new(0.0, 1.0, df).map_or(f64::NAN, |d| d.cdf(t))
    };
    Spearman { rho, n, p_negative }
}

/// Least-squares `(slope, intercept)` of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn perfect_monotone_is_minus_one() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [9.0, 7.0, 4.0, 3.0, -1.0];
        let s = spearman(&x, &y);
        assert_eq!(s.rho, -1.0);
        assert_eq!(s.p_negative, 0.0);
    }

    #[test]
    fn t_approximation_matches_hand_value() {
        // rho = 0.5, n = 10: t = 0.5 * sqrt(8 / 0.75) = 1.63299..., P(T_8 <= t) ~ 0.9295
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y = [2.0, 0.0, 1.0, 5.0, 3.0, 9.0, 4.0, 6.0, 8.0, 7.0];
        let s = spearman(&x, &y);
        let rho = 1.0 - 6.0 * [2.0f64, -1.0, -1.0, 2.0, -1.0, 4.0, -2.0, -1.0, 0.0, -2.0].iter().map(|d| d * d).sum::<f64>() / (10.0 * 99.0);
        assert!((s.rho - rho).abs() < 1e-12);
        let t = rho * (8.0 / (1.0 - rho * rho)).sqrt();
        let p = StudentsT::new(0.0, 1.0, 8.0).unwrap().cdf(t);
        assert!((s.p_negative - p).abs() < 1e-12);
        assert!(s.p_negative > 0.5);
    }

    #[test]
    fn fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 0.5 - 0.25 * v).collect();
        let (a, b) = linear_fit(&x, &y);
        assert!((a + 0.25).abs() < 1e-15 && (b - 0.5).abs() < 1e-15);
    }
}
