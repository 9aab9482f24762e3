//! Small statistics helpers for the studies and benchmarks.

use crate::error::{invalid, Result};

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(invalid("slope fit needs at least two paired points"));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(invalid("log-log fit needs positive finite values"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    Ok(linear_slope(&lx, &ly))
}

fn linear_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Average ranks (1-based); ties share the mean of their positions.
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
        for k in i..=j {
            out[idx[k]] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `0` when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// One-sided sign test: `P(X >= successes)` for `X ~ Binomial(trials, 1/2)`.
pub fn sign_test_p(successes: usize, trials: usize) -> f64 {
    assert!(successes <= trials);
    // exact tail via log-space binomial coefficients
    let ln_half_n = trials as f64 * 0.5f64.ln();
    let mut p = 0.0;
    for k in successes..=trials {
        p += (ln_choose(trials, k) + ln_half_n).exp();
    }
    p.min(1.0)
}

fn ln_choose(n: usize, k: usize) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

/// Outcome of testing that a set of per-case rank correlations lean one way.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SignTest {
    /// Cases whose correlation has the expected sign.
    pub agree: usize,
    /// Cases whose correlation has the opposite sign.
    pub disagree: usize,
    /// Cases with zero correlation (dropped).
    pub ties: usize,
    pub p_value: f64,
}

/// Sign test over per-case correlations; `expect_positive` selects the
/// direction counted as agreement.
pub fn correlation_sign_test(rhos: &[f64], expect_positive: bool) -> SignTest {
    let (mut agree, mut disagree, mut ties) = (0, 0, 0);
    for &r in rhos {
        if r == 0.0 || r.is_nan() {
            ties += 1;
        } else if (r > 0.0) == expect_positive {
            agree += 1;
        } else {
            disagree += 1;
        }
    }
    let p_value = if agree + disagree == 0 {
        1.0
    } else {
        sign_test_p(agree, agree + disagree)
    };
    SignTest {
        agree,
        disagree,
        ties,
        p_value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs = [0.1, 0.05, 0.025, 0.0125];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 7.0 * x.powi(3)).collect();
        assert!((fit_loglog_slope(&xs, &ys).unwrap() - 3.0).abs() < 1e-12);
        assert!(fit_loglog_slope(&xs, &[1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn spearman_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&x, &[2.0, 4.0, 8.0, 16.0, 32.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&x, &[1.0; 5]), 0.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_p(0, 10) - 1.0).abs() < 1e-12);
        assert!((sign_test_p(10, 10) - 1.0 / 1024.0).abs() < 1e-15);
        // P(X >= 9) for n = 10: 11 / 1024
        assert!((sign_test_p(9, 10) - 11.0 / 1024.0).abs() < 1e-15);
        let t = correlation_sign_test(&[0.5, -0.2, 0.0, 0.9], true);
        assert_eq!((t.agree, t.disagree, t.ties), (2, 1, 1));
    }
}
