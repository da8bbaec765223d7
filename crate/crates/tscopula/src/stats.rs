//! Small statistical helpers shared by tests, diagnostics, and reports.

/// Kolmogorov-Smirnov statistic of a sample against the uniform
/// distribution on (0,1): sup |F_emp(u) - u|.
pub fn ks_uniform(samples: &[f64]) -> f64 {
    assert!(!samples.is_empty(), "ks_uniform on empty sample");
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in ks sample"));
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &u) in sorted.iter().enumerate() {
        let hi = (i as f64 + 1.0) / n - u;
        let lo = u - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    d
}

/// KS statistic of a sample against an arbitrary CDF.
pub fn ks_cdf(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let transformed: Vec<f64> = samples.iter().map(|&x| cdf(x)).collect();
    ks_uniform(&transformed)
}

/// Empirical quantile by the inverse-CDF convention: smallest sample value
/// `x` with `F_emp(x) >= q`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Pearson correlation of two equal-length slices.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt()).max(1e-300)
}

/// Kendall's tau rank correlation (O(n^2); intended for test-scale inputs).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let s = (a[i] - a[j]) * (b[i] - b[j]);
            if s > 0.0 {
                concordant += 1;
            } else if s < 0.0 {
                discordant += 1;
            }
        }
    }
    (concordant - discordant) as f64 / (n as f64 * (n as f64 - 1.0) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_of_perfect_grid_is_small() {
        let n = 1000;
        let grid: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        assert!(ks_uniform(&grid) < 1.0 / n as f64 + 1e-12);
    }

    #[test]
    fn ks_of_degenerate_sample_is_large() {
        let s = vec![0.5; 100];
        assert!(ks_uniform(&s) > 0.49);
    }

    #[test]
    fn quantile_conventions() {
        let sorted: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert_eq!(quantile(&sorted, 0.1), 1.0);
        assert_eq!(quantile(&sorted, 0.5), 5.0);
        assert_eq!(quantile(&sorted, 1.0), 10.0);
    }

    #[test]
    fn kendall_tau_signs() {
        let a: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 1.0).collect();
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((kendall_tau(&a, &b) - 1.0).abs() < 1e-12);
        assert!((kendall_tau(&a, &c) + 1.0).abs() < 1e-12);
    }
}
