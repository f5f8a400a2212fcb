//! Small statistics toolbox used by estimators and the validation battery.

use std::collections::BTreeMap;

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::NAN);
    }
    (mean, (sample_variance(xs) / n as f64).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Lag-1 sample autocorrelation.
pub fn lag1_autocorrelation(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 3 {
        return f64::NAN;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    if var == 0.0 {
        return 0.0;
    }
    let cov: f64 = xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    cov / var
}

/// Survival function of the Kolmogorov distribution,
/// `Q(λ) = 2 Σ_{k≥1} (-1)^{k-1} exp(-2 k² λ²)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn ks_pvalue(d: f64, effective_n: f64) -> f64 {
    let sq = effective_n.sqrt();
    kolmogorov_sf((sq + 0.12 + 0.11 / sq) * d)
}

/// One-sample Kolmogorov–Smirnov test; returns `(D, p)`.
pub fn ks_one_sample(data: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut xs = data.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(((i + 1) as f64 / n - f).abs()).max((f - i as f64 / n).abs());
    }
    (d, ks_pvalue(d, n))
}

/// KS test against the standard normal.
pub fn ks_standard_normal(data: &[f64]) -> (f64, f64) {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    ks_one_sample(data, |x| normal.cdf(x))
}

/// Two-sample Kolmogorov–Smirnov test; returns `(D, p)`. Ties are handled by
/// stepping through distinct values, which makes the asymptotic p-value
/// conservative for discrete data.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < n && j < m {
        let v = xs[i].min(ys[j]);
        while i < n && xs[i] <= v {
            i += 1;
        }
        while j < m && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    (d, ks_pvalue(d, ne))
}

/// Pearson chi-square goodness of fit; returns `(statistic, p)`.
pub fn chi_square_gof(counts: &[f64], probs: &[f64]) -> (f64, f64) {
    let total: f64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut dof = 0usize;
    for (c, p) in counts.iter().zip(probs) {
        if *p > 0.0 {
            let e = total * p;
            stat += (c - e).powi(2) / e;
            dof += 1;
        }
    }
    let dof = dof.saturating_sub(1).max(1);
    let p = 1.0 - ChiSquared::new(dof as f64).expect("positive dof").cdf(stat);
    (stat, p)
}

/// Ordinary least squares `y = a + b x`; returns `(slope, slope_stderr)`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    if x.len() < 3 {
        return (slope, f64::NAN);
    }
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    (slope, (rss / (n - 2.0) / sxx).sqrt())
}

/// Bartlett-tapered long-run variance of `z` around a fixed `center`.
///
/// Returns the estimate together with the partial sums
/// `γ(0) + 2 Σ_{h ≤ k} w_h γ(h)` for `k = 0..=lag_cap`.
pub fn bartlett_long_run_variance(z: &[f64], center: f64, lag_cap: usize) -> (f64, Vec<f64>) {
    let n = z.len();
    let c: Vec<f64> = z.iter().map(|x| x - center).collect();
    let gamma = |h: usize| -> f64 { c.iter().zip(&c[h..]).map(|(a, b)| a * b).sum::<f64>() / n as f64 };
    let mut acc = gamma(0);
    let mut profile = Vec::with_capacity(lag_cap + 1);
    profile.push(acc);
    for h in 1..=lag_cap.min(n.saturating_sub(1)) {
        let w = 1.0 - h as f64 / (lag_cap as f64 + 1.0);
        acc += 2.0 * w * gamma(h);
        profile.push(acc);
    }
    (acc, profile)
}

/// Total-variation distance between two count tables.
pub fn total_variation<K: Ord + Clone>(a: &BTreeMap<K, u64>, b: &BTreeMap<K, u64>) -> f64 {
    let ta: u64 = a.values().sum();
    let tb: u64 = b.values().sum();
    if ta == 0 || tb == 0 {
        return 1.0;
    }
    let mut keys: Vec<&K> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys
        .into_iter()
        .map(|k| {
            let pa = *a.get(k).unwrap_or(&0) as f64 / ta as f64;
            let pb = *b.get(k).unwrap_or(&0) as f64 / tb as f64;
            (pa - pb).abs()
        })
        .sum::<f64>()
}

/// `log(mean(exp(logs)))`, stable for widely spread logs; `-inf` entries are
/// exact zeros.
pub fn log_mean_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = logs.iter().map(|l| (l - m).exp()).sum();
    m + (s / logs.len() as f64).ln()
}
