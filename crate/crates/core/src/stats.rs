//! Estimators and hypothesis tests shared by the Monte Carlo modules.
//!
//! All tests return p-values; the significance levels themselves live in
//! [`Significance`] so that every comparison in the crate is made against the
//! same pre-registered thresholds.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

/// Pre-registered significance levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Significance {
    /// Level for two-sample Kolmogorov–Smirnov tests.
    pub ks: f64,
    /// Level for one-sided trend tests.
    pub trend: f64,
    /// Number of standard errors allowed in mean comparisons.
    pub mean_sigmas: f64,
}

impl Default for Significance {
    fn default() -> Self {
        Significance {
            ks: 0.01,
            trend: 0.05,
            mean_sigmas: 3.0,
        }
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn from_slice(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return MeanSe {
                mean: f64::NAN,
                se: f64::NAN,
                n,
            };
        }
        let mean = neumaier_sum(xs.iter().copied()) / n as f64;
        if n == 1 {
            return MeanSe { mean, se: 0.0, n };
        }
        let ss = neumaier_sum(xs.iter().map(|x| (x - mean) * (x - mean)));
        let var = ss / (n as f64 - 1.0);
        MeanSe {
            mean,
            se: (var / n as f64).sqrt(),
            n,
        }
    }

    /// `|a - b| <= k * sqrt(se_a^2 + se_b^2)`.
    pub fn agrees_with(&self, other: &MeanSe, k: f64) -> bool {
        (self.mean - other.mean).abs() <= k * self.se.hypot(other.se)
    }

    pub fn z_against(&self, value: f64) -> f64 {
        (self.mean - value) / self.se
    }
}

/// Compensated (Neumaier) summation.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// `log((1/n) Σ exp(l_i))` with max-shift and compensated summation.
pub fn log_mean_exp(logs: &[f64]) -> f64 {
    if logs.is_empty() {
        return f64::NAN;
    }
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s = neumaier_sum(logs.iter().map(|l| (l - m).exp()));
    m + (s / logs.len() as f64).ln()
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = MeanSe::from_slice(xs);
    m.se * m.se * xs.len() as f64
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Upper tail `P(Z > z)` of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    std_normal().sf(z)
}

pub fn normal_cdf(z: f64) -> f64 {
    std_normal().cdf(z)
}

pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// One-sided p-value for `diff > 0` given its standard error. Degenerate
/// zero-error cases resolve to 0 (strictly positive difference) or 1.
pub fn one_sided_p(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        normal_sf(diff / se)
    } else if diff > 0.0 {
        0.0
    } else {
        1.0
    }
}

/// Two-sided p-value for `diff != 0`.
pub fn two_sided_p(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        (2.0 * normal_sf(diff.abs() / se)).min(1.0)
    } else if diff != 0.0 {
        0.0
    } else {
        1.0
    }
}

/// Result of a two-sample Kolmogorov–Smirnov test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample KS test with the asymptotic Kolmogorov distribution
/// (Stephens' small-sample correction).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    assert!(!a.is_empty() && !b.is_empty());
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let sq = ne.sqrt();
    let lambda = (sq + 0.12 + 0.11 / sq) * d;
    KsResult {
        statistic: d,
        p_value: kolmogorov_sf(lambda),
    }
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut s = 0.0;
    let mut sign = 1.0;
    for k in 1..200 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        s += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sided Mann–Whitney test that `b` is stochastically larger than `a`
/// (normal approximation with tie correction). Returns the p-value.
pub fn mann_whitney_greater(a: &[f64], b: &[f64]) -> f64 {
    let n1 = a.len() as f64;
    let n2 = b.len() as f64;
    let mut all: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, false))
        .chain(b.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut rank_sum_b = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        for item in &all[i..=j] {
            if item.1 {
                rank_sum_b += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_b - n2 * (n2 + 1.0) / 2.0;
    let mu = n1 * n2 / 2.0;
    let n = n1 + n2;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    // continuity correction
    normal_sf((u - mu - 0.5) / var.sqrt())
}

/// One-sided exact sign test: p-value of at least `successes` out of `n`
/// under `Binomial(n, 1/2)`.
pub fn sign_test_greater(successes: u64, n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    if successes == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    b.sf(successes - 1)
}

/// Empirical quantile (type-7 linear interpolation) of a sorted sample.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

/// Distribution-free confidence bounds for the `p`-quantile from order
/// statistics: returns `(lower, upper)` each holding with probability at
/// least `1 - alpha`.
pub fn quantile_bounds(xs: &[f64], p: f64, alpha: f64) -> (f64, f64) {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as u64;
    let b = Binomial::new(p, n).expect("valid binomial");
    // lower: largest l with P(Bin <= l-1) <= alpha  => X_(l) <= q w.p. >= 1-alpha
    let mut lower_idx = 0u64;
    for l in 1..=n {
        if b.cdf(l - 1) <= alpha {
            lower_idx = l;
        } else {
            break;
        }
    }
    // upper: smallest u with P(Bin >= u) <= alpha
    let mut upper_idx = n;
    for u in (1..=n).rev() {
        if b.sf(u - 1) <= alpha {
            upper_idx = u;
        } else {
            break;
        }
    }
    let lower = if lower_idx == 0 {
        f64::NEG_INFINITY
    } else {
        v[(lower_idx - 1) as usize]
    };
    let upper = if upper_idx >= n && b.sf(n - 1) > alpha {
        f64::INFINITY
    } else {
        v[(upper_idx - 1) as usize]
    };
    (lower, upper)
}

/// Ordinary least squares with heteroscedasticity-robust (HC0) errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub intercept_se: f64,
    pub slope_se: f64,
    pub r2: f64,
}

pub fn ols_robust(x: &[f64], y: &[f64]) -> LinearFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    // sandwich: (X'X)^{-1} X' diag(e^2) X (X'X)^{-1}
    let (mut s00, mut s01, mut s11) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let e = b - intercept - slope * a;
        let e2 = e * e;
        s00 += e2;
        s01 += e2 * a;
        s11 += e2 * a * a;
    }
    let sx: f64 = x.iter().sum();
    let sx2: f64 = x.iter().map(|v| v * v).sum();
    let det = n * sx2 - sx * sx;
    // inverse of [[n, sx],[sx, sx2]]
    let (i00, i01, i11) = (sx2 / det, -sx / det, n / det);
    let m00 = i00 * s00 + i01 * s01;
    let m01 = i00 * s01 + i01 * s11;
    let m10 = i01 * s00 + i11 * s01;
    let m11 = i01 * s01 + i11 * s11;
    let v00 = m00 * i00 + m01 * i01;
    let v11 = m10 * i01 + m11 * i11;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    LinearFit {
        intercept,
        slope,
        intercept_se: v00.max(0.0).sqrt(),
        slope_se: v11.max(0.0).sqrt(),
        r2,
    }
}

/// Weighted least squares fit of `y = a + b x` with per-point variances.
pub fn wls(x: &[f64], y: &[f64], var: &[f64]) -> LinearFit {
    let w: Vec<f64> = var.iter().map(|v| 1.0 / v.max(1e-300)).collect();
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(&w).map(|(a, w)| a * w).sum::<f64>() / sw;
    let my = y.iter().zip(&w).map(|(a, w)| a * w).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxx += w[i] * (x[i] - mx) * (x[i] - mx);
        sxy += w[i] * (x[i] - mx) * (y[i] - my);
        syy += w[i] * (y[i] - my) * (y[i] - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    LinearFit {
        intercept,
        slope,
        intercept_se: (1.0 / sw + mx * mx / sxx).sqrt(),
        slope_se: (1.0 / sxx).sqrt(),
        r2,
    }
}

/// Exponential-rate fit of a survival-type curve `S(t) ≈ C e^{-rate t}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub rate: f64,
    pub rate_se: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Indices `[first, last]` of the grid points used.
    pub window: (usize, usize),
    /// False when fewer than three usable points remained.
    pub determined: bool,
}

/// Weighted log-linear fit of `log S` on `t` over points whose survivor count
/// is at least `min_count`; the earliest points are dropped until
/// `R^2 >= r2_min` or only two remain.
pub fn fit_log_survival(
    t: &[f64],
    survival: &[f64],
    reps: usize,
    min_count: usize,
    skip_below: f64,
    r2_min: f64,
) -> RateFit {
    let usable: Vec<usize> = (0..t.len())
        .filter(|&i| {
            t[i] >= skip_below && survival[i] * reps as f64 >= min_count as f64 && survival[i] < 1.0
        })
        .collect();
    let undetermined = |w| RateFit {
        rate: f64::NAN,
        rate_se: f64::NAN,
        intercept: f64::NAN,
        r2: f64::NAN,
        window: w,
        determined: false,
    };
    if usable.len() < 3 {
        return undetermined((0, 0));
    }
    let mut start = 0;
    loop {
        let idx = &usable[start..];
        let xs: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| survival[i].ln()).collect();
        // delta-method variance of log S
        let vs: Vec<f64> = idx
            .iter()
            .map(|&i| (1.0 - survival[i]) / (survival[i] * reps as f64))
            .collect();
        let fit = wls(&xs, &ys, &vs);
        let window = (idx[0], *idx.last().unwrap());
        if fit.r2 >= r2_min {
            return RateFit {
                rate: -fit.slope,
                rate_se: fit.slope_se,
                intercept: fit.intercept,
                r2: fit.r2,
                window,
                determined: true,
            };
        }
        if idx.len() <= 3 {
            return RateFit {
                rate: -fit.slope,
                rate_se: fit.slope_se,
                intercept: fit.intercept,
                r2: fit.r2,
                window,
                determined: false,
            };
        }
        start += 1;
    }
}
