//! Dirichlet-eigenvalue references, conditional proximity rates and the
//! tube calibration behind the overlap lower bound.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::mollifier::CovarianceKernel;
use crate::paths::{overlap, proximity_time, sample_path, BrownianPath};
use crate::rng::SeedStream;
use crate::special::bessel_j_first_zero;

use super::Kappa2Estimate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaReferences {
    pub d: usize,
    pub delta: f64,
    /// Principal Dirichlet eigenvalue of `-½Δ` on the ball of radius `δ/2`.
    pub lambda1: f64,
    /// `2 (κ₂/2 + λ₁)` when `κ₂` was supplied.
    pub rate_bound: Option<f64>,
}

/// `λ₁ = j²_{(d-2)/2,1} / (2 (δ/2)²)` and, given `κ₂`, the proximity-rate
/// bound `κ <= 2 (κ₂/2 + λ₁)`.
pub fn kappa_references(delta: f64, d: usize, kappa2: Option<f64>) -> Result<KappaReferences> {
    if d == 0 {
        return arg("dimension must be at least 1");
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return arg(format!("tube width must be positive and finite, got {delta}"));
    }
    let j = bessel_j_first_zero((d as f64 - 2.0) / 2.0);
    let r = delta / 2.0;
    let lambda1 = j * j / (2.0 * r * r);
    Ok(KappaReferences {
        d,
        delta,
        lambda1,
        rate_bound: kappa2.map(|k| 2.0 * (0.5 * k + lambda1)),
    })
}

/// Partner tracks a fixed spine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spine {
    /// Independent Brownian spines.
    Brownian,
    /// `W ≡ 0`: the event reduces to the partner staying in the `δ`-ball.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalRate {
    pub delta: f64,
    pub dt: f64,
    pub t: Vec<f64>,
    /// `[spine][t]` fraction of partners with `τ_δ >= t`.
    pub survival: Vec<Vec<f64>>,
    pub partners: usize,
    /// Common decay rate `κ̂`.
    pub kappa: f64,
    pub kappa_se: f64,
    /// Spine-specific intercepts, estimates of `log χ(W)`.
    pub log_chi: Vec<f64>,
    pub r2: f64,
    /// Indices `[first, last]` of the grid used.
    pub window: (usize, usize),
    /// `false` when fewer than three usable times remained.
    pub determined: bool,
    /// The window was cut short because some spine ran out of partners.
    pub truncated: bool,
    /// Spread of per-spine slopes (a large value flags spine dependence).
    pub spine_slope_sd: f64,
}

impl ConditionalRate {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(out);
        out.write_record(["spine", "t", "survival", "fitted"])?;
        for (s, row) in self.survival.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let fitted = (self.log_chi[s] - self.kappa * self.t[j]).exp();
                out.write_record([s.to_string(), self.t[j].to_string(), v.to_string(), fitted.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

const MIN_SURVIVORS: f64 = 20.0;

/// For each spine, partner Monte Carlo of `P(τ_δ >= t | W)`, then a common
/// slope fit of `log S_W(t) = log χ(W) - κ t` over the spines. The earliest
/// times are dropped until `R² >= 0.98` or three remain.
pub fn conditional_proximity_rate(
    d: usize,
    delta: f64,
    t_grid: &[f64],
    spine: Spine,
    spines: usize,
    partners: usize,
    dt: f64,
    stream: SeedStream,
) -> Result<ConditionalRate> {
    if t_grid.len() < 3 || t_grid.windows(2).any(|w| w[1] <= w[0]) || t_grid[0] < 0.0 {
        return arg("need an increasing nonnegative grid of at least three times");
    }
    if spines == 0 || partners < 10 {
        return arg("need at least one spine and ten partners");
    }
    if !(delta > 0.0) {
        return arg("tube width must be positive");
    }
    let t_max = t_grid.last().unwrap();
    let horizon = (t_max / dt).ceil().max(1.0) * dt;
    let origin = vec![0.0; d];
    let survival: Vec<Vec<f64>> = (0..spines)
        .into_par_iter()
        .map(|s| {
            let sw = stream.derive("spine", s as u64);
            let w = match spine {
                Spine::Brownian => sample_path(d, &origin, horizon, dt, sw)?,
                Spine::Frozen => BrownianPath::constant(&origin, horizon, dt)?,
            };
            let mut times = Vec::with_capacity(partners);
            for j in 0..partners {
                let p = sample_path(d, &origin, horizon, dt, sw.derive("partner", j as u64))?;
                times.push(proximity_time(&w, &p, delta)?.value.unwrap_or(f64::INFINITY));
            }
            Ok(t_grid
                .iter()
                // τ is a grid time, so τ >= t is τ > t - dt/2
                .map(|&t| times.iter().filter(|&&x| x > t - 0.5 * dt).count() as f64 / partners as f64)
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(fit_common_slope(delta, dt, t_grid, survival, partners))
}

fn fit_common_slope(delta: f64, dt: f64, t: &[f64], survival: Vec<Vec<f64>>, partners: usize) -> ConditionalRate {
    let n = partners as f64;
    let spines = survival.len();
    // last time at which every spine keeps enough survivors
    let mut last = t.len();
    for (j, _) in t.iter().enumerate() {
        if survival.iter().any(|s| s[j] * n < MIN_SURVIVORS) {
            last = j;
            break;
        }
    }
    let truncated = last < t.len();
    // first time at which every spine has seen at least one exit
    let first_usable = (0..last).find(|&j| survival.iter().all(|s| s[j] < 1.0)).unwrap_or(last);
    let mut out = ConditionalRate {
        delta,
        dt,
        t: t.to_vec(),
        survival,
        partners,
        kappa: f64::NAN,
        kappa_se: f64::NAN,
        log_chi: vec![f64::NAN; spines],
        r2: f64::NAN,
        window: (first_usable, last.saturating_sub(1)),
        determined: false,
        truncated,
        spine_slope_sd: f64::NAN,
    };
    if last < first_usable + 3 {
        return out;
    }
    let mut start = first_usable;
    loop {
        let idx: Vec<usize> = (start..last).collect();
        let fit = common_slope(t, &out.survival, &idx, n);
        out.kappa = -fit.0;
        out.kappa_se = fit.1;
        out.log_chi = fit.2;
        out.r2 = fit.3;
        out.spine_slope_sd = fit.4;
        out.window = (start, last - 1);
        if fit.3 >= 0.98 {
            out.determined = true;
            return out;
        }
        if idx.len() <= 3 {
            return out;
        }
        start += 1;
    }
}

/// Weighted within-spine regression: (slope, se, intercepts, R², sd of
/// per-spine slopes).
fn common_slope(t: &[f64], surv: &[Vec<f64>], idx: &[usize], n: f64) -> (f64, f64, Vec<f64>, f64, f64) {
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut means = Vec::with_capacity(surv.len());
    let mut per_spine = Vec::with_capacity(surv.len());
    for s in surv {
        let w: Vec<f64> = idx.iter().map(|&j| n * s[j] / (1.0 - s[j]).max(1.0 / n)).collect();
        let sw: f64 = w.iter().sum();
        let tm = idx.iter().zip(&w).map(|(&j, w)| w * t[j]).sum::<f64>() / sw;
        let ym = idx.iter().zip(&w).map(|(&j, w)| w * s[j].ln()).sum::<f64>() / sw;
        let mut a = 0.0;
        let mut b = 0.0;
        for (&j, w) in idx.iter().zip(&w) {
            a += w * (t[j] - tm) * (t[j] - tm);
            b += w * (t[j] - tm) * (s[j].ln() - ym);
        }
        sxx += a;
        sxy += b;
        per_spine.push(b / a);
        means.push((tm, ym, w));
    }
    let slope = sxy / sxx;
    let mut ssr = 0.0;
    let mut sst = 0.0;
    let mut icpt = Vec::with_capacity(surv.len());
    for (s, (tm, ym, w)) in surv.iter().zip(&means) {
        for (&j, w) in idx.iter().zip(w) {
            let y = s[j].ln() - ym;
            let e = y - slope * (t[j] - tm);
            ssr += w * e * e;
            sst += w * y * y;
        }
        icpt.push(ym - slope * tm);
    }
    let r2 = if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 };
    let sd = if per_spine.len() > 1 {
        crate::stats::variance(&per_spine).sqrt()
    } else {
        0.0
    };
    (slope, 1.0 / sxx.sqrt(), icpt, r2, sd)
}

/// Every ingredient of the tube-rate comparison in one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeRateEstimate {
    pub delta: f64,
    pub kappa: f64,
    pub kappa_se: f64,
    pub kappa2: f64,
    pub lambda1: f64,
    pub rate_bound: f64,
    pub r2: f64,
    pub window: (usize, usize),
}

impl TubeRateEstimate {
    pub fn assemble(rate: &ConditionalRate, k2: &Kappa2Estimate, d: usize) -> Result<Self> {
        let refs = kappa_references(rate.delta, d, Some(k2.plateau.max(0.0)))?;
        Ok(TubeRateEstimate {
            delta: rate.delta,
            kappa: rate.kappa.max(0.0),
            kappa_se: rate.kappa_se,
            kappa2: k2.plateau.max(0.0),
            lambda1: refs.lambda1,
            rate_bound: refs.rate_bound.unwrap(),
            r2: rate.r2,
            window: rate.window,
        })
    }

    /// `κ̂ <= bound + k·se`.
    pub fn within_bound(&self, k: f64) -> bool {
        self.kappa <= self.rate_bound + k * self.kappa_se
    }
}

/// Largest separation on a grid for which the kernel stays above
/// `(2/3) V(0)` everywhere inside it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaCalibration {
    pub delta: f64,
    /// `inf_{|f| <= δ} V(f) / V(0)`.
    pub ratio: f64,
    pub grid_step: f64,
}

pub const OVERLAP_FRACTION: f64 = 2.0 / 3.0;

pub fn calibrate_delta(k: &CovarianceKernel, grid_step: f64) -> Result<DeltaCalibration> {
    if !(grid_step > 0.0) {
        return arg("grid step must be positive");
    }
    let v0 = k.at_zero();
    let mut inf = v0;
    let mut best = None;
    let mut j = 1usize;
    loop {
        let r = j as f64 * grid_step;
        inf = inf.min(k.value_r(r));
        if inf >= OVERLAP_FRACTION * v0 {
            best = Some((r, inf / v0));
        } else {
            break;
        }
        j += 1;
        if r > k.support_radius() {
            break;
        }
    }
    match best {
        Some((delta, ratio)) => Ok(DeltaCalibration { delta, ratio, grid_step }),
        None => arg(format!("grid step {grid_step} is too coarse to resolve the kernel")),
    }
}

/// Pairs kept within `δ` up to `T` and their overlaps relative to `V(0) T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapBoundCheck {
    pub delta: f64,
    pub horizon: f64,
    pub pairs: usize,
    pub survivors: usize,
    /// Smallest `overlap / (V(0) T)` among survivors.
    pub min_ratio: f64,
}

impl OverlapBoundCheck {
    pub fn holds(&self) -> bool {
        self.survivors == 0 || self.min_ratio >= OVERLAP_FRACTION
    }
}

/// Samples independent pairs from the origin and, for those with
/// `τ_δ > T`, compares the overlap with `(2/3) V(0) T`.
pub fn overlap_bound_check(
    k: &CovarianceKernel,
    delta: f64,
    horizon: f64,
    dt: f64,
    pairs: usize,
    stream: SeedStream,
) -> Result<OverlapBoundCheck> {
    let d = k.d;
    let origin = vec![0.0; d];
    let v0t = k.at_zero() * horizon;
    let ratios: Vec<Option<f64>> = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let a = sample_path(d, &origin, horizon, dt, stream.derive("pair-a", i as u64))?;
            let b = sample_path(d, &origin, horizon, dt, stream.derive("pair-b", i as u64))?;
            if proximity_time(&a, &b, delta)?.exceeded_horizon() {
                Ok(Some(overlap(&a, &b, k)? / v0t))
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let kept: Vec<f64> = ratios.into_iter().flatten().collect();
    Ok(OverlapBoundCheck {
        delta,
        horizon,
        pairs,
        survivors: kept.len(),
        min_ratio: kept.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mollifier::{Mollifier, MollifierKind};
    use std::f64::consts::PI;

    #[test]
    fn eigenvalue_references() {
        let r3 = kappa_references(1.0, 3, None).unwrap();
        assert!((r3.lambda1 - 2.0 * PI * PI).abs() < 1e-9);
        let r1 = kappa_references(1.0, 1, None).unwrap();
        assert!((r1.lambda1 - PI * PI / 2.0).abs() < 1e-9);
        let r3b = kappa_references(2.0, 3, Some(1.0)).unwrap();
        assert!((r3b.lambda1 - r3.lambda1 / 4.0).abs() < 1e-12);
        assert_eq!(r3b.rate_bound, Some(2.0 * (0.5 + r3b.lambda1)));
        assert!(kappa_references(0.0, 3, None).is_err());
    }

    #[test]
    fn frozen_spine_matches_exit_eigenvalue() {
        // W ≡ 0: survival is the partner staying inside the ball of radius δ
        let delta = 1.0;
        let exact = kappa_references(2.0 * delta, 3, None).unwrap().lambda1;
        let t: Vec<f64> = (3..=10).map(|i| 0.1 * i as f64).collect();
        let mut rates = Vec::new();
        for dt in [0.01, 0.005, 0.0025] {
            let r = conditional_proximity_rate(3, delta, &t, Spine::Frozen, 1, 20000, dt, SeedStream::root(3)).unwrap();
            assert!(r.determined, "{r:?}");
            rates.push(r.kappa);
        }
        // discrete monitoring misses exits, so refinement raises the rate
        assert!(rates[0] < rates[2], "{rates:?}");
        assert!((rates[2] - exact).abs() < 0.15 * exact, "{rates:?} vs {exact}");
    }

    #[test]
    fn conditional_rate_decreases_with_delta() {
        let grid = |delta: f64| -> Vec<f64> { (1..=14).map(|i| delta * delta * 0.03 * i as f64).collect() };
        let a = conditional_proximity_rate(3, 1.0, &grid(1.0), Spine::Brownian, 4, 8000, 0.005, SeedStream::root(8)).unwrap();
        let b = conditional_proximity_rate(3, 2.0, &grid(2.0), Spine::Brownian, 4, 8000, 0.005, SeedStream::root(8)).unwrap();
        // spine-driven curvature usually keeps R² below the cutoff at these
        // horizons; the fit is still reported with its window
        assert!(a.kappa.is_finite() && b.kappa.is_finite());
        assert!(a.r2 > 0.8 && b.r2 > 0.8, "{} {}", a.r2, b.r2);
        assert!(b.kappa < a.kappa, "{} vs {}", b.kappa, a.kappa);
        let bound = kappa_references(1.0, 3, Some(0.0)).unwrap().rate_bound.unwrap();
        assert!(a.kappa <= bound + 3.0 * a.kappa_se);
    }

    #[test]
    fn common_slope_recovers_synthetic_rate() {
        let t: Vec<f64> = (0..8).map(|i| 0.5 * i as f64).collect();
        let surv: Vec<Vec<f64>> = [0.9, 0.6, 0.75]
            .iter()
            .map(|c: &f64| t.iter().map(|x| c * (-1.3 * x).exp()).collect())
            .collect();
        let r = fit_common_slope(1.0, 0.1, &t, surv, 1_000_000);
        assert!((r.kappa - 1.3).abs() < 1e-10);
        assert!((r.log_chi[1] - 0.6f64.ln()).abs() < 1e-10);
        assert!(r.determined);
    }

    #[test]
    fn extinction_truncates_window() {
        let t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let surv = vec![vec![0.9, 0.5, 0.25, 0.12, 0.06, 0.0]];
        let r = fit_common_slope(1.0, 0.1, &t, surv, 1000);
        assert!(r.truncated);
        assert!(r.window.1 < 5);
    }

    #[test]
    fn calibration_and_overlap_bound() {
        let k = Mollifier::new(MollifierKind::CompactBump, 1.0, 3).unwrap().kernel();
        let c = calibrate_delta(&k, 1e-3).unwrap();
        assert!(c.ratio >= OVERLAP_FRACTION);
        assert!(k.value_r(c.delta + c.grid_step) < OVERLAP_FRACTION * k.at_zero());
        let chk = overlap_bound_check(&k, c.delta, 0.1, 0.01, 4000, SeedStream::root(4)).unwrap();
        assert!(chk.survivors > 20, "{chk:?}");
        assert!(chk.holds(), "{chk:?}");
    }
}
