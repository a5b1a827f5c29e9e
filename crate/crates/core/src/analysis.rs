//! Second-moment identities, Green-potential (Portenko) bounds, the reference
//! inverse temperature, smoothed-field variance, the non-Cauchy gap and the
//! uniform-integrability diagnostic.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::field::{build_noise_field, FieldBox};
use crate::mollifier::{CovarianceKernel, Mollifier, MollifierKind};
use crate::paths::{sample_path, steps_for, BrownianPath};
use crate::polymer::PolymerParams;
use crate::quad::GaussLegendre;
use crate::rng::SeedStream;
use crate::special::{green_constant, sphere_area};
use crate::stats::{
    mann_whitney_greater, one_sided_p, quantile_bounds, sign_test_greater, two_sided_p, MeanSe,
    Significance,
};

/// Enough identifying data to tell which kernel a bound refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRef {
    pub kind: MollifierKind,
    pub d: usize,
    pub scales: (f64, f64),
    pub mass: f64,
}

impl From<&CovarianceKernel> for KernelRef {
    fn from(k: &CovarianceKernel) -> Self {
        KernelRef {
            kind: k.kind,
            d: k.d,
            scales: k.scales,
            mass: k.mass,
        }
    }
}

/// Khas'minskii-type bound: `η = β² sup_z G(z)` and, when `η < 1`,
/// `sup_x E_x exp(β² ∫_0^∞ V(W_s) ds) <= 1/(1-η)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentBound {
    pub eta: f64,
    /// `None` marks an infinite bound (`η >= 1`).
    pub bound: Option<f64>,
    pub beta: f64,
    pub kernel: KernelRef,
    /// Whether `G(0)` dominated every point of the radial check grid.
    pub sup_verified: bool,
}

impl MomentBound {
    pub fn is_finite(&self) -> bool {
        self.bound.is_some()
    }
}

/// `f_α(x) = min(x/α, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcaveTestFunction {
    alpha: f64,
}

impl ConcaveTestFunction {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return arg(format!("cutoff must be positive and finite, got {alpha}"));
        }
        Ok(ConcaveTestFunction { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        (x.max(0.0) / self.alpha).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    WeakLike,
    StrongLike,
    Undetermined,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::WeakLike => "weak-like",
            Verdict::StrongLike => "strong-like",
            Verdict::Undetermined => "undetermined",
        })
    }
}

/// One row of diagnostic evidence. `p_value` is for the direction that
/// signals strong disorder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub test: String,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisorderVerdict {
    pub verdict: Verdict,
    pub level: f64,
    pub evidence: Vec<Evidence>,
}

impl DisorderVerdict {
    /// Human-readable block for logs and reports.
    pub fn summary(&self) -> String {
        let mut s = format!("verdict: {} (level {})\n", self.verdict, self.level);
        for e in &self.evidence {
            s.push_str(&format!(
                "  {:<36} statistic {:>10.4}  p {:.4}\n",
                e.test, e.statistic, e.p_value
            ));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// occupation functionals

/// Trapezoidal `∫_0^{n dt} V(a (z + W_s)) ds` for each `n` in `ends`, with
/// `W` a path started at the origin.
pub(crate) fn occupation_along(
    path: &BrownianPath,
    k: &CovarianceKernel,
    factor: f64,
    offset: &[f64],
    ends: &[usize],
) -> Vec<f64> {
    let d = path.d();
    let reach = k.support_radius() / factor;
    let reach2 = reach * reach;
    let f2 = factor * factor;
    let eval = |s: usize| {
        let p = path.point(s);
        let mut r2 = 0.0;
        for c in 0..d {
            let u = offset[c] + p[c];
            r2 += u * u;
        }
        if r2 >= reach2 {
            0.0
        } else {
            k.value_r2(f2 * r2)
        }
    };
    let mut out = Vec::with_capacity(ends.len());
    let mut acc = 0.0;
    let mut prev = eval(0);
    let mut step = 0;
    for &n in ends {
        while step < n {
            let next = eval(step + 1);
            acc += 0.5 * (prev + next);
            prev = next;
            step += 1;
        }
        out.push(acc * path.dt());
    }
    out
}

fn horizon_ends(horizons: &[f64], dt: f64) -> Result<Vec<usize>> {
    if horizons.is_empty() {
        return arg("at least one horizon is required");
    }
    let ends = horizons
        .iter()
        .map(|&t| steps_for(t, dt))
        .collect::<Result<Vec<_>>>()?;
    if ends.windows(2).any(|w| w[0] > w[1]) {
        return arg("horizons must be nondecreasing");
    }
    Ok(ends)
}

fn origin_path(d: usize, t: f64, dt: f64, stream: SeedStream, rep: usize) -> Result<BrownianPath> {
    sample_path(d, &vec![0.0; d], t, dt, stream.derive("occupation", rep as u64))
}

/// Per-repetition occupation integrals `∫_0^{T_j} V(a (z + W_s)) ds`,
/// indexed `[rep][horizon]`. Repetition `i` uses the same path for every
/// horizon and for every caller passing the same stream, so functionals of
/// these integrals at different `β` share random numbers.
pub fn occupation_integrals(
    k: &CovarianceKernel,
    spatial_factor: f64,
    start: &[f64],
    horizons: &[f64],
    dt: f64,
    reps: usize,
    stream: SeedStream,
) -> Result<Vec<Vec<f64>>> {
    if start.len() != k.d {
        return arg(format!("start has dimension {}, kernel has {}", start.len(), k.d));
    }
    if !(spatial_factor > 0.0) {
        return arg("spatial factor must be positive");
    }
    if reps == 0 {
        return arg("at least one repetition is required");
    }
    let ends = horizon_ends(horizons, dt)?;
    let t_max = *horizons.last().unwrap();
    (0..reps)
        .into_par_iter()
        .map(|i| {
            let w = origin_path(k.d, t_max, dt, stream, i)?;
            Ok(occupation_along(&w, k, spatial_factor, start, &ends))
        })
        .collect()
}

/// `E exp(c · I_j)` per horizon from per-rep integrals.
pub fn exponential_means(integrals: &[Vec<f64>], coef: f64) -> Vec<MeanSe> {
    let h = integrals.first().map_or(0, Vec::len);
    (0..h)
        .map(|j| {
            let v: Vec<f64> = integrals.iter().map(|r| (coef * r[j]).exp()).collect();
            MeanSe::from_slice(&v)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondMoment {
    pub beta: f64,
    pub horizon: f64,
    pub estimate: MeanSe,
}

fn check_polymer_dims(p: &PolymerParams) -> Result<()> {
    if p.d < 3 {
        return arg(format!("dimension must be at least 3, got {}", p.d));
    }
    if !(p.beta >= 0.0) {
        return arg(format!("beta must be nonnegative, got {}", p.beta));
    }
    Ok(())
}

/// Single-path estimate of `E[Z_t²] = E_0 exp(β² ∫_0^t V(√2 W_s) ds)`.
pub fn second_moment_formula(p: &PolymerParams, reps: usize, stream: SeedStream) -> Result<SecondMoment> {
    let est = second_moment_curve(p, &[p.horizon], reps, stream)?;
    Ok(est.into_iter().next().unwrap())
}

/// The second-moment formula at several horizons from coupled paths.
pub fn second_moment_curve(
    p: &PolymerParams,
    horizons: &[f64],
    reps: usize,
    stream: SeedStream,
) -> Result<Vec<SecondMoment>> {
    check_polymer_dims(p)?;
    let k = p.kernel();
    let ints = occupation_integrals(&k, std::f64::consts::SQRT_2, &vec![0.0; p.d], horizons, p.dt, reps, stream)?;
    Ok(exponential_means(&ints, p.beta * p.beta)
        .into_iter()
        .zip(horizons)
        .map(|(estimate, &horizon)| SecondMoment {
            beta: p.beta,
            horizon,
            estimate,
        })
        .collect())
}

/// Large-horizon extrapolation of the second moment. With `g(t)` the
/// per-path functional, the remaining occupation beyond `t` decays like
/// `t^{1-d/2}`, so `g(∞) ≈ g(t) + (g(t) - g(t/2)) / (2^{d/2-1} - 1)`.
pub fn second_moment_limit(p: &PolymerParams, reps: usize, stream: SeedStream) -> Result<MeanSe> {
    check_polymer_dims(p)?;
    let half = p.horizon / 2.0;
    let k = p.kernel();
    let ints = occupation_integrals(&k, std::f64::consts::SQRT_2, &vec![0.0; p.d], &[half, p.horizon], p.dt, reps, stream)?;
    let c = 1.0 / (2f64.powf(p.d as f64 / 2.0 - 1.0) - 1.0);
    let b2 = p.beta * p.beta;
    let v: Vec<f64> = ints
        .iter()
        .map(|r| {
            let g1 = (b2 * r[0]).exp();
            let g2 = (b2 * r[1]).exp();
            g2 + c * (g2 - g1)
        })
        .collect();
    Ok(MeanSe::from_slice(&v))
}

// ---------------------------------------------------------------------------
// Green potential and Portenko bounds

fn require_transient(d: usize) -> Result<()> {
    if d < 3 {
        return arg(format!(
            "the Green potential needs a transient motion (d >= 3), got d = {d}"
        ));
    }
    Ok(())
}

/// `G(z) = E_z ∫_0^∞ V(W_s) ds = C_d ∫ V(y) |y - z|^{2-d} dy`.
pub fn green_potential(k: &CovarianceKernel, z: &[f64]) -> Result<f64> {
    if z.len() != k.d {
        return arg(format!("point has dimension {}, kernel has {}", z.len(), k.d));
    }
    green_potential_radial(k, z.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Green potential at distance `r` from the kernel center.
///
/// By the shell theorem a radial shell of radius `ρ` contributes
/// `max(ρ, r)^{2-d}` times its mass, so the integral splits at `ρ = r` into
/// two smooth one-dimensional pieces.
pub fn green_potential_radial(k: &CovarianceKernel, r: f64) -> Result<f64> {
    let d = k.d;
    require_transient(d)?;
    if !(r >= 0.0 && r.is_finite()) {
        return arg(format!("radius must be finite and nonnegative, got {r}"));
    }
    let g = GaussLegendre::new(16);
    let big = k.support_radius();
    let di = d as i32;
    let inner_end = r.min(big);
    let inner = if inner_end > 0.0 {
        g.integrate(|rho| k.value_r(rho) * rho.powi(di - 1), 0.0, inner_end, 128) * r.powi(2 - di)
    } else {
        0.0
    };
    let outer = if r < big {
        g.integrate(|rho| k.value_r(rho) * rho, r, big, 128)
    } else {
        0.0
    };
    Ok(green_constant(d) * sphere_area(d) * (inner + outer))
}

/// Occupation Monte Carlo for `G(z)`: trapezoidal `∫_0^T V(z + W_s) ds`
/// plus the analytic far-field tail `∫V · (2π)^{-d/2} (2/(d-2)) T^{1-d/2}`.
pub fn occupation_potential_mc(
    k: &CovarianceKernel,
    z: &[f64],
    horizon: f64,
    dt: f64,
    reps: usize,
    stream: SeedStream,
) -> Result<MeanSe> {
    require_transient(k.d)?;
    let ints = occupation_integrals(k, 1.0, z, &[horizon], dt, reps, stream)?;
    let d = k.d as f64;
    let tail = k.integral() * (2.0 * std::f64::consts::PI).powf(-d / 2.0) * (2.0 / (d - 2.0))
        * horizon.powf(1.0 - d / 2.0);
    let v: Vec<f64> = ints.iter().map(|r| r[0] + tail).collect();
    Ok(MeanSe::from_slice(&v))
}

/// `G(0)` together with a check that no point of a radial grid out to three
/// support radii exceeds it.
fn green_sup(k: &CovarianceKernel) -> Result<(f64, bool)> {
    let g0 = green_potential_radial(k, 0.0)?;
    let big = k.support_radius();
    let mut sup = g0;
    for j in 1..=48 {
        let v = green_potential_radial(k, big * j as f64 / 16.0)?;
        sup = sup.max(v);
    }
    let verified = sup <= g0 * (1.0 + 1e-9);
    Ok((sup, verified))
}

pub fn portenko_eta(beta: f64, k: &CovarianceKernel) -> Result<MomentBound> {
    if !(beta >= 0.0) {
        return arg(format!("beta must be nonnegative, got {beta}"));
    }
    let (sup, sup_verified) = green_sup(k)?;
    let eta = beta * beta * sup;
    Ok(MomentBound {
        eta,
        bound: (eta < 1.0).then(|| 1.0 / (1.0 - eta)),
        beta,
        kernel: k.into(),
        sup_verified,
    })
}

/// The `β` with Portenko constant `eta`: `β = sqrt(eta / sup G)`.
pub fn beta_for_eta(eta: f64, k: &CovarianceKernel) -> Result<f64> {
    let (sup, _) = green_sup(k)?;
    Ok((eta / sup).sqrt())
}

/// Largest `β` (to within `tol`, from below) with `(β²/2) sup G < 1`.
///
/// The second moment is `E exp(β² ∫ V(√2 W_s) ds)` and the time change
/// `s = u/2` turns it into `E exp((β²/2) ∫ V(W_u) du)`, so the Portenko
/// condition at half the coupling certifies a bounded second moment.
pub fn beta_star_bound(k: &CovarianceKernel, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return arg(format!("tolerance must be positive, got {tol}"));
    }
    let (sup, _) = green_sup(k)?;
    let ok = |b: f64| 0.5 * b * b * sup < 1.0;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while ok(hi) {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// `β_ref` for polymer parameters (the kernel of `p`, tolerance `1e-10`).
pub fn beta_ref(p: &PolymerParams) -> Result<f64> {
    beta_star_bound(&p.kernel(), 1e-10)
}

/// Monte Carlo of `E_0 exp(β² ∫_0^T V(W_s) ds)`.
pub fn exponential_occupation(
    k: &CovarianceKernel,
    beta: f64,
    horizon: f64,
    dt: f64,
    reps: usize,
    stream: SeedStream,
) -> Result<MeanSe> {
    let ints = occupation_integrals(k, 1.0, &vec![0.0; k.d], &[horizon], dt, reps, stream)?;
    Ok(exponential_means(&ints, beta * beta)[0])
}

// ---------------------------------------------------------------------------
// smoothed field variance

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub sd: f64,
}

/// A finite mixture of isotropic Gaussians with positive weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub components: Vec<GaussianComponent>,
}

impl TestFunction {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return arg("test function needs at least one component");
        }
        let d = components[0].mean.len();
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != d || d == 0 {
                return arg(format!("component {i} has mean of dimension {}, expected {d}", c.mean.len()));
            }
            if !(c.weight > 0.0 && c.sd > 0.0) {
                return arg(format!("component {i} needs positive weight and sd"));
            }
        }
        Ok(TestFunction { components })
    }

    /// The standard normal density in `R^d`.
    pub fn standard(d: usize) -> Self {
        TestFunction {
            components: vec![GaussianComponent {
                weight: 1.0,
                mean: vec![0.0; d],
                sd: 1.0,
            }],
        }
    }

    pub fn d(&self) -> usize {
        self.components[0].mean.len()
    }

    /// `∫ f`.
    pub fn mass(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let d = self.d() as f64;
        self.components
            .iter()
            .map(|c| {
                let r2: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                c.weight * (2.0 * std::f64::consts::PI * c.sd * c.sd).powf(-d / 2.0)
                    * (-0.5 * r2 / (c.sd * c.sd)).exp()
            })
            .sum()
    }

    /// Density in `r` of `∫∫ f(x) f(y) 1{|x - y| ∈ dr}`.
    pub fn pair_density(&self, r: f64) -> f64 {
        let d = self.d();
        let g = GaussLegendre::new(16);
        let mut total = 0.0;
        for a in &self.components {
            for b in &self.components {
                let s2 = a.sd * a.sd + b.sd * b.sd;
                let m: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                let norm = (2.0 * std::f64::consts::PI * s2).powf(-(d as f64) / 2.0);
                let radial = r.powi(d as i32 - 1);
                let ang = if m == 0.0 || r == 0.0 || d == 1 {
                    if d == 1 {
                        // two directions
                        (-(r - m) * (r - m) / (2.0 * s2)).exp() + (-(r + m) * (r + m) / (2.0 * s2)).exp()
                    } else {
                        sphere_area(d) * (-(r * r + m * m) / (2.0 * s2)).exp()
                    }
                } else {
                    let base = (-(r - m) * (r - m) / (2.0 * s2)).exp();
                    let p = r * m / s2;
                    base * sphere_area(d - 1)
                        * g.integrate(
                            |th: f64| (-p * (1.0 - th.cos())).exp() * th.sin().powi(d as i32 - 2),
                            0.0,
                            std::f64::consts::PI,
                            8,
                        )
                };
                total += a.weight * b.weight * norm * radial * ang;
            }
        }
        total
    }

    /// Radius beyond which the pair density is negligible.
    fn pair_reach(&self) -> f64 {
        let mut reach: f64 = 0.0;
        for a in &self.components {
            for b in &self.components {
                let m: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                reach = reach.max(m + 10.0 * (a.sd * a.sd + b.sd * b.sd).sqrt());
            }
        }
        reach
    }

    /// A point from the normalized density `f / ∫f`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut u = rng.random::<f64>() * self.mass();
        let mut pick = &self.components[self.components.len() - 1];
        for c in &self.components {
            if u < c.weight {
                pick = c;
                break;
            }
            u -= c.weight;
        }
        pick.mean
            .iter()
            .map(|m| m + pick.sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedVariance {
    pub beta: f64,
    pub eps: Vec<f64>,
    pub estimates: Vec<MeanSe>,
    /// Paired one-sided p-values that the estimate at `eps[j+1]` is smaller
    /// than at `eps[j]`.
    pub decrease_p: Vec<f64>,
    pub reps: usize,
}

/// `E[û_ε(f)²] = ∫ p(r) (E_{r/ε} exp(½β² ∫_0^{2/ε²} V(W_s) ds) - 1) dr`
/// with `p` the pair density of `f`: Gauss–Legendre in `r`, Monte Carlo in
/// the path with one Brownian path per repetition shared by all nodes and
/// all `ε`.
pub fn smoothed_variance(
    f: &TestFunction,
    p: &PolymerParams,
    eps_grid: &[f64],
    reps: usize,
    stream: SeedStream,
) -> Result<SmoothedVariance> {
    check_polymer_dims(p)?;
    if f.d() != p.d {
        return arg(format!("test function lives in d = {}, polymer in d = {}", f.d(), p.d));
    }
    if eps_grid.is_empty() || eps_grid.iter().any(|e| !(*e > 0.0)) {
        return arg("the eps grid must be nonempty and positive");
    }
    if reps < 2 {
        return arg("at least two repetitions are required");
    }
    let k = p.kernel();
    let (sup, _) = green_sup(&k)?;
    let eta2 = 0.5 * p.beta * p.beta * sup;
    if eta2 >= 1.0 {
        return arg(format!(
            "beta = {} is outside the region where the second moment is controlled: (β²/2) sup G = {eta2:.4} >= 1",
            p.beta
        ));
    }
    let horizons: Vec<f64> = eps_grid.iter().map(|e| 2.0 / (e * e)).collect();
    let ends = eps_grid
        .iter()
        .zip(&horizons)
        .map(|(e, &t)| {
            steps_for(t, p.dt).map_err(|_| {
                crate::error::Error::Argument(format!(
                    "horizon 2/eps² = {t} for eps = {e} is not a multiple of dt = {}",
                    p.dt
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let t_max = horizons.iter().copied().fold(0.0, f64::max);

    let g = GaussLegendre::new(8);
    let reach = f.pair_reach();
    let panels = 24;
    let mut nodes = Vec::new();
    for j in 0..panels {
        let a = reach * j as f64 / panels as f64;
        let b = reach * (j + 1) as f64 / panels as f64;
        let half = 0.5 * (b - a);
        for (x, w) in g.nodes.iter().zip(&g.weights) {
            let r = a + half * (x + 1.0);
            nodes.push((r, half * w * f.pair_density(r)));
        }
    }
    let c = 0.5 * p.beta * p.beta;
    let d = p.d;
    let per_rep: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|i| {
            let w = origin_path(d, t_max, p.dt, stream, i)?;
            let mut start = vec![0.0; d];
            Ok(eps_grid
                .iter()
                .zip(&ends)
                .map(|(e, &n)| {
                    let mut s = 0.0;
                    for &(r, wt) in &nodes {
                        start[0] = r / e;
                        let occ = occupation_along(&w, &k, 1.0, &start, &[n])[0];
                        s += wt * (c * occ).exp_m1();
                    }
                    s
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let estimates: Vec<MeanSe> = (0..eps_grid.len())
        .map(|j| MeanSe::from_slice(&per_rep.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect();
    let decrease_p = (1..eps_grid.len())
        .map(|j| {
            let diff: Vec<f64> = per_rep.iter().map(|r| r[j - 1] - r[j]).collect();
            let m = MeanSe::from_slice(&diff);
            one_sided_p(m.mean, m.se)
        })
        .collect();
    Ok(SmoothedVariance {
        beta: p.beta,
        eps: eps_grid.to_vec(),
        estimates,
        decrease_p,
        reps,
    })
}

/// Independent estimate of `E[û_ε(f)²]` from explicit noise fields: per
/// field, `points` starting points drawn from `f/∫f`, `replicas` paths from
/// each over `[0, 1/ε²]` in rescaled coordinates, and the U-statistic
/// `(∫f)² · mean_{k≠l} (Z_k - 1)(Z_l - 1)` over the per-point averages `Z_k`.
/// Paths from distinct points are independent, so each product is unbiased.
pub fn smoothed_variance_explicit(
    f: &TestFunction,
    p: &PolymerParams,
    eps: f64,
    points: usize,
    replicas: usize,
    reps: usize,
    stream: SeedStream,
) -> Result<MeanSe> {
    check_polymer_dims(p)?;
    if points < 2 || reps < 2 || replicas == 0 {
        return arg("need at least two points, one replica and two repetitions");
    }
    let horizon = 1.0 / (eps * eps);
    steps_for(horizon, p.dt)?;
    let m = p.mollifier();
    let mass = f.mass();
    let vals: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|i| {
            let rep = stream.derive("explicit-rep", i as u64);
            let mut rng = rep.derive("points", 0).rng();
            let mut paths = Vec::with_capacity(points * replicas);
            for k in 0..points {
                let x: Vec<f64> = f.sample(&mut rng).iter().map(|v| v / eps).collect();
                for j in 0..replicas {
                    let s = rep.derive("path", (k * replicas + j) as u64);
                    paths.push(sample_path(p.d, &x, horizon, p.dt, s)?);
                }
            }
            let bounds = FieldBox::covering(&paths, m.support_radius() + p.h)?;
            let field = build_noise_field(bounds, p.h, horizon, p.dt / 2.0, rep.derive("disorder", 0), p.max_bytes)?;
            let n2 = 2 * steps_for(horizon, p.dt)?;
            let weights: Vec<f64> = paths
                .iter()
                .map(|w| {
                    let s = field.integrate_upto(w, &m, &[n2])?[0];
                    Ok((p.beta * s.value - 0.5 * p.beta * p.beta * s.quad_var).exp())
                })
                .collect::<Result<_>>()?;
            let dev: Vec<f64> = weights
                .chunks(replicas)
                .map(|c| c.iter().sum::<f64>() / replicas as f64 - 1.0)
                .collect();
            let sum: f64 = dev.iter().sum();
            let sq: f64 = dev.iter().map(|v| v * v).sum();
            let pairs = (points * (points - 1)) as f64;
            Ok(mass * mass * (sum * sum - sq) / pairs)
        })
        .collect::<Result<_>>()?;
    Ok(MeanSe::from_slice(&vals))
}

/// Path-pair estimate of `E[û_ε(f)²]` without any noise field: with `x, y`
/// drawn from `f/∫f` and independent paths from `x/ε`, `y/ε`,
/// `E[u_ε(x) u_ε(y)] = E exp(β² K(W, W'))` over `[0, 1/ε²]`.
pub fn smoothed_variance_pairs(
    f: &TestFunction,
    p: &PolymerParams,
    eps: f64,
    reps: usize,
    stream: SeedStream,
) -> Result<MeanSe> {
    check_polymer_dims(p)?;
    if reps < 2 {
        return arg("need at least two repetitions");
    }
    let horizon = 1.0 / (eps * eps);
    steps_for(horizon, p.dt)?;
    let k = p.kernel();
    let mass = f.mass();
    let b2 = p.beta * p.beta;
    let vals: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|i| {
            let rep = stream.derive("pair-rep", i as u64);
            let mut rng = rep.derive("points", 0).rng();
            let x: Vec<f64> = f.sample(&mut rng).iter().map(|v| v / eps).collect();
            let y: Vec<f64> = f.sample(&mut rng).iter().map(|v| v / eps).collect();
            let a = sample_path(p.d, &x, horizon, p.dt, rep.derive("path", 0))?;
            let b = sample_path(p.d, &y, horizon, p.dt, rep.derive("path", 1))?;
            Ok(mass * mass * (b2 * crate::paths::overlap(&a, &b, &k)?).exp_m1())
        })
        .collect::<Result<_>>()?;
    Ok(MeanSe::from_slice(&vals))
}

// ---------------------------------------------------------------------------
// non-Cauchy gap

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonCauchyGap {
    pub beta: f64,
    pub eps: f64,
    /// `0` for the inner `δ → 0` limit.
    pub delta: f64,
    /// `E exp(β² ∫_0^{t/ε²} V(W - W'))`.
    pub first: MeanSe,
    /// `E exp(β² (η_ε η_δ / η_s²) ∫_0^{t/s²} V(W - W'))`, `s² = (ε² + δ²)/2`.
    pub matched: MeanSe,
    /// Paired difference `first - matched`.
    pub gap: MeanSe,
}

/// The two exponential functionals whose difference is the cross term in
/// `E(u_ε - u_δ)²`, evaluated on the same paths. With unit-variance
/// Gaussian `φ`, `φ_ε ⋆ φ_δ = V_s` with `s² = (ε² + δ²)/2`; as `δ → 0` the
/// matched coefficient vanishes and that term tends to one.
pub fn non_cauchy_gap(
    p: &PolymerParams,
    eps: f64,
    delta: f64,
    t: f64,
    reps: usize,
    stream: SeedStream,
) -> Result<NonCauchyGap> {
    check_polymer_dims(p)?;
    if p.mollifier != MollifierKind::Gaussian {
        return arg(format!(
            "the mixed-scale reduction needs the gaussian mollifier, got {:?}",
            p.mollifier
        ));
    }
    if !(eps > 0.0 && delta >= 0.0 && t > 0.0) {
        return arg("need eps > 0, delta >= 0 and t > 0");
    }
    let k = p.kernel();
    let t_first = t / (eps * eps);
    let dh = p.d as f64 / 2.0 - 1.0;
    let (t_matched, coef) = if delta > 0.0 {
        let s2 = 0.5 * (eps * eps + delta * delta);
        (t / s2, eps.powf(dh) * delta.powf(dh) / s2.powf(dh))
    } else {
        (t_first, 0.0)
    };
    let mut horizons = vec![t_first, t_matched];
    horizons.sort_by(f64::total_cmp);
    let first_idx = if t_first <= t_matched { 0 } else { 1 };
    let ints = occupation_integrals(&k, std::f64::consts::SQRT_2, &vec![0.0; p.d], &horizons, p.dt, reps, stream)?;
    let b2 = p.beta * p.beta;
    let a: Vec<f64> = ints.iter().map(|r| (b2 * r[first_idx]).exp()).collect();
    let b: Vec<f64> = ints.iter().map(|r| (b2 * coef * r[1 - first_idx]).exp()).collect();
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    Ok(NonCauchyGap {
        beta: p.beta,
        eps,
        delta,
        first: MeanSe::from_slice(&a),
        matched: MeanSe::from_slice(&b),
        gap: MeanSe::from_slice(&diff),
    })
}

// ---------------------------------------------------------------------------
// trend tests and the uniform-integrability diagnostic

/// Paired sign test that `b` tends to be below `a` (p-value).
pub fn paired_sign_decrease(a: &[f64], b: &[f64]) -> f64 {
    let mut wins = 0u64;
    let mut n = 0u64;
    for (x, y) in a.iter().zip(b) {
        if y < x {
            wins += 1;
            n += 1;
        } else if y > x {
            n += 1;
        }
    }
    sign_test_greater(wins, n)
}

/// Whether the `q`-quantile increases between consecutive samples: the
/// upper confidence bound at `t_j` lies below the lower bound at `t_{j+1}`,
/// each bound at level `alpha/2`.
pub fn quantile_increases(samples: &[Vec<f64>], q: f64, alpha: f64) -> Vec<bool> {
    samples
        .windows(2)
        .map(|w| {
            let (_, up) = quantile_bounds(&w[0], q, alpha / 2.0);
            let (lo, _) = quantile_bounds(&w[1], q, alpha / 2.0);
            up < lo
        })
        .collect()
}

/// Ladder of cutoffs used by the diagnostic by default.
pub const DEFAULT_ALPHAS: [f64; 3] = [0.5, 1.0, 2.0];

fn mean_of<F: Fn(f64) -> f64>(xs: &[f64], f: F) -> MeanSe {
    MeanSe::from_slice(&xs.iter().map(|&x| f(x)).collect::<Vec<_>>())
}

/// Combines trend tests on `t`-indexed samples of `Z` (plain) and `Ẑ`
/// (size-biased) into a verdict. Each test is oriented so that a small
/// p-value signals strong disorder:
///
/// - `f_α(Ẑ)` mean larger at the last `t` than at the first, per `α`;
/// - `Ẑ` stochastically larger at each consecutive step (Mann–Whitney);
/// - tail mass `Q̄(Ẑ > max α)` larger at the last `t`;
/// - `Z` stochastically smaller at the last `t`.
///
/// Strong-like when every test is significant, weak-like when none is.
pub fn ui_diagnostic(
    t: &[f64],
    plain: &[Vec<f64>],
    size_biased: &[Vec<f64>],
    alphas: &[f64],
    sig: &Significance,
) -> Result<DisorderVerdict> {
    if t.len() < 3 {
        return arg(format!("need at least 3 time points, got {}", t.len()));
    }
    if plain.len() != t.len() || size_biased.len() != t.len() {
        return arg("need one plain and one size-biased sample per time point");
    }
    if plain.iter().chain(size_biased).any(|s| s.len() < 2) {
        return arg("every sample needs at least two values");
    }
    if alphas.is_empty() {
        return arg("the cutoff ladder is empty");
    }
    let fs = alphas
        .iter()
        .map(|&a| ConcaveTestFunction::new(a))
        .collect::<Result<Vec<_>>>()?;
    let last = t.len() - 1;
    let mut evidence = Vec::new();
    for fa in &fs {
        let m0 = mean_of(&size_biased[0], |x| fa.eval(x));
        let m1 = mean_of(&size_biased[last], |x| fa.eval(x));
        let diff = m1.mean - m0.mean;
        evidence.push(Evidence {
            test: format!("f_alpha_increase[alpha={}]", fa.alpha()),
            statistic: diff,
            p_value: one_sided_p(diff, m0.se.hypot(m1.se)),
        });
    }
    for j in 0..last {
        let p = mann_whitney_greater(&size_biased[j], &size_biased[j + 1]);
        evidence.push(Evidence {
            test: format!("size_biased_shift[t={}->{}]", t[j], t[j + 1]),
            statistic: crate::stats::quantile(&size_biased[j + 1], 0.5) - crate::stats::quantile(&size_biased[j], 0.5),
            p_value: p,
        });
    }
    let m = alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tail0 = mean_of(&size_biased[0], |x| if x > m { 1.0 } else { 0.0 });
    let tail1 = mean_of(&size_biased[last], |x| if x > m { 1.0 } else { 0.0 });
    let tdiff = tail1.mean - tail0.mean;
    evidence.push(Evidence {
        test: format!("tail_mass_change[m={m}]"),
        statistic: tdiff,
        // flatness is judged two-sided; a change counts for strong disorder
        // only when the tail grows
        p_value: if tdiff > 0.0 {
            two_sided_p(tdiff, tail0.se.hypot(tail1.se))
        } else {
            1.0
        },
    });
    evidence.push(Evidence {
        test: "plain_decrease".into(),
        statistic: crate::stats::quantile(&plain[last], 0.5) - crate::stats::quantile(&plain[0], 0.5),
        p_value: mann_whitney_greater(&plain[last], &plain[0]),
    });
    let level = sig.trend;
    let significant = evidence.iter().filter(|e| e.p_value < level).count();
    let verdict = if significant == evidence.len() {
        Verdict::StrongLike
    } else if significant == 0 {
        Verdict::WeakLike
    } else {
        Verdict::Undetermined
    };
    Ok(DisorderVerdict {
        verdict,
        level,
        evidence,
    })
}

/// The unit mollifier's kernel for a kind and dimension.
pub fn unit_kernel(kind: MollifierKind, d: usize) -> Result<CovarianceKernel> {
    let m = Mollifier::new(kind, 1.0, d)?;
    CovarianceKernel::new(&m, 1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Significance;
    use std::f64::consts::PI;

    fn bump3() -> CovarianceKernel {
        unit_kernel(MollifierKind::CompactBump, 3).unwrap()
    }

    fn gauss3() -> CovarianceKernel {
        unit_kernel(MollifierKind::Gaussian, 3).unwrap()
    }

    #[test]
    fn green_gaussian_origin_closed_form() {
        // V = N(0, 2I): G(0) = (1/2π) E|Y|^{-1} = 1/(2 π^{3/2})
        let g = green_potential(&gauss3(), &[0.0; 3]).unwrap();
        let exact = 1.0 / (2.0 * PI.powf(1.5));
        assert!((g - exact).abs() < 1e-9 * exact, "{g} vs {exact}");
    }

    #[test]
    fn green_far_field_is_newtonian() {
        let k = gauss3();
        let r = 40.0;
        let g = green_potential_radial(&k, r).unwrap();
        assert!((g - 1.0 / (2.0 * PI * r)).abs() < 1e-9);
    }

    #[test]
    fn green_rejects_recurrent_dimensions() {
        let k = unit_kernel(MollifierKind::Gaussian, 2).unwrap();
        assert!(green_potential(&k, &[0.0, 0.0]).is_err());
        assert!(portenko_eta(1.0, &k).is_err());
    }

    #[test]
    fn green_decays_and_decreases_radially() {
        let k = bump3();
        let g0 = green_potential_radial(&k, 0.0).unwrap();
        // ten support radii of the kernel
        let g10 = green_potential_radial(&k, 10.0 * k.support_radius()).unwrap();
        assert!(g10 <= 0.05 * g0, "{g10} vs {g0}");
        let mut prev = g0;
        for j in 1..60 {
            let v = green_potential_radial(&k, j as f64 * 0.1).unwrap();
            assert!(v <= prev * (1.0 + 1e-12));
            prev = v;
        }
    }

    #[test]
    fn green_sup_sits_at_origin() {
        let k = bump3();
        let g0 = green_potential(&k, &[0.0; 3]).unwrap();
        let mut rng = SeedStream::root(5).rng();
        for _ in 0..20 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!(green_potential(&k, &z).unwrap() <= g0);
        }
        assert!(portenko_eta(1.0, &k).unwrap().sup_verified);
    }

    #[test]
    fn green_matches_occupation_monte_carlo() {
        let k = bump3();
        let s = SeedStream::root(11);
        for (i, r) in [0.0, 1.0, 2.5].iter().enumerate() {
            let q = green_potential_radial(&k, *r).unwrap();
            let mc = occupation_potential_mc(&k, &[*r, 0.0, 0.0], 200.0, 0.1, 3000, s.derive("pt", i as u64)).unwrap();
            assert!((mc.mean - q).abs() < 0.05 * q, "r={r}: mc {} ± {} vs {q}", mc.mean, mc.se);
        }
    }

    #[test]
    fn portenko_zero_beta() {
        let b = portenko_eta(0.0, &bump3()).unwrap();
        assert_eq!(b.eta, 0.0);
        assert_eq!(b.bound, Some(1.0));
    }

    #[test]
    fn portenko_infinite_marker() {
        let k = bump3();
        let beta = beta_for_eta(1.5, &k).unwrap();
        let b = portenko_eta(beta, &k).unwrap();
        assert!(b.eta > 1.0);
        assert!(b.bound.is_none());
        assert!(!b.is_finite());
    }

    #[test]
    fn portenko_bound_holds_at_half() {
        let k = bump3();
        let beta = beta_for_eta(0.5, &k).unwrap();
        let b = portenko_eta(beta, &k).unwrap();
        assert!((b.eta - 0.5).abs() < 1e-12);
        let mc = exponential_occupation(&k, beta, 100.0, 0.1, 4000, SeedStream::root(3)).unwrap();
        assert!(mc.mean <= b.bound.unwrap() + 3.0 * mc.se, "{mc:?}");
        assert!(mc.mean > 1.0);
    }

    #[test]
    fn beta_star_scaling_with_mass() {
        let k = bump3();
        let b1 = beta_star_bound(&k, 1e-10).unwrap();
        let b2 = beta_star_bound(&k.scaled(2.0), 1e-10).unwrap();
        assert!((b2 * b2 - b1 * b1 / 2.0).abs() < 1e-8);
        assert!(beta_star_bound(&k, 0.0).is_err());
    }

    #[test]
    fn beta_ref_regression_value() {
        let b = beta_star_bound(&bump3(), 1e-10).unwrap();
        let g0 = green_potential_radial(&bump3(), 0.0).unwrap();
        assert!((b - (2.0 / g0).sqrt()).abs() < 1e-9);
        assert!((b - BUMP3_BETA_REF).abs() < 1e-6, "beta_ref = {b}");
        let gb = beta_star_bound(&gauss3(), 1e-10).unwrap();
        assert!((gb - (4.0 * PI.powf(1.5)).sqrt()).abs() < 1e-8);
    }

    const BUMP3_BETA_REF: f64 = 2.788_537_6;

    #[test]
    fn second_moment_trivial_and_monotone() {
        let p = PolymerParams::new(0.0, 4.0);
        let m = second_moment_formula(&p, 50, SeedStream::root(1)).unwrap();
        assert_eq!(m.estimate.mean, 1.0);
        assert_eq!(m.estimate.se, 0.0);
        let p = PolymerParams::new(1.0, 8.0);
        let c = second_moment_curve(&p, &[4.0, 8.0], 500, SeedStream::root(2)).unwrap();
        assert!(c[1].estimate.mean >= c[0].estimate.mean);
    }

    #[test]
    fn second_moment_stays_bounded_near_reference() {
        let p0 = PolymerParams::new(0.0, 32.0);
        let b = 0.9 * beta_ref(&p0).unwrap();
        let p = p0.with_beta(b);
        let c = second_moment_curve(&p, &[16.0, 32.0], 2000, SeedStream::root(9)).unwrap();
        let eta2 = 0.5 * b * b * green_potential_radial(&p.kernel(), 0.0).unwrap();
        let bound = 1.0 / (1.0 - eta2);
        let (a, z) = (c[0].estimate, c[1].estimate);
        assert!(z.mean <= bound + 3.0 * z.se, "{z:?} vs {bound}");
        // the increment over the doubling is small next to the bound
        assert!(z.mean - a.mean <= 0.25 * bound + 3.0 * z.se);
    }

    #[test]
    fn second_moment_limit_respects_portenko() {
        let p0 = PolymerParams::new(0.0, 64.0);
        let b = 0.7 * beta_ref(&p0).unwrap();
        let p = p0.with_beta(b);
        let lim = second_moment_limit(&p, 1500, SeedStream::root(4)).unwrap();
        let eta2 = 0.5 * b * b * green_potential_radial(&p.kernel(), 0.0).unwrap();
        assert!(lim.mean <= 1.0 / (1.0 - eta2) + 3.0 * lim.se);
    }

    #[test]
    fn occupation_integrals_reject_bad_input() {
        let k = bump3();
        assert!(occupation_integrals(&k, 1.0, &[0.0; 2], &[1.0], 0.1, 5, SeedStream::root(0)).is_err());
        assert!(occupation_integrals(&k, 1.0, &[0.0; 3], &[1.05], 0.1, 5, SeedStream::root(0)).is_err());
        assert!(occupation_integrals(&k, 1.0, &[0.0; 3], &[2.0, 1.0], 0.1, 5, SeedStream::root(0)).is_err());
    }

    #[test]
    fn pair_density_integrates_to_squared_mass() {
        let f = TestFunction::new(vec![
            GaussianComponent { weight: 0.7, mean: vec![0.0, 0.0, 0.0], sd: 1.0 },
            GaussianComponent { weight: 0.3, mean: vec![2.0, 1.0, 0.0], sd: 0.5 },
        ])
        .unwrap();
        let g = GaussLegendre::new(16);
        let tot = g.integrate(|r| f.pair_density(r), 0.0, f.pair_reach(), 64);
        assert!((tot - 1.0).abs() < 1e-8, "{tot}");
        // shifted component pair against the d = 3 closed form
        let (m, s2) = (5f64.sqrt(), 1.25);
        let r = 1.7;
        let closed = r / (m * (2.0 * PI * s2).sqrt())
            * ((-(r - m) * (r - m) / (2.0 * s2)).exp() - (-(r + m) * (r + m) / (2.0 * s2)).exp());
        let c = &f.components;
        // cross density of the mixture minus the same-component terms
        let mixed = TestFunction { components: vec![c[0].clone(), c[1].clone()] };
        let a_only = TestFunction { components: vec![c[0].clone()] };
        let b_only = TestFunction { components: vec![c[1].clone()] };
        let cross = (mixed.pair_density(r) - a_only.pair_density(r) - b_only.pair_density(r)) / 2.0;
        let w = c[0].weight * c[1].weight;
        assert!((cross - w * closed).abs() < 1e-10, "{cross} vs {}", w * closed);
    }

    #[test]
    fn test_function_validation() {
        assert!(TestFunction::new(vec![]).is_err());
        assert!(TestFunction::new(vec![GaussianComponent { weight: -1.0, mean: vec![0.0; 3], sd: 1.0 }]).is_err());
        let f = TestFunction::standard(3);
        assert!((f.value(&[0.0; 3]) - (2.0 * PI).powf(-1.5)).abs() < 1e-15);
    }

    #[test]
    fn smoothed_variance_zero_beta_is_zero() {
        let p = PolymerParams::new(0.0, 1.0);
        let s = smoothed_variance(&TestFunction::standard(3), &p, &[1.0, 0.5], 10, SeedStream::root(1)).unwrap();
        for e in &s.estimates {
            assert_eq!(e.mean, 0.0);
        }
    }

    #[test]
    fn smoothed_variance_refuses_large_beta() {
        let p0 = PolymerParams::new(0.0, 1.0);
        let p = p0.with_beta(1.01 * beta_ref(&p0).unwrap());
        let e = smoothed_variance(&TestFunction::standard(3), &p, &[1.0], 10, SeedStream::root(1));
        assert!(e.is_err());
    }

    #[test]
    fn smoothed_variance_decays_in_eps() {
        let p0 = PolymerParams::new(0.0, 1.0);
        let p = p0.with_beta(0.5 * beta_ref(&p0).unwrap());
        let s = smoothed_variance(&TestFunction::standard(3), &p, &[1.0, 0.5, 0.25], 2000, SeedStream::root(8)).unwrap();
        for (j, pv) in s.decrease_p.iter().enumerate() {
            assert!(*pv < 0.05, "step {j}: p = {pv}, {:?}", s.estimates);
        }
    }

    #[test]
    fn smoothed_variance_matches_explicit_fields() {
        let p0 = PolymerParams::new(0.0, 1.0);
        let p = p0.with_beta(0.5 * beta_ref(&p0).unwrap());
        // narrow enough that most point pairs interact through the kernel
        let f = TestFunction::new(vec![
            GaussianComponent { weight: 0.6, mean: vec![0.0; 3], sd: 0.25 },
            GaussianComponent { weight: 0.4, mean: vec![0.3, 0.0, 0.0], sd: 0.2 },
        ])
        .unwrap();
        let quad = smoothed_variance(&f, &p, &[0.5], 3000, SeedStream::root(21)).unwrap();
        let direct = smoothed_variance_explicit(&f, &p, 0.5, 6, 4, 150, SeedStream::root(22)).unwrap();
        let q = quad.estimates[0];
        assert!(q.agrees_with(&direct, 3.0), "quadrature {q:?} vs explicit {direct:?}");
        // the field-free pair estimator is much sharper
        let pairs = smoothed_variance_pairs(&f, &p, 0.5, 20000, SeedStream::root(23)).unwrap();
        assert!(q.agrees_with(&pairs, 3.0), "quadrature {q:?} vs pairs {pairs:?}");
        assert!(pairs.se < 0.05 * pairs.mean);
    }

    #[test]
    fn non_cauchy_requires_gaussian() {
        let p = PolymerParams::new(0.5, 1.0);
        assert!(non_cauchy_gap(&p, 0.5, 0.0, 1.0, 10, SeedStream::root(0)).is_err());
    }

    #[test]
    fn non_cauchy_trivial_at_zero_beta() {
        let p = PolymerParams::new(0.0, 1.0).with_kind(MollifierKind::Gaussian);
        let g = non_cauchy_gap(&p, 0.5, 0.0, 1.0, 20, SeedStream::root(0)).unwrap();
        assert_eq!(g.first.mean, 1.0);
        assert_eq!(g.matched.mean, 1.0);
        assert_eq!(g.gap.mean, 0.0);
    }

    #[test]
    fn non_cauchy_gap_positive_and_shrinking() {
        let p = PolymerParams::new(0.5, 1.0).with_kind(MollifierKind::Gaussian);
        let g = non_cauchy_gap(&p, 0.5, 0.0, 1.0, 4000, SeedStream::root(6)).unwrap();
        assert!(g.gap.mean > 3.0 * g.gap.se, "{g:?}");
        let gaps: Vec<f64> = [0.5, 0.25, 0.1]
            .iter()
            .map(|&b| non_cauchy_gap(&p.with_beta(b), 0.5, 0.0, 1.0, 4000, SeedStream::root(6)).unwrap().gap.mean)
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2] && gaps[2] > 0.0, "{gaps:?}");
        // finite delta keeps the matched arm strictly between one and the first arm
        let fd = non_cauchy_gap(&p, 0.5, 0.5, 1.0, 4000, SeedStream::root(6)).unwrap();
        assert!(fd.matched.mean > 1.0 && fd.matched.mean < fd.first.mean * 1.5);
    }

    #[test]
    fn f_alpha_shape() {
        let f = ConcaveTestFunction::new(2.0).unwrap();
        assert_eq!(f.eval(1.0), 0.5);
        assert_eq!(f.eval(2.0), 1.0);
        assert_eq!(f.eval(7.0), 1.0);
        assert!(ConcaveTestFunction::new(0.0).is_err());
    }

    #[test]
    fn diagnostic_needs_three_times() {
        let s = vec![vec![1.0, 1.0]; 2];
        let e = ui_diagnostic(&[1.0, 2.0], &s, &s, &DEFAULT_ALPHAS, &Significance::default());
        assert!(e.is_err());
    }

    #[test]
    fn diagnostic_zero_beta_is_weak() {
        let s = vec![vec![1.0; 200]; 3];
        let v = ui_diagnostic(&[4.0, 8.0, 16.0], &s, &s, &DEFAULT_ALPHAS, &Significance::default()).unwrap();
        assert_eq!(v.verdict, Verdict::WeakLike, "{}", v.summary());
    }

    fn synthetic(shift: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = SeedStream::root(77).rng();
        let mut plain = Vec::new();
        let mut tilted = Vec::new();
        for &s in shift {
            plain.push((0..400).map(|_| (rng.sample::<f64, _>(StandardNormal) - s).exp()).collect());
            tilted.push((0..400).map(|_| (rng.sample::<f64, _>(StandardNormal) + s).exp()).collect());
        }
        (plain, tilted)
    }

    #[test]
    fn diagnostic_detects_escaping_mass() {
        let (plain, tilted) = synthetic(&[0.0, 1.0, 2.0]);
        let v = ui_diagnostic(&[4.0, 8.0, 16.0], &plain, &tilted, &DEFAULT_ALPHAS, &Significance::default()).unwrap();
        assert_eq!(v.verdict, Verdict::StrongLike, "{}", v.summary());
        // permuted time labels break the trend
        let order = [2, 0, 1];
        let pp: Vec<_> = order.iter().map(|&i| plain[i].clone()).collect();
        let tp: Vec<_> = order.iter().map(|&i| tilted[i].clone()).collect();
        let v = ui_diagnostic(&[4.0, 8.0, 16.0], &pp, &tp, &DEFAULT_ALPHAS, &Significance::default()).unwrap();
        assert_eq!(v.verdict, Verdict::Undetermined, "{}", v.summary());
    }

    #[test]
    fn paired_sign_and_quantile_trends() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let b: Vec<f64> = a.iter().map(|x| x - 1.0).collect();
        assert!(paired_sign_decrease(&a, &b) < 1e-10);
        assert!(paired_sign_decrease(&b, &a) > 0.5);
        let up = quantile_increases(&[a.clone(), a.iter().map(|x| x + 50.0).collect()], 0.1, 0.05);
        assert_eq!(up, vec![true]);
        let same = quantile_increases(&[a.clone(), a.clone()], 0.1, 0.05);
        assert_eq!(same, vec![false]);
    }
}
