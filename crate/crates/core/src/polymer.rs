//! Partition-function estimators.
//!
//! `Z = (1/N) Σ_i exp(β M_i - β² q_i / 2)` where `M_i` is the Wiener integral
//! of the disorder along the `i`-th of `N` independent Brownian paths up to
//! the horizon `t = ε^{-2}` and `q_i` its conditional variance. Two ways to
//! produce the `M_i`:
//!
//! * [`Method::ExplicitField`]: one lattice noise field, `N` paths, exact
//!   discrete quadratic variation.
//! * [`Method::ReplicaGaussian`]: one joint Gaussian draw with covariance given
//!   by the pairwise path overlaps; `q_i = V(0) t`.
//!
//! The raw `(M_i, q_i)` are kept in a [`DisorderSample`], so a single draw can
//! be evaluated at many values of `β` and at several nested horizons.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::field::{build_noise_field, CholeskySampler, FieldBox, DEFAULT_MAX_BYTES};
use crate::mollifier::{CovarianceKernel, Mollifier, MollifierKind};
use crate::paths::{overlap_upto, sample_path, steps_for, BrownianPath};
use crate::rng::SeedStream;
use crate::stats::{log_mean_exp, neumaier_sum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ReplicaGaussian,
    ExplicitField,
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "replica-gaussian" => Ok(Method::ReplicaGaussian),
            "explicit-field" => Ok(Method::ExplicitField),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

/// Model parameters. The horizon `t = ε^{-2}` is the stored quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolymerParams {
    pub beta: f64,
    pub horizon: f64,
    pub d: usize,
    pub mollifier: MollifierKind,
    /// Path time step.
    pub dt: f64,
    /// Lattice spacing of the explicit field.
    pub h: f64,
    /// Cap on one materialized field slab, in bytes.
    pub max_bytes: u64,
}

impl PolymerParams {
    /// `d = 3`, compact bump at unit scale, `dt = 1/10`, `h = 1/8`.
    pub fn new(beta: f64, horizon: f64) -> Self {
        PolymerParams {
            beta,
            horizon,
            d: 3,
            mollifier: MollifierKind::CompactBump,
            dt: 0.1,
            h: 0.125,
            max_bytes: DEFAULT_MAX_BYTES,
        }
    }

    pub fn from_eps(beta: f64, eps: f64) -> Self {
        Self::new(beta, 1.0 / (eps * eps))
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        PolymerParams { beta, ..self.clone() }
    }

    pub fn with_horizon(&self, horizon: f64) -> Self {
        PolymerParams {
            horizon,
            ..self.clone()
        }
    }

    pub fn with_kind(mut self, kind: MollifierKind) -> Self {
        self.mollifier = kind;
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_d(mut self, d: usize) -> Self {
        self.d = d;
        self
    }

    /// `ε = t^{-1/2}`.
    pub fn eps(&self) -> f64 {
        self.horizon.sqrt().recip()
    }

    /// `ε^{(d-2)/2}`, the noise amplitude in the original scaling.
    pub fn noise_amplitude(&self) -> f64 {
        self.eps().powf((self.d as f64 - 2.0) / 2.0)
    }

    pub fn mollifier(&self) -> Mollifier {
        Mollifier::new(self.mollifier, 1.0, self.d).expect("validated parameters")
    }

    pub fn kernel(&self) -> CovarianceKernel {
        self.mollifier().kernel()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 3 {
            return arg(format!("polymer estimators need d >= 3, got {}", self.d));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return arg(format!("beta must be nonnegative, got {}", self.beta));
        }
        if !(self.h > 0.0) {
            return arg("lattice spacing must be positive");
        }
        if self.dt > 0.1 * (1.0 + 1e-12) {
            return arg(format!(
                "dt = {} is too coarse for a unit-scale kernel (need dt <= 0.1)",
                self.dt
            ));
        }
        steps_for(self.horizon, self.dt)?;
        Ok(())
    }
}

/// One Monte Carlo value of `Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionEstimate {
    pub value: f64,
    /// `log Z`, finite even when `Z` underflows.
    pub log_value: f64,
    pub n: usize,
    /// Standard error of the replica average at fixed disorder.
    pub stderr: f64,
    pub method: Method,
    pub seed: SeedStream,
    pub params: PolymerParams,
}

/// Wiener integrals and conditional variances of `N` replicas at one or more
/// nested horizons, sharing one disorder realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisorderSample {
    pub method: Method,
    pub horizons: Vec<f64>,
    pub n: usize,
    /// `[horizon][replica]`.
    pub wiener: Vec<Vec<f64>>,
    /// `[horizon][replica]`.
    pub quad_var: Vec<Vec<f64>>,
    /// Covariance of replica 0 (the spine) with every replica,
    /// `[horizon][replica]`, when requested.
    pub spine_cov: Option<Vec<Vec<f64>>>,
    pub jitter: f64,
    pub seed: SeedStream,
}

fn horizon_steps(p: &PolymerParams, horizons: &[f64]) -> Result<Vec<usize>> {
    if horizons.is_empty() {
        return arg("at least one horizon is required");
    }
    let steps: Vec<usize> = horizons
        .iter()
        .map(|&t| steps_for(t, p.dt))
        .collect::<Result<_>>()?;
    if steps.windows(2).any(|w| w[1] <= w[0]) {
        return arg("horizons must be strictly increasing");
    }
    Ok(steps)
}

fn replica_paths(p: &PolymerParams, n: usize, horizon: f64, stream: SeedStream) -> Result<Vec<BrownianPath>> {
    let origin = vec![0.0; p.d];
    (0..n)
        .map(|i| sample_path(p.d, &origin, horizon, p.dt, stream.derive("path", i as u64)))
        .collect()
}

impl DisorderSample {
    /// Samples `n` paths and one disorder realization; `p.beta` is ignored.
    pub fn draw(
        p: &PolymerParams,
        n: usize,
        method: Method,
        horizons: &[f64],
        with_spine: bool,
        stream: SeedStream,
    ) -> Result<Self> {
        p.validate()?;
        if n < 1 {
            return arg("at least one replica is required");
        }
        let steps = horizon_steps(p, horizons)?;
        let t_max = *horizons.last().unwrap();
        let paths = replica_paths(p, n, t_max, stream)?;
        let disorder = stream.derive("disorder", 0);
        match method {
            Method::ExplicitField => Self::draw_explicit(p, &paths, horizons, &steps, with_spine, stream, disorder),
            Method::ReplicaGaussian => Self::draw_replica(p, &paths, horizons, &steps, with_spine, stream, disorder),
        }
    }

    fn draw_explicit(
        p: &PolymerParams,
        paths: &[BrownianPath],
        horizons: &[f64],
        steps: &[usize],
        with_spine: bool,
        seed: SeedStream,
        disorder: SeedStream,
    ) -> Result<Self> {
        let m = p.mollifier();
        let margin = m.support_radius() + p.h;
        let bounds = FieldBox::covering(paths, margin)?;
        let t_max = *horizons.last().unwrap();
        // field step is half the path step: the path is held at its nearest grid point
        let field = build_noise_field(bounds, p.h, t_max, p.dt / 2.0, disorder, p.max_bytes)?;
        let ends: Vec<usize> = steps.iter().map(|s| 2 * s).collect();
        let per_path: Vec<Vec<(f64, f64)>> = paths
            .par_iter()
            .map(|w| {
                field
                    .integrate_upto(w, &m, &ends)
                    .map(|v| v.into_iter().map(|s| (s.value, s.quad_var)).collect())
            })
            .collect::<Result<_>>()?;
        let k = horizons.len();
        let wiener = (0..k).map(|h| per_path.iter().map(|v| v[h].0).collect()).collect();
        let quad_var = (0..k).map(|h| per_path.iter().map(|v| v[h].1).collect()).collect();
        let spine_cov = if with_spine {
            Some(field.cross_covariance_upto(&paths[0], paths, &m, &ends)?)
        } else {
            None
        };
        Ok(DisorderSample {
            method: Method::ExplicitField,
            horizons: horizons.to_vec(),
            n: paths.len(),
            wiener,
            quad_var,
            spine_cov,
            jitter: 0.0,
            seed,
        })
    }

    fn draw_replica(
        p: &PolymerParams,
        paths: &[BrownianPath],
        horizons: &[f64],
        steps: &[usize],
        with_spine: bool,
        seed: SeedStream,
        disorder: SeedStream,
    ) -> Result<Self> {
        let n = paths.len();
        let kern = p.kernel();
        // cumulative overlaps at each horizon, [pair][horizon]
        let mut cum = vec![vec![vec![0.0; steps.len()]; n]; n];
        for i in 0..n {
            for j in i..n {
                let v = overlap_upto(&paths[i], &paths[j], &kern, steps);
                cum[i][j] = v.clone();
                cum[j][i] = v;
            }
        }
        // white noise in time: increments over disjoint blocks are
        // conditionally independent, each with the block overlap as covariance
        let mut wiener = Vec::with_capacity(steps.len());
        let mut running = vec![0.0; n];
        let mut jitter: f64 = 0.0;
        for b in 0..steps.len() {
            let sigma = nalgebra::DMatrix::from_fn(n, n, |i, j| {
                cum[i][j][b] - if b > 0 { cum[i][j][b - 1] } else { 0.0 }
            });
            let block_t = horizons[b] - if b > 0 { horizons[b - 1] } else { 0.0 };
            let sampler = CholeskySampler::new(&sigma, kern.at_zero() * block_t)?;
            jitter = jitter.max(sampler.jitter);
            let draw = sampler.draw(&mut disorder.derive("block", b as u64).rng());
            for (r, x) in running.iter_mut().zip(draw) {
                *r += x;
            }
            wiener.push(running.clone());
        }
        let quad_var = (0..steps.len())
            .map(|b| (0..n).map(|i| cum[i][i][b]).collect())
            .collect();
        let spine_cov = with_spine.then(|| {
            (0..steps.len())
                .map(|b| (0..n).map(|j| cum[0][j][b]).collect())
                .collect()
        });
        Ok(DisorderSample {
            method: Method::ReplicaGaussian,
            horizons: horizons.to_vec(),
            n,
            wiener,
            quad_var,
            spine_cov,
            jitter,
            seed,
        })
    }

    /// `log Λ_i = β M_i - β² q_i / 2` at horizon index `k`.
    pub fn log_weights(&self, beta: f64, k: usize) -> Vec<f64> {
        if beta == 0.0 {
            return vec![0.0; self.n];
        }
        self.wiener[k]
            .iter()
            .zip(&self.quad_var[k])
            .map(|(m, q)| beta * m - 0.5 * beta * beta * q)
            .collect()
    }

    /// `log Z` at horizon index `k`.
    pub fn log_partition(&self, beta: f64, k: usize) -> f64 {
        log_mean_exp(&self.log_weights(beta, k))
    }

    pub fn partition(&self, beta: f64, k: usize) -> f64 {
        self.log_partition(beta, k).exp()
    }

    /// Replica-average estimate at horizon index `k`.
    pub fn estimate(&self, params: &PolymerParams, k: usize) -> PartitionEstimate {
        let beta = params.beta;
        let lw = self.log_weights(beta, k);
        let log_z = log_mean_exp(&lw);
        let z = log_z.exp();
        let n = self.n as f64;
        let stderr = if self.n > 1 {
            let ss = neumaier_sum(lw.iter().map(|l| ((l).exp() - z).powi(2)));
            (ss / (n - 1.0) / n).sqrt()
        } else {
            f64::NAN
        };
        PartitionEstimate {
            value: z,
            log_value: log_z,
            n: self.n,
            stderr,
            method: self.method,
            seed: self.seed,
            params: params.with_horizon(self.horizons[k]),
        }
    }

    /// Unbiased estimate of the two-replica moment `E[Λ_i Λ_j]`, `i ≠ j`:
    /// `(N² Z² - Σ Λ_i²) / (N (N - 1))`.
    pub fn pair_moment(&self, beta: f64, k: usize) -> f64 {
        let lw = self.log_weights(beta, k);
        let n = self.n as f64;
        let s1 = neumaier_sum(lw.iter().map(|l| l.exp()));
        let s2 = neumaier_sum(lw.iter().map(|l| (2.0 * l).exp()));
        (s1 * s1 - s2) / (n * (n - 1.0))
    }

    /// Size-biased values at horizon index `k`: `(full, partners)` where
    /// `full = (1/N) Σ_i Λ_i e^{β² Σ_{0i}}` is `Z` under the `Z`-tilted law
    /// with replica 0 as the spine, and `partners` is the same average over
    /// `i ≥ 1` only.
    pub fn size_biased(&self, beta: f64, k: usize) -> Option<(f64, f64)> {
        self.log_size_biased(beta, k).map(|(a, b)| (a.exp(), b.exp()))
    }

    /// Logarithms of [`DisorderSample::size_biased`].
    pub fn log_size_biased(&self, beta: f64, k: usize) -> Option<(f64, f64)> {
        let cov = self.spine_cov.as_ref()?;
        let lw = self.log_weights(beta, k);
        let tilted: Vec<f64> = lw
            .iter()
            .zip(&cov[k])
            .map(|(l, c)| l + beta * beta * c)
            .collect();
        let partners = if tilted.len() > 1 {
            log_mean_exp(&tilted[1..])
        } else {
            f64::NAN
        };
        Some((log_mean_exp(&tilted), partners))
    }
}

/// `E[Λ_i Λ_j | paths] = exp(β² K(W_i, W_j))` averaged over the pairs
/// `i ≠ j` of the paths that [`DisorderSample::draw`] uses for the same
/// stream, at each horizon. Integrating out the disorder exactly removes
/// the log-normal weight noise, whose variance grows like `e^{β² V(0) t}`.
pub fn conditional_pair_moments(
    p: &PolymerParams,
    n: usize,
    horizons: &[f64],
    stream: SeedStream,
) -> Result<Vec<f64>> {
    p.validate()?;
    if n < 2 {
        return arg("at least two replicas are required");
    }
    let steps = horizon_steps(p, horizons)?;
    let paths = replica_paths(p, n, *horizons.last().unwrap(), stream)?;
    let k = p.kernel();
    let b2 = p.beta * p.beta;
    let mut sums = vec![0.0; horizons.len()];
    for i in 0..n {
        for j in 0..i {
            for (s, o) in sums.iter_mut().zip(overlap_upto(&paths[i], &paths[j], &k, &steps)) {
                *s += (b2 * o).exp();
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(sums.into_iter().map(|s| s / pairs).collect())
}

/// One draw of `Z` with `n` replicas.
pub fn partition_estimate(
    p: &PolymerParams,
    n: usize,
    method: Method,
    stream: SeedStream,
) -> Result<PartitionEstimate> {
    p.validate()?;
    if n < 2 {
        return arg(format!("at least two replicas are required, got {n}"));
    }
    let s = DisorderSample::draw(p, n, method, &[p.horizon], false, stream)?;
    Ok(s.estimate(p, 0))
}

/// `Z̄_t` along a dyadic horizon grid, computed with one noise field whose
/// restriction to `[0, t]` is shared by every later horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTrajectory {
    pub t: Vec<f64>,
    pub z: Vec<f64>,
    pub log_z: Vec<f64>,
    pub n: usize,
    /// Always true: the same field and paths are extended in time.
    pub nested: bool,
    pub seed: SeedStream,
    pub params: PolymerParams,
}

pub fn check_dyadic(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() {
        return arg("time grid is empty");
    }
    if t_grid[0] <= 0.0 {
        return arg("time grid must be positive");
    }
    for w in t_grid.windows(2) {
        if (w[1] - 2.0 * w[0]).abs() > 1e-12 * w[1] {
            return arg(format!("time grid is not dyadic: {} then {}", w[0], w[1]));
        }
    }
    Ok(())
}

impl MartingaleTrajectory {
    pub fn from_sample(s: &DisorderSample, p: &PolymerParams) -> Self {
        let log_z: Vec<f64> = (0..s.horizons.len()).map(|k| s.log_partition(p.beta, k)).collect();
        MartingaleTrajectory {
            t: s.horizons.clone(),
            z: log_z.iter().map(|l| l.exp()).collect(),
            log_z,
            n: s.n,
            nested: true,
            seed: s.seed,
            params: p.clone(),
        }
    }
}

pub fn martingale_trajectory(
    p: &PolymerParams,
    t_grid: &[f64],
    n: usize,
    stream: SeedStream,
) -> Result<MartingaleTrajectory> {
    check_dyadic(t_grid)?;
    if n < 2 {
        return arg("at least two replicas are required");
    }
    let s = DisorderSample::draw(p, n, Method::ExplicitField, t_grid, false, stream)?;
    Ok(MartingaleTrajectory::from_sample(&s, p))
}

/// Size-biased estimate: `value` is `Z` under the `Z`-tilted disorder law,
/// realized by shifting the noise along replica 0 (the spine).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBiasedEstimate {
    pub estimate: PartitionEstimate,
    /// Average over the partners `i ≥ 1` only; its mean is
    /// `E exp(β² K(W, W'))` for independent `W, W'`.
    pub partner_value: f64,
    pub log_partner_value: f64,
}

pub fn size_biased_partition(
    p: &PolymerParams,
    n: usize,
    method: Method,
    stream: SeedStream,
) -> Result<SizeBiasedEstimate> {
    p.validate()?;
    if n < 2 {
        return arg("at least two replicas are required");
    }
    let s = DisorderSample::draw(p, n, method, &[p.horizon], true, stream)?;
    let (full, partners) = s.log_size_biased(p.beta, 0).expect("spine requested");
    let mut estimate = s.estimate(p, 0);
    estimate.value = full.exp();
    estimate.log_value = full;
    estimate.stderr = f64::NAN;
    Ok(SizeBiasedEstimate {
        estimate,
        partner_value: partners.exp(),
        log_partner_value: partners,
    })
}

/// The two arms of the Gaussian interpolation identity
/// `Z_{ρβ}(B) = E[Z_β(ρB + sqrt(1-ρ²) B') | B]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationCheck {
    /// `Z_{ρβ}(B)` per outer replication.
    pub direct: Vec<f64>,
    /// Inner averages over `B'` of `Z_β(ρB + sqrt(1-ρ²) B')`.
    pub mixed: Vec<f64>,
    /// Standard errors of the inner averages.
    pub mixed_stderr: Vec<f64>,
    pub rho: f64,
}

/// Runs `outer` replications; each draws a field `B` and `n` paths, then
/// averages over `inner` independent fields `B'`. The integrals of `B'`
/// along the fixed paths are drawn from their exact conditional covariance.
pub fn interpolation_check(
    p: &PolymerParams,
    rho: f64,
    n: usize,
    outer: usize,
    inner: usize,
    stream: SeedStream,
) -> Result<InterpolationCheck> {
    p.validate()?;
    if !(rho > 0.0 && rho < 1.0) {
        return arg(format!("rho must lie in (0, 1), got {rho}"));
    }
    if n < 2 || inner < 2 {
        return arg("need at least two replicas and two inner draws");
    }
    let m = p.mollifier();
    let beta = p.beta;
    let mix = (1.0 - rho * rho).sqrt();
    let rows: Vec<(f64, f64, f64)> = (0..outer)
        .into_par_iter()
        .map(|r| -> Result<(f64, f64, f64)> {
            let s = stream.derive("outer", r as u64);
            let paths = replica_paths(p, n, p.horizon, s)?;
            let bounds = FieldBox::covering(&paths, m.support_radius() + p.h)?;
            let field = build_noise_field(bounds, p.h, p.horizon, p.dt / 2.0, s.derive("disorder", 0), p.max_bytes)?;
            let ints: Vec<_> = paths
                .iter()
                .map(|w| crate::field::wiener_integral(&field, w, &m))
                .collect::<Result<_>>()?;
            let direct = log_mean_exp(
                &ints
                    .iter()
                    .map(|w| rho * beta * w.value - 0.5 * rho * rho * beta * beta * w.quad_var)
                    .collect::<Vec<_>>(),
            )
            .exp();
            let gram = field.conditional_covariance(&paths, &m, field.steps)?;
            let sampler = CholeskySampler::new(&gram, p.kernel().at_zero() * p.horizon)?;
            let mut rng = s.derive("inner", 0).rng();
            let vals: Vec<f64> = (0..inner)
                .map(|_| {
                    let b2 = sampler.draw(&mut rng);
                    let lw: Vec<f64> = ints
                        .iter()
                        .zip(&b2)
                        .map(|(w, x)| beta * (rho * w.value + mix * x) - 0.5 * beta * beta * w.quad_var)
                        .collect();
                    log_mean_exp(&lw).exp()
                })
                .collect();
            let ms = crate::stats::MeanSe::from_slice(&vals);
            Ok((direct, ms.mean, ms.se))
        })
        .collect::<Result<_>>()?;
    Ok(InterpolationCheck {
        direct: rows.iter().map(|r| r.0).collect(),
        mixed: rows.iter().map(|r| r.1).collect(),
        mixed_stderr: rows.iter().map(|r| r.2).collect(),
        rho,
    })
}
