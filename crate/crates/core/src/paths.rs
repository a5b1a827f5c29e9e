//! Discretized Brownian paths, pair overlaps, proximity times and exit-time
//! survival curves.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::mollifier::CovarianceKernel;
use crate::rng::SeedStream;
use crate::stats::{fit_log_survival, RateFit};

/// Increments are drawn in blocks of this many steps, each from its own
/// stream, so a longer path shares its prefix with a shorter one.
const BLOCK: usize = 256;

/// Number of grid steps `T/dt`, or an argument error if `T` is not an
/// integer multiple of `dt`.
pub fn steps_for(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return arg(format!("time step must be positive, got {dt}"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return arg(format!("horizon must be positive, got {horizon}"));
    }
    let n = (horizon / dt).round();
    if n < 1.0 || (n * dt - horizon).abs() > 1e-9 * horizon {
        return arg(format!(
            "horizon {horizon} is not an integer multiple of dt = {dt}"
        ));
    }
    Ok(n as usize)
}

/// A `d`-dimensional trajectory on the grid `{0, dt, ..., steps·dt}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    d: usize,
    dt: f64,
    steps: usize,
    /// Row-major `(steps + 1) × d`.
    pos: Vec<f64>,
    seed: Option<SeedStream>,
}

/// Draws a Brownian path started at `x` on `[0, horizon]`.
pub fn sample_path(
    d: usize,
    x: &[f64],
    horizon: f64,
    dt: f64,
    stream: SeedStream,
) -> Result<BrownianPath> {
    if d == 0 {
        return arg("dimension must be at least 1");
    }
    if x.len() != d {
        return arg(format!("start point has dimension {}, expected {d}", x.len()));
    }
    let steps = steps_for(horizon, dt)?;
    Ok(BrownianPath::sample_steps(x, steps, dt, stream))
}

impl BrownianPath {
    fn sample_steps(x: &[f64], steps: usize, dt: f64, stream: SeedStream) -> Self {
        let d = x.len();
        let sd = dt.sqrt();
        let mut pos = Vec::with_capacity((steps + 1) * d);
        pos.extend_from_slice(x);
        let mut cur = x.to_vec();
        let mut k = 0;
        let mut block = 0u64;
        while k < steps {
            let mut rng = stream.derive("increments", block).rng();
            let end = (k + BLOCK).min(steps);
            for _ in k..end {
                for c in cur.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *c += sd * z;
                }
                pos.extend_from_slice(&cur);
            }
            k = end;
            block += 1;
        }
        BrownianPath {
            d,
            dt,
            steps,
            pos,
            seed: Some(stream),
        }
    }

    /// The path that sits at `x` for all time.
    pub fn constant(x: &[f64], horizon: f64, dt: f64) -> Result<Self> {
        let steps = steps_for(horizon, dt)?;
        Ok(BrownianPath {
            d: x.len(),
            dt,
            steps,
            pos: x.repeat(steps + 1),
            seed: None,
        })
    }

    /// Builds a path from explicit row-major positions.
    pub fn from_positions(d: usize, dt: f64, positions: Vec<f64>) -> Result<Self> {
        if d == 0 || positions.len() < 2 * d || positions.len() % d != 0 {
            return arg("positions must hold at least two points of dimension d");
        }
        if !(dt > 0.0) {
            return arg("time step must be positive");
        }
        Ok(BrownianPath {
            d,
            dt,
            steps: positions.len() / d - 1,
            pos: positions,
            seed: None,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn seed(&self) -> Option<SeedStream> {
        self.seed
    }

    /// Position at grid index `k`.
    #[inline]
    pub fn point(&self, k: usize) -> &[f64] {
        &self.pos[k * self.d..(k + 1) * self.d]
    }

    pub fn start(&self) -> &[f64] {
        self.point(0)
    }

    pub fn end(&self) -> &[f64] {
        self.point(self.steps)
    }

    /// Flat row-major coordinates.
    pub fn positions(&self) -> &[f64] {
        &self.pos
    }

    /// Sub-path on grid indices `from..=to`, re-timed to start at 0.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.steps {
            return arg(format!(
                "invalid slice {from}..={to} of a {}-step path",
                self.steps
            ));
        }
        Ok(BrownianPath {
            d: self.d,
            dt: self.dt,
            steps: to - from,
            pos: self.pos[from * self.d..(to + 1) * self.d].to_vec(),
            seed: None,
        })
    }

    /// The first `steps` steps.
    pub fn truncate(&self, steps: usize) -> Result<Self> {
        self.slice(0, steps)
    }

    /// The path shifted by a fixed vector.
    pub fn translate(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.d {
            return arg("translation has wrong dimension");
        }
        let mut out = self.clone();
        for p in out.pos.chunks_mut(self.d) {
            for (c, s) in p.iter_mut().zip(v) {
                *c += s;
            }
        }
        out.seed = None;
        Ok(out)
    }

    /// Brownian scaling `s ↦ W_{s ε²} / ε`: same positions scaled by `1/ε` on
    /// a grid with step `dt/ε²`.
    pub fn rescale(&self, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return arg("scale factor must be positive");
        }
        let mut out = self.clone();
        for c in out.pos.iter_mut() {
            *c /= eps;
        }
        out.dt = self.dt / (eps * eps);
        out.seed = None;
        Ok(out)
    }

    /// Halves `dt` by inserting Brownian-bridge midpoints; the original grid
    /// points are kept, so the refined path is coupled to this one.
    pub fn refine(&self, stream: SeedStream) -> Self {
        let d = self.d;
        let sd = (self.dt / 4.0).sqrt();
        let mut pos = Vec::with_capacity((2 * self.steps + 1) * d);
        pos.extend_from_slice(self.point(0));
        let mut rng = stream.derive("bridge", 0).rng();
        for k in 0..self.steps {
            if k % BLOCK == 0 {
                rng = stream.derive("bridge", (k / BLOCK) as u64).rng();
            }
            let a = self.point(k);
            let b = self.point(k + 1);
            for c in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                pos.push(0.5 * (a[c] + b[c]) + sd * z);
            }
            pos.extend_from_slice(b);
        }
        BrownianPath {
            d,
            dt: self.dt / 2.0,
            steps: 2 * self.steps,
            pos,
            seed: None,
        }
    }

    /// Squared increment norms `|W_{k+1} - W_k|²`.
    pub fn increment_sq(&self, k: usize) -> f64 {
        let a = self.point(k);
        let b = self.point(k + 1);
        a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum()
    }

    /// Discrete Dirichlet energy `Σ |ΔW|² / dt`.
    pub fn energy(&self) -> f64 {
        (0..self.steps).map(|k| self.increment_sq(k)).sum::<f64>() / self.dt
    }

    /// Writes `u32 d, f64 dt, f64 T`, then the flat coordinates, little endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.d as u32).to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&self.horizon().to_le_bytes())?;
        for c in &self.pos {
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let d = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let dt = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let horizon = f64::from_le_bytes(b8);
        let steps = steps_for(horizon, dt)?;
        let mut pos = Vec::with_capacity((steps + 1) * d);
        for _ in 0..(steps + 1) * d {
            r.read_exact(&mut b8)?;
            pos.push(f64::from_le_bytes(b8));
        }
        BrownianPath::from_positions(d, dt, pos)
    }

    fn check_grid(&self, other: &BrownianPath) -> Result<()> {
        if self.d != other.d {
            return arg(format!("path dimensions differ: {} vs {}", self.d, other.d));
        }
        if self.steps != other.steps || (self.dt - other.dt).abs() > 1e-12 * self.dt {
            return arg(format!(
                "path grids differ: {} steps of {} vs {} steps of {}",
                self.steps, self.dt, other.steps, other.dt
            ));
        }
        Ok(())
    }

    #[inline]
    fn dist2(&self, other: &BrownianPath, k: usize) -> f64 {
        let a = self.point(k);
        let b = other.point(k);
        let mut s = 0.0;
        for c in 0..self.d {
            let u = a[c] - b[c];
            s += u * u;
        }
        s
    }
}

/// Trapezoidal `∫_0^T V(a_s - b_s) ds` on the shared grid.
pub fn overlap(a: &BrownianPath, b: &BrownianPath, k: &CovarianceKernel) -> Result<f64> {
    a.check_grid(b)?;
    Ok(overlap_upto(a, b, k, &[a.steps])[0])
}

/// Trapezoidal overlaps on `[0, n·dt]` for each `n` in the nondecreasing list
/// `ends` (one pass over the path).
pub fn overlap_upto(a: &BrownianPath, b: &BrownianPath, k: &CovarianceKernel, ends: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ends.len());
    let mut acc = 0.0;
    let mut prev = k.value_r2(a.dist2(b, 0));
    let mut step = 0;
    for &n in ends {
        while step < n {
            let next = k.value_r2(a.dist2(b, step + 1));
            acc += 0.5 * (prev + next);
            prev = next;
            step += 1;
        }
        out.push(acc * a.dt);
    }
    out
}

/// First grid time `t > 0` at which two paths are at least `delta` apart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingTimeSample {
    pub delta: f64,
    /// `None` when the threshold was not reached by the horizon.
    pub value: Option<f64>,
    pub horizon: f64,
}

impl StoppingTimeSample {
    pub fn exceeded_horizon(&self) -> bool {
        self.value.is_none()
    }

    /// `true` when `τ ≥ t` (survival past `t`).
    pub fn survives(&self, t: f64) -> bool {
        self.value.is_none_or(|v| v >= t)
    }
}

pub fn proximity_time(a: &BrownianPath, b: &BrownianPath, delta: f64) -> Result<StoppingTimeSample> {
    a.check_grid(b)?;
    if !(delta > 0.0) {
        return arg("proximity threshold must be positive");
    }
    let d2 = delta * delta;
    let value = (1..=a.steps)
        .find(|&k| a.dist2(b, k) >= d2)
        .map(|k| k as f64 * a.dt);
    Ok(StoppingTimeSample {
        delta,
        value,
        horizon: a.horizon(),
    })
}

/// Monte Carlo survival curve with binomial standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub t: Vec<f64>,
    pub survival: Vec<f64>,
    pub stderr: Vec<f64>,
    pub reps: usize,
    pub dt: f64,
}

impl SurvivalCurve {
    fn from_times(t_grid: &[f64], times: &[f64], dt: f64) -> Self {
        let reps = times.len();
        let survival: Vec<f64> = t_grid
            .iter()
            .map(|&t| times.iter().filter(|&&s| s > t).count() as f64 / reps as f64)
            .collect();
        let stderr = survival
            .iter()
            .map(|p| (p * (1.0 - p) / reps as f64).sqrt())
            .collect();
        SurvivalCurve {
            t: t_grid.to_vec(),
            survival,
            stderr,
            reps,
            dt,
        }
    }

    /// Exponential decay rate over the linear regime (points with at least
    /// 30 survivors, `t >= skip_below`).
    pub fn fit_rate(&self, skip_below: f64) -> RateFit {
        fit_log_survival(&self.t, &self.survival, self.reps, 30, skip_below, 0.98)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "survival", "stderr"])?;
        for i in 0..self.t.len() {
            out.write_record([
                self.t[i].to_string(),
                self.survival[i].to_string(),
                self.stderr[i].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn check_t_grid(t_grid: &[f64]) -> Result<f64> {
    if t_grid.is_empty() {
        return arg("time grid is empty");
    }
    if t_grid.iter().any(|t| !(*t >= 0.0)) || t_grid.windows(2).any(|w| w[1] < w[0]) {
        return arg("time grid must be nonnegative and nondecreasing");
    }
    Ok(*t_grid.last().unwrap())
}

/// `P_0(σ > t)` for the exit time `σ` of a `d`-dimensional Brownian motion
/// from the ball of radius `r`, monitored on the grid of step `dt`.
pub fn exit_time_survival(
    d: usize,
    r: f64,
    t_grid: &[f64],
    reps: usize,
    dt: f64,
    stream: SeedStream,
) -> Result<SurvivalCurve> {
    use rayon::prelude::*;
    if !(r > 0.0) {
        return arg("radius must be positive");
    }
    if reps < 1000 {
        return arg(format!("exit-time survival needs at least 1000 replicas, got {reps}"));
    }
    if d == 0 || !(dt > 0.0) {
        return arg("dimension and time step must be positive");
    }
    let t_max = check_t_grid(t_grid)?;
    let max_steps = (t_max / dt).ceil() as usize + 1;
    let r2 = r * r;
    let sd = dt.sqrt();
    let times: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.derive("exit", i as u64).rng();
            let mut x = vec![0.0; d];
            for k in 1..=max_steps {
                let mut s = 0.0;
                for c in x.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *c += sd * z;
                    s += *c * *c;
                }
                if s >= r2 {
                    return k as f64 * dt;
                }
            }
            f64::INFINITY
        })
        .collect();
    Ok(SurvivalCurve::from_times(t_grid, &times, dt))
}

/// `P(τ_δ ≥ t)` for two independent Brownian paths from the origin.
pub fn proximity_survival(
    d: usize,
    delta: f64,
    t_grid: &[f64],
    reps: usize,
    dt: f64,
    stream: SeedStream,
) -> Result<SurvivalCurve> {
    use rayon::prelude::*;
    let t_max = check_t_grid(t_grid)?;
    let horizon = (t_max / dt).ceil().max(1.0) * dt;
    let origin = vec![0.0; d];
    let times: Result<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|i| {
            let a = sample_path(d, &origin, horizon, dt, stream.derive("pair-a", i as u64))?;
            let b = sample_path(d, &origin, horizon, dt, stream.derive("pair-b", i as u64))?;
            let tau = proximity_time(&a, &b, delta)?;
            Ok(tau.value.unwrap_or(f64::INFINITY))
        })
        .collect();
    // τ ≥ t versus σ > t differ only on the grid points themselves
    let times: Vec<f64> = times?.into_iter().map(|t| t + 0.5 * dt).collect();
    Ok(SurvivalCurve::from_times(t_grid, &times, dt))
}

/// Result of halving `dt` until the fitted exit rate settles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedRate {
    pub rate: f64,
    pub rate_se: f64,
    pub dt: f64,
    /// `(dt, rate)` for every level tried.
    pub history: Vec<(f64, f64)>,
    pub converged: bool,
}

/// Fits the exit-time decay rate, halving `dt` until consecutive rates move
/// by less than `rel_tol` (at most `max_halvings` times).
pub fn refined_exit_rate(
    d: usize,
    r: f64,
    t_grid: &[f64],
    reps: usize,
    dt0: f64,
    rel_tol: f64,
    max_halvings: usize,
    stream: SeedStream,
) -> Result<RefinedRate> {
    let mut dt = dt0;
    let mut history = Vec::new();
    let mut last: Option<RateFit> = None;
    for level in 0..=max_halvings {
        let curve = exit_time_survival(d, r, t_grid, reps, dt, stream.derive("level", level as u64))?;
        let fit = curve.fit_rate(0.0);
        if !fit.determined && fit.rate.is_nan() {
            return Err(Error::Numerical(format!(
                "exit-time survival has too few usable points at dt = {dt}"
            )));
        }
        history.push((dt, fit.rate));
        if let Some(prev) = &last {
            if ((fit.rate - prev.rate) / prev.rate).abs() < rel_tol {
                return Ok(RefinedRate {
                    rate: fit.rate,
                    rate_se: fit.rate_se,
                    dt,
                    history,
                    converged: true,
                });
            }
        }
        last = Some(fit);
        dt /= 2.0;
    }
    let fit = last.unwrap();
    Ok(RefinedRate {
        rate: fit.rate,
        rate_se: fit.rate_se,
        dt: dt * 2.0,
        history,
        converged: false,
    })
}
