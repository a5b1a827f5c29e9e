//! Minimal Dirichlet energy of a path kept within a tube around a Brownian
//! trajectory, and its linear growth rate.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::paths::{sample_path, steps_for, BrownianPath};
use crate::rng::SeedStream;
use crate::stats::{ols_robust, two_sided_p, MeanSe};

/// Stopping tolerance on the relative KKT residual.
pub const DEFAULT_QP_TOL: f64 = 1e-8;
const MAX_ITER: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeSolution {
    /// `Σ |φ_{k+1} - φ_k|² / dt`.
    pub energy: f64,
    /// Row-major `(n + 1) × d` optimizer.
    pub path: Vec<f64>,
    pub d: usize,
    pub dt: f64,
    pub iterations: usize,
    /// Gradient-mapping norm relative to the gradient at `φ = W`.
    pub kkt_residual: f64,
}

impl TubeSolution {
    /// Writes `step,t,w_0..,phi_0..` rows for plotting.
    pub fn write_csv<W: Write>(&self, w: &BrownianPath, out: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(out);
        let d = self.d;
        let mut header = vec!["step".to_string(), "t".to_string()];
        header.extend((0..d).map(|c| format!("w{c}")));
        header.extend((0..d).map(|c| format!("phi{c}")));
        out.write_record(&header)?;
        for k in 0..self.path.len() / d {
            let mut row = vec![k.to_string(), (k as f64 * self.dt).to_string()];
            row.extend(w.point(k).iter().map(|v| v.to_string()));
            row.extend(self.path[k * d..(k + 1) * d].iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn energy(x: &[f64], d: usize, dt: f64) -> f64 {
    let n = x.len() / d - 1;
    let mut e = 0.0;
    for k in 0..n {
        for c in 0..d {
            let u = x[(k + 1) * d + c] - x[k * d + c];
            e += u * u;
        }
    }
    e / dt
}

/// Gradient of the energy in the interior points (ends pinned).
fn gradient(x: &[f64], d: usize, dt: f64, g: &mut [f64]) {
    let n = x.len() / d - 1;
    g.iter_mut().for_each(|v| *v = 0.0);
    for k in 1..n {
        for c in 0..d {
            let i = k * d + c;
            g[i] = 2.0 * (2.0 * x[i] - x[i - d] - x[i + d]) / dt;
        }
    }
}

/// Projects interior points onto the balls `|φ_k - W_k| <= r`.
fn project(x: &mut [f64], w: &[f64], d: usize, r: f64) {
    let n = x.len() / d - 1;
    if r.is_infinite() {
        return;
    }
    for k in 1..n {
        let s = &mut x[k * d..(k + 1) * d];
        let c = &w[k * d..(k + 1) * d];
        let mut r2 = 0.0;
        for j in 0..d {
            let u = s[j] - c[j];
            r2 += u * u;
        }
        if r2 > r * r {
            let f = r / r2.sqrt();
            for j in 0..d {
                s[j] = c[j] + f * (s[j] - c[j]);
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖x - P(x - ∇E(x)/L)‖ · L`.
fn kkt(x: &[f64], w: &[f64], d: usize, dt: f64, r: f64, l: f64, g: &mut [f64], tmp: &mut [f64]) -> f64 {
    gradient(x, d, dt, g);
    for i in 0..x.len() {
        tmp[i] = x[i] - g[i] / l;
    }
    project(tmp, w, d, r);
    let s: f64 = x.iter().zip(tmp.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    s.sqrt() * l
}

/// `min Σ |φ_{k+1} - φ_k|²/dt` subject to `φ_0 = W_0`, `φ_n = W_n` and
/// `|φ_k - W_k| <= δ/2`, by accelerated projected gradient with adaptive
/// restart, started from the projected straight line. `δ = ∞` drops the
/// constraint.
pub fn tube_energy(w: &BrownianPath, delta: f64, tol: f64) -> Result<TubeSolution> {
    if !(delta > 0.0) {
        return arg(format!("tube width must be positive, got {delta}"));
    }
    if !(tol > 0.0) {
        return arg("solver tolerance must be positive");
    }
    let d = w.d();
    let dt = w.dt();
    let n = w.steps();
    let r = delta / 2.0;
    let wp = w.positions();
    let len = wp.len();
    let l = 8.0 / dt;

    let mut g = vec![0.0; len];
    let mut tmp = vec![0.0; len];
    gradient(wp, d, dt, &mut g);
    let scale = norm(&g);

    let (a, b) = (w.start(), w.end());
    let mut x: Vec<f64> = (0..=n)
        .flat_map(|k| {
            let s = k as f64 / n as f64;
            (0..d).map(move |c| a[c] + s * (b[c] - a[c]))
        })
        .collect();
    project(&mut x, wp, d, r);
    let mut y = x.clone();
    let mut x_new = x.clone();
    let mut t = 1.0f64;
    let mut iterations = 0;
    let rel = |res: f64| if scale > 0.0 { res / scale } else { res };
    let mut residual = rel(kkt(&x, wp, d, dt, r, l, &mut g, &mut tmp));
    while residual > tol {
        if iterations >= MAX_ITER {
            return Err(Error::Numerical(format!(
                "tube solver stopped after {iterations} iterations with relative KKT residual {residual:e}"
            )));
        }
        gradient(&y, d, dt, &mut g);
        for i in 0..len {
            x_new[i] = y[i] - g[i] / l;
        }
        project(&mut x_new, wp, d, r);
        // restart when the momentum points uphill
        let uphill: f64 = (0..len).map(|i| (y[i] - x_new[i]) * (x_new[i] - x[i])).sum();
        let t_next = if uphill > 0.0 { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt()) };
        let beta = if uphill > 0.0 { 0.0 } else { (t - 1.0) / t_next };
        for i in 0..len {
            y[i] = x_new[i] + beta * (x_new[i] - x[i]);
        }
        std::mem::swap(&mut x, &mut x_new);
        t = t_next;
        iterations += 1;
        if iterations % 20 == 0 {
            residual = rel(kkt(&x, wp, d, dt, r, l, &mut g, &mut tmp));
        }
    }
    Ok(TubeSolution {
        energy: energy(&x, d, dt),
        path: x,
        d,
        dt,
        iterations,
        kkt_residual: residual,
    })
}

/// Samplewise `Y_{0,t} <= Y_{0,t/2} + Y_{t/2,t}` check for one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubadditivityCheck {
    pub whole: f64,
    pub halves: f64,
}

impl SubadditivityCheck {
    pub fn excess(&self) -> f64 {
        self.whole - self.halves
    }
}

pub fn subadditivity(w: &BrownianPath, delta: f64, tol: f64) -> Result<SubadditivityCheck> {
    let n = w.steps();
    if n % 2 != 0 || n < 2 {
        return arg("subadditivity check needs an even number of steps");
    }
    let whole = tube_energy(w, delta, tol)?.energy;
    let a = tube_energy(&w.slice(0, n / 2)?, delta, tol)?.energy;
    let b = tube_energy(&w.slice(n / 2, n)?, delta, tol)?.energy;
    Ok(SubadditivityCheck { whole, halves: a + b })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kappa2Estimate {
    pub delta: f64,
    pub dt: f64,
    pub t: Vec<f64>,
    /// Mean of `Y_{0,t}/t` per horizon.
    pub rate: Vec<MeanSe>,
    /// Intercept of `Y_{0,t}/t` regressed on `1/t`: the large-`t` plateau.
    pub plateau: f64,
    pub plateau_se: f64,
    /// p-value for a nonzero `1/t` trend.
    pub trend_p: f64,
    pub subadditive_checks: usize,
    /// Largest `Y_{0,t} - Y_{0,t/2} - Y_{t/2,t}` seen (should be `<= 0`).
    pub max_excess: f64,
}

impl Kappa2Estimate {
    pub fn subadditive(&self, slack: f64) -> bool {
        self.max_excess <= slack
    }
}

/// Estimates `κ₂ = lim Y_{0,t}/t` from `reps` paths in `R^d` on each `t`,
/// prefixes of one path per repetition, verifying subadditivity at every
/// horizon along the way.
pub fn kingman_kappa2(
    d: usize,
    delta: f64,
    t_grid: &[f64],
    dt: f64,
    reps: usize,
    stream: SeedStream,
) -> Result<Kappa2Estimate> {
    if t_grid.len() < 3 || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return arg("need an increasing grid of at least three horizons");
    }
    if reps < 2 {
        return arg("need at least two repetitions");
    }
    let steps = t_grid.iter().map(|&t| steps_for(t, dt)).collect::<Result<Vec<_>>>()?;
    let t_max = *t_grid.last().unwrap();
    let paths = (0..reps)
        .map(|i| sample_path(d, &vec![0.0; d], t_max, dt, stream.derive("tube-path", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    kappa2_from_paths(&paths, delta, t_grid, &steps)
}

/// `κ₂` at half the time step on the same paths (Brownian-bridge
/// refinement), for the `dt`-stability check.
pub fn kingman_kappa2_refined(
    d: usize,
    delta: f64,
    t_grid: &[f64],
    dt: f64,
    reps: usize,
    stream: SeedStream,
) -> Result<(Kappa2Estimate, Kappa2Estimate)> {
    let coarse = kingman_kappa2(d, delta, t_grid, dt, reps, stream)?;
    let t_max = *t_grid.last().unwrap();
    let paths = (0..reps)
        .map(|i| {
            let w = sample_path(d, &vec![0.0; d], t_max, dt, stream.derive("tube-path", i as u64))?;
            Ok(w.refine(stream.derive("tube-refine", i as u64)))
        })
        .collect::<Result<Vec<_>>>()?;
    let steps = t_grid.iter().map(|&t| steps_for(t, dt / 2.0)).collect::<Result<Vec<_>>>()?;
    let fine = kappa2_from_paths(&paths, delta, t_grid, &steps)?;
    Ok((coarse, fine))
}

fn kappa2_from_paths(paths: &[BrownianPath], delta: f64, t_grid: &[f64], steps: &[usize]) -> Result<Kappa2Estimate> {
    let dt = paths[0].dt();
    // per path, per horizon: (Y/t, subadditivity excess)
    let rows: Vec<Vec<(f64, f64)>> = paths
        .par_iter()
        .map(|w| {
            t_grid
                .iter()
                .zip(steps)
                .map(|(&t, &n)| {
                    let sub = w.truncate(n)?;
                    if n % 2 == 0 {
                        let c = subadditivity(&sub, delta, DEFAULT_QP_TOL)?;
                        Ok((c.whole / t, c.excess()))
                    } else {
                        Ok((tube_energy(&sub, delta, DEFAULT_QP_TOL)?.energy / t, f64::NEG_INFINITY))
                    }
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let rate: Vec<MeanSe> = (0..t_grid.len())
        .map(|j| MeanSe::from_slice(&rows.iter().map(|r| r[j].0).collect::<Vec<_>>()))
        .collect();
    let checks = rows.iter().flatten().filter(|r| r.1.is_finite()).count();
    let max_excess = rows.iter().flatten().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let x: Vec<f64> = rows.iter().flat_map(|_| t_grid.iter().map(|t| 1.0 / t)).collect();
    let y: Vec<f64> = rows.iter().flat_map(|r| r.iter().map(|v| v.0)).collect();
    let fit = ols_robust(&x, &y);
    Ok(Kappa2Estimate {
        delta,
        dt,
        t: t_grid.to_vec(),
        rate,
        plateau: fit.intercept,
        plateau_se: fit.intercept_se,
        trend_p: two_sided_p(fit.slope, fit.slope_se),
        subadditive_checks: checks,
        max_excess,
    })
}
