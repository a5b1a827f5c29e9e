//! Finite-dimensional chaos comparisons, the tube energy and proximity
//! rates.

mod kappa;
mod tube;

pub use kappa::*;
pub use tube::*;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::ConcaveTestFunction;
use crate::error::{arg, Result};
use crate::rng::SeedStream;
use crate::stats::MeanSe;

const PSD_TOL: f64 = 1e-10;

/// Two covariance matrices with `K <= K̂` entrywise and weights `p` over the
/// atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteKernelPair {
    k: DMatrix<f64>,
    k_hat: DMatrix<f64>,
    p: Vec<f64>,
}

fn check_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let scale = m[(i, j)].abs().max(m[(j, i)].abs()).max(1.0);
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return arg(format!("{name} is not symmetric at ({i}, {j})"));
            }
        }
    }
    let min = m.clone().symmetric_eigenvalues().min();
    if min < -PSD_TOL {
        return arg(format!("{name} is not positive semidefinite (eigenvalue {min:e})"));
    }
    Ok(())
}

impl FiniteKernelPair {
    pub fn new(k: DMatrix<f64>, k_hat: DMatrix<f64>, p: Vec<f64>) -> Result<Self> {
        let n = p.len();
        if n == 0 {
            return arg("need at least one atom");
        }
        if k.shape() != (n, n) || k_hat.shape() != (n, n) {
            return arg(format!("kernels must be {n}×{n} to match the weights"));
        }
        if p.iter().any(|w| !(*w >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return arg("weights must be a probability vector");
        }
        check_psd(&k, "K")?;
        check_psd(&k_hat, "K̂")?;
        for i in 0..n {
            for j in 0..n {
                if k[(i, j)] > k_hat[(i, j)] {
                    return arg(format!(
                        "domination fails at entry ({i}, {j}): K = {} > K̂ = {}",
                        k[(i, j)],
                        k_hat[(i, j)]
                    ));
                }
            }
        }
        Ok(FiniteKernelPair { k, k_hat, p })
    }

    /// `K̂ = A Aᵀ` with `A` uniform on `[0, spread]` entrywise (so `K̂ >= 0`)
    /// and `K = ratio · K̂`, uniform weights.
    pub fn random_scaled<R: Rng + ?Sized>(n: usize, spread: f64, ratio: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return arg("ratio must lie in [0, 1]");
        }
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * spread);
        let k_hat = &a * a.transpose();
        let k = &k_hat * ratio;
        Self::new(k, k_hat, vec![1.0 / n as f64; n])
    }

    pub fn n(&self) -> usize {
        self.p.len()
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn k_hat(&self) -> &DMatrix<f64> {
        &self.k_hat
    }

    pub fn weights(&self) -> &[f64] {
        &self.p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KahaneComparison {
    pub alpha: f64,
    /// `E f(Σ p_i e^{X_i - K_ii/2})`, `X ~ N(0, K)`.
    pub mean_k: MeanSe,
    /// The same with `K̂`.
    pub mean_k_hat: MeanSe,
    /// Paired difference `mean_k - mean_k_hat` (common normals).
    pub diff: MeanSe,
}

impl KahaneComparison {
    /// The smaller kernel gives the larger mean, allowing `k` standard errors.
    pub fn ordered(&self, k: f64) -> bool {
        self.diff.mean >= -k * self.diff.se
    }
}

/// Symmetric square root `Q diag(√λ⁺) Qᵀ`, exact for singular matrices.
fn psd_root(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let sq = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&sq) * e.eigenvectors.transpose()
}

fn apply(root: &DMatrix<f64>, z: &[f64]) -> Vec<f64> {
    let n = z.len();
    (0..n).map(|i| (0..n).map(|j| root[(i, j)] * z[j]).sum()).collect()
}

fn chaos_mass(x: &[f64], diag: &[f64], p: &[f64]) -> f64 {
    x.iter()
        .zip(diag)
        .zip(p)
        .map(|((x, v), w)| w * (x - 0.5 * v).exp())
        .sum()
}

/// Monte Carlo of both sides of the concave comparison inequality. Both arms
/// are driven by the same standard normals.
pub fn kahane_compare(
    pair: &FiniteKernelPair,
    f: &ConcaveTestFunction,
    reps: usize,
    stream: SeedStream,
) -> Result<KahaneComparison> {
    if reps < 10_000 {
        return arg(format!("the comparison needs at least 10^4 repetitions, got {reps}"));
    }
    let n = pair.n();
    let lk = psd_root(&pair.k);
    let lh = psd_root(&pair.k_hat);
    let dk: Vec<f64> = pair.k.diagonal().iter().copied().collect();
    let dh: Vec<f64> = pair.k_hat.diagonal().iter().copied().collect();
    const CHUNK: usize = 1000;
    let chunks = reps.div_ceil(CHUNK);
    let rows: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = stream.derive("kahane", c as u64).rng();
            let len = CHUNK.min(reps - c * CHUNK);
            let mut out = Vec::with_capacity(len);
            let mut z = vec![0.0; n];
            for _ in 0..len {
                for v in z.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let a = f.eval(chaos_mass(&apply(&lk, &z), &dk, &pair.p));
                let b = f.eval(chaos_mass(&apply(&lh, &z), &dh, &pair.p));
                out.push((a, b));
            }
            out
        })
        .collect();
    let a: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let d: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    Ok(KahaneComparison {
        alpha: f.alpha(),
        mean_k: MeanSe::from_slice(&a),
        mean_k_hat: MeanSe::from_slice(&b),
        diff: MeanSe::from_slice(&d),
    })
}
