//! Gaussian disorder: an explicit space-time white noise on a lattice and the
//! replica-Gaussian sampler that draws Wiener integrals directly from their
//! conditional covariance.
//!
//! The explicit field lives on the global lattice `x = h·i`, time steps of
//! length `dt`. The increment of cell `(step, i)` is
//! `sqrt(h^d dt) · Z(step, i)` where `Z` is a counter-based standard normal
//! keyed by the field's seed stream. Nothing is stored: any cell can be
//! regenerated on demand, so growing the horizon leaves earlier increments
//! untouched and two fields built from the same stream agree cell by cell.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::mollifier::{CovarianceKernel, Mollifier};
use crate::paths::{overlap, steps_for, BrownianPath};
use crate::rng::{cell_hash, cell_normal, extend_hash, normal_from_hash, SeedStream};

/// Default cap on the bytes of one materialized time slab.
pub const DEFAULT_MAX_BYTES: u64 = 1 << 30;

const MAX_DIM: usize = 8;

/// Axis-aligned box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl FieldBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return arg("box bounds must have equal, nonzero dimension");
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return arg("box lower bounds must not exceed upper bounds");
        }
        Ok(FieldBox { lo, hi })
    }

    /// Bounding box of the paths, widened by `margin` on every side.
    pub fn covering(paths: &[BrownianPath], margin: f64) -> Result<Self> {
        let Some(first) = paths.first() else {
            return arg("at least one path is required");
        };
        let d = first.d();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for p in paths {
            if p.d() != d {
                return arg("paths have different dimensions");
            }
            for x in p.positions().chunks(d) {
                for c in 0..d {
                    lo[c] = lo[c].min(x[c]);
                    hi[c] = hi[c].max(x[c]);
                }
            }
        }
        for c in 0..d {
            lo[c] -= margin;
            hi[c] += margin;
        }
        FieldBox::new(lo, hi)
    }

    fn contains_with_margin(&self, x: &[f64], margin: f64) -> bool {
        x.iter()
            .enumerate()
            .all(|(c, v)| *v - margin >= self.lo[c] && *v + margin <= self.hi[c])
    }
}

/// A discretized space-time white noise realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseField {
    pub d: usize,
    pub h: f64,
    pub dt: f64,
    pub steps: usize,
    pub bounds: FieldBox,
    pub seed: SeedStream,
    /// When set, step `k` reads the increments of step `steps - 1 - k`.
    pub reversed: bool,
    key: u64,
}

/// Builds a field on `bounds` with spacing `h` over `[0, horizon]`.
///
/// Fails with a resource error when one materialized time slab of the box
/// would exceed `max_bytes`.
pub fn build_noise_field(
    bounds: FieldBox,
    h: f64,
    horizon: f64,
    dt: f64,
    stream: SeedStream,
    max_bytes: u64,
) -> Result<NoiseField> {
    if !(h > 0.0 && h.is_finite()) {
        return arg(format!("grid spacing must be positive, got {h}"));
    }
    let d = bounds.lo.len();
    if d > MAX_DIM {
        return arg(format!("explicit fields support d <= {MAX_DIM}"));
    }
    let steps = steps_for(horizon, dt)?;
    let field = NoiseField {
        d,
        h,
        dt,
        steps,
        bounds,
        seed: stream,
        reversed: false,
        key: stream.derive("noise", 0).key(),
    };
    let required = field.slab_bytes();
    if required > max_bytes {
        return Err(Error::Resource {
            what: "noise-field time slab".into(),
            required,
            cap: max_bytes,
        });
    }
    Ok(field)
}

/// `φ` tabulated against the squared radius, linearly interpolated.
pub(crate) struct PhiTable {
    inv_du: f64,
    r2_max: f64,
    values: Vec<f64>,
}

impl PhiTable {
    const KNOTS: usize = 1 << 12;

    pub(crate) fn new(m: &Mollifier) -> Self {
        let r2_max = m.support_radius().powi(2);
        let du = r2_max / (Self::KNOTS - 1) as f64;
        let mut values: Vec<f64> = (0..Self::KNOTS).map(|i| m.value_r2(i as f64 * du)).collect();
        values.push(0.0);
        PhiTable {
            inv_du: 1.0 / du,
            r2_max,
            values,
        }
    }

    #[inline(always)]
    pub(crate) fn value_r2(&self, r2: f64) -> f64 {
        if r2 >= self.r2_max {
            return 0.0;
        }
        let x = r2 * self.inv_du;
        let i = x as usize;
        let f = x - i as f64;
        let a = self.values[i];
        a + f * (self.values[i + 1] - a)
    }
}

/// Wiener integral `M` of the field along one path, with its exact
/// conditional variance `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WienerIntegralSample {
    pub value: f64,
    /// `Σ φ² h^d dt` over the cells used: the conditional variance of `value`.
    pub quad_var: f64,
    pub horizon: f64,
}

impl NoiseField {
    /// Lattice index range of the box along each axis.
    fn index_ranges(&self) -> Vec<(i64, i64)> {
        (0..self.d)
            .map(|c| {
                (
                    (self.bounds.lo[c] / self.h).ceil() as i64,
                    (self.bounds.hi[c] / self.h).floor() as i64,
                )
            })
            .collect()
    }

    pub fn cells_per_slab(&self) -> u64 {
        self.index_ranges()
            .iter()
            .map(|(a, b)| (b - a + 1).max(0) as u64)
            .product()
    }

    pub fn slab_bytes(&self) -> u64 {
        self.cells_per_slab().saturating_mul(8)
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    /// Standard deviation of one cell increment, `sqrt(h^d dt)`.
    pub fn cell_sd(&self) -> f64 {
        (self.h.powi(self.d as i32) * self.dt).sqrt()
    }

    /// The same noise over a longer (or shorter) horizon. Increments on the
    /// common time range are identical.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        let mut f = self.clone();
        f.steps = steps_for(horizon, self.dt)?;
        Ok(f)
    }

    /// The same increments read in reverse time order.
    pub fn time_reversed(&self) -> Self {
        let mut f = self.clone();
        f.reversed = !f.reversed;
        f
    }

    #[inline]
    fn source_step(&self, k: usize) -> i64 {
        if self.reversed {
            (self.steps - 1 - k) as i64
        } else {
            k as i64
        }
    }

    /// Standard-normal draw behind cell `idx` at step `k`.
    #[inline]
    fn unit(&self, k: usize, idx: &[i64]) -> f64 {
        let mut coords = [0i64; MAX_DIM + 1];
        coords[0] = self.source_step(k);
        coords[1..=idx.len()].copy_from_slice(idx);
        cell_normal(self.key, &coords[..=idx.len()])
    }

    /// Increment of cell `idx` during step `k`.
    pub fn increment(&self, k: usize, idx: &[i64]) -> f64 {
        self.cell_sd() * self.unit(k, idx)
    }

    /// All increments of step `k` over the box, in row-major lattice order.
    pub fn slab(&self, k: usize) -> Result<Vec<f64>> {
        if k >= self.steps {
            return arg(format!("step {k} is beyond the field horizon"));
        }
        let ranges = self.index_ranges();
        let mut out = Vec::with_capacity(self.cells_per_slab() as usize);
        let mut idx: Vec<i64> = ranges.iter().map(|r| r.0).collect();
        if ranges.iter().any(|(a, b)| b < a) {
            return Ok(out);
        }
        let sd = self.cell_sd();
        loop {
            out.push(sd * self.unit(k, &idx));
            let mut c = self.d;
            loop {
                if c == 0 {
                    return Ok(out);
                }
                c -= 1;
                idx[c] += 1;
                if idx[c] <= ranges[c].1 {
                    break;
                }
                idx[c] = ranges[c].0;
            }
        }
    }

    /// Calls `f(idx, r2, row_hash)` once per lattice row (all axes but the
    /// last fixed) that meets the ball of `radius` around `center`; `r2` is
    /// the squared distance over the fixed axes and `row_hash` the cell hash
    /// prefix for step `k`.
    fn for_rows_near<F: FnMut(&[i64], f64, u64)>(&self, k: usize, center: &[f64], radius: f64, f: &mut F) {
        let mut idx = [0i64; MAX_DIM];
        let prefix = cell_hash(self.key, &[self.source_step(k)]);
        self.visit_axis(0, center, radius * radius, 0.0, prefix, &mut idx, f);
    }

    #[allow(clippy::too_many_arguments)]
    fn visit_axis<F: FnMut(&[i64], f64, u64)>(
        &self,
        axis: usize,
        center: &[f64],
        r2_max: f64,
        acc: f64,
        hash: u64,
        idx: &mut [i64; MAX_DIM],
        f: &mut F,
    ) {
        if axis + 1 == self.d {
            f(&idx[..axis], acc, hash);
            return;
        }
        let rem = (r2_max - acc).sqrt();
        let c = center[axis];
        let lo = ((c - rem) / self.h).ceil() as i64;
        let hi = ((c + rem) / self.h).floor() as i64;
        for i in lo..=hi {
            let x = i as f64 * self.h - c;
            let r2 = acc + x * x;
            if r2 >= r2_max {
                continue;
            }
            idx[axis] = i;
            self.visit_axis(axis + 1, center, r2_max, r2, extend_hash(hash, i), idx, f);
        }
    }

    /// Calls `f(idx_last, r2, unit_normal)` for every lattice cell strictly
    /// within `radius` of `center` at step `k`.
    #[inline]
    fn sweep<F: FnMut(&[i64], i64, f64, f64)>(&self, k: usize, center: &[f64], radius: f64, f: &mut F) {
        let r2_max = radius * radius;
        let last = self.d - 1;
        let c = center[last];
        let h = self.h;
        self.for_rows_near(k, center, radius, &mut |idx, acc, row| {
            let rem = (r2_max - acc).sqrt();
            let lo = ((c - rem) / h).ceil() as i64;
            let hi = ((c + rem) / h).floor() as i64;
            for i in lo..=hi {
                let x = i as f64 * h - c;
                let r2 = acc + x * x;
                if r2 >= r2_max {
                    continue;
                }
                f(idx, i, r2, normal_from_hash(extend_hash(row, i)));
            }
        });
    }

    /// Path grid index used during field step `k`: the path point nearest to
    /// the step midpoint (left point when the grids coincide).
    #[inline]
    fn path_index(k: usize, ratio: usize) -> usize {
        if ratio == 1 {
            k
        } else {
            (2 * k + 1 + ratio) / (2 * ratio)
        }
    }

    fn check_path(&self, w: &BrownianPath, m: &Mollifier, steps: usize) -> Result<usize> {
        if w.d() != self.d || m.d != self.d {
            return arg("path, mollifier and field dimensions must agree");
        }
        let ratio = w.dt() / self.dt;
        let r = ratio.round();
        if r < 1.0 || (ratio - r).abs() > 1e-9 * ratio {
            return arg(format!(
                "path step {} is not a multiple of the field step {}",
                w.dt(),
                self.dt
            ));
        }
        let r = r as usize;
        if steps > self.steps {
            return arg("requested horizon exceeds the field horizon");
        }
        if steps > 0 && Self::path_index(steps - 1, r) > w.steps() {
            return arg("path is shorter than the requested horizon");
        }
        let margin = m.support_radius();
        for k in 0..steps {
            if !self.bounds.contains_with_margin(w.point(Self::path_index(k, r)), margin) {
                return Err(Error::Coverage {
                    step: k,
                    time: k as f64 * self.dt,
                });
            }
        }
        Ok(r)
    }

    /// `(M, q)` along `w` on `[0, n·dt]` for every `n` in the nondecreasing
    /// list `ends` (field steps).
    ///
    /// With a path step of twice the field step, the path is held at its
    /// nearest grid point, so the conditional covariance of two integrals is
    /// the trapezoid rule for the overlap on the path grid.
    pub fn integrate_upto(
        &self,
        w: &BrownianPath,
        m: &Mollifier,
        ends: &[usize],
    ) -> Result<Vec<WienerIntegralSample>> {
        let last = ends.last().copied().unwrap_or(0);
        if ends.windows(2).any(|e| e[1] < e[0]) {
            return arg("horizons must be nondecreasing");
        }
        let ratio = self.check_path(w, m, last)?;
        let table = PhiTable::new(m);
        let radius = m.support_radius();
        let sd = self.cell_sd();
        let hd_dt = self.h.powi(self.d as i32) * self.dt;
        let mut out = Vec::with_capacity(ends.len());
        let (mut big_m, mut q) = (0.0, 0.0);
        let mut k = 0;
        for &n in ends {
            while k < n {
                let center = w.point(Self::path_index(k, ratio));
                let (mut sm, mut sq) = (0.0, 0.0);
                self.sweep(k, center, radius, &mut |_, _, r2, z| {
                    let phi = table.value_r2(r2);
                    sm += phi * z;
                    sq += phi * phi;
                });
                big_m += sd * sm;
                q += hd_dt * sq;
                k += 1;
            }
            out.push(WienerIntegralSample {
                value: big_m,
                quad_var: q,
                horizon: n as f64 * self.dt,
            });
        }
        Ok(out)
    }

    /// Exact conditional covariance of the field's Wiener integrals along
    /// `paths` over the first `steps` field steps:
    /// `Σ_ij = Σ_k Σ_cells φ(x - W^i_k) φ(x - W^j_k) h^d dt`.
    pub fn conditional_covariance(
        &self,
        paths: &[BrownianPath],
        m: &Mollifier,
        steps: usize,
    ) -> Result<DMatrix<f64>> {
        let ratios: Vec<usize> = paths
            .iter()
            .map(|p| self.check_path(p, m, steps))
            .collect::<Result<_>>()?;
        let n = paths.len();
        let table = PhiTable::new(m);
        let radius = m.support_radius();
        let hd_dt = self.h.powi(self.d as i32) * self.dt;
        let mut g = DMatrix::zeros(n, n);
        for k in 0..steps {
            for i in 0..n {
                let ci = paths[i].point(Self::path_index(k, ratios[i]));
                for j in i..n {
                    let cj = paths[j].point(Self::path_index(k, ratios[j]));
                    let sep2: f64 = ci.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum();
                    if sep2 >= 4.0 * radius * radius {
                        continue;
                    }
                    let mut s = 0.0;
                    let last = self.d - 1;
                    self.sweep(k, ci, radius, &mut |idx, i_last, r2, _| {
                        let mut rj = 0.0;
                        for c in 0..last {
                            let u = idx[c] as f64 * self.h - cj[c];
                            rj += u * u;
                        }
                        let u = i_last as f64 * self.h - cj[last];
                        rj += u * u;
                        s += table.value_r2(r2) * table.value_r2(rj);
                    });
                    g[(i, j)] += hd_dt * s;
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g[(i, j)] = g[(j, i)];
            }
        }
        Ok(g)
    }
}

impl NoiseField {
    /// Conditional covariances `Σ(a, b_j)` of the field integrals along `a`
    /// and each of `others`, over `[0, n·dt]` for every `n` in `ends`.
    /// Returned as `[end][j]`.
    pub fn cross_covariance_upto(
        &self,
        a: &BrownianPath,
        others: &[BrownianPath],
        m: &Mollifier,
        ends: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        if ends.windows(2).any(|e| e[1] < e[0]) {
            return arg("horizons must be nondecreasing");
        }
        let last_end = ends.last().copied().unwrap_or(0);
        let ra = self.check_path(a, m, last_end)?;
        let ratios: Vec<usize> = others
            .iter()
            .map(|p| self.check_path(p, m, last_end))
            .collect::<Result<_>>()?;
        let table = PhiTable::new(m);
        let radius = m.support_radius();
        let hd_dt = self.h.powi(self.d as i32) * self.dt;
        let last = self.d - 1;
        let mut acc = vec![0.0; others.len()];
        let mut out = Vec::with_capacity(ends.len());
        let mut k = 0;
        for &n in ends {
            while k < n {
                let ca = a.point(Self::path_index(k, ra));
                for (j, b) in others.iter().enumerate() {
                    let cb = b.point(Self::path_index(k, ratios[j]));
                    let sep2: f64 = ca.iter().zip(cb).map(|(x, y)| (x - y) * (x - y)).sum();
                    if sep2 >= 4.0 * radius * radius {
                        continue;
                    }
                    if sep2 == 0.0 {
                        let mut s = 0.0;
                        self.sweep(k, ca, radius, &mut |_, _, r2, _| {
                            let p = table.value_r2(r2);
                            s += p * p;
                        });
                        acc[j] += hd_dt * s;
                        continue;
                    }
                    let mut s = 0.0;
                    self.sweep(k, ca, radius, &mut |idx, i_last, r2, _| {
                        let mut rb = 0.0;
                        for c in 0..last {
                            let u = idx[c] as f64 * self.h - cb[c];
                            rb += u * u;
                        }
                        let u = i_last as f64 * self.h - cb[last];
                        rb += u * u;
                        s += table.value_r2(r2) * table.value_r2(rb);
                    });
                    acc[j] += hd_dt * s;
                }
                k += 1;
            }
            out.push(acc.clone());
        }
        Ok(out)
    }
}

/// `M` along `w` over the whole field horizon.
pub fn wiener_integral(field: &NoiseField, w: &BrownianPath, m: &Mollifier) -> Result<WienerIntegralSample> {
    Ok(field.integrate_upto(w, m, &[field.steps])?[0])
}

/// Lower-triangular factor of a covariance matrix, ready for repeated draws.
#[derive(Debug, Clone)]
pub struct CholeskySampler {
    lower: DMatrix<f64>,
    /// Diagonal jitter that was needed (0 when none).
    pub jitter: f64,
}

impl CholeskySampler {
    /// Factorizes `sigma`, adding `1e-12·scale` to the diagonal and doubling
    /// it up to six times if the plain factorization fails.
    pub fn new(sigma: &DMatrix<f64>, scale: f64) -> Result<Self> {
        if sigma.nrows() != sigma.ncols() || sigma.nrows() == 0 {
            return arg("covariance must be a nonempty square matrix");
        }
        if let Some(c) = sigma.clone().cholesky() {
            return Ok(CholeskySampler {
                lower: c.unpack(),
                jitter: 0.0,
            });
        }
        let n = sigma.nrows();
        let mut jitter = 1e-12 * scale.max(f64::MIN_POSITIVE);
        for _ in 0..=6 {
            let m = sigma + DMatrix::identity(n, n) * jitter;
            if let Some(c) = m.cholesky() {
                debug!("covariance factorized with jitter {jitter:e}");
                return Ok(CholeskySampler {
                    lower: c.unpack(),
                    jitter,
                });
            }
            jitter *= 2.0;
        }
        let min_eigenvalue = sigma.clone().symmetric_eigenvalues().min();
        Err(Error::Factorization {
            jitter: jitter / 2.0,
            min_eigenvalue,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// `L z` for a given standard normal vector `z`.
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| (0..=i).map(|j| self.lower[(i, j)] * z[j]).sum())
            .collect()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.lower * z).iter().copied().collect()
    }
}

/// Overlap matrix `Σ_ij = overlap(W^i, W^j)`.
pub fn overlap_matrix(paths: &[BrownianPath], k: &CovarianceKernel) -> Result<DMatrix<f64>> {
    let n = paths.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = overlap(&paths[i], &paths[j], k)?;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// One joint draw of the Wiener integrals along `paths`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaDraw {
    pub values: Vec<f64>,
    pub jitter: f64,
}

/// Draws `(M_i)` jointly Gaussian with covariance given by the pairwise
/// overlaps.
pub fn replica_gaussian_sample(
    paths: &[BrownianPath],
    k: &CovarianceKernel,
    stream: SeedStream,
) -> Result<ReplicaDraw> {
    if paths.is_empty() {
        return arg("at least one path is required");
    }
    let sigma = overlap_matrix(paths, k)?;
    let sampler = CholeskySampler::new(&sigma, k.at_zero() * paths[0].horizon())?;
    let values = sampler.draw(&mut stream.derive("replica-gaussian", 0).rng());
    Ok(ReplicaDraw {
        values,
        jitter: sampler.jitter,
    })
}
