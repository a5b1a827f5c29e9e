//! Mollifiers `φ_s(x) = s^{-d} φ(x/s)` and their convolution kernels
//! `V_{a,b} = φ_a ⋆ φ_b`.
//!
//! Two profiles are supported:
//!
//! * [`MollifierKind::CompactBump`]: `c_d exp(-1/(1-|x|²))` on the unit ball.
//!   Its self-convolution has no closed form, so the radial profile of
//!   `φ_1 ⋆ φ_ρ` is tabulated once per `(d, ρ)` on 4096 knots and
//!   interpolated with local cubics. Scaling to `(a, b)` is applied
//!   analytically, which makes `V_ε(x) = ε^{-d} V(x/ε)` hold to rounding.
//! * [`MollifierKind::Gaussian`]: isotropic normal density with standard
//!   deviation `s`; `V_{a,b}` is the normal density with variance `a² + b²`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::quad::GaussLegendre;
use crate::special::sphere_area;

/// Number of knots of a tabulated radial kernel.
pub const TABLE_KNOTS: usize = 4096;

/// Relative cutoff used as the effective support of the Gaussian profile
/// (`φ(r)/φ(0) < 1e-8` beyond it).
const GAUSSIAN_CUTOFF_SIGMAS: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MollifierKind {
    CompactBump,
    Gaussian,
}

impl std::str::FromStr for MollifierKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "compact-bump" | "bump" => Ok(MollifierKind::CompactBump),
            "gaussian" => Ok(MollifierKind::Gaussian),
            other => Err(format!("unknown mollifier kind `{other}`")),
        }
    }
}

/// Even, nonnegative, unit-mass profile at a given scale and dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mollifier {
    pub kind: MollifierKind,
    pub scale: f64,
    pub d: usize,
    #[serde(skip)]
    norm: f64,
}

fn unit_bump_norm(d: usize) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<usize, f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().unwrap().get(&d) {
        return *v;
    }
    let g = GaussLegendre::new(20);
    let radial = g.integrate(
        |r| {
            if r >= 1.0 {
                0.0
            } else {
                (-1.0 / (1.0 - r * r)).exp() * r.powi(d as i32 - 1)
            }
        },
        0.0,
        1.0,
        64,
    );
    let c = 1.0 / (sphere_area(d) * radial);
    cache.lock().unwrap().insert(d, c);
    c
}

/// Unit-scale bump as a function of the squared radius.
#[inline(always)]
fn unit_bump_r2(c: f64, r2: f64) -> f64 {
    if r2 >= 1.0 {
        0.0
    } else {
        c * (-1.0 / (1.0 - r2)).exp()
    }
}

impl Mollifier {
    pub fn new(kind: MollifierKind, scale: f64, d: usize) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return arg(format!("mollifier scale must be positive, got {scale}"));
        }
        if d == 0 {
            return arg("dimension must be at least 1");
        }
        let norm = match kind {
            MollifierKind::CompactBump => unit_bump_norm(d) / scale.powi(d as i32),
            MollifierKind::Gaussian => (2.0 * PI * scale * scale).powf(-(d as f64) / 2.0),
        };
        Ok(Mollifier {
            kind,
            scale,
            d,
            norm,
        })
    }

    /// Unit-scale compact bump in dimension `d`.
    pub fn bump(d: usize) -> Self {
        Self::new(MollifierKind::CompactBump, 1.0, d).expect("valid")
    }

    /// Unit-variance Gaussian in dimension `d`.
    pub fn gaussian(d: usize) -> Self {
        Self::new(MollifierKind::Gaussian, 1.0, d).expect("valid")
    }

    /// Same profile at another scale.
    pub fn rescaled(&self, scale: f64) -> Result<Self> {
        Self::new(self.kind, scale, self.d)
    }

    /// `φ_scale(x)`.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.d {
            return arg(format!(
                "point has dimension {}, mollifier has {}",
                x.len(),
                self.d
            ));
        }
        Ok(self.value_r2(x.iter().map(|v| v * v).sum()))
    }

    /// `φ_scale` as a function of the squared radius.
    #[inline(always)]
    pub fn value_r2(&self, r2: f64) -> f64 {
        let s2 = self.scale * self.scale;
        match self.kind {
            MollifierKind::CompactBump => {
                let u = r2 / s2;
                if u >= 1.0 {
                    0.0
                } else {
                    self.norm * (-1.0 / (1.0 - u)).exp()
                }
            }
            MollifierKind::Gaussian => self.norm * (-0.5 * r2 / s2).exp(),
        }
    }

    /// Radius outside which `φ` vanishes (bump) or is below `1e-8 φ(0)` (Gaussian).
    pub fn support_radius(&self) -> f64 {
        match self.kind {
            MollifierKind::CompactBump => self.scale,
            MollifierKind::Gaussian => GAUSSIAN_CUTOFF_SIGMAS * self.scale,
        }
    }

    /// `V = φ ⋆ φ` at this mollifier's scale.
    pub fn kernel(&self) -> CovarianceKernel {
        CovarianceKernel::new(self, self.scale, self.scale).expect("valid scales")
    }

    /// `∫ φ²`, which equals `V(0)`.
    pub fn l2_norm_sq(&self) -> f64 {
        self.kernel().at_zero()
    }
}

/// How a kernel is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelMethod {
    Analytic,
    TabulatedConvolution,
}

/// Radial profile on a uniform grid over `[0, r_max]`, zero beyond.
#[derive(Debug)]
pub struct RadialTable {
    step: f64,
    r_max: f64,
    values: Vec<f64>,
}

impl RadialTable {
    fn value(&self, r: f64) -> f64 {
        if r >= self.r_max {
            return 0.0;
        }
        let x = r / self.step;
        let i = x.floor() as isize;
        let f = x - i as f64;
        let n = self.values.len() as isize;
        let at = |k: isize| -> f64 {
            if k < 0 {
                self.values[(-k) as usize] // even extension
            } else if k >= n {
                0.0
            } else {
                self.values[k as usize]
            }
        };
        let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
        // 4-point Lagrange cubic on nodes -1, 0, 1, 2
        let w0 = -f * (f - 1.0) * (f - 2.0) / 6.0;
        let w1 = (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0;
        let w2 = -(f + 1.0) * f * (f - 2.0) / 2.0;
        let w3 = (f + 1.0) * f * (f - 1.0) / 6.0;
        (w0 * p0 + w1 * p1 + w2 * p2 + w3 * p3).max(0.0)
    }
}

/// Tabulated `φ_1 ⋆ φ_ρ` for the unit bump, `0 < ρ <= 1`.
fn bump_table(d: usize, rho: f64) -> Arc<RadialTable> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64), Arc<RadialTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (d, rho.to_bits());
    if let Some(t) = cache.lock().unwrap().get(&key) {
        return t.clone();
    }
    let table = Arc::new(build_bump_table(d, rho));
    cache.lock().unwrap().insert(key, table.clone());
    table
}

fn build_bump_table(d: usize, rho: f64) -> RadialTable {
    use rayon::prelude::*;
    let c = unit_bump_norm(d);
    let c_rho = c / rho.powi(d as i32);
    let rho2 = rho * rho;
    let r_max = 1.0 + rho;
    let step = r_max / (TABLE_KNOTS - 1) as f64;
    let g = GaussLegendre::new(16);
    let perp_area = if d >= 2 { sphere_area(d - 1) } else { 0.0 };
    let values: Vec<f64> = (0..TABLE_KNOTS)
        .into_par_iter()
        .map(|i| {
            let r = i as f64 * step;
            if r >= r_max {
                return 0.0;
            }
            let lo = (-1.0f64).max(r - rho);
            let hi = 1.0f64.min(r + rho);
            if hi <= lo {
                return 0.0;
            }
            let along = |y: f64| -> f64 {
                let a2 = y * y;
                let b2 = (y - r) * (y - r);
                if d == 1 {
                    return unit_bump_r2(c, a2) * unit_bump_r2(c_rho, b2 / rho2);
                }
                let cap = (1.0 - a2).min(rho2 - b2);
                if cap <= 0.0 {
                    return 0.0;
                }
                let top = cap.sqrt();
                perp_area
                    * g.integrate(
                        |u| {
                            let u2 = u * u;
                            u.powi(d as i32 - 2)
                                * unit_bump_r2(c, a2 + u2)
                                * unit_bump_r2(c_rho, (b2 + u2) / rho2)
                        },
                        0.0,
                        top,
                        4,
                    )
            };
            // the perpendicular cap switches from one ball to the other here
            let split = if r > 0.0 {
                (1.0 - rho2 + r * r) / (2.0 * r)
            } else {
                f64::NAN
            };
            if split > lo && split < hi {
                g.integrate(along, lo, split, 4) + g.integrate(along, split, hi, 4)
            } else {
                g.integrate(along, lo, hi, 6)
            }
        })
        .collect();
    RadialTable {
        step,
        r_max,
        values,
    }
}

#[derive(Debug, Clone)]
enum Repr {
    Gaussian { var: f64, norm: f64 },
    Table { big: f64, norm: f64, table: Arc<RadialTable> },
}

/// `V_{a,b} = φ_a ⋆ φ_b`, optionally multiplied by a mass factor
/// (`mass = 1` for a genuine convolution kernel).
#[derive(Debug, Clone)]
pub struct CovarianceKernel {
    pub kind: MollifierKind,
    pub d: usize,
    pub scales: (f64, f64),
    pub mass: f64,
    repr: Repr,
}

impl CovarianceKernel {
    pub fn new(base: &Mollifier, a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) {
            return arg(format!("kernel scales must be positive, got ({a}, {b})"));
        }
        let d = base.d;
        let repr = match base.kind {
            MollifierKind::Gaussian => {
                let var = a * a + b * b;
                Repr::Gaussian {
                    var,
                    norm: (2.0 * PI * var).powf(-(d as f64) / 2.0),
                }
            }
            MollifierKind::CompactBump => {
                let big = a.max(b);
                let rho = a.min(b) / big;
                Repr::Table {
                    big,
                    norm: big.powi(-(d as i32)),
                    table: bump_table(d, rho),
                }
            }
        };
        Ok(CovarianceKernel {
            kind: base.kind,
            d,
            scales: (a, b),
            mass: 1.0,
            repr,
        })
    }

    /// The same kernel multiplied by `factor` (unnormalized test kernels).
    pub fn scaled(&self, factor: f64) -> Self {
        let mut k = self.clone();
        k.mass *= factor;
        k
    }

    pub fn method(&self) -> KernelMethod {
        match self.repr {
            Repr::Gaussian { .. } => KernelMethod::Analytic,
            Repr::Table { .. } => KernelMethod::TabulatedConvolution,
        }
    }

    /// `V_{a,b}(x)`.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.d {
            return arg(format!(
                "point has dimension {}, kernel has {}",
                x.len(),
                self.d
            ));
        }
        Ok(self.value_r2(x.iter().map(|v| v * v).sum()))
    }

    /// Value at squared radius `r2`.
    #[inline]
    pub fn value_r2(&self, r2: f64) -> f64 {
        match &self.repr {
            Repr::Gaussian { var, norm } => self.mass * norm * (-0.5 * r2 / var).exp(),
            Repr::Table { big, norm, table } => {
                let r = r2.sqrt() / big;
                if r >= table.r_max {
                    0.0
                } else {
                    self.mass * norm * table.value(r)
                }
            }
        }
    }

    #[inline]
    pub fn value_r(&self, r: f64) -> f64 {
        self.value_r2(r * r)
    }

    /// `V(0)`.
    pub fn at_zero(&self) -> f64 {
        self.value_r2(0.0)
    }

    /// Radius beyond which the kernel vanishes (compact) or is negligible
    /// (Gaussian: 12 standard deviations).
    pub fn support_radius(&self) -> f64 {
        match &self.repr {
            Repr::Gaussian { var, .. } => 12.0 * var.sqrt(),
            Repr::Table { big, table, .. } => big * table.r_max,
        }
    }

    /// `true` when the kernel is exactly zero outside `support_radius`.
    pub fn is_compact(&self) -> bool {
        matches!(self.repr, Repr::Table { .. })
    }

    /// `∫ V dx` by radial quadrature.
    pub fn integral(&self) -> f64 {
        let g = GaussLegendre::new(16);
        let r_max = self.support_radius();
        let area = sphere_area(self.d);
        area * g.integrate(
            |r| self.value_r(r) * r.powi(self.d as i32 - 1),
            0.0,
            r_max,
            256,
        )
    }

    /// Writes `radius,value` rows on `points` equally spaced radii.
    pub fn write_csv<W: Write>(&self, mut out: W, points: usize) -> Result<()> {
        let r_max = self.support_radius();
        writeln!(out, "radius,value")?;
        for i in 0..points {
            let r = r_max * i as f64 / (points.max(2) - 1) as f64;
            writeln!(out, "{r:.10e},{:.12e}", self.value_r(r))?;
        }
        Ok(())
    }

    pub fn export_csv(&self, path: &Path, points: usize) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f), points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn tensor_integral(m: &Mollifier) -> f64 {
        // composite GL over [-R, R]^d, d <= 3
        let g = GaussLegendre::new(16);
        let r = m.support_radius();
        let panels = 8;
        let (nodes, weights): (Vec<f64>, Vec<f64>) = {
            let mut n = Vec::new();
            let mut w = Vec::new();
            let width = 2.0 * r / panels as f64;
            for p in 0..panels {
                let mid = -r + (p as f64 + 0.5) * width;
                for (x, wt) in g.nodes.iter().zip(&g.weights) {
                    n.push(mid + 0.5 * width * x);
                    w.push(0.5 * width * wt);
                }
            }
            (n, w)
        };
        match m.d {
            1 => nodes
                .iter()
                .zip(&weights)
                .map(|(x, w)| w * m.value_r2(x * x))
                .sum(),
            2 => {
                let mut s = 0.0;
                for (x, wx) in nodes.iter().zip(&weights) {
                    for (y, wy) in nodes.iter().zip(&weights) {
                        s += wx * wy * m.value_r2(x * x + y * y);
                    }
                }
                s
            }
            3 => {
                let mut s = 0.0;
                for (x, wx) in nodes.iter().zip(&weights) {
                    for (y, wy) in nodes.iter().zip(&weights) {
                        for (z, wz) in nodes.iter().zip(&weights) {
                            s += wx * wy * wz * m.value_r2(x * x + y * y + z * z);
                        }
                    }
                }
                s
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn unit_mass_by_tensorized_quadrature() {
        for d in 1..=3 {
            for m in [Mollifier::bump(d), Mollifier::gaussian(d)] {
                let s = tensor_integral(&m);
                assert!((s - 1.0).abs() <= 1e-8, "{:?} d={d}: {s}", m.kind);
            }
        }
        let m = Mollifier::bump(3).rescaled(0.5).unwrap();
        assert!((tensor_integral(&m) - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn gaussian_peak() {
        let m = Mollifier::gaussian(3);
        let v = m.value(&[0.0, 0.0, 0.0]).unwrap();
        assert!((v - (2.0 * PI).powf(-1.5)).abs() < 1e-15);
    }

    #[test]
    fn bump_support_and_evenness() {
        let m = Mollifier::bump(3).rescaled(0.7).unwrap();
        assert_eq!(m.value(&[0.7, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(m.value(&[0.5, 0.5, 0.3]).unwrap(), 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for m in [Mollifier::bump(3), Mollifier::gaussian(3)] {
            for _ in 0..100 {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.2..1.2)).collect();
                let y: Vec<f64> = x.iter().map(|v| -v).collect();
                let a = m.value(&x).unwrap();
                assert!(a >= 0.0);
                assert_eq!(a, m.value(&y).unwrap());
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_argument_error() {
        let m = Mollifier::bump(3);
        assert!(m.value(&[0.0, 0.0]).is_err());
        assert!(m.kernel().value(&[0.0]).is_err());
    }

    #[test]
    fn gaussian_kernel_at_zero() {
        let v0 = Mollifier::gaussian(3).kernel().at_zero();
        assert!((v0 - (4.0 * PI).powf(-1.5)).abs() < 1e-15);
        assert!((v0 - 0.022_448_3).abs() < 1e-7);
    }

    #[test]
    fn gaussian_kernel_matches_numerical_convolution() {
        // oracle: 3D convolution of two unit normals by tensor quadrature at x = 0
        let m = Mollifier::gaussian(3);
        let g = GaussLegendre::new(16);
        let one_d = |shift: f64| {
            g.integrate(
                |y| {
                    let a = (-0.5 * y * y).exp();
                    let b = (-0.5 * (y - shift) * (y - shift)).exp();
                    a * b / (2.0 * PI)
                },
                -12.0,
                12.0,
                24,
            )
        };
        let x = [0.3, -0.4, 1.1];
        let oracle: f64 = x.iter().map(|&s| one_d(s)).product();
        let v = m.kernel().value(&x).unwrap();
        assert!((v - oracle).abs() < 1e-12 * oracle.max(1e-3));
    }

    #[test]
    fn kernel_mass_is_one() {
        let g = Mollifier::gaussian(3).kernel();
        assert!((g.integral() - 1.0).abs() < 1e-8);
        let b = Mollifier::bump(3).kernel();
        assert!((b.integral() - 1.0).abs() < 1e-6, "{}", b.integral());
        let half = Mollifier::bump(3).rescaled(0.5).unwrap().kernel();
        assert!((half.integral() - 1.0).abs() < 1e-6);
        let mixed = CovarianceKernel::new(&Mollifier::bump(3), 1.0, 0.5).unwrap();
        assert!((mixed.integral() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bump_kernel_matches_l2_norm_and_support() {
        let m = Mollifier::bump(3);
        let k = m.kernel();
        // V(0) = ∫φ² by radial quadrature of φ²
        let g = GaussLegendre::new(20);
        let l2 = sphere_area(3) * g.integrate(|r| m.value_r2(r * r).powi(2) * r * r, 0.0, 1.0, 64);
        assert!((k.at_zero() - l2).abs() < 1e-8 * l2, "{} vs {l2}", k.at_zero());
        assert_eq!(k.value(&[2.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(k.value(&[1.5, 1.5, 0.0]).unwrap(), 0.0);
        assert_eq!(k.method(), KernelMethod::TabulatedConvolution);
    }

    #[test]
    fn scaling_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for base in [Mollifier::bump(3), Mollifier::gaussian(3)] {
            let v = base.kernel();
            for eps in [1.0, 0.5, 0.25] {
                let ve = base.rescaled(eps).unwrap().kernel();
                let tol = 1e-6 * eps.powi(-3) * v.at_zero();
                for _ in 0..50 {
                    let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0) * eps).collect();
                    let xs: Vec<f64> = x.iter().map(|c| c / eps).collect();
                    let lhs = ve.value(&x).unwrap();
                    let rhs = eps.powi(-3) * v.value(&xs).unwrap();
                    assert!((lhs - rhs).abs() <= tol);
                }
                assert!((ve.at_zero() - eps.powi(-3) * v.at_zero()).abs() <= tol);
            }
        }
    }

    #[test]
    fn mixed_scale_kernel_is_symmetric() {
        let m = Mollifier::bump(3);
        let ab = CovarianceKernel::new(&m, 1.0, 0.5).unwrap();
        let ba = CovarianceKernel::new(&m, 0.5, 1.0).unwrap();
        for r in [0.0, 0.3, 0.9, 1.4, 1.6] {
            assert_eq!(ab.value_r(r), ba.value_r(r));
        }
        let g = Mollifier::gaussian(3);
        let ab = CovarianceKernel::new(&g, 1.0, 0.5).unwrap();
        let ba = CovarianceKernel::new(&g, 0.5, 1.0).unwrap();
        assert_eq!(ab.value_r(0.7), ba.value_r(0.7));
    }

    #[test]
    fn kernel_gram_matrices_are_psd() {
        use nalgebra::DMatrix;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for k in [Mollifier::bump(3).kernel(), Mollifier::gaussian(3).kernel()] {
            for _ in 0..20 {
                let pts: Vec<Vec<f64>> = (0..8)
                    .map(|_| (0..3).map(|_| rng.random_range(-1.5..1.5)).collect())
                    .collect();
                let g = DMatrix::from_fn(8, 8, |i, j| {
                    let r2: f64 = (0..3).map(|c| (pts[i][c] - pts[j][c]).powi(2)).sum();
                    k.value_r2(r2)
                });
                let min = g.symmetric_eigenvalues().min();
                assert!(min >= -1e-8 * k.at_zero(), "min eigenvalue {min}");
            }
        }
    }

    #[test]
    fn kernel_is_radially_decreasing() {
        let k = Mollifier::bump(3).kernel();
        let mut prev = k.at_zero();
        for i in 1..200 {
            let v = k.value_r(i as f64 * 0.01);
            assert!(v <= prev + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn csv_export() {
        let k = Mollifier::bump(3).kernel();
        let mut buf = Vec::new();
        k.write_csv(&mut buf, 5).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 6);
        assert!(s.starts_with("radius,value"));
    }
}
