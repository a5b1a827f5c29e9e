//! Special functions: unit-sphere areas, Bessel J and its first zero.

use statrs::function::gamma::gamma;
use std::f64::consts::PI;

/// Surface area of the unit sphere `S^{d-1}` in `R^d` (`2` for `d = 1`).
pub fn sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    2.0 * PI.powf(h) / gamma(h)
}

/// Volume of the unit ball in `R^d`.
pub fn ball_volume(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    PI.powf(h) / gamma(h + 1.0)
}

/// Newtonian constant `C_d = Γ(d/2 - 1) / (2 π^{d/2})` of the Green function
/// of `½Δ` in `d >= 3`: `∫_0^∞ p_s(x) ds = C_d |x|^{2-d}`.
pub fn green_constant(d: usize) -> f64 {
    assert!(d >= 3);
    let h = d as f64 / 2.0;
    gamma(h - 1.0) / (2.0 * PI.powf(h))
}

/// Bessel function of the first kind by its power series.
///
/// Accurate to ~1e-13 for `x` up to about `ν + 15`, which covers the first
/// zero for every order used here.
pub fn bessel_j(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0);
    let half = 0.5 * x;
    let q = -half * half;
    let mut term = half.powf(nu) / gamma(nu + 1.0);
    let mut sum = term;
    for k in 1..400 {
        let k = k as f64;
        term *= q / (k * (k + nu));
        sum += term;
        if term.abs() < 1e-17 * sum.abs().max(1e-300) && k > x {
            break;
        }
    }
    sum
}

/// First positive zero of `J_ν`, for `ν > -1`, by sign-change scan and bisection.
pub fn bessel_j_first_zero(nu: f64) -> f64 {
    assert!(nu > -1.0, "order must exceed -1");
    // j_{ν,1} > ν and j_{ν,1} < ν + 1.86 ν^{1/3} + 2.5 for the orders of interest.
    let step = 0.01;
    let mut a = 1e-3;
    let mut fa = bessel_j(nu, a);
    loop {
        let b = a + step;
        let fb = bessel_j(nu, b);
        if fa == 0.0 {
            return a;
        }
        if fa.signum() != fb.signum() {
            return bisect(|x| bessel_j(nu, x), a, b, fa);
        }
        a = b;
        fa = fb;
        assert!(a < nu + 50.0, "no zero found");
    }
}

fn bisect<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, mut fa: f64) -> f64 {
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_integer_bessel_closed_forms() {
        for &x in &[0.3, 1.0, 2.5, 4.0] {
            let j_half = (2.0 / (PI * x)).sqrt() * x.sin();
            let j_mhalf = (2.0 / (PI * x)).sqrt() * x.cos();
            assert!((bessel_j(0.5, x) - j_half).abs() < 1e-13);
            assert!((bessel_j(-0.5, x) - j_mhalf).abs() < 1e-13);
        }
    }

    #[test]
    fn known_zeros() {
        assert!((bessel_j_first_zero(0.5) - PI).abs() < 1e-12);
        assert!((bessel_j_first_zero(-0.5) - PI / 2.0).abs() < 1e-12);
        assert!((bessel_j_first_zero(0.0) - 2.404_825_557_695_773).abs() < 1e-11);
        assert!((bessel_j_first_zero(1.0) - 3.831_705_970_207_512).abs() < 1e-11);
    }

    #[test]
    fn geometry_constants() {
        assert!((sphere_area(3) - 4.0 * PI).abs() < 1e-13);
        assert!((sphere_area(1) - 2.0).abs() < 1e-13);
        assert!((ball_volume(3) - 4.0 / 3.0 * PI).abs() < 1e-13);
        assert!((green_constant(3) - 1.0 / (2.0 * PI)).abs() < 1e-14);
    }
}
