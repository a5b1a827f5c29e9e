//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are printed on success
//! too. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 4 7`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use polymerlab::analysis::{
    beta_for_eta, beta_ref, exponential_occupation, green_potential_radial, occupation_potential_mc,
    paired_sign_decrease, portenko_eta, quantile_increases, second_moment_formula, smoothed_variance,
    ConcaveTestFunction, TestFunction, DEFAULT_ALPHAS,
};
use polymerlab::experiment::{run_experiment, ExperimentConfig};
use polymerlab::gmc::{
    calibrate_delta, kahane_compare, kappa_references, kingman_kappa2_refined, overlap_bound_check, subadditivity,
    FiniteKernelPair, OVERLAP_FRACTION,
};
use polymerlab::paths::{refined_exit_rate, sample_path};
use polymerlab::polymer::{conditional_pair_moments, interpolation_check, DisorderSample, Method, PolymerParams};
use polymerlab::rng::SeedStream;
use polymerlab::stats::{ks_two_sample, quantile, MeanSe, Significance};
use rand::Rng;
use rayon::prelude::*;

const REPS: usize = 1000;
const N: usize = 8;
const HORIZONS: [f64; 3] = [4.0, 8.0, 16.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn base() -> PolymerParams {
    PolymerParams::new(0.0, HORIZONS[2])
}

fn bref() -> f64 {
    static B: OnceLock<f64> = OnceLock::new();
    *B.get_or_init(|| beta_ref(&base()).unwrap())
}

/// `REPS` disorder samples per method on the horizons `{4, 8, 16}`, with a
/// spine, shared by the criteria that look at `Z` itself.
fn dataset(method: Method) -> &'static [DisorderSample] {
    static EXPLICIT: OnceLock<Vec<DisorderSample>> = OnceLock::new();
    static REPLICA: OnceLock<Vec<DisorderSample>> = OnceLock::new();
    let (cell, tag) = match method {
        Method::ExplicitField => (&EXPLICIT, 1),
        Method::ReplicaGaussian => (&REPLICA, 2),
    };
    cell.get_or_init(|| {
        let root = SeedStream::root(20_240).derive("dataset", tag);
        (0..REPS)
            .into_par_iter()
            .map(|r| DisorderSample::draw(&base(), N, method, &HORIZONS, true, root.derive("rep", r as u64)).unwrap())
            .collect()
    })
}

fn column(method: Method, f: impl Fn(&DisorderSample) -> f64 + Sync + Send) -> Vec<f64> {
    dataset(method).par_iter().map(f).collect()
}

fn mean_one() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for method in [Method::ReplicaGaussian, Method::ExplicitField] {
        for mult in [0.25, 0.5] {
            let beta = mult * bref();
            for k in [0, 2] {
                let m = MeanSe::from_slice(&column(method, |s| s.partition(beta, k)));
                let z = m.z_against(1.0);
                worst = worst.max(z.abs());
                lines.push(format!("{method:?} {mult}β_ref t={}: {:.4}±{:.4}", HORIZONS[k], m.mean, m.se));
            }
        }
    }
    outcome(worst < 3.0, format!("max |z| = {worst:.2}; {}", lines.join(", ")))
}

fn second_moment_identity() -> Outcome {
    // The raw pair U-statistic carries the log-normal weight noise, whose
    // variance grows like exp(β² V(0) t) and swamps any feasible sample at
    // t = 16. Integrating the disorder out given the paths is unbiased for
    // the same pair moment, so that is the one held to tolerance.
    let beta = 0.5 * bref();
    let p = base().with_beta(beta);
    let root = SeedStream::root(20_240).derive("dataset", 1);
    let cond: Vec<Vec<f64>> = (0..REPS)
        .into_par_iter()
        .map(|r| conditional_pair_moments(&p, N, &HORIZONS, root.derive("rep", r as u64)).unwrap())
        .collect();
    let mut ok = true;
    let mut lines = Vec::new();
    for k in [0, 2] {
        let t = HORIZONS[k];
        let raw = MeanSe::from_slice(&column(Method::ExplicitField, |s| s.pair_moment(beta, k)));
        let given_paths = MeanSe::from_slice(&cond.iter().map(|c| c[k]).collect::<Vec<_>>());
        let formula = second_moment_formula(&p.with_horizon(t), 20_000, SeedStream::root(2).derive("t", k as u64))
            .unwrap()
            .estimate;
        ok &= given_paths.agrees_with(&formula, 3.0);
        lines.push(format!(
            "t={t}: pairs given paths {:.4}±{:.4} vs formula {:.4}±{:.4} (raw U-statistic {:.4}±{:.4})",
            given_paths.mean, given_paths.se, formula.mean, formula.se, raw.mean, raw.se
        ));
    }
    outcome(ok, lines.join(", "))
}

fn martingale() -> Outcome {
    // nested horizons 4 -> 8 share the field and the path prefixes; at
    // β = 0.5 the weight log-variance over t = 8 stays near one
    let beta = 0.5;
    let reps = 500;
    let data = &dataset(Method::ExplicitField)[..reps];
    let z4: Vec<f64> = data.iter().map(|s| s.partition(beta, 0)).collect();
    let inc: Vec<f64> = data.iter().zip(&z4).map(|(s, a)| s.partition(beta, 1) - a).collect();
    let fit = polymerlab::stats::ols_robust(&z4, &inc);
    let zi = fit.intercept / fit.intercept_se;
    let zs = fit.slope / fit.slope_se;
    outcome(
        zi.abs() < 3.0 && zs.abs() < 3.0,
        format!(
            "Z8 - Z4 on Z4: intercept {:.4}±{:.4} (z {zi:.2}), slope {:.4}±{:.4} (z {zs:.2})",
            fit.intercept, fit.intercept_se, fit.slope, fit.slope_se
        ),
    )
}

fn portenko_chain() -> Outcome {
    let k = base().kernel();
    let beta = beta_for_eta(0.5, &k).unwrap();
    let bound = portenko_eta(beta, &k).unwrap().bound.unwrap();
    let mc = exponential_occupation(&k, beta, 100.0, 0.1, 4000, SeedStream::root(4)).unwrap();
    let mut ok = mc.mean <= bound + 3.0 * mc.se;
    let mut lines = vec![format!("E exp = {:.4}±{:.4} <= {bound:.4}", mc.mean, mc.se)];
    for (i, r) in [0.0, 1.0, 2.5].into_iter().enumerate() {
        let q = green_potential_radial(&k, r).unwrap();
        let occ = occupation_potential_mc(&k, &[r, 0.0, 0.0], 200.0, 0.1, 3000, SeedStream::root(41).derive("pt", i as u64)).unwrap();
        let rel = (occ.mean - q).abs() / q;
        ok &= rel < 0.05;
        lines.push(format!("G({r}) = {q:.5} vs MC {:.5} ({:.1}%)", occ.mean, 100.0 * rel));
    }
    outcome(ok, lines.join(", "))
}

fn weak_signature() -> Outcome {
    let p = base().with_beta(0.5 * bref());
    let s = smoothed_variance(&TestFunction::standard(3), &p, &[1.0, 0.5, 0.25], 2000, SeedStream::root(5)).unwrap();
    let ok = s.decrease_p.iter().all(|&pv| pv < 0.05);
    let est: Vec<String> = s.estimates.iter().map(|m| format!("{:.4}±{:.4}", m.mean, m.se)).collect();
    outcome(ok, format!("variance over eps 1, 1/2, 1/4: {}; decrease p {:?}", est.join(", "), s.decrease_p))
}

fn sci(xs: &[f64]) -> String {
    let v: Vec<String> = xs.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", v.join(", "))
}

fn strong_signature() -> Outcome {
    let beta = 4.0 * bref();
    let m = Method::ExplicitField;
    let plain: Vec<Vec<f64>> = (0..3).map(|k| column(m, |s| s.partition(beta, k))).collect();
    let tilted: Vec<Vec<f64>> = (0..3).map(|k| column(m, |s| s.size_biased(beta, k).unwrap().0)).collect();
    let medians: Vec<f64> = plain.iter().map(|z| quantile(z, 0.5)).collect();
    let deciles: Vec<f64> = tilted.iter().map(|z| quantile(z, 0.1)).collect();
    let p_down: Vec<f64> = (0..2).map(|k| paired_sign_decrease(&plain[k], &plain[k + 1])).collect();
    let med_ok = medians.windows(2).all(|w| w[1] < w[0]) && p_down.iter().all(|&p| p < 0.05);
    let dec_up = quantile_increases(&tilted, 0.1, 0.05);
    outcome(
        med_ok && dec_up.iter().all(|&b| b),
        format!(
            "median Z {} (sign-test p {}); size-biased decile {} (increase {dec_up:?})",
            sci(&medians),
            sci(&p_down),
            sci(&deciles)
        ),
    )
}

fn kahane() -> Outcome {
    let mut rng = SeedStream::root(7).rng();
    let mut ok = true;
    let mut worst = f64::INFINITY;
    for i in 0..20 {
        let ratio = rng.random_range(0.1..0.7);
        let pair = FiniteKernelPair::random_scaled(5, 0.6, ratio, &mut rng).unwrap();
        for (j, &a) in DEFAULT_ALPHAS.iter().enumerate() {
            let f = ConcaveTestFunction::new(a).unwrap();
            let c = kahane_compare(&pair, &f, 10_000, SeedStream::root(70).derive("pair", i).derive("alpha", j as u64)).unwrap();
            ok &= c.ordered(2.0);
            worst = worst.min(c.diff.mean / c.diff.se);
        }
    }
    outcome(ok, format!("60 comparisons, smallest (E f(K) - E f(K̂))/se = {worst:.2}"))
}

fn overlap_bound() -> Outcome {
    let k = base().kernel();
    let c = calibrate_delta(&k, 1e-3).unwrap();
    let threshold = k.value_r(c.delta) >= OVERLAP_FRACTION * k.at_zero() * (1.0 - 1e-9)
        && k.value_r(c.delta + c.grid_step) < OVERLAP_FRACTION * k.at_zero();
    let chk = overlap_bound_check(&k, c.delta, 0.1, 0.01, 20_000, SeedStream::root(8)).unwrap();
    outcome(
        threshold && chk.holds() && chk.survivors >= 20,
        format!(
            "δ = {:.4} (V(δ)/V(0) = {:.4}); {} of {} pairs survive T = 0.1, min overlap/(V(0)T) = {:.4}",
            c.delta, c.ratio, chk.survivors, chk.pairs, chk.min_ratio
        ),
    )
}

fn eigenvalue_rate() -> Outcome {
    let lambda = 2.0 * std::f64::consts::PI.powi(2);
    let grid: Vec<f64> = (1..=14).map(|i| 0.05 + 0.025 * i as f64).collect();
    let fit = refined_exit_rate(3, 0.5, &grid, 20_000, 4e-4, 0.02, 2, SeedStream::root(9)).unwrap();
    let rel = (fit.rate / lambda - 1.0).abs();
    let d1 = kappa_references(1.0, 1, None).unwrap().lambda1;
    let exact = std::f64::consts::PI.powi(2) / 2.0;
    let d1_err = (d1 - exact).abs();
    outcome(
        rel < 0.10 && d1_err < 1e-10,
        format!(
            "d=3 rate {:.3}±{:.3} vs 2π² = {lambda:.3} ({:.1}%, dt {}); d=1 λ₁ error {d1_err:.1e}",
            fit.rate,
            fit.rate_se,
            100.0 * rel,
            fit.dt
        ),
    )
}

fn subadditive_energy() -> Outcome {
    let root = SeedStream::root(10);
    let worst = (0..50)
        .into_par_iter()
        .map(|i| {
            let w = sample_path(3, &[0.0; 3], 2.0, 0.01, root.derive("path", i)).unwrap();
            subadditivity(&w, 1.0, 1e-8).unwrap().excess()
        })
        .reduce(|| f64::NEG_INFINITY, f64::max);
    let (c, f) = kingman_kappa2_refined(3, 1.0, &[1.0, 2.0, 4.0], 0.005, 8, SeedStream::root(11)).unwrap();
    let drift = (c.plateau - f.plateau).abs() / f.plateau;
    outcome(
        worst <= 1e-6 && drift < 0.05,
        format!(
            "max excess {worst:.2e} over 50 paths; κ₂ {:.4} (dt 0.005) vs {:.4} (dt 0.0025), drift {:.1}%",
            c.plateau,
            f.plateau,
            100.0 * drift
        ),
    )
}

fn interpolation() -> Outcome {
    let p = PolymerParams::new(0.6, 4.0);
    let c = interpolation_check(&p, 0.5, N, 400, 400, SeedStream::root(12)).unwrap();
    let ks = ks_two_sample(&c.direct, &c.mixed);
    let sig = Significance::default();
    outcome(
        ks.p_value >= sig.ks,
        format!("KS D = {:.4}, p = {:.3} over {} outer draws", ks.statistic, ks.p_value, c.direct.len()),
    )
}

fn determinism() -> Outcome {
    let configs = [
        "[experiment]\nkind = \"partition\"\nseed = 9\n[grid]\nbeta_ref = [0.5, 2.0]\nt = [1.0, 2.0]\nn = 4\nreps = 12\nmethods = [\"replica-gaussian\", \"explicit-field\"]\n",
        "[experiment]\nkind = \"phase-scan\"\nseed = 9\n[grid]\nbeta_ref = [0.5, 4.0]\nt = [1.0, 2.0, 4.0]\nn = 4\nreps = 24\nmethods = [\"explicit-field\"]\n",
        "[experiment]\nkind = \"smoothed-variance\"\nseed = 9\n[grid]\nbeta_ref = [0.5]\neps = [1.0, 0.5]\nreps = 40\n",
        "[experiment]\nkind = \"kahane\"\nseed = 9\n[grid]\npairs = 2\nalpha = [1.0]\nreps = 10000\n",
        "[experiment]\nkind = \"tube\"\nseed = 9\n[grid]\ndelta = 1.0\nt = [0.5, 1.0, 2.0]\nrate_t = [0.2, 0.3, 0.4, 0.5]\nreps = 3\nspines = 2\npartners = 200\ntube_dt = 0.01\n",
    ];
    let mut ok = true;
    let mut count = 0;
    for text in configs {
        let mut runs = Vec::new();
        for threads in [1, 4] {
            let mut cfg = ExperimentConfig::from_toml_str(text).unwrap();
            cfg.experiment.threads = Some(threads);
            let out = run_experiment(&cfg, None, true).unwrap();
            runs.push(out.records.iter().map(|r| r.value_fields()).collect::<Vec<_>>());
        }
        count += runs[0].len();
        ok &= !runs[0].is_empty() && runs[0] == runs[1];
    }
    outcome(ok, format!("{count} records identical with 1 and 4 workers across 5 kinds"))
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 12] = [
    (1, "mean one", mean_one),
    (2, "second-moment identity", second_moment_identity),
    (3, "martingale regression", martingale),
    (4, "Portenko chain and Green potential", portenko_chain),
    (5, "weak-disorder signature", weak_signature),
    (6, "strong-disorder signature", strong_signature),
    (7, "concave comparison ordering", kahane),
    (8, "overlap lower bound and δ calibration", overlap_bound),
    (9, "exit-time eigenvalue", eigenvalue_rate),
    (10, "subadditive tube energy", subadditive_energy),
    (11, "interpolation identity", interpolation),
    (12, "determinism across workers", determinism),
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let picked: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    // a libtest-style name filter that does not match this suite selects nothing
    let foreign = args.iter().any(|a| a.parse::<u32>().is_err() && !"acceptance".contains(a.as_str()));
    if foreign {
        return;
    }
    let mut failed = 0;
    for (n, name, run) in CRITERIA {
        if !picked.is_empty() && !picked.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {}: {name} ({}) [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
