//! Executes the pipeline of each experiment kind over its parameter grid.
//!
//! Jobs run one after another on the orchestrator thread and parallelize
//! internally over repetitions on a dedicated worker pool. Every random
//! draw comes from `root(seed).derive(kind, job)` and its children, and
//! every reduction happens after an ordered collect, so the value fields do
//! not depend on the number of workers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::analysis::{
    beta_star_bound, portenko_eta, second_moment_curve, smoothed_variance, ui_diagnostic, ConcaveTestFunction,
    GaussianComponent, TestFunction,
};
use crate::error::{Error, Result};
use crate::gmc::{
    conditional_proximity_rate, kahane_compare, kingman_kappa2, FiniteKernelPair, Spine, TubeRateEstimate,
};
use crate::polymer::{
    martingale_trajectory, partition_estimate, size_biased_partition, DisorderSample, Method,
};
use crate::rng::SeedStream;
use crate::stats::{ols_robust, quantile, MeanSe};

use super::config::{
    BetaPoint, ExperimentConfig, Kind, DEFAULT_ATOMS, DEFAULT_BETA_TOL, DEFAULT_F_SD, DEFAULT_RATIO, DEFAULT_SPREAD,
    DEFAULT_TUBE_DT,
};
use super::record::{append_records, ResultRecord, SeedProvenance, Status, Values};

type Params = BTreeMap<String, Value>;

struct Emit {
    op: &'static str,
    params: Params,
    values: Values,
}

type JobFn<'a> = Box<dyn Fn(SeedStream) -> Result<Vec<Emit>> + Sync + 'a>;

struct Job<'a> {
    op: &'static str,
    params: Params,
    run: JobFn<'a>,
}

fn params(pairs: &[(&str, Value)]) -> Params {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn beta_params(b: BetaPoint) -> Params {
    let mut p = params(&[("beta", json!(b.beta))]);
    if let Some(m) = b.multiple {
        p.insert("beta_multiple".into(), json!(m));
    }
    p
}

fn with(mut p: Params, pairs: &[(&str, Value)]) -> Params {
    for (k, v) in pairs {
        p.insert(k.to_string(), v.clone());
    }
    p
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::ReplicaGaussian => "replica-gaussian",
        Method::ExplicitField => "explicit-field",
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<ResultRecord>,
    /// The JSON-lines file the records were appended to.
    pub path: Option<PathBuf>,
    pub failures: usize,
}

/// File that records of `cfg` are appended to inside `dir`.
pub fn output_path(cfg: &ExperimentConfig, dir: &Path) -> PathBuf {
    dir.join(format!("{}.jsonl", cfg.experiment_id()))
}

/// Validates `cfg`, runs its grid and appends the records to
/// `<out>/<kind>-<hash12>.jsonl` when an output directory is given.
///
/// A numerical failure at one grid point becomes a failure record and the
/// grid continues, unless `strict`, in which case the error is returned
/// after the records so far are written. Resource errors always abort.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>, strict: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    let path = match out.or(cfg.experiment.out.as_deref()) {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(output_path(cfg, dir))
        }
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.experiment.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Numerical(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_in_pool(cfg, path, strict))
}

fn run_in_pool(cfg: &ExperimentConfig, path: Option<PathBuf>, strict: bool) -> Result<RunOutcome> {
    let kind = cfg.kind();
    let jobs = build_jobs(cfg)?;
    let hash = cfg.hash();
    let id = cfg.experiment_id();
    let root = SeedStream::root(cfg.seed());
    let mut outcome = RunOutcome {
        records: Vec::new(),
        path: path.clone(),
        failures: 0,
    };
    for (index, job) in jobs.iter().enumerate() {
        let stream = root.derive(kind.name(), index as u64);
        let start = Instant::now();
        let result = (job.run)(stream);
        let wall = start.elapsed().as_secs_f64();
        let record = |op: &str, params: Params, values: Values, status: Status, error: Option<String>| ResultRecord {
            experiment_id: id.clone(),
            kind: kind.name().to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            config_hash: hash.clone(),
            op: op.to_string(),
            params,
            values: values.values,
            stderrs: values.stderrs,
            verdict: values.verdict,
            seed: SeedProvenance {
                master: cfg.seed(),
                tag: kind.name().to_string(),
                point: index as u64,
            },
            wall_time_s: wall,
            status,
            error,
        };
        let (batch, abort) = match result {
            Ok(emits) => (
                emits
                    .into_iter()
                    .map(|e| record(e.op, e.params, e.values, Status::Ok, None))
                    .collect::<Vec<_>>(),
                None,
            ),
            Err(e @ Error::Resource { .. }) | Err(e @ Error::Io(_)) => (Vec::new(), Some(e)),
            Err(e) => {
                log::warn!("{} {:?}: {e}", job.op, job.params);
                outcome.failures += 1;
                let r = record(job.op, job.params.clone(), Values::default(), Status::Failed, Some(e.to_string()));
                (vec![r], strict.then_some(e))
            }
        };
        if let Some(p) = &path {
            append_records(p, &batch)?;
        }
        outcome.records.extend(batch);
        if let Some(e) = abort {
            return Err(e);
        }
    }
    Ok(outcome)
}

fn build_jobs(cfg: &ExperimentConfig) -> Result<Vec<Job<'_>>> {
    let g = &cfg.grid;
    let mut jobs: Vec<Job> = Vec::new();
    match cfg.kind() {
        Kind::Partition => {
            let (n, reps) = (g.n.unwrap(), g.reps.unwrap());
            for method in cfg.methods() {
                for b in cfg.betas()? {
                    for &t in g.t.as_deref().unwrap() {
                        let p = cfg.polymer(b.beta, t);
                        jobs.push(Job {
                            op: "partition",
                            params: with(beta_params(b), &[("t", json!(t)), ("method", json!(method_name(method))), ("n", json!(n)), ("reps", json!(reps))]),
                            run: Box::new(move |s| {
                                let est = (0..reps)
                                    .into_par_iter()
                                    .map(|r| partition_estimate(&p, n, method, s.derive("rep", r as u64)))
                                    .collect::<Result<Vec<_>>>()?;
                                let z: Vec<f64> = est.iter().map(|e| e.value).collect();
                                let lz: Vec<f64> = est.iter().map(|e| e.log_value).collect();
                                let mut v = Values::default();
                                v.put_se("mean_z", MeanSe::from_slice(&z))
                                    .put_se("mean_log_z", MeanSe::from_slice(&lz))
                                    .put("median_z", quantile(&z, 0.5));
                                Ok(vec![Emit { op: "partition", params: Params::new(), values: v }])
                            }),
                        });
                    }
                }
            }
        }
        Kind::Martingale => {
            let (n, reps) = (g.n.unwrap(), g.reps.unwrap());
            let t_grid = g.t.clone().unwrap();
            for b in cfg.betas()? {
                let p = cfg.polymer(b.beta, *t_grid.last().unwrap());
                let t_grid = t_grid.clone();
                jobs.push(Job {
                    op: "martingale",
                    params: with(beta_params(b), &[("n", json!(n)), ("reps", json!(reps))]),
                    run: Box::new(move |s| {
                        let traj = (0..reps)
                            .into_par_iter()
                            .map(|r| martingale_trajectory(&p, &t_grid, n, s.derive("rep", r as u64)))
                            .collect::<Result<Vec<_>>>()?;
                        let mut out = Vec::new();
                        let col = |k: usize| traj.iter().map(|m| m.z[k]).collect::<Vec<f64>>();
                        for (k, &t) in t_grid.iter().enumerate() {
                            let mut v = Values::default();
                            v.put_se("mean_z", MeanSe::from_slice(&col(k)));
                            out.push(Emit { op: "martingale_mean", params: params(&[("t", json!(t))]), values: v });
                        }
                        for k in 0..t_grid.len() - 1 {
                            let (a, b) = (col(k), col(k + 1));
                            let inc: Vec<f64> = b.iter().zip(&a).map(|(b, a)| b - a).collect();
                            let fit = ols_robust(&a, &inc);
                            let mut v = Values::default();
                            v.put_with("intercept", fit.intercept, fit.intercept_se)
                                .put_with("slope", fit.slope, fit.slope_se)
                                .put_se("mean_increment", MeanSe::from_slice(&inc));
                            out.push(Emit {
                                op: "martingale_regression",
                                params: params(&[("t", json!(t_grid[k])), ("t_next", json!(t_grid[k + 1]))]),
                                values: v,
                            });
                        }
                        Ok(out)
                    }),
                });
            }
        }
        Kind::SizeBiased => {
            let (n, reps) = (g.n.unwrap(), g.reps.unwrap());
            for method in cfg.methods() {
                for b in cfg.betas()? {
                    for &t in g.t.as_deref().unwrap() {
                        let p = cfg.polymer(b.beta, t);
                        jobs.push(Job {
                            op: "size_biased",
                            params: with(beta_params(b), &[("t", json!(t)), ("method", json!(method_name(method))), ("n", json!(n)), ("reps", json!(reps))]),
                            run: Box::new(move |s| {
                                let est = (0..reps)
                                    .into_par_iter()
                                    .map(|r| size_biased_partition(&p, n, method, s.derive("rep", r as u64)))
                                    .collect::<Result<Vec<_>>>()?;
                                let full: Vec<f64> = est.iter().map(|e| e.estimate.value).collect();
                                let partners: Vec<f64> = est.iter().map(|e| e.partner_value).collect();
                                let mut v = Values::default();
                                v.put_se("mean_z_hat", MeanSe::from_slice(&full))
                                    .put_se("mean_partner_z_hat", MeanSe::from_slice(&partners))
                                    .put("decile_z_hat", quantile(&full, 0.1))
                                    .put("median_z_hat", quantile(&full, 0.5));
                                Ok(vec![Emit { op: "size_biased", params: Params::new(), values: v }])
                            }),
                        });
                    }
                }
            }
        }
        Kind::SecondMoment => {
            let reps = g.reps.unwrap();
            let t_grid = g.t.clone().unwrap();
            for b in cfg.betas()? {
                let p = cfg.polymer(b.beta, *t_grid.last().unwrap());
                let t_grid = t_grid.clone();
                jobs.push(Job {
                    op: "second_moment",
                    params: with(beta_params(b), &[("reps", json!(reps))]),
                    run: Box::new(move |s| {
                        let curve = second_moment_curve(&p, &t_grid, reps, s)?;
                        Ok(curve
                            .into_iter()
                            .map(|m| {
                                let mut v = Values::default();
                                v.put_se("second_moment", m.estimate);
                                Emit { op: "second_moment", params: params(&[("t", json!(m.horizon))]), values: v }
                            })
                            .collect())
                    }),
                });
            }
        }
        Kind::Threshold => {
            let k = cfg.polymer(0.0, 1.0).kernel();
            let tol = g.tol.unwrap_or(DEFAULT_BETA_TOL);
            let k1 = k.clone();
            jobs.push(Job {
                op: "beta_star",
                params: params(&[("tol", json!(tol))]),
                run: Box::new(move |_| {
                    let mut v = Values::default();
                    v.put("beta_star", beta_star_bound(&k1, tol)?);
                    Ok(vec![Emit { op: "beta_star", params: Params::new(), values: v }])
                }),
            });
            for b in cfg.betas()? {
                let k = k.clone();
                jobs.push(Job {
                    op: "portenko_eta",
                    params: beta_params(b),
                    run: Box::new(move |_| {
                        let m = portenko_eta(b.beta, &k)?;
                        let mut v = Values::default();
                        v.put("eta", m.eta).flag("sup_verified", m.sup_verified);
                        if let Some(bound) = m.bound {
                            v.put("bound", bound);
                        }
                        Ok(vec![Emit { op: "portenko_eta", params: Params::new(), values: v }])
                    }),
                });
            }
        }
        Kind::SmoothedVariance => {
            let reps = g.reps.unwrap();
            let eps = g.eps.clone().unwrap();
            let f = TestFunction::new(vec![GaussianComponent {
                weight: 1.0,
                mean: vec![0.0; cfg.model.d],
                sd: g.f_sd.unwrap_or(DEFAULT_F_SD),
            }])?;
            for b in cfg.betas()? {
                let p = cfg.polymer(b.beta, 1.0);
                let (eps, f) = (eps.clone(), f.clone());
                jobs.push(Job {
                    op: "smoothed_variance",
                    params: with(beta_params(b), &[("reps", json!(reps))]),
                    run: Box::new(move |s| {
                        if eps.is_empty() {
                            return Ok(Vec::new());
                        }
                        let sv = smoothed_variance(&f, &p, &eps, reps, s)?;
                        Ok((0..eps.len())
                            .map(|j| {
                                let mut v = Values::default();
                                v.put_se("variance", sv.estimates[j]);
                                if j > 0 {
                                    v.put("decrease_p", sv.decrease_p[j - 1]);
                                }
                                Emit { op: "smoothed_variance", params: params(&[("eps", json!(eps[j]))]), values: v }
                            })
                            .collect())
                    }),
                });
            }
        }
        Kind::Tube => {
            let d = cfg.model.d;
            let delta = g.delta.unwrap();
            let dt = g.tube_dt.unwrap_or(DEFAULT_TUBE_DT);
            let (reps, spines, partners) = (g.reps.unwrap(), g.spines.unwrap(), g.partners.unwrap());
            let t_grid = g.t.clone().unwrap();
            let rate_t = g.rate_t.clone().unwrap();
            let sigmas = cfg.significance.mean_sigmas;
            jobs.push(Job {
                op: "tube",
                params: params(&[("delta", json!(delta)), ("d", json!(d)), ("dt", json!(dt))]),
                run: Box::new(move |s| {
                    let k2 = kingman_kappa2(d, delta, &t_grid, dt, reps, s.derive("kappa2", 0))?;
                    let mut out = Vec::new();
                    for (t, m) in k2.t.iter().zip(&k2.rate) {
                        let mut v = Values::default();
                        v.put_se("energy_rate", *m);
                        out.push(Emit { op: "tube_energy", params: params(&[("t", json!(t))]), values: v });
                    }
                    let mut v = Values::default();
                    v.put_with("kappa2", k2.plateau, k2.plateau_se)
                        .put("trend_p", k2.trend_p)
                        .put("max_excess", k2.max_excess)
                        .flag("subadditive", k2.subadditive(1e-6));
                    out.push(Emit { op: "kappa2", params: Params::new(), values: v });
                    let rate = conditional_proximity_rate(d, delta, &rate_t, Spine::Brownian, spines, partners, dt, s.derive("rate", 0))?;
                    let est = TubeRateEstimate::assemble(&rate, &k2, d)?;
                    let mut v = Values::default();
                    v.put_with("kappa", est.kappa, est.kappa_se)
                        .put("lambda1", est.lambda1)
                        .put("rate_bound", est.rate_bound)
                        .put("r2", est.r2)
                        .flag("determined", rate.determined)
                        .flag("within_bound", est.within_bound(sigmas));
                    out.push(Emit { op: "tube_rate", params: Params::new(), values: v });
                    Ok(out)
                }),
            });
        }
        Kind::Kahane => {
            let reps = g.reps.unwrap();
            let atoms = g.atoms.unwrap_or(DEFAULT_ATOMS);
            let ratio = g.ratio.unwrap_or(DEFAULT_RATIO);
            let spread = g.spread.unwrap_or(DEFAULT_SPREAD);
            let alphas = g.alpha.clone().unwrap();
            let sigmas = cfg.significance.mean_sigmas;
            for i in 0..g.pairs.unwrap() {
                let alphas = alphas.clone();
                jobs.push(Job {
                    op: "kahane",
                    params: params(&[("pair", json!(i)), ("atoms", json!(atoms)), ("ratio", json!(ratio)), ("reps", json!(reps))]),
                    run: Box::new(move |s| {
                        let mut rng = s.derive("pair", 0).rng();
                        let pair = FiniteKernelPair::random_scaled(atoms, spread, ratio, &mut rng)?;
                        alphas
                            .iter()
                            .enumerate()
                            .map(|(j, &a)| {
                                let f = ConcaveTestFunction::new(a)?;
                                let c = kahane_compare(&pair, &f, reps, s.derive("alpha", j as u64))?;
                                let mut v = Values::default();
                                v.put_se("mean_k", c.mean_k)
                                    .put_se("mean_k_hat", c.mean_k_hat)
                                    .put_se("diff", c.diff)
                                    .flag("ordered", c.ordered(sigmas));
                                Ok(Emit { op: "kahane", params: params(&[("alpha", json!(a))]), values: v })
                            })
                            .collect()
                    }),
                });
            }
        }
        Kind::PhaseScan => {
            let (n, reps) = (g.n.unwrap(), g.reps.unwrap());
            let t_grid = g.t.clone().unwrap();
            let betas = cfg.betas()?;
            let alphas = cfg.alphas();
            let sig = cfg.significance;
            for method in cfg.methods() {
                let p = cfg.polymer(0.0, *t_grid.last().unwrap());
                let (t_grid, betas, alphas) = (t_grid.clone(), betas.clone(), alphas.clone());
                jobs.push(Job {
                    op: "phase_scan",
                    params: params(&[("method", json!(method_name(method))), ("n", json!(n)), ("reps", json!(reps))]),
                    run: Box::new(move |s| {
                        if betas.is_empty() {
                            return Ok(Vec::new());
                        }
                        // disorder samples do not depend on β, so one set serves the whole scan
                        let samples = (0..reps)
                            .into_par_iter()
                            .map(|r| DisorderSample::draw(&p, n, method, &t_grid, true, s.derive("rep", r as u64)))
                            .collect::<Result<Vec<_>>>()?;
                        let a_max = alphas.iter().copied().fold(f64::MIN, f64::max);
                        let mut out = Vec::new();
                        for &b in &betas {
                            let plain: Vec<Vec<f64>> = (0..t_grid.len())
                                .map(|k| samples.iter().map(|x| x.partition(b.beta, k)).collect())
                                .collect();
                            let tilted: Vec<Vec<f64>> = (0..t_grid.len())
                                .map(|k| samples.iter().map(|x| x.size_biased(b.beta, k).unwrap().0).collect())
                                .collect();
                            for (k, &t) in t_grid.iter().enumerate() {
                                let tail = tilted[k].iter().filter(|&&z| z > a_max).count() as f64 / reps as f64;
                                let mut v = Values::default();
                                v.put_se("mean_z", MeanSe::from_slice(&plain[k]))
                                    .put("median_z", quantile(&plain[k], 0.5))
                                    .put("decile_z_hat", quantile(&tilted[k], 0.1))
                                    .put("median_z_hat", quantile(&tilted[k], 0.5))
                                    .put("tail_mass", tail);
                                out.push(Emit { op: "disorder_profile", params: with(beta_params(b), &[("t", json!(t))]), values: v });
                            }
                            let verdict = ui_diagnostic(&t_grid, &plain, &tilted, &alphas, &sig)?;
                            let mut v = Values::default();
                            let significant = verdict.evidence.iter().filter(|e| e.p_value < sig.trend).count();
                            v.put("significant_rows", significant as f64)
                                .put("rows", verdict.evidence.len() as f64);
                            v.verdict = Some(verdict);
                            out.push(Emit { op: "disorder_verdict", params: beta_params(b), values: v });
                        }
                        Ok(out)
                    }),
                });
            }
        }
    }
    Ok(jobs
        .into_iter()
        .map(|j| {
            let base = j.params.clone();
            let run = j.run;
            // emitted params extend the job params
            Job {
                op: j.op,
                params: j.params,
                run: Box::new(move |s| {
                    Ok(run(s)?
                        .into_iter()
                        .map(|mut e| {
                            let mut p = base.clone();
                            p.append(&mut e.params);
                            e.params = p;
                            e
                        })
                        .collect())
                }),
            }
        })
        .collect())
}
