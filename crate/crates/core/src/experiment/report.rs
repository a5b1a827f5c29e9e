//! Summaries and tidy plot data from a directory of JSON-lines records.
//!
//! Records of one experiment that share an op and parameters form a group.
//! Repetitions with distinct master seeds are independent, so a group's
//! value is the mean over seeds and its standard error is
//! `sqrt(Σ se²) / k` for `k` seeds. A record repeated with the same seed
//! (a rerun) is counted once.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::analysis::Verdict;
use crate::error::{Error, Result};

use super::record::{read_records, ResultRecord, Status};

#[derive(Debug, Clone, Default)]
pub struct ReportFilter {
    pub kind: Option<String>,
    pub op: Option<String>,
}

impl ReportFilter {
    fn admits(&self, r: &ResultRecord) -> bool {
        self.kind.as_ref().is_none_or(|k| *k == r.kind) && self.op.as_ref().is_none_or(|o| *o == r.op)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub value: f64,
    /// `None` when some contributing record had no standard error.
    pub stderr: Option<f64>,
    pub seeds: usize,
}

#[derive(Debug, Clone)]
pub struct Group {
    pub experiment: String,
    pub kind: String,
    pub op: String,
    pub params: BTreeMap<String, Value>,
    pub seeds: Vec<u64>,
    pub failures: usize,
    pub stats: BTreeMap<String, Pooled>,
    /// `(seed, verdict)` for verdict records.
    pub verdicts: Vec<(u64, Verdict)>,
}

impl Group {
    fn param_f64(&self, key: &str) -> Option<f64> {
        self.params.get(key).and_then(Value::as_f64)
    }

    pub fn beta(&self) -> Option<f64> {
        self.param_f64("beta")
    }

    pub fn t_or_eps(&self) -> Option<f64> {
        self.param_f64("t").or_else(|| self.param_f64("eps"))
    }

    /// The parameters other than `β`, `t` and `ε`, as `k=v;k=v`.
    fn qualifier(&self) -> String {
        self.params
            .iter()
            .filter(|(k, _)| !matches!(k.as_str(), "beta" | "beta_multiple" | "t" | "eps"))
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k}={s}"),
                other => format!("{k}={other}"),
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn statistic_name(&self, stat: &str) -> String {
        let q = self.qualifier();
        if q.is_empty() {
            format!("{}.{stat}", self.op)
        } else {
            format!("{}.{stat}[{q}]", self.op)
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub files: usize,
    pub records: usize,
    pub malformed: usize,
    pub duplicates: usize,
    pub failures: usize,
    pub groups: Vec<Group>,
}

pub fn build_report(dir: &Path, filter: &ReportFilter) -> Result<Report> {
    if !dir.is_dir() {
        return Err(Error::Config {
            key: "out".into(),
            message: format!("{} is not a directory", dir.display()),
        });
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut report = Report {
        files: files.len(),
        ..Report::default()
    };
    type Key = (String, String, String);
    let mut by_key: BTreeMap<Key, Vec<ResultRecord>> = BTreeMap::new();
    let mut seen: BTreeSet<(Key, u64, u64)> = BTreeSet::new();
    for f in &files {
        let (recs, bad) = read_records(f)?;
        report.malformed += bad;
        for r in recs.into_iter().filter(|r| filter.admits(r)) {
            report.records += 1;
            let key = (r.experiment_id.clone(), r.op.clone(), r.params_key());
            if !seen.insert((key.clone(), r.seed.master, r.seed.point)) {
                report.duplicates += 1;
                continue;
            }
            by_key.entry(key).or_default().push(r);
        }
    }
    for ((experiment, op, _), recs) in by_key {
        let ok: Vec<&ResultRecord> = recs.iter().filter(|r| r.status == Status::Ok).collect();
        let failures = recs.len() - ok.len();
        report.failures += failures;
        let mut names: BTreeSet<&String> = BTreeSet::new();
        for r in &ok {
            names.extend(r.values.keys());
        }
        let mut stats = BTreeMap::new();
        for name in names {
            let vals: Vec<(f64, Option<f64>)> = ok
                .iter()
                .filter_map(|r| r.values.get(name).map(|v| (*v, r.stderrs.get(name).copied())))
                .collect();
            let k = vals.len() as f64;
            let value = vals.iter().map(|v| v.0).sum::<f64>() / k;
            let stderr = vals
                .iter()
                .map(|v| v.1.map(|s| s * s))
                .sum::<Option<f64>>()
                .map(|ss| ss.sqrt() / k);
            stats.insert(
                name.clone(),
                Pooled {
                    value,
                    stderr,
                    seeds: vals.len(),
                },
            );
        }
        let mut seeds: Vec<u64> = recs.iter().map(|r| r.seed.master).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut verdicts: Vec<(u64, Verdict)> = ok
            .iter()
            .filter_map(|r| r.verdict.as_ref().map(|v| (r.seed.master, v.verdict)))
            .collect();
        verdicts.sort_by_key(|v| v.0);
        report.groups.push(Group {
            experiment,
            kind: recs[0].kind.clone(),
            op,
            params: recs[0].params.clone(),
            seeds,
            failures,
            stats,
            verdicts,
        });
    }
    // numeric order within an experiment and op, so tables read top to bottom
    report.groups.sort_by(|a, b| {
        let num = |x: Option<f64>| x.unwrap_or(f64::NEG_INFINITY);
        (&a.experiment, &a.op)
            .cmp(&(&b.experiment, &b.op))
            .then(num(a.beta()).total_cmp(&num(b.beta())))
            .then(num(a.t_or_eps()).total_cmp(&num(b.t_or_eps())))
            .then_with(|| a.qualifier().cmp(&b.qualifier()))
    });
    Ok(report)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl Report {
    /// Groups that carry a disorder verdict.
    pub fn verdict_groups(&self) -> impl Iterator<Item = &Group> {
        self.groups.iter().filter(|g| !g.verdicts.is_empty())
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} records from {} files ({} malformed lines skipped, {} duplicates, {} failed)",
            self.records, self.files, self.malformed, self.duplicates, self.failures
        );
        let mut current = "";
        for g in &self.groups {
            if g.experiment != current {
                current = &g.experiment;
                let _ = writeln!(s, "\n== {} ({})", g.experiment, g.kind);
            }
            let params: Vec<String> = g.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = write!(s, "  {} {}  seeds={}", g.op, params.join(" "), g.seeds.len());
            if g.failures > 0 {
                let _ = write!(s, "  FAILED x{}", g.failures);
            }
            s.push('\n');
            for (name, p) in &g.stats {
                match p.stderr {
                    Some(se) => {
                        let _ = writeln!(s, "      {name:<22} {:>14.6e} ± {se:.3e}", p.value);
                    }
                    None => {
                        let _ = writeln!(s, "      {name:<22} {:>14.6e}", p.value);
                    }
                }
            }
            for (seed, v) in &g.verdicts {
                let _ = writeln!(s, "      verdict (seed {seed}): {v}");
            }
        }
        let rows: Vec<&Group> = self.verdict_groups().collect();
        if !rows.is_empty() {
            let _ = writeln!(s, "\n== disorder verdicts\n  {:<14} {:<12} verdicts", "beta", "multiple");
            for g in rows {
                let v: Vec<String> = g.verdicts.iter().map(|(_, v)| v.to_string()).collect();
                let _ = writeln!(
                    s,
                    "  {:<14.6} {:<12} {}",
                    g.beta().unwrap_or(f64::NAN),
                    fmt_opt(g.param_f64("beta_multiple")),
                    v.join(" / ")
                );
            }
        }
        s
    }

    /// Columns: experiment, beta, t_or_eps, statistic, value, stderr.
    pub fn write_plot_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["experiment", "beta", "t_or_eps", "statistic", "value", "stderr"])?;
        for g in &self.groups {
            for (name, p) in &g.stats {
                w.write_record([
                    g.experiment.clone(),
                    fmt_opt(g.beta()),
                    fmt_opt(g.t_or_eps()),
                    g.statistic_name(name),
                    p.value.to_string(),
                    fmt_opt(p.stderr),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One row per (experiment, β, seed) verdict.
    pub fn write_verdict_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["experiment", "beta", "beta_multiple", "method", "seed", "verdict"])?;
        for g in self.verdict_groups() {
            let method = g.params.get("method").and_then(Value::as_str).unwrap_or("").to_string();
            for (seed, v) in &g.verdicts {
                w.write_record([
                    g.experiment.clone(),
                    fmt_opt(g.beta()),
                    fmt_opt(g.param_f64("beta_multiple")),
                    method.clone(),
                    seed.to_string(),
                    v.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `summary.txt`, `plot_data.csv` and `verdicts.csv` into `dest`,
    /// replacing earlier versions.
    pub fn write_all(&self, dest: &Path) -> Result<()> {
        std::fs::create_dir_all(dest)?;
        std::fs::write(dest.join("summary.txt"), self.summary_text())?;
        self.write_plot_csv(std::fs::File::create(dest.join("plot_data.csv"))?)?;
        self.write_verdict_csv(std::fs::File::create(dest.join("verdicts.csv"))?)?;
        Ok(())
    }
}
