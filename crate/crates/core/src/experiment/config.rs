//! Experiment configuration: a sectioned TOML file with typed fields.
//!
//! ```toml
//! [experiment]
//! kind = "partition"
//! seed = 7
//!
//! [model]
//! d = 3
//! mollifier = "compact-bump"
//!
//! [grid]
//! beta_ref = [0.25, 0.5]
//! t = [4.0, 16.0]
//! n = 8
//! reps = 200
//! ```
//!
//! Unknown keys are rejected at every level, and grid keys that the chosen
//! kind does not use are rejected too.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::analysis::{beta_ref, portenko_eta, DEFAULT_ALPHAS};
use crate::error::{Error, Result};
use crate::field::DEFAULT_MAX_BYTES;
use crate::mollifier::MollifierKind;
use crate::paths::steps_for;
use crate::polymer::{check_dyadic, Method, PolymerParams};
use crate::stats::Significance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Partition,
    Martingale,
    SizeBiased,
    SecondMoment,
    Threshold,
    SmoothedVariance,
    Tube,
    Kahane,
    PhaseScan,
}

impl Kind {
    pub const ALL: [Kind; 9] = [
        Kind::Partition,
        Kind::Martingale,
        Kind::SizeBiased,
        Kind::SecondMoment,
        Kind::Threshold,
        Kind::SmoothedVariance,
        Kind::Tube,
        Kind::Kahane,
        Kind::PhaseScan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Partition => "partition",
            Kind::Martingale => "martingale",
            Kind::SizeBiased => "size-biased",
            Kind::SecondMoment => "second-moment",
            Kind::Threshold => "threshold",
            Kind::SmoothedVariance => "smoothed-variance",
            Kind::Tube => "tube",
            Kind::Kahane => "kahane",
            Kind::PhaseScan => "phase-scan",
        }
    }

    /// Grid keys this kind must have.
    fn required(self) -> &'static [&'static str] {
        match self {
            Kind::Partition | Kind::Martingale | Kind::SizeBiased | Kind::PhaseScan => &["t", "n", "reps"],
            Kind::SecondMoment => &["t", "reps"],
            Kind::Threshold => &[],
            Kind::SmoothedVariance => &["eps", "reps"],
            Kind::Tube => &["delta", "t", "rate_t", "reps", "spines", "partners"],
            Kind::Kahane => &["pairs", "alpha", "reps"],
        }
    }

    /// Grid keys this kind may have beyond the required ones.
    fn optional(self) -> &'static [&'static str] {
        match self {
            Kind::Partition | Kind::SizeBiased => &["beta", "beta_ref", "methods"],
            Kind::Martingale | Kind::SecondMoment => &["beta", "beta_ref"],
            Kind::PhaseScan => &["beta", "beta_ref", "methods", "alpha"],
            Kind::Threshold => &["beta", "beta_ref", "tol"],
            Kind::SmoothedVariance => &["beta", "beta_ref", "f_sd"],
            Kind::Tube => &["tube_dt"],
            Kind::Kahane => &["atoms", "ratio", "spread"],
        }
    }

    fn uses_beta(self) -> bool {
        !matches!(self, Kind::Tube | Kind::Kahane)
    }

    fn uses_polymer(self) -> bool {
        !matches!(self, Kind::Tube | Kind::Kahane)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: Kind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub mollifier: MollifierKind,
    pub dt: f64,
    pub h: f64,
    pub max_bytes: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 3,
            mollifier: MollifierKind::CompactBump,
            dt: 0.1,
            h: 0.125,
            max_bytes: DEFAULT_MAX_BYTES,
        }
    }
}

/// Every parameter any kind can take; [`Kind`] decides which are allowed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Absolute couplings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    /// Couplings as multiples of the reference `β_ref` of the model kernel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_ref: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<Method>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    /// Standard deviation of the centered Gaussian test function.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_sd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_t: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spines: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partners: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tube_dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spread: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub significance: Significance,
}

/// A coupling together with the multiple of `β_ref` it came from, if any.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaPoint {
    pub beta: f64,
    pub multiple: Option<f64>,
}

pub const DEFAULT_TUBE_DT: f64 = 0.005;
pub const DEFAULT_ATOMS: usize = 5;
pub const DEFAULT_RATIO: f64 = 0.5;
pub const DEFAULT_SPREAD: f64 = 0.6;
pub const DEFAULT_F_SD: f64 = 1.0;
pub const DEFAULT_BETA_TOL: f64 = 1e-10;

fn config_err<T>(key: &str, message: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        key: key.to_string(),
        message: message.into(),
    })
}

/// Maps a module argument error to a config error on `key`.
fn at<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Argument(m) => Error::Config {
            key: key.to_string(),
            message: m,
        },
        other => other,
    })
}

fn positive(key: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        config_err(key, format!("must be positive and finite, got {x}"))
    }
}

fn increasing(key: &str, xs: &[f64]) -> Result<()> {
    for (i, &x) in xs.iter().enumerate() {
        positive(&format!("{key}[{i}]"), x)?;
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return config_err(key, "must be strictly increasing");
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config {
            key: toml_error_key(&e),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            key: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn kind(&self) -> Kind {
        self.experiment.kind
    }

    pub fn seed(&self) -> u64 {
        self.experiment.seed
    }

    /// Polymer parameters of the model section at a given point.
    pub fn polymer(&self, beta: f64, horizon: f64) -> PolymerParams {
        PolymerParams {
            beta,
            horizon,
            d: self.model.d,
            mollifier: self.model.mollifier,
            dt: self.model.dt,
            h: self.model.h,
            max_bytes: self.model.max_bytes,
        }
    }

    /// Absolute couplings first, then multiples of `β_ref`.
    pub fn betas(&self) -> Result<Vec<BetaPoint>> {
        let mut out: Vec<BetaPoint> = self
            .grid
            .beta
            .iter()
            .flatten()
            .map(|&beta| BetaPoint { beta, multiple: None })
            .collect();
        if let Some(m) = &self.grid.beta_ref {
            if !m.is_empty() {
                let b = at("model", beta_ref(&self.polymer(0.0, 1.0)))?;
                out.extend(m.iter().map(|&x| BetaPoint {
                    beta: x * b,
                    multiple: Some(x),
                }));
            }
        }
        Ok(out)
    }

    pub fn methods(&self) -> Vec<Method> {
        self.grid
            .methods
            .clone()
            .unwrap_or_else(|| vec![Method::ReplicaGaussian])
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.grid.alpha.clone().unwrap_or_else(|| DEFAULT_ALPHAS.to_vec())
    }

    /// SHA-256 of the canonical JSON form, excluding the seed, the worker
    /// count and the output directory, none of which changes what is
    /// computed apart from the seed, and records pool across seeds.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(e) = v.get_mut("experiment").and_then(Value::as_object_mut) {
            e.remove("seed");
            e.remove("threads");
            e.remove("out");
        }
        let canon = canonical_json(&v);
        hex::encode(Sha256::digest(canon.as_bytes()))
    }

    pub fn experiment_id(&self) -> String {
        format!("{}-{}", self.kind(), &self.hash()[..12])
    }

    /// Checks every static parameter against the preconditions of the
    /// module that will consume it.
    pub fn validate(&self) -> Result<()> {
        let kind = self.kind();
        let g = serde_json::to_value(&self.grid)?;
        let present: Vec<&String> = g.as_object().map(|m| m.keys().collect()).unwrap_or_default();
        for key in &present {
            if !kind.required().contains(&key.as_str()) && !kind.optional().contains(&key.as_str()) {
                return config_err(&format!("grid.{key}"), format!("not used by kind `{kind}`"));
            }
        }
        for key in kind.required() {
            if !present.iter().any(|k| k == key) {
                return config_err(&format!("grid.{key}"), format!("required by kind `{kind}`"));
            }
        }
        if kind.uses_beta() && kind != Kind::Threshold && self.grid.beta.is_none() && self.grid.beta_ref.is_none() {
            return config_err("grid.beta", format!("kind `{kind}` needs `beta` or `beta_ref`"));
        }
        let s = &self.significance;
        for (key, x) in [("significance.ks", s.ks), ("significance.trend", s.trend)] {
            if !(x > 0.0 && x < 1.0) {
                return config_err(key, format!("must lie in (0, 1), got {x}"));
            }
        }
        positive("significance.mean_sigmas", s.mean_sigmas)?;
        if self.experiment.threads == Some(0) {
            return config_err("experiment.threads", "must be at least 1");
        }
        if kind.uses_polymer() {
            self.validate_model()?;
        }
        for (i, b) in self.grid.beta.iter().flatten().enumerate() {
            if !(*b >= 0.0 && b.is_finite()) {
                return config_err(&format!("grid.beta[{i}]"), format!("must be nonnegative, got {b}"));
            }
        }
        for (i, b) in self.grid.beta_ref.iter().flatten().enumerate() {
            if !(*b >= 0.0 && b.is_finite()) {
                return config_err(&format!("grid.beta_ref[{i}]"), format!("must be nonnegative, got {b}"));
            }
        }
        let g = &self.grid;
        if let Some(n) = g.n {
            if n < 2 {
                return config_err("grid.n", format!("need at least two replicas, got {n}"));
            }
        }
        if let Some(r) = g.reps {
            if r < 2 {
                return config_err("grid.reps", format!("need at least two repetitions, got {r}"));
            }
        }
        if let Some(m) = &g.methods {
            if m.is_empty() {
                return config_err("grid.methods", "must name at least one method");
            }
        }
        if let Some(a) = &g.alpha {
            for (i, &x) in a.iter().enumerate() {
                positive(&format!("grid.alpha[{i}]"), x)?;
            }
        }
        match kind {
            Kind::Partition | Kind::SizeBiased | Kind::SecondMoment => {
                let t = g.t.as_deref().unwrap();
                increasing("grid.t", t)?;
                for (i, &t) in t.iter().enumerate() {
                    at(&format!("grid.t[{i}]"), self.polymer(0.0, t).validate())?;
                }
            }
            Kind::Martingale => {
                let t = g.t.as_deref().unwrap();
                at("grid.t", check_dyadic(t))?;
                for (i, &t) in t.iter().enumerate() {
                    at(&format!("grid.t[{i}]"), self.polymer(0.0, t).validate())?;
                }
                if self.grid.t.as_ref().is_some_and(|t| t.len() < 2) {
                    return config_err("grid.t", "the martingale regression needs at least two horizons");
                }
            }
            Kind::PhaseScan => {
                let t = g.t.as_deref().unwrap();
                increasing("grid.t", t)?;
                if t.len() < 3 {
                    return config_err("grid.t", format!("the diagnostic needs at least 3 horizons, got {}", t.len()));
                }
                for (i, &t) in t.iter().enumerate() {
                    at(&format!("grid.t[{i}]"), self.polymer(0.0, t).validate())?;
                }
            }
            Kind::Threshold => {
                if let Some(tol) = g.tol {
                    positive("grid.tol", tol)?;
                }
            }
            Kind::SmoothedVariance => {
                let eps = g.eps.as_deref().unwrap();
                for (i, &e) in eps.iter().enumerate() {
                    positive(&format!("grid.eps[{i}]"), e)?;
                    let t = 2.0 / (e * e);
                    if steps_for(t, self.model.dt).is_err() {
                        return config_err(
                            &format!("grid.eps[{i}]"),
                            format!("horizon 2/eps² = {t} is not a multiple of dt = {}", self.model.dt),
                        );
                    }
                }
                if let Some(sd) = g.f_sd {
                    positive("grid.f_sd", sd)?;
                }
                let k = self.polymer(0.0, 1.0).kernel();
                for b in self.betas()? {
                    // the smoothed variance is finite only below the second-moment threshold
                    let eta = at("grid.beta", portenko_eta(b.beta, &k))?.eta;
                    if 0.5 * eta >= 1.0 {
                        return config_err(
                            "grid.beta",
                            format!("beta = {} has (β²/2) sup G = {:.4} >= 1; the smoothed variance is not controlled", b.beta, 0.5 * eta),
                        );
                    }
                }
            }
            Kind::Tube => {
                let dt = g.tube_dt.unwrap_or(DEFAULT_TUBE_DT);
                positive("grid.tube_dt", dt)?;
                positive("grid.delta", g.delta.unwrap())?;
                if self.model.d == 0 {
                    return config_err("model.d", "dimension must be at least 1");
                }
                let t = g.t.as_deref().unwrap();
                increasing("grid.t", t)?;
                if t.len() < 3 {
                    return config_err("grid.t", "the plateau fit needs at least 3 horizons");
                }
                for (i, &t) in t.iter().enumerate() {
                    let key = format!("grid.t[{i}]");
                    at(&key, steps_for(t, dt))?;
                    if steps_for(t, dt)? % 2 != 0 {
                        return config_err(&key, "horizon must be an even number of tube steps");
                    }
                }
                let rt = g.rate_t.as_deref().unwrap();
                increasing("grid.rate_t", rt)?;
                if rt.len() < 3 {
                    return config_err("grid.rate_t", "the rate fit needs at least 3 times");
                }
                if g.spines.unwrap() == 0 {
                    return config_err("grid.spines", "need at least one spine");
                }
                if g.partners.unwrap() < 10 {
                    return config_err("grid.partners", "need at least ten partners");
                }
            }
            Kind::Kahane => {
                if g.reps.unwrap() < 10_000 {
                    return config_err("grid.reps", "the comparison needs at least 10^4 repetitions");
                }
                if g.atoms.is_some_and(|a| a == 0) {
                    return config_err("grid.atoms", "need at least one atom");
                }
                if let Some(r) = g.ratio {
                    if !(0.0..=1.0).contains(&r) {
                        return config_err("grid.ratio", format!("must lie in [0, 1], got {r}"));
                    }
                }
                if let Some(s) = g.spread {
                    positive("grid.spread", s)?;
                }
            }
        }
        Ok(())
    }

    fn validate_model(&self) -> Result<()> {
        let m = &self.model;
        if m.d < 3 {
            return config_err("model.d", format!("polymer experiments need d >= 3, got {}", m.d));
        }
        positive("model.dt", m.dt)?;
        positive("model.h", m.h)?;
        if m.dt > 0.1 * (1.0 + 1e-12) {
            return config_err("model.dt", format!("must be at most 0.1 for a unit-scale kernel, got {}", m.dt));
        }
        if m.max_bytes == 0 {
            return config_err("model.max_bytes", "must be positive");
        }
        Ok(())
    }
}

/// Best-effort dotted key for a TOML parse error.
fn toml_error_key(e: &toml::de::Error) -> String {
    let msg = e.message();
    // serde reports unknown fields as "unknown field `name`, expected ..."
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return rest[..end].to_string();
        }
    }
    if let Some(rest) = msg.strip_prefix("missing field `") {
        if let Some(end) = rest.find('`') {
            return rest[..end].to_string();
        }
    }
    "config".to_string()
}

/// JSON with object keys sorted at every level and no whitespace.
pub fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&m[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[experiment]
kind = "partition"
seed = 3

[grid]
beta_ref = [0.25]
t = [4.0]
n = 4
reps = 10
"#;

    #[test]
    fn parses_and_validates() {
        let c = ExperimentConfig::from_toml_str(BASE).unwrap();
        c.validate().unwrap();
        assert_eq!(c.kind(), Kind::Partition);
        assert_eq!(c.model.d, 3);
        let b = c.betas().unwrap();
        assert_eq!(b.len(), 1);
        assert!((b[0].beta - 0.25 * 2.788_537_6).abs() < 1e-6);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = ExperimentConfig::from_toml_str(&format!("{BASE}bogus = 1\n")).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = ExperimentConfig::from_toml_str(&BASE.replace("seed = 3", "seed = 3\ncolour = 1")).unwrap_err();
        assert!(e.to_string().contains("colour"), "{e}");
    }

    #[test]
    fn key_unused_by_kind_is_rejected() {
        let c = ExperimentConfig::from_toml_str(&format!("{BASE}delta = 1.0\n")).unwrap();
        let e = c.validate().unwrap_err();
        assert!(e.to_string().contains("grid.delta"), "{e}");
    }

    #[test]
    fn module_preconditions_surface_with_key() {
        let c = ExperimentConfig::from_toml_str(&BASE.replace("t = [4.0]", "t = [4.05]")).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("grid.t[0]"));
        let c = ExperimentConfig::from_toml_str(&format!("{BASE}\n[model]\nd = 2\n")).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("model.d"));
        let c = ExperimentConfig::from_toml_str(&BASE.replace("n = 4", "n = 1")).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("grid.n"));
    }

    #[test]
    fn smoothed_variance_rejects_large_beta() {
        let s = r#"
[experiment]
kind = "smoothed-variance"
[grid]
beta_ref = [1.5]
eps = [1.0]
reps = 10
"#;
        let c = ExperimentConfig::from_toml_str(s).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("grid.beta"));
    }

    #[test]
    fn hash_ignores_seed_and_threads_but_not_params() {
        let a = ExperimentConfig::from_toml_str(BASE).unwrap();
        let b = ExperimentConfig::from_toml_str(&BASE.replace("seed = 3", "seed = 4\nthreads = 2")).unwrap();
        let c = ExperimentConfig::from_toml_str(&BASE.replace("reps = 10", "reps = 11")).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.experiment_id().len(), "partition-".len() + 12);
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let v: Value = serde_json::from_str(r#"{"b":1,"a":{"d":[1,2],"c":null}}"#).unwrap();
        assert_eq!(canonical_json(&v), r#"{"a":{"c":null,"d":[1,2]},"b":1}"#);
    }
}
