//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Lists are comma
//! separated. Region-specific keys take the form `region.<name>.<field>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use sha2::{Digest, Sha256};

use crate::delay::DEFAULT_SUPPORT;
use crate::error::{Error, Result};
use crate::ratios::Setting;
use crate::tune::{Grid, Rule};

/// Estimators an experiment can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MethodName {
    Lagged,
    Conv,
    Deconv(usize),
    DeconvTuned,
}

impl MethodName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lagged" => Ok(Self::Lagged),
            "conv" => Ok(Self::Conv),
            "deconv-t" => Ok(Self::DeconvTuned),
            _ => match s.strip_prefix("deconv-").and_then(|m| m.parse::<usize>().ok()) {
                Some(m) if m <= 2 => Ok(Self::Deconv(m)),
                _ => Err(Error::Parse(format!("unknown method {s:?}"))),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Lagged => "lagged".into(),
            Self::Conv => "conv".into(),
            Self::Deconv(m) => format!("deconv-{m}"),
            Self::DeconvTuned => "deconv-t".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    PoissonBinomial,
    BetaBinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelaySource {
    Fixed,
    Scan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionConfig {
    pub name: String,
    /// Peak scale of synthetic primary counts.
    pub scale: f64,
    pub delay_mean: f64,
    /// Variance multiplier for beta-binomial noise.
    pub dispersion: f64,
    /// Multiplier on the default variant severities.
    pub severity_factor: f64,
    pub severities: Option<Vec<(String, f64)>>,
    pub primary: Option<PathBuf>,
    pub secondary: Option<PathBuf>,
    pub variants: Option<PathBuf>,
}

impl RegionConfig {
    /// Built-in synthetic regions spanning national to small-state volumes.
    pub fn preset(name: &str) -> Self {
        let (scale, delay_mean, dispersion, severity_factor) = match name {
            "large" => (12_000.0, 14.0, 8.0, 1.0),
            "medium" => (1_200.0, 16.0, 4.0, 1.1),
            "small" => (120.0, 18.0, 2.0, 0.9),
            _ => (1_000.0, 16.0, 3.0, 1.0),
        };
        Self {
            name: name.to_string(),
            scale,
            delay_mean,
            dispersion,
            severity_factor,
            severities: None,
            primary: None,
            secondary: None,
            variants: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub output: PathBuf,
    pub setting: Setting,
    pub noise: NoiseKind,
    pub regions: Vec<RegionConfig>,
    pub start: NaiveDate,
    pub days: usize,
    pub replicates: usize,
    pub seed: u64,
    pub cadence: usize,
    pub methods: Vec<MethodName>,
    pub rules: Vec<Rule>,
    pub oracle: bool,
    pub folds: usize,
    pub forward_steps: usize,
    pub lambda_points: usize,
    pub lambda_max_iterations: usize,
    pub gamma: Grid,
    pub windows: Grid,
    pub delay_support: usize,
    pub delay_source: DelaySource,
    pub scan_max_lag: usize,
    /// Days excluded at each end of the retrospective evaluation window.
    pub burn: usize,
    pub misspec_offsets: Vec<f64>,
    pub misspec_replicates: usize,
    /// Secondary days used by each real-time fit.
    pub history: usize,
    /// Days between real-time hyperparameter refreshes.
    pub retune_every: usize,
    pub threads: usize,
    /// Effective key-value pairs, for hashing and the manifest.
    entries: BTreeMap<String, String>,
}

const GLOBAL_KEYS: &[&str] = &[
    "output",
    "setting",
    "noise",
    "regions",
    "start",
    "days",
    "replicates",
    "seed",
    "cadence",
    "methods",
    "rules",
    "oracle",
    "folds",
    "forward_steps",
    "lambda_points",
    "lambda_max_iterations",
    "gamma_grid",
    "windows",
    "delay_support",
    "delay_source",
    "scan_max_lag",
    "burn",
    "misspec_offsets",
    "misspec_replicates",
    "history",
    "retune_every",
    "threads",
];

const REGION_KEYS: &[&str] = &[
    "scale",
    "delay_mean",
    "dispersion",
    "severity_factor",
    "severity",
    "primary",
    "secondary",
    "variants",
];

/// Parses `key = value` lines into a map; later keys override earlier ones.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse(format!("line {}: expected key = value, got {raw:?}", i + 1)));
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse(format!("{key}: cannot parse {v:?}")))
}

fn floats(key: &str, v: &str) -> Result<Vec<f64>> {
    list(v).iter().map(|s| num(key, s)).collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Parse(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str, base: &Path) -> Result<Self> {
        Self::from_entries(parse_entries(text)?, base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Builds a configuration; relative file paths resolve against `base`.
    pub fn from_entries(entries: BTreeMap<String, String>, base: &Path) -> Result<Self> {
        for k in entries.keys() {
            let known = match k.strip_prefix("region.") {
                Some(rest) => rest.rsplit_once('.').is_some_and(|(_, f)| REGION_KEYS.contains(&f)),
                None => GLOBAL_KEYS.contains(&k.as_str()),
            };
            if !known {
                return Err(Error::Parse(format!("unknown configuration key {k:?}")));
            }
        }
        let get = |k: &str| entries.get(k).map(String::as_str);
        let setting = match get("setting").unwrap_or("retrospective") {
            "retrospective" => Setting::Retrospective,
            "realtime" | "real-time" => Setting::RealTime,
            s => return Err(Error::Parse(format!("setting: unknown value {s:?}"))),
        };
        let noise = match get("noise") {
            None => match setting {
                Setting::Retrospective => NoiseKind::PoissonBinomial,
                Setting::RealTime => NoiseKind::BetaBinomial,
            },
            Some("poisson-binomial") => NoiseKind::PoissonBinomial,
            Some("beta-binomial") => NoiseKind::BetaBinomial,
            Some(s) => return Err(Error::Parse(format!("noise: unknown value {s:?}"))),
        };
        let delay_source = match get("delay_source").unwrap_or("fixed") {
            "fixed" => DelaySource::Fixed,
            "scan" => DelaySource::Scan,
            s => return Err(Error::Parse(format!("delay_source: unknown value {s:?}"))),
        };
        let names = list(get("regions").unwrap_or("large,medium,small"));
        if names.is_empty() {
            return Err(Error::Validation("no regions configured".into()));
        }
        let mut regions = Vec::new();
        for name in &names {
            let mut r = RegionConfig::preset(name);
            let key = |f: &str| format!("region.{name}.{f}");
            let path = |f: &str| get(&key(f)).map(|p| base.join(p));
            if let Some(v) = get(&key("scale")) {
                r.scale = num(&key("scale"), v)?;
            }
            if let Some(v) = get(&key("delay_mean")) {
                r.delay_mean = num(&key("delay_mean"), v)?;
            }
            if let Some(v) = get(&key("dispersion")) {
                r.dispersion = num(&key("dispersion"), v)?;
            }
            if let Some(v) = get(&key("severity_factor")) {
                r.severity_factor = num(&key("severity_factor"), v)?;
            }
            if let Some(v) = get(&key("severity")) {
                let pairs = list(v)
                    .iter()
                    .map(|item| {
                        let (n, s) = item
                            .split_once(':')
                            .ok_or_else(|| Error::Parse(format!("{}: expected variant:rate", key("severity"))))?;
                        Ok((n.trim().to_string(), num(&key("severity"), s.trim())?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                r.severities = Some(pairs);
            }
            r.primary = path("primary");
            r.secondary = path("secondary");
            r.variants = path("variants");
            for p in [&r.primary, &r.secondary, &r.variants].into_iter().flatten() {
                if !p.exists() {
                    return Err(Error::Validation(format!("input file {} does not exist", p.display())));
                }
            }
            if r.variants.is_some() && r.severities.is_none() && r.secondary.is_none() {
                return Err(Error::Validation(format!(
                    "{} needs {} or {}",
                    key("variants"),
                    key("severity"),
                    key("secondary")
                )));
            }
            if delay_source == DelaySource::Scan && (r.primary.is_none() || r.secondary.is_none()) {
                return Err(Error::Validation(format!(
                    "delay_source = scan needs {} and {}",
                    key("primary"),
                    key("secondary")
                )));
            }
            regions.push(r);
        }
        let methods = list(get("methods").unwrap_or("lagged,conv,deconv-0"))
            .iter()
            .map(|m| MethodName::parse(m))
            .collect::<Result<Vec<_>>>()?;
        if methods.is_empty() {
            return Err(Error::Validation("no methods configured".into()));
        }
        let rules = list(get("rules").unwrap_or("min,1se"))
            .iter()
            .map(|r| Rule::parse(r))
            .collect::<Result<Vec<_>>>()?;
        if rules.is_empty() {
            return Err(Error::Validation("no selection rules configured".into()));
        }
        let gamma = match get("gamma_grid") {
            Some(v) => Grid::new(floats("gamma_grid", v)?)?,
            None => Grid::gamma_default(),
        };
        let windows = match get("windows") {
            Some(v) => Grid::new(floats("windows", v)?)?,
            None => Grid::window_default(),
        };
        if windows.values().iter().any(|w| *w < 1.0 || w.fract() != 0.0) {
            return Err(Error::Validation("windows must be positive integers".into()));
        }
        let delay_support = get("delay_support").map_or(Ok(DEFAULT_SUPPORT), |v| num("delay_support", v))?;
        let cadence: usize = get("cadence").map_or(Ok(7), |v| num("cadence", v))?;
        if cadence < 1 {
            return Err(Error::Validation("cadence must be at least 1".into()));
        }
        let threads = match get("threads") {
            Some(v) => num("threads", v)?,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        let cfg = Self {
            output: base.join(get("output").unwrap_or("results")),
            setting,
            noise,
            regions,
            start: match get("start") {
                Some(v) => NaiveDate::parse_from_str(v, "%Y-%m-%d")
                    .map_err(|e| Error::Parse(format!("start: {e}")))?,
                None => crate::series::default_origin(),
            },
            days: get("days").map_or(Ok(600), |v| num("days", v))?,
            replicates: get("replicates").map_or(Ok(10), |v| num("replicates", v))?,
            seed: get("seed").map_or(Ok(1), |v| num("seed", v))?,
            cadence,
            methods,
            rules,
            oracle: get("oracle").map_or(Ok(false), |v| flag("oracle", v))?,
            folds: get("folds").map_or(Ok(5), |v| num("folds", v))?,
            forward_steps: get("forward_steps").map_or(Ok(28), |v| num("forward_steps", v))?,
            lambda_points: get("lambda_points").map_or(Ok(20), |v| num("lambda_points", v))?,
            lambda_max_iterations: get("lambda_max_iterations").map_or(Ok(50), |v| num("lambda_max_iterations", v))?,
            gamma,
            windows,
            delay_support,
            delay_source,
            scan_max_lag: get("scan_max_lag").map_or(Ok(45), |v| num("scan_max_lag", v))?,
            burn: get("burn").map_or(Ok(delay_support), |v| num("burn", v))?,
            misspec_offsets: get("misspec_offsets").map_or(Ok(Vec::new()), |v| floats("misspec_offsets", v))?,
            misspec_replicates: get("misspec_replicates").map_or(Ok(1), |v| num("misspec_replicates", v))?,
            history: get("history").map_or(Ok(180), |v| num("history", v))?,
            retune_every: get("retune_every").map_or(Ok(56), |v| num("retune_every", v))?,
            threads: threads.max(1),
            entries,
        };
        if cfg.replicates == 0 || cfg.misspec_replicates == 0 {
            return Err(Error::Validation("replicate counts must be positive".into()));
        }
        if cfg.misspec_offsets.iter().any(|o| *o == 0.0 || !o.is_finite()) {
            return Err(Error::Validation("misspecification offsets must be nonzero".into()));
        }
        Ok(cfg)
    }

    /// Canonical `key = value` rendering of the supplied entries that can
    /// change results; `output` and `threads` are left out.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries.iter().filter(|(k, _)| !matches!(k.as_str(), "output" | "threads")) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
