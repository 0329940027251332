//! Experiment runner: configuration, dataset files, batches of seeded runs,
//! per-iteration aggregation and result files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::design::{choose_time, ipe_controls, schedule_times, HeuristicConfig, HeuristicKind};
use crate::ensemble::{ModeThresholds, Moments, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::kernels::{grf_update, GrfConfig};
use crate::models::{Controls, Datum, DomainBox, ModelKind, ModelSpec};
use crate::rng::{run_seed, StreamRng};
use crate::smc::{named_enum, order_dataset, tle_run, RunTrace, Sir, SirConfig, TemperSchedule, TraceRecord};
use crate::subsampling::IndexSampling;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Pre-generate the whole dataset, order it, then infer.
    #[default]
    Offline,
    /// Choose each control from the current posterior.
    Adaptive,
}

named_enum!(Mode {
    Offline => "offline",
    Adaptive => "adaptive",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Sir,
    Tle,
    /// Gaussian rejection filtering.
    Grf,
}

named_enum!(Method {
    Sir => "sir",
    Tle => "tle",
    Grf => "grf",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Source {
    Truth(Vec<f64>),
    Dataset(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub source: Source,
    pub mode: Mode,
    pub method: Method,
    /// Number of data per run.
    pub shots: usize,
    /// Consecutive shots taken at each control.
    pub repeats: usize,
    /// Report the more likely outcome instead of sampling it.
    pub noiseless: bool,
    /// Distinct simulated datasets shared round-robin by the runs; 0 gives
    /// every run its own.
    pub datasets: usize,
    pub sampler: SirConfig,
    pub stages: usize,
    pub grf: GrfConfig,
    pub heuristic: HeuristicConfig,
    /// Largest phase-estimation repetition count.
    pub ipe_m_max: u32,
    /// Multi-cosine mode diagnostics against the true modes.
    pub mode_metrics: bool,
    pub thresholds: ModeThresholds,
    pub runs: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Thread count for runs and particles; 0 keeps the global pool.
    pub workers: usize,
}

impl ExperimentConfig {
    pub fn new(model: ModelSpec, source: Source) -> Self {
        Self {
            model,
            source,
            mode: Mode::Offline,
            method: Method::Sir,
            shots: 100,
            repeats: 1,
            noiseless: false,
            datasets: 0,
            sampler: SirConfig::default(),
            stages: 10,
            grf: GrfConfig::default(),
            heuristic: HeuristicConfig {
                kind: HeuristicKind::FixedGrid,
                ..HeuristicConfig::default()
            },
            ipe_m_max: 100,
            mode_metrics: false,
            thresholds: ModeThresholds::default(),
            runs: 1,
            seed: 0,
            out: None,
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Config(m.to_string()));
        self.sampler.validate()?;
        self.heuristic.validate()?;
        self.grf.validate()?;
        if self.runs == 0 {
            return cfg("run.count must be at least 1");
        }
        if self.repeats == 0 {
            return cfg("experiment.repeats must be at least 1");
        }
        if let Source::Truth(t) = &self.source {
            self.model
                .domain()
                .check(t)
                .map_err(|e| Error::Config(format!("truth: {e}")))?;
            if self.shots == 0 {
                return cfg("experiment.shots must be at least 1");
            }
            if self.mode == Mode::Offline && !self.heuristic.kind.is_offline() && self.model.kind() != ModelKind::Ipe {
                return cfg("heuristic.kind must be an offline schedule when experiment.mode = offline");
            }
        } else if self.mode == Mode::Adaptive {
            return cfg("experiment.mode = adaptive needs simulated data (truth), not a dataset");
        }
        if self.mode == Mode::Adaptive && self.method == Method::Tle {
            return cfg("experiment.method = tle cannot run adaptively");
        }
        if self.method == Method::Tle {
            TemperSchedule::evenly_spaced(self.stages)
                .map_err(|_| Error::Config("tle.stages must be at least 1".into()))?;
        }
        if self.method == Method::Grf && self.mode != Mode::Adaptive {
            return cfg("experiment.method = grf is sequential and adaptive only");
        }
        if self.mode_metrics
            && (self.model.kind() != ModelKind::MultiCosine || !matches!(self.source, Source::Truth(_)))
        {
            return cfg("experiment.mode_metrics needs a multi-cosine model with known truth");
        }
        if self.ipe_m_max == 0 {
            return cfg("ipe.m_max must be at least 1");
        }
        Ok(())
    }

    pub fn truth(&self) -> Option<&[f64]> {
        match &self.source {
            Source::Truth(t) => Some(t),
            Source::Dataset(_) => None,
        }
    }
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are ignored.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if map.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(map)
}

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config_text(&text)
}

struct Keys {
    map: BTreeMap<String, String>,
}

impl Keys {
    fn raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'"))),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}' as a list of numbers"))),
        }
    }

    fn optional_f64(&mut self, key: &str) -> Result<Option<Option<f64>>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) if v == "none" => Ok(Some(None)),
            Some(v) => v
                .parse()
                .map(|x| Some(Some(x)))
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'"))),
        }
    }
}

fn model_from_keys(keys: &mut Keys) -> Result<ModelSpec> {
    let kind: ModelKind = keys
        .get::<String>("model.kind")?
        .ok_or_else(|| Error::Config("model.kind is required".into()))?
        .parse()
        .map_err(|e: Error| Error::Config(format!("model.kind: {e}")))?;
    let lower = keys.list("model.lower")?;
    let upper = keys.list("model.upper")?;
    let dim = match (kind.fixed_dim(), keys.get::<usize>("model.dim")?) {
        (Some(d), Some(given)) if d != given => {
            return Err(Error::Config(format!(
                "model.dim: {kind} has dimension {d}, not {given}"
            )));
        }
        (Some(d), _) => d,
        (None, Some(d)) => d,
        (None, None) => lower
            .as_ref()
            .map_or(0, |l| l.len())
            .max(upper.as_ref().map_or(0, |u| u.len())),
    };
    let widen = |key: &str, v: Option<Vec<f64>>| -> Result<Option<Vec<f64>>> {
        match v {
            Some(v) if v.len() == 1 => Ok(Some(vec![v[0]; dim])),
            Some(v) if v.len() == dim => Ok(Some(v)),
            Some(v) => Err(Error::Config(format!(
                "{key}: expected 1 or {dim} values, got {}",
                v.len()
            ))),
            None => Ok(None),
        }
    };
    let lower = widen("model.lower", lower)?;
    let upper = widen("model.upper", upper)?;
    let domain = match (lower, upper) {
        (Some(l), Some(u)) => {
            DomainBox::new(l, u).map_err(|e| Error::Config(format!("model.lower/model.upper: {e}")))?
        }
        (None, None) if kind == ModelKind::Ipe => DomainBox::cube(1, 0.0, 2.0 * std::f64::consts::PI)?,
        _ => return Err(Error::Config("model.lower and model.upper are required".into())),
    };
    let a = keys.get("model.a")?.unwrap_or(0.5);
    let b = keys.get("model.b")?.unwrap_or(0.5);
    ModelSpec::with_hyperparameters(kind, domain, a, b).map_err(|e| Error::Config(format!("model: {e}")))
}

fn sampling_from_str(key: &str, v: &str) -> Result<IndexSampling> {
    match v {
        "with-replacement" => Ok(IndexSampling::WithReplacement),
        "without-replacement" => Ok(IndexSampling::WithoutReplacement),
        other => Err(Error::Config(format!("{key}: unknown sampling '{other}'"))),
    }
}

impl ExperimentConfig {
    /// Builds a configuration from dotted keys. Unknown keys are errors.
    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        let mut k = Keys { map };
        let model = model_from_keys(&mut k)?;
        let truth = k.list("truth")?;
        let dataset = k.raw("dataset");
        let source = match (truth, dataset) {
            (Some(t), None) => Source::Truth(t),
            (None, Some(p)) => Source::Dataset(PathBuf::from(p)),
            _ => return Err(Error::Config("exactly one of truth and dataset must be given".into())),
        };
        let mut c = ExperimentConfig::new(model, source);
        k.set("experiment.mode", &mut c.mode)?;
        k.set("experiment.method", &mut c.method)?;
        k.set("experiment.shots", &mut c.shots)?;
        k.set("experiment.repeats", &mut c.repeats)?;
        k.set("experiment.noiseless", &mut c.noiseless)?;
        k.set("experiment.datasets", &mut c.datasets)?;
        k.set("experiment.mode_metrics", &mut c.mode_metrics)?;
        k.set("tle.stages", &mut c.stages)?;
        k.set("grf.samples", &mut c.grf.samples)?;
        k.set("ipe.m_max", &mut c.ipe_m_max)?;

        let s = &mut c.sampler;
        k.set("sampler.particles", &mut s.particles)?;
        k.set("sampler.threshold", &mut s.threshold)?;
        k.set("sampler.moves", &mut s.moves)?;
        k.set("sampler.kernel", &mut s.kernel)?;
        k.set("sampler.ordering", &mut s.ordering)?;
        k.set("sampler.move_every_step", &mut s.move_every_step)?;
        k.set("sampler.adapt_rwm", &mut s.adapt_rwm)?;
        k.set("liu_west.a", &mut s.liu_west.a)?;
        k.set("rwm.scale", &mut s.rwm.scale)?;
        k.set("rwm.target_acceptance", &mut s.rwm.target_acceptance)?;
        k.set("hmc.epsilon", &mut s.hmc.epsilon)?;
        k.set("hmc.steps", &mut s.hmc.steps)?;
        if let Some(m) = k.list("hmc.mass")? {
            s.hmc.mass = Some(m);
        }
        k.set("hybrid.threshold", &mut s.hybrid.threshold)?;
        k.set("sghmc.epsilon", &mut s.sghmc.epsilon)?;
        k.set("sghmc.steps", &mut s.sghmc.steps)?;
        k.set("sghmc.batch", &mut s.sghmc.batch)?;
        if let Some(f) = k.optional_f64("sghmc.friction")? {
            s.sghmc.friction = f;
        }
        k.set("sghmc.thermal_noise", &mut s.sghmc.thermal_noise)?;
        k.set("subsample.m", &mut s.subsample.m)?;
        k.set("subsample.blocks", &mut s.subsample.blocks)?;
        if let Some(v) = k.raw("subsample.sampling") {
            s.subsample.sampling = sampling_from_str("subsample.sampling", &v)?;
        }
        k.set("subsample.inner", &mut s.subsample.inner)?;
        k.set("subsample.warmup_fraction", &mut s.subsample.warmup_fraction)?;

        let h = &mut c.heuristic;
        k.set("heuristic.kind", &mut h.kind)?;
        k.set("heuristic.increment", &mut h.increment)?;
        k.set("heuristic.c", &mut h.c)?;
        k.set("heuristic.c1", &mut h.c1)?;
        k.set("heuristic.c2", &mut h.c2)?;
        if let Some(b) = k.optional_f64("heuristic.base")? {
            h.base = b;
        }
        k.set("heuristic.bins", &mut h.bins)?;
        k.set("heuristic.candidates", &mut h.candidates)?;
        k.set("heuristic.candidate_spread", &mut h.candidate_spread)?;
        k.set("heuristic.time_scale", &mut h.time_scale)?;
        if let Some(t) = k.optional_f64("heuristic.t_max")? {
            h.t_max = t;
        }

        let t = &mut c.thresholds;
        k.set("metrics.distance", &mut t.distance)?;
        k.set("metrics.std", &mut t.std)?;
        k.set("metrics.error_relative", &mut t.error_relative)?;
        k.set("metrics.weight_factor", &mut t.weight_factor)?;
        k.set("metrics.coverage_radius", &mut t.coverage_radius)?;

        k.set("run.count", &mut c.runs)?;
        k.set("run.seed", &mut c.seed)?;
        k.set("run.workers", &mut c.workers)?;
        if let Some(o) = k.raw("run.out") {
            c.out = Some(PathBuf::from(o));
        }
        if let Some(key) = k.map.keys().next() {
            return Err(Error::Config(format!("{key}: unknown key")));
        }
        c.validate()?;
        Ok(c)
    }
}

// ---------------------------------------------------------------------------
// Datasets

pub const DATASET_HEADER: &str = "t,m,theta_ctl,outcome";

fn dataset_row(d: &Datum) -> String {
    let c = &d.controls;
    let has_ipe = c.m != 1 || c.theta_ctl != 0.0;
    let t = if has_ipe && c.t == 0.0 {
        String::new()
    } else {
        c.t.to_string()
    };
    let (m, th) = if has_ipe {
        (c.m.to_string(), c.theta_ctl.to_string())
    } else {
        (String::new(), String::new())
    };
    format!("{t},{m},{th},{}", d.outcome())
}

pub fn write_dataset<W: Write>(mut out: W, data: &[Datum]) -> std::io::Result<()> {
    writeln!(out, "{DATASET_HEADER}")?;
    for d in data {
        writeln!(out, "{}", dataset_row(d))?;
    }
    out.flush()
}

/// Parses the dataset schema; errors carry the 1-based file line.
pub fn read_dataset<R: Read>(input: R) -> Result<Vec<Datum>> {
    let mut lines = BufReader::new(input).lines();
    let io = |line: usize, e: std::io::Error| Error::Dataset {
        line,
        message: e.to_string(),
    };
    match lines.next() {
        None => return Ok(Vec::new()),
        Some(h) => {
            let h = h.map_err(|e| io(1, e))?;
            if h.trim() != DATASET_HEADER {
                return Err(Error::Dataset {
                    line: 1,
                    message: format!("expected header '{DATASET_HEADER}', got '{}'", h.trim()),
                });
            }
        }
    }
    let mut out = Vec::new();
    for (i, l) in lines.enumerate() {
        let line = i + 2;
        let l = l.map_err(|e| io(line, e))?;
        let l = l.trim();
        if l.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Dataset { line, message };
        let cols: Vec<&str> = l.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(bad(format!("expected 4 columns, got {}", cols.len())));
        }
        let num = |i: usize, name: &str, default: f64| -> Result<f64> {
            if cols[i].is_empty() {
                Ok(default)
            } else {
                cols[i]
                    .parse()
                    .map_err(|_| bad(format!("{name} is not a number: '{}'", cols[i])))
            }
        };
        let t = num(0, "t", 0.0)?;
        let m = if cols[1].is_empty() {
            1
        } else {
            cols[1]
                .parse()
                .map_err(|_| bad(format!("m is not a positive integer: '{}'", cols[1])))?
        };
        let theta = num(2, "theta_ctl", 0.0)?;
        let outcome: i64 = cols[3]
            .parse()
            .map_err(|_| bad(format!("outcome is not an integer: '{}'", cols[3])))?;
        let controls = Controls { t, m, theta_ctl: theta };
        out.push(Datum::new(controls, outcome).map_err(|e| bad(e.to_string()))?);
    }
    Ok(out)
}

pub fn ingest_dataset(path: &Path) -> Result<Vec<Datum>> {
    let f = fs::File::open(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    read_dataset(f)
}

pub fn save_dataset(path: &Path, data: &[Datum]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    write_dataset(std::io::BufWriter::new(f), data).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// One shot at `c`: sampled, or the more likely outcome when `noiseless`.
pub fn simulate_shot<R: Rng + ?Sized>(
    model: &ModelSpec,
    truth: &[f64],
    c: Controls,
    noiseless: bool,
    rng: &mut R,
) -> Result<Datum> {
    if noiseless {
        let p1 = model.likelihood(truth, &Datum::from_bool(c, true))?;
        Ok(Datum::from_bool(c, p1 >= 0.5))
    } else {
        model.simulate_outcome(truth, c, rng)
    }
}

/// Offline controls for control index `k` (from 1). Phase estimation cycles
/// through `m ∈ 1..=10`, `θ ∈ {0, π/5, …, 9π/5}`.
fn offline_controls<R: Rng + ?Sized>(cfg: &ExperimentConfig, k: usize, rng: &mut R) -> Result<Controls> {
    if cfg.model.kind() == ModelKind::Ipe {
        let j = k - 1;
        let m = (j / 10) % 10 + 1;
        let theta = (j % 10) as f64 * std::f64::consts::PI / 5.0;
        return Ok(Controls::ipe(m as u32, theta));
    }
    Ok(Controls::time(schedule_times(
        cfg.heuristic.kind,
        k,
        &cfg.heuristic,
        rng,
    )?))
}

/// Offline dataset for one run (or one shared dataset).
pub fn simulate_dataset<R: Rng + ?Sized>(cfg: &ExperimentConfig, truth: &[f64], rng: &mut R) -> Result<Vec<Datum>> {
    let mut out = Vec::with_capacity(cfg.shots);
    let mut k = 0;
    while out.len() < cfg.shots {
        k += 1;
        let c = offline_controls(cfg, k, rng)?;
        for _ in 0..cfg.repeats.min(cfg.shots - out.len()) {
            out.push(simulate_shot(&cfg.model, truth, c, cfg.noiseless, rng)?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub std: f64,
    pub avg_distance: f64,
    pub covered_fraction: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub dataset: usize,
    pub error: Option<String>,
    pub final_mean: Vec<f64>,
    pub final_std: Vec<f64>,
    pub log_evidence: Option<f64>,
    pub iterations: usize,
    pub resamples: usize,
    pub accept_rate: Option<f64>,
    /// Sum of the evolution times used.
    pub cumulative_time: f64,
    /// Fitted exponent of the largest std against cumulative time.
    pub scaling_exponent: Option<f64>,
    pub modes: Option<ModeSummary>,
}

impl RunSummary {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

impl Quartiles {
    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quartiles(values: &[f64]) -> Quartiles {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Quartiles {
        q25: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q75: quantile_sorted(&v, 0.75),
    }
}

pub fn median(values: &[f64]) -> f64 {
    quartiles(values).median
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationAggregate {
    pub iter: usize,
    /// Runs that reached this iteration.
    pub runs: usize,
    pub mean: Vec<Quartiles>,
    pub std: Vec<Quartiles>,
    pub cumulative_time: Option<Quartiles>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub exponent: f64,
    pub intercept: f64,
    /// 95% confidence interval of the exponent.
    pub ci_low: f64,
    pub ci_high: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub param_names: Vec<String>,
    pub runs: Vec<RunSummary>,
    pub aggregate: Vec<IterationAggregate>,
    /// Median over successful runs of the final means.
    pub estimate: Vec<f64>,
    /// Median over successful runs of the final stds.
    pub uncertainty: Vec<f64>,
    /// Fit on the per-iteration medians of largest std and cumulative time.
    pub scaling: Option<ScalingFit>,
    #[serde(skip)]
    pub traces: Vec<RunTrace>,
}

impl RunReport {
    pub fn successful(&self) -> impl Iterator<Item = &RunSummary> {
        self.runs.iter().filter(|r| r.ok())
    }

    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| !r.ok()).count()
    }
}

/// Least-squares slope of `ln σ` against `ln T`.
pub fn scaling_fit(cumulative: &[f64], sigma: &[f64]) -> Result<ScalingFit> {
    if cumulative.len() != sigma.len() {
        return Err(Error::Fit(format!(
            "{} times but {} uncertainties",
            cumulative.len(),
            sigma.len()
        )));
    }
    let n = sigma.len();
    if n < 5 {
        return Err(Error::Fit(format!("need at least 5 points, got {n}")));
    }
    if let Some(v) = cumulative.iter().chain(sigma).find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Fit(format!("non-positive value {v}")));
    }
    let x: Vec<f64> = cumulative.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = sigma.iter().map(|v| v.ln()).collect();
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("cumulative times are all equal".into()));
    }
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let se = (rss / (nf - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, nf - 2.0)
        .map_err(|e| Error::Fit(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(ScalingFit {
        exponent: slope,
        intercept,
        ci_low: slope - t * se,
        ci_high: slope + t * se,
        points: n,
    })
}

/// Cumulative evolution time and largest std per record with a control.
fn trace_scaling_points(trace: &RunTrace) -> (Vec<f64>, Vec<f64>) {
    let mut total = 0.0;
    let mut ts = Vec::new();
    let mut ss = Vec::new();
    for r in &trace.records {
        if let Some(t) = r.control_t {
            total += t;
            ts.push(total);
            ss.push(r.std.iter().cloned().fold(0.0, f64::max));
        }
    }
    (ts, ss)
}

struct RunOutcome {
    ensemble_moments: Moments,
    trace: RunTrace,
    modes: Option<ModeSummary>,
}

fn grf_run(cfg: &ExperimentConfig, truth: &[f64], rng: &mut StreamRng) -> Result<RunOutcome> {
    let domain = cfg.model.domain();
    let mean: Vec<f64> = (0..domain.dim())
        .map(|k| 0.5 * (domain.lower()[k] + domain.upper()[k]))
        .collect();
    let std: Vec<f64> = (0..domain.dim()).map(|k| domain.width(k) / 12f64.sqrt()).collect();
    let mut belief = Moments::diagonal(mean, std);
    let mut trace = RunTrace::default();
    let mut shots = 0;
    while shots < cfg.shots {
        let c = if cfg.model.kind() == ModelKind::Ipe {
            ipe_controls(belief.mean[0], belief.std[0], cfg.ipe_m_max)
        } else {
            Controls::time(1.0 / belief.max_std().max(f64::MIN_POSITIVE))
        };
        for _ in 0..cfg.repeats.min(cfg.shots - shots) {
            shots += 1;
            let d = simulate_shot(&cfg.model, truth, c, cfg.noiseless, rng)?;
            let out = grf_update(&belief, &cfg.model, &d, &cfg.grf, rng)?;
            belief = out.moments;
            trace.records.push(TraceRecord {
                iter: shots,
                ess: out.accepted as f64,
                resampled: false,
                log_normalizer: 0.0,
                evidence_log: 0.0,
                mean: belief.mean.clone(),
                std: belief.std.clone(),
                accept_rate: Some(out.accepted as f64 / out.drawn as f64),
                control_t: (cfg.model.kind() != ModelKind::Ipe).then_some(c.t),
            });
        }
    }
    Ok(RunOutcome {
        ensemble_moments: belief,
        trace,
        modes: None,
    })
}

fn adaptive_sir(cfg: &ExperimentConfig, truth: &[f64], rng: &mut StreamRng) -> Result<(WeightedEnsemble, RunTrace)> {
    let seed: u64 = rng.random();
    let mut sir = Sir::new(&cfg.model, cfg.sampler.clone(), seed)?;
    let mut k = 0;
    while sir.data().len() < cfg.shots {
        k += 1;
        let c = if cfg.model.kind() == ModelKind::Ipe {
            let m = sir.moments();
            ipe_controls(m.mean[0], m.std[0], cfg.ipe_m_max)
        } else {
            Controls::time(choose_time(&cfg.heuristic, k, sir.ensemble(), &cfg.model, rng)?.t)
        };
        for _ in 0..cfg.repeats.min(cfg.shots - sir.data().len()) {
            let d = simulate_shot(&cfg.model, truth, c, cfg.noiseless, rng)?;
            sir.update(d)?;
        }
    }
    Ok(sir.into_parts())
}

fn offline_infer(cfg: &ExperimentConfig, data: &[Datum], rng: &mut StreamRng) -> Result<(WeightedEnsemble, RunTrace)> {
    match cfg.method {
        Method::Sir => {
            let seed: u64 = rng.random();
            let ordered = order_dataset(data, cfg.sampler.ordering, rng);
            let mut sir = Sir::new(&cfg.model, cfg.sampler.clone(), seed)?;
            for d in ordered {
                sir.update(d)?;
            }
            Ok(sir.into_parts())
        }
        Method::Tle => {
            let schedule = TemperSchedule::evenly_spaced(cfg.stages)?;
            tle_run(&cfg.model, data, &schedule, &cfg.sampler, rng)
        }
        Method::Grf => unreachable!("validated"),
    }
}

fn dataset_seed(seed: u64, index: usize) -> u64 {
    run_seed(seed ^ 0xda7a_5e7d_da7a_5e7d, index as u64)
}

fn execute_run(cfg: &ExperimentConfig, run: usize, ingested: Option<&[Datum]>) -> Result<RunOutcome> {
    let seed = run_seed(cfg.seed, run as u64);
    let mut rng = StreamRng::seed_from_u64(seed);
    if cfg.method == Method::Grf {
        return grf_run(cfg, cfg.truth().unwrap(), &mut rng);
    }
    let (ensemble, trace) = match (cfg.mode, ingested, cfg.truth()) {
        (_, Some(data), _) => offline_infer(cfg, data, &mut rng)?,
        (Mode::Adaptive, None, Some(truth)) => adaptive_sir(cfg, truth, &mut rng)?,
        (Mode::Offline, None, Some(truth)) => {
            let data = if cfg.datasets > 0 {
                let mut drng = StreamRng::seed_from_u64(dataset_seed(cfg.seed, run % cfg.datasets));
                simulate_dataset(cfg, truth, &mut drng)?
            } else {
                simulate_dataset(cfg, truth, &mut rng)?
            };
            offline_infer(cfg, &data, &mut rng)?
        }
        _ => unreachable!("validated"),
    };
    let modes = if cfg.mode_metrics {
        let truth = cfg.truth().unwrap();
        let m = ensemble.mode_metrics(&cfg.model.mode_set(truth)?, cfg.model.domain(), &cfg.thresholds);
        Some(ModeSummary {
            std: m.std,
            avg_distance: m.avg_distance,
            covered_fraction: m.covered_fraction(),
            success: m.success,
        })
    } else {
        None
    };
    Ok(RunOutcome {
        ensemble_moments: ensemble.moments(),
        trace,
        modes,
    })
}

fn summarize(run: usize, cfg: &ExperimentConfig, res: Result<RunOutcome>) -> (RunSummary, RunTrace) {
    let seed = run_seed(cfg.seed, run as u64);
    let dataset = match (&cfg.source, cfg.datasets) {
        (Source::Dataset(_), _) => 0,
        (_, 0) => run,
        (_, d) => run % d,
    };
    match res {
        Ok(o) => {
            let (ts, ss) = trace_scaling_points(&o.trace);
            let cumulative_time = ts.last().copied().unwrap_or(0.0);
            let scaling_exponent = scaling_fit(&ts, &ss).ok().map(|f| f.exponent);
            let log_evidence = (cfg.method != Method::Grf).then(|| o.trace.log_evidence());
            (
                RunSummary {
                    run,
                    seed,
                    dataset,
                    error: None,
                    final_mean: o.ensemble_moments.mean.clone(),
                    final_std: o.ensemble_moments.std.clone(),
                    log_evidence,
                    iterations: o.trace.len(),
                    resamples: o.trace.resample_count(),
                    accept_rate: o.trace.stats.accept_rate(),
                    cumulative_time,
                    scaling_exponent,
                    modes: o.modes,
                },
                o.trace,
            )
        }
        Err(e) => (
            RunSummary {
                run,
                seed,
                dataset,
                error: Some(e.to_string()),
                final_mean: Vec::new(),
                final_std: Vec::new(),
                log_evidence: None,
                iterations: 0,
                resamples: 0,
                accept_rate: None,
                cumulative_time: 0.0,
                scaling_exponent: None,
                modes: None,
            },
            RunTrace::default(),
        ),
    }
}

/// Per-iteration quartiles over the runs that reached each iteration.
pub fn aggregate_traces(traces: &[RunTrace]) -> Vec<IterationAggregate> {
    let longest = traces.iter().map(|t| t.len()).max().unwrap_or(0);
    let dim = traces
        .iter()
        .find_map(|t| t.records.first().map(|r| r.mean.len()))
        .unwrap_or(0);
    let cumulative: Vec<Vec<Option<f64>>> = traces
        .iter()
        .map(|t| {
            let mut total = 0.0;
            t.records
                .iter()
                .map(|r| {
                    r.control_t.map(|c| {
                        total += c;
                        total
                    })
                })
                .collect()
        })
        .collect();
    (0..longest)
        .map(|i| {
            let rows: Vec<&TraceRecord> = traces.iter().filter_map(|t| t.records.get(i)).collect();
            let col = |f: &dyn Fn(&TraceRecord) -> f64| quartiles(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            let times: Vec<f64> = cumulative.iter().filter_map(|c| c.get(i).copied().flatten()).collect();
            IterationAggregate {
                iter: i + 1,
                runs: rows.len(),
                mean: (0..dim).map(|k| col(&|r| r.mean[k])).collect(),
                std: (0..dim).map(|k| col(&|r| r.std[k])).collect(),
                cumulative_time: (!times.is_empty()).then(|| quartiles(&times)),
            }
        })
        .collect()
}

fn build_report(param_names: Vec<String>, runs: Vec<RunSummary>, traces: Vec<RunTrace>) -> RunReport {
    let ok_traces: Vec<RunTrace> = runs
        .iter()
        .zip(&traces)
        .filter(|(r, _)| r.ok())
        .map(|(_, t)| t.clone())
        .collect();
    let aggregate = aggregate_traces(&ok_traces);
    let dim = param_names.len();
    let ok: Vec<&RunSummary> = runs.iter().filter(|r| r.ok()).collect();
    let (estimate, uncertainty) = if ok.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        (
            (0..dim)
                .map(|k| median(&ok.iter().map(|r| r.final_mean[k]).collect::<Vec<_>>()))
                .collect(),
            (0..dim)
                .map(|k| median(&ok.iter().map(|r| r.final_std[k]).collect::<Vec<_>>()))
                .collect(),
        )
    };
    let (ts, ss): (Vec<f64>, Vec<f64>) = aggregate
        .iter()
        .filter_map(|a| {
            let t = a.cumulative_time?.median;
            let s = a.std.iter().map(|q| q.median).fold(0.0, f64::max);
            Some((t, s))
        })
        .unzip();
    let scaling = scaling_fit(&ts, &ss).ok();
    RunReport {
        param_names,
        runs,
        aggregate,
        estimate,
        uncertainty,
        scaling,
        traces,
    }
}

/// Executes `cfg.runs` independent seeded runs. Per-run failures are kept
/// in the report; only configuration and dataset errors abort.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let ingested = match &cfg.source {
        Source::Dataset(p) => Some(ingest_dataset(p)?),
        Source::Truth(_) => None,
    };
    if let Some(data) = &ingested {
        for (i, d) in data.iter().enumerate() {
            cfg.model.check_controls(&d.controls).map_err(|e| Error::Dataset {
                line: i + 2,
                message: e.to_string(),
            })?;
        }
    }
    let body = || -> Vec<(RunSummary, RunTrace)> {
        (0..cfg.runs)
            .into_par_iter()
            .map(|run| summarize(run, cfg, execute_run(cfg, run, ingested.as_deref())))
            .collect()
    };
    let results = if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("run.workers: {e}")))?
            .install(body)
    } else {
        body()
    };
    let (runs, traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(build_report(cfg.model.param_names(), runs, traces))
}

// ---------------------------------------------------------------------------
// Output

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    JsonLines,
}

named_enum!(ReportFormat {
    Csv => "csv",
    JsonLines => "json-lines",
});

pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const RUNS_FILE: &str = "runs.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const REPORT_FILE: &str = "report.json";
pub const TRACE_DIR: &str = "traces";

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn aggregate_csv(report: &RunReport) -> String {
    let mut s = String::from("iter,runs");
    for name in &report.param_names {
        for what in ["mean", "std"] {
            for q in ["median", "q25", "q75"] {
                write!(s, ",{name}_{what}_{q}").unwrap();
            }
        }
    }
    s.push_str(",cumulative_time_median\n");
    for a in &report.aggregate {
        write!(s, "{},{}", a.iter, a.runs).unwrap();
        for k in 0..report.param_names.len() {
            for q in [&a.mean[k], &a.std[k]] {
                write!(s, ",{},{},{}", q.median, q.q25, q.q75).unwrap();
            }
        }
        match a.cumulative_time {
            Some(c) => writeln!(s, ",{}", c.median).unwrap(),
            None => s.push_str(",\n"),
        }
    }
    s
}

/// `name = <estimate> ± <uncertainty>` per parameter.
pub fn summary_text(report: &RunReport) -> String {
    let mut s = String::new();
    let ok = report.successful().count();
    writeln!(s, "runs = {} ({} failed)", report.runs.len(), report.runs.len() - ok).unwrap();
    for (k, name) in report.param_names.iter().enumerate() {
        if let (Some(e), Some(u)) = (report.estimate.get(k), report.uncertainty.get(k)) {
            writeln!(s, "{name} = {e} ± {u}").unwrap();
        }
    }
    if let Some(f) = &report.scaling {
        writeln!(s, "scaling exponent = {} [{}, {}]", f.exponent, f.ci_low, f.ci_high).unwrap();
    }
    let modes: Vec<&ModeSummary> = report.successful().filter_map(|r| r.modes.as_ref()).collect();
    if !modes.is_empty() {
        let rate = modes.iter().filter(|m| m.success).count() as f64 / modes.len() as f64;
        let std = median(&modes.iter().map(|m| m.std).collect::<Vec<_>>());
        writeln!(s, "mode success rate = {rate}").unwrap();
        writeln!(s, "mode std median = {std}").unwrap();
    }
    s
}

/// Writes the aggregate CSV (or the whole report as JSON for `JsonLines`),
/// per-run summaries as JSON lines, per-run trace CSVs and a text summary.
pub fn report_emit(report: &RunReport, dir: &Path, format: ReportFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    match format {
        ReportFormat::Csv => {
            let p = dir.join(AGGREGATE_FILE);
            fs::write(&p, aggregate_csv(report)).map_err(io_err(&p))?;
        }
        ReportFormat::JsonLines => {
            let p = dir.join(REPORT_FILE);
            let text = serde_json::to_string(report).map_err(|e| Error::Io {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            fs::write(&p, text).map_err(io_err(&p))?;
        }
    }
    let p = dir.join(RUNS_FILE);
    let mut lines = String::new();
    for r in &report.runs {
        lines.push_str(&serde_json::to_string(r).expect("run summaries serialize"));
        lines.push('\n');
    }
    fs::write(&p, lines).map_err(io_err(&p))?;
    let tdir = dir.join(TRACE_DIR);
    fs::create_dir_all(&tdir).map_err(io_err(&tdir))?;
    for (r, t) in report.runs.iter().zip(&report.traces) {
        if !r.ok() {
            continue;
        }
        let p = tdir.join(format!("run_{:05}.csv", r.run));
        let f = fs::File::create(&p).map_err(io_err(&p))?;
        t.write_csv(std::io::BufWriter::new(f)).map_err(|e| match e {
            Error::Io { message, .. } => Error::Io {
                path: p.display().to_string(),
                message,
            },
            other => other,
        })?;
    }
    let p = dir.join(SUMMARY_FILE);
    fs::write(&p, summary_text(report)).map_err(io_err(&p))?;
    Ok(())
}

/// Parses an aggregate CSV written by [`report_emit`].
pub fn read_aggregate_csv(text: &str) -> Result<(Vec<String>, Vec<IterationAggregate>)> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or(Error::Dataset {
            line: 1,
            message: "empty aggregate file".into(),
        })?
        .split(',')
        .collect();
    let per = 6;
    if header.len() < 3 || (header.len() - 3) % per != 0 {
        return Err(Error::Dataset {
            line: 1,
            message: "unexpected aggregate header".into(),
        });
    }
    let dim = (header.len() - 3) / per;
    let names: Vec<String> = (0..dim)
        .map(|k| header[2 + k * per].trim_end_matches("_mean_median").to_string())
        .collect();
    let mut out = Vec::new();
    for (i, l) in lines.enumerate() {
        let line = i + 2;
        let c: Vec<&str> = l.split(',').collect();
        let num = |j: usize| -> Result<f64> {
            c.get(j).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Dataset {
                line,
                message: format!("column {} is not a number", j + 1),
            })
        };
        let q = |j: usize| -> Result<Quartiles> {
            Ok(Quartiles {
                median: num(j)?,
                q25: num(j + 1)?,
                q75: num(j + 2)?,
            })
        };
        let last = c.len() - 1;
        out.push(IterationAggregate {
            iter: num(0)? as usize,
            runs: num(1)? as usize,
            mean: (0..dim).map(|k| q(2 + k * per)).collect::<Result<_>>()?,
            std: (0..dim).map(|k| q(5 + k * per)).collect::<Result<_>>()?,
            cumulative_time: if c[last].is_empty() {
                None
            } else {
                let m = num(last)?;
                Some(Quartiles {
                    q25: f64::NAN,
                    median: m,
                    q75: f64::NAN,
                })
            },
        });
    }
    Ok((names, out))
}

/// Rebuilds a report from a directory written by [`report_emit`].
pub fn reload_report(dir: &Path) -> Result<RunReport> {
    let p = dir.join(RUNS_FILE);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let mut runs = Vec::new();
    for (i, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        runs.push(serde_json::from_str::<RunSummary>(l).map_err(|e| Error::Dataset {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    let mut traces = Vec::with_capacity(runs.len());
    for r in &runs {
        if !r.ok() {
            traces.push(RunTrace::default());
            continue;
        }
        let p = dir.join(TRACE_DIR).join(format!("run_{:05}.csv", r.run));
        let f = fs::File::open(&p).map_err(io_err(&p))?;
        traces.push(RunTrace::read_csv(f).map_err(|e| match e {
            Error::Dataset { line, message } => Error::Io {
                path: p.display().to_string(),
                message: format!("line {line}: {message}"),
            },
            other => other,
        })?);
    }
    let dim = runs.iter().find(|r| r.ok()).map_or(0, |r| r.final_mean.len());
    let names = summary_names(dir).unwrap_or_else(|| (0..dim).map(|k| format!("theta_{k}")).collect());
    Ok(build_report(names, runs, traces))
}

fn summary_names(dir: &Path) -> Option<Vec<String>> {
    let text = fs::read_to_string(dir.join(AGGREGATE_FILE)).ok()?;
    read_aggregate_csv(&text).ok().map(|(n, _)| n)
}
