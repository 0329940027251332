//! Sequential drivers: sequential importance resampling over cumulative data
//! and tempered likelihood estimation over an exponent schedule.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Moments, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::kernels::{
    hmc_step, hybrid_step, liu_west_resample, rwm_step, sghmc_step, HmcConfig, HybridConfig, HybridKind, LiuWestConfig,
    LogTarget, RwmConfig, RwmProposal, SghmcConfig, TemperedPosterior,
};
use crate::models::{Datum, ModelSpec, ParameterPoint};
use crate::rng::stream;
use crate::subsampling::{
    build_control_variates, ecs_gibbs_step, pm_rwm_gibbs_step, ControlVariates, Estimate, EstimatorContext,
    IndexSampling, SubsampleState,
};

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub fn as_str(&self) -> &'static str {
                match self { $(Self::$variant => $text),+ }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl std::str::FromStr for $name {
            type Err = $crate::error::Error;
            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err($crate::error::Error::Config(format!(
                        concat!("unknown ", stringify!($name), " '{}'"), other
                    ))),
                }
            }
        }
    };
}
pub(crate) use named_enum;

/// Move kernel applied after resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelChoice {
    /// Liu-West shrinkage replaces the multinomial resample; no move.
    LiuWest,
    Rwm,
    Hmc,
    Hybrid,
    Sghmc,
    /// Subsampled Gibbs sweep: block index update, then a move at fixed
    /// indices.
    Ecs,
    /// Plain bootstrap resampling.
    None,
}

named_enum!(KernelChoice {
    LiuWest => "liu-west",
    Rwm => "rwm",
    Hmc => "hmc",
    Hybrid => "hybrid",
    Sghmc => "sghmc",
    Ecs => "ecs",
    None => "none",
});

/// Order in which data enter the filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OrderPolicy {
    #[default]
    AsGiven,
    TimeAscending,
    TimeDescending,
    Random,
}

named_enum!(OrderPolicy {
    AsGiven => "as-given",
    TimeAscending => "time-ascending",
    TimeDescending => "time-descending",
    Random => "random",
});

/// Move used at fixed subsample indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InnerKernel {
    #[default]
    Hmc,
    Rwm,
}

named_enum!(InnerKernel {
    Hmc => "hmc",
    Rwm => "rwm",
});

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsampleConfig {
    pub m: usize,
    pub blocks: usize,
    pub sampling: IndexSampling,
    pub inner: InnerKernel,
    /// Fraction of shortest-time data used to place the first reference
    /// point; zero uses the prior mean.
    pub warmup_fraction: f64,
}

impl Default for SubsampleConfig {
    fn default() -> Self {
        Self {
            m: 50,
            blocks: 3,
            sampling: IndexSampling::WithReplacement,
            inner: InnerKernel::Hmc,
            warmup_fraction: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SirConfig {
    pub particles: usize,
    /// Resample when ESS falls below `threshold · particles`.
    pub threshold: f64,
    /// Move steps per particle after each resample.
    pub moves: usize,
    pub kernel: KernelChoice,
    pub ordering: OrderPolicy,
    /// Also move after iterations that did not resample.
    pub move_every_step: bool,
    /// Tune the RWM scale between iterations.
    pub adapt_rwm: bool,
    pub liu_west: LiuWestConfig,
    pub rwm: RwmConfig,
    pub hmc: HmcConfig,
    pub hybrid: HybridConfig,
    pub sghmc: SghmcConfig,
    pub subsample: SubsampleConfig,
}

impl Default for SirConfig {
    fn default() -> Self {
        Self {
            particles: 1000,
            threshold: 0.5,
            moves: 1,
            kernel: KernelChoice::Rwm,
            ordering: OrderPolicy::AsGiven,
            move_every_step: false,
            adapt_rwm: true,
            liu_west: LiuWestConfig::default(),
            rwm: RwmConfig::default(),
            hmc: HmcConfig::default(),
            hybrid: HybridConfig::default(),
            sghmc: SghmcConfig::default(),
            subsample: SubsampleConfig::default(),
        }
    }
}

impl SirConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::Config("sampler.particles must be at least 2".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config("sampler.threshold must lie in (0, 1]".into()));
        }
        match self.kernel {
            KernelChoice::LiuWest => self.liu_west.validate()?,
            KernelChoice::Rwm => self.rwm.validate()?,
            KernelChoice::Hmc => self.hmc.validate()?,
            KernelChoice::Hybrid => {
                self.hmc.validate()?;
                self.rwm.validate()?;
                self.hybrid.validate()?;
            }
            KernelChoice::Sghmc => self.sghmc.validate()?,
            KernelChoice::Ecs => {
                let s = &self.subsample;
                if s.m == 0 || s.blocks == 0 || s.blocks > s.m {
                    return Err(Error::Config("subsample needs 1 <= blocks <= m".into()));
                }
                if !(0.0..1.0).contains(&s.warmup_fraction) {
                    return Err(Error::Config("subsample.warmup_fraction must lie in [0, 1)".into()));
                }
                match s.inner {
                    InnerKernel::Hmc => self.hmc.validate()?,
                    InnerKernel::Rwm => self.rwm.validate()?,
                }
            }
            KernelChoice::None => {}
        }
        Ok(())
    }
}

/// Strictly increasing tempering exponents ending at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperSchedule(Vec<f64>);

impl TemperSchedule {
    pub fn new(exponents: Vec<f64>) -> Result<Self> {
        if exponents.is_empty() {
            return Err(Error::Config("tempering schedule is empty".into()));
        }
        let mut prev = 0.0;
        for &g in &exponents {
            if !(g > prev && g <= 1.0) {
                return Err(Error::Config(format!(
                    "tempering exponents must increase strictly within (0, 1], got {g} after {prev}"
                )));
            }
            prev = g;
        }
        if prev != 1.0 {
            return Err(Error::Config("last tempering exponent must be 1".into()));
        }
        Ok(Self(exponents))
    }

    /// `γ_s = s / stages`.
    pub fn evenly_spaced(stages: usize) -> Result<Self> {
        if stages == 0 {
            return Err(Error::Config("tempering needs at least one stage".into()));
        }
        Self::new((1..=stages).map(|s| s as f64 / stages as f64).collect())
    }

    pub fn exponents(&self) -> &[f64] {
        &self.0
    }

    /// `γ_s − γ_{s−1}` with `γ_0 = 0`.
    pub fn increments(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.0
            .iter()
            .map(|&g| {
                let d = g - prev;
                prev = g;
                d
            })
            .collect()
    }
}

/// One row of a run trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub ess: f64,
    pub resampled: bool,
    /// Log of this iteration's weight normalizer.
    pub log_normalizer: f64,
    /// Running log evidence through this iteration.
    pub evidence_log: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub accept_rate: Option<f64>,
    pub control_t: Option<f64>,
}

/// Acceptance counters accumulated over a run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KernelStats {
    pub moves: u64,
    pub accepted: u64,
    pub accept_prob_sum: f64,
    /// Hybrid steps that needed no RWM follow-up.
    pub hmc_only: u64,
    pub hmc_only_accept_sum: f64,
    pub index_moves: u64,
    pub index_accepted: u64,
}

impl KernelStats {
    fn merge(&mut self, o: &KernelStats) {
        self.moves += o.moves;
        self.accepted += o.accepted;
        self.accept_prob_sum += o.accept_prob_sum;
        self.hmc_only += o.hmc_only;
        self.hmc_only_accept_sum += o.hmc_only_accept_sum;
        self.index_moves += o.index_moves;
        self.index_accepted += o.index_accepted;
    }

    pub fn accept_rate(&self) -> Option<f64> {
        (self.moves > 0).then(|| self.accepted as f64 / self.moves as f64)
    }

    pub fn mean_accept_prob(&self) -> Option<f64> {
        (self.moves > 0).then(|| self.accept_prob_sum / self.moves as f64)
    }

    /// Fraction of hybrid steps completed by HMC alone.
    pub fn hmc_fraction(&self) -> Option<f64> {
        (self.moves > 0).then(|| self.hmc_only as f64 / self.moves as f64)
    }

    /// Mean HMC acceptance probability over the HMC-only hybrid steps.
    pub fn hmc_acceptance(&self) -> Option<f64> {
        (self.hmc_only > 0).then(|| self.hmc_only_accept_sum / self.hmc_only as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub stats: KernelStats,
}

impl RunTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn log_evidence(&self) -> f64 {
        self.records.iter().map(|r| r.log_normalizer).sum()
    }

    pub fn resample_count(&self) -> usize {
        self.records.iter().filter(|r| r.resampled).count()
    }

    /// Writes `iter,ess,resampled,evidence_log,mean_*,std_*,accept_rate,control_t`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| Error::Io {
            path: "<trace>".into(),
            message: e.to_string(),
        };
        let dim = self.records.first().map_or(0, |r| r.mean.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["iter", "ess", "resampled", "evidence_log"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..dim).map(|k| format!("mean_{k}")));
        header.extend((0..dim).map(|k| format!("std_{k}")));
        header.push("accept_rate".into());
        header.push("control_t".into());
        w.write_record(&header).map_err(io)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.records {
            let mut row = vec![
                r.iter.to_string(),
                r.ess.to_string(),
                (r.resampled as u8).to_string(),
                r.evidence_log.to_string(),
            ];
            row.extend(r.mean.iter().map(|x| x.to_string()));
            row.extend(r.std.iter().map(|x| x.to_string()));
            row.push(opt(r.accept_rate));
            row.push(opt(r.control_t));
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<trace>".into(),
            message: e.to_string(),
        })
    }
}

impl RunTrace {
    /// Reads the layout written by [`RunTrace::write_csv`]. Kernel counters
    /// are not stored and come back zeroed; per-iteration normalizers are
    /// recovered from the running evidence.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let header = rd
            .headers()
            .map_err(|e| Error::Dataset {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        let dim = header.iter().filter(|h| h.starts_with("mean_")).count();
        if header.len() != 6 + 2 * dim {
            return Err(Error::Dataset {
                line: 1,
                message: format!("unexpected trace header with {} columns", header.len()),
            });
        }
        let mut records = Vec::new();
        let mut prev = 0.0;
        for (row, rec) in rd.records().enumerate() {
            let line = row + 2;
            let bad = |message: String| Error::Dataset { line, message };
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|_| bad(format!("column {} is not a number: '{}'", &header[i], &rec[i])))
            };
            let opt = |i: usize| -> Result<Option<f64>> {
                if rec[i].is_empty() {
                    Ok(None)
                } else {
                    num(i).map(Some)
                }
            };
            let evidence_log = num(3)?;
            records.push(TraceRecord {
                iter: rec[0]
                    .parse()
                    .map_err(|_| bad(format!("bad iteration '{}'", &rec[0])))?,
                ess: num(1)?,
                resampled: &rec[2] == "1",
                log_normalizer: evidence_log - prev,
                evidence_log,
                mean: (0..dim).map(|k| num(4 + k)).collect::<Result<_>>()?,
                std: (0..dim).map(|k| num(4 + dim + k)).collect::<Result<_>>()?,
                accept_rate: opt(4 + 2 * dim)?,
                control_t: opt(5 + 2 * dim)?,
            });
            prev = evidence_log;
        }
        Ok(Self {
            records,
            stats: KernelStats::default(),
        })
    }
}

/// Product of the recorded normalizers.
pub fn evidence(trace: &RunTrace) -> f64 {
    trace.log_evidence().exp()
}

fn time_key(d: &Datum) -> (f64, u32) {
    (d.controls.t, d.controls.m)
}

/// Stable reordering of the dataset.
pub fn order_dataset<R: Rng + ?Sized>(data: &[Datum], policy: OrderPolicy, rng: &mut R) -> Vec<Datum> {
    let mut out = data.to_vec();
    match policy {
        OrderPolicy::AsGiven => {}
        OrderPolicy::TimeAscending => out.sort_by(|a, b| time_key(a).partial_cmp(&time_key(b)).unwrap()),
        OrderPolicy::TimeDescending => out.sort_by(|a, b| time_key(b).partial_cmp(&time_key(a)).unwrap()),
        OrderPolicy::Random => out.shuffle(rng),
    }
    out
}

/// Per-particle subsampling state for the ECS kernel.
#[derive(Debug, Clone)]
struct SubsampleMoves {
    cv: ControlVariates,
    states: Vec<SubsampleState>,
}

/// Shared state of a sequential run: ensemble, adaptive tuning and trace.
#[derive(Debug, Clone)]
struct Engine<'a> {
    model: &'a ModelSpec,
    cfg: SirConfig,
    ensemble: WeightedEnsemble,
    trace: RunTrace,
    seed: u64,
    step: u64,
    rwm_scale: f64,
    /// Mean HMC acceptance of the last hybrid move, screened by the next.
    hmc_acceptance: Option<f64>,
    subsample: Option<SubsampleMoves>,
}

impl<'a> Engine<'a> {
    fn new(model: &'a ModelSpec, cfg: SirConfig, ensemble: WeightedEnsemble, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if ensemble.dim() != model.dim() {
            return Err(Error::Dimension {
                expected: model.dim(),
                got: ensemble.dim(),
            });
        }
        let rwm_scale = cfg.rwm.scale;
        Ok(Self {
            model,
            cfg,
            ensemble,
            trace: RunTrace::default(),
            seed,
            step: 0,
            rwm_scale,
            hmc_acceptance: None,
            subsample: None,
        })
    }

    fn next_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    fn record(&mut self, log_norm: f64, ess: f64, resampled: bool, stats: Option<KernelStats>, t: Option<f64>) {
        let m = self.ensemble.moments();
        let evidence_log = self.trace.records.last().map_or(0.0, |r| r.evidence_log) + log_norm;
        let accept_rate = stats.and_then(|s| s.accept_rate());
        if let Some(s) = stats {
            self.trace.stats.merge(&s);
        }
        self.trace.records.push(TraceRecord {
            iter: self.trace.records.len() + 1,
            ess,
            resampled,
            log_normalizer: log_norm,
            evidence_log,
            mean: m.mean,
            std: m.std,
            accept_rate,
            control_t: t,
        });
    }

    /// Multinomial (or Liu-West) resample; carries subsample states along.
    fn resample(&mut self) -> Result<()> {
        let step = self.next_step();
        let mut rng = stream(self.seed, step, u64::MAX);
        if self.cfg.kernel == KernelChoice::LiuWest {
            self.ensemble = liu_west_resample(&self.ensemble, &self.cfg.liu_west, self.model.domain(), &mut rng)?;
            return Ok(());
        }
        let idx = self.ensemble.resample_indices(self.ensemble.len(), &mut rng)?;
        let particles = idx.iter().map(|&i| self.ensemble.particles()[i].clone()).collect();
        self.ensemble = WeightedEnsemble::uniform(particles);
        if let Some(sub) = &mut self.subsample {
            sub.states = idx.iter().map(|&i| sub.states[i].clone()).collect();
        }
        Ok(())
    }

    /// Applies `cfg.moves` kernel steps to every particle, targeting the flat
    /// prior times the likelihood of `data` raised to `power`.
    fn move_particles(&mut self, data: &[Datum], power: f64) -> Result<Option<KernelStats>> {
        let kernel = self.cfg.kernel;
        if matches!(kernel, KernelChoice::LiuWest | KernelChoice::None) || self.cfg.moves == 0 {
            return Ok(None);
        }
        let moments = self.ensemble.moments();
        let step = self.next_step();
        let stats = match kernel {
            KernelChoice::Ecs => self.move_subsampled(data, power, &moments, step)?,
            _ => self.move_full(data, power, &moments, step)?,
        };
        let uses_rwm = kernel == KernelChoice::Rwm
            || (kernel == KernelChoice::Ecs && self.cfg.subsample.inner == InnerKernel::Rwm);
        if self.cfg.adapt_rwm && uses_rwm {
            if let Some(rate) = stats.accept_rate() {
                let mut rc = RwmConfig {
                    scale: self.rwm_scale,
                    ..self.cfg.rwm
                };
                rc.adapt(rate);
                self.rwm_scale = rc.scale;
            }
        }
        Ok(Some(stats))
    }

    fn move_full(&mut self, data: &[Datum], power: f64, moments: &Moments, step: u64) -> Result<KernelStats> {
        let cfg = &self.cfg;
        let model = self.model;
        let target = TemperedPosterior::new(model, data, power);
        let dim = model.dim();
        let proposal = RwmProposal::from_moments(moments, self.rwm_scale);
        let kin = match cfg.kernel {
            KernelChoice::Hmc | KernelChoice::Hybrid | KernelChoice::Sghmc => {
                Some(cfg.hmc.kinetic(dim, Some(&moments.covariance))?)
            }
            _ => None,
        };
        let seed = self.seed;
        let screen = self.hmc_acceptance;
        let results: Vec<(ParameterPoint, KernelStats)> = self
            .ensemble
            .particles()
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let mut rng = stream(seed, step, i as u64);
                let mut stats = KernelStats::default();
                let mut x = p.clone();
                if cfg.kernel == KernelChoice::Sghmc {
                    let kin = kin.as_ref().unwrap();
                    for _ in 0..cfg.moves {
                        let out = sghmc_step(&x, model, data, power, kin, &cfg.sghmc, &mut rng);
                        stats.moves += 1;
                        if !out.stalled {
                            stats.accepted += 1;
                            stats.accept_prob_sum += 1.0;
                        }
                        x = out.theta;
                    }
                    return (x, stats);
                }
                let Some(mut ld) = target.log_density(&x) else {
                    return (x, stats);
                };
                for _ in 0..cfg.moves {
                    stats.moves += 1;
                    match cfg.kernel {
                        KernelChoice::Rwm => {
                            let t = rwm_step(&x, ld, &target, &proposal, &mut rng);
                            stats.accepted += t.accepted as u64;
                            stats.accept_prob_sum += t.accept_prob;
                            x = t.theta;
                            ld = t.log_density;
                        }
                        KernelChoice::Hmc => {
                            let kin = kin.as_ref().unwrap();
                            let t = hmc_step(&x, ld, &target, kin, cfg.hmc.epsilon, cfg.hmc.steps, &mut rng);
                            stats.accepted += t.transition.accepted as u64;
                            stats.accept_prob_sum += t.transition.accept_prob;
                            x = t.transition.theta;
                            ld = t.transition.log_density;
                        }
                        KernelChoice::Hybrid => {
                            let kin = kin.as_ref().unwrap();
                            let t =
                                hybrid_step(&x, ld, &target, kin, &cfg.hmc, &proposal, &cfg.hybrid, screen, &mut rng);
                            stats.accepted += t.accepted() as u64;
                            stats.accept_prob_sum += t.hmc.transition.accept_prob;
                            if t.kind == HybridKind::Hmc {
                                stats.hmc_only += 1;
                                stats.hmc_only_accept_sum += t.hmc.transition.accept_prob;
                            }
                            ld = t.log_density();
                            x = t.theta().clone();
                        }
                        _ => unreachable!(),
                    }
                }
                (x, stats)
            })
            .collect();
        let total = self.apply(results)?;
        if self.cfg.kernel == KernelChoice::Hybrid {
            self.hmc_acceptance = total.mean_accept_prob();
        }
        Ok(total)
    }

    fn apply(&mut self, results: Vec<(ParameterPoint, KernelStats)>) -> Result<KernelStats> {
        let mut total = KernelStats::default();
        let weights = self.ensemble.weights().to_vec();
        let mut particles = Vec::with_capacity(results.len());
        for (p, s) in results {
            total.merge(&s);
            particles.push(p);
        }
        self.ensemble = WeightedEnsemble::new(particles, weights)?;
        Ok(total)
    }

    /// Rebuilds control variates at the ensemble mean for `data`, keeping
    /// the previous ones when the mean is singular.
    fn refresh_control_variates(&mut self, data: &[Datum], reference: Option<&[f64]>) -> Result<()> {
        let mean = self.ensemble.moments().mean;
        let star = reference.unwrap_or(&mean);
        let cv = match build_control_variates(self.model, data, star) {
            Ok(cv) => cv,
            Err(e) => match &self.subsample {
                Some(s) if s.cv.len() == data.len() => s.cv.clone(),
                _ => return Err(e),
            },
        };
        let sc = self.cfg.subsample;
        let n = data.len();
        let m = if sc.sampling == IndexSampling::WithoutReplacement {
            sc.m.min(n)
        } else {
            sc.m
        };
        let blocks = sc.blocks.min(m);
        let stale = match &self.subsample {
            Some(s) => s.states.first().is_none_or(|st| st.population() != n),
            None => true,
        };
        let states = if stale {
            let step = self.next_step();
            (0..self.ensemble.len())
                .map(|i| {
                    let mut rng = stream(self.seed, step, i as u64);
                    SubsampleState::random(n, m, blocks, sc.sampling, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            self.subsample.take().unwrap().states
        };
        self.subsample = Some(SubsampleMoves { cv, states });
        Ok(())
    }

    fn estimates(&self, data: &[Datum]) -> Vec<Estimate> {
        let sub = self.subsample.as_ref().expect("control variates built");
        let ctx = EstimatorContext {
            model: self.model,
            data,
            cv: &sub.cv,
        };
        self.ensemble
            .particles()
            .par_iter()
            .zip(sub.states.par_iter())
            .map(|(p, s)| ctx.estimate(s, p))
            .collect()
    }

    fn move_subsampled(&mut self, data: &[Datum], power: f64, moments: &Moments, step: u64) -> Result<KernelStats> {
        if self.subsample.as_ref().is_none_or(|s| s.cv.len() != data.len()) {
            self.refresh_control_variates(data, None)?;
        }
        let estimates = self.estimates(data);
        let cfg = &self.cfg;
        let sub = self.subsample.as_ref().unwrap();
        let ctx = EstimatorContext {
            model: self.model,
            data,
            cv: &sub.cv,
        };
        let kin = match cfg.subsample.inner {
            InnerKernel::Hmc => Some(cfg.hmc.kinetic(self.model.dim(), Some(&moments.covariance))?),
            InnerKernel::Rwm => None,
        };
        let proposal = RwmProposal::from_moments(moments, self.rwm_scale);
        let seed = self.seed;
        let results: Vec<(ParameterPoint, SubsampleState, KernelStats)> = self
            .ensemble
            .particles()
            .par_iter()
            .zip(sub.states.par_iter())
            .zip(estimates.par_iter())
            .enumerate()
            .map(|(i, ((p, s), e))| {
                let mut rng = stream(seed, step, i as u64);
                let mut stats = KernelStats::default();
                let (mut x, mut st, mut est) = (p.clone(), s.clone(), *e);
                for _ in 0..cfg.moves {
                    stats.moves += 1;
                    stats.index_moves += 1;
                    match &kin {
                        Some(kin) => {
                            let o = ecs_gibbs_step(
                                &x,
                                &st,
                                &est,
                                &ctx,
                                power,
                                kin,
                                cfg.hmc.epsilon,
                                cfg.hmc.steps,
                                &mut rng,
                            );
                            stats.accepted += o.hmc.transition.accepted as u64;
                            stats.accept_prob_sum += o.hmc.transition.accept_prob;
                            stats.index_accepted += o.index_accepted as u64;
                            (x, st, est) = (o.theta, o.state, o.estimate);
                        }
                        None => {
                            let o = pm_rwm_gibbs_step(&x, &st, &est, &ctx, power, &proposal, &mut rng);
                            stats.accepted += o.rwm.accepted as u64;
                            stats.accept_prob_sum += o.rwm.accept_prob;
                            stats.index_accepted += o.index_accepted as u64;
                            (x, st, est) = (o.theta, o.state, o.estimate);
                        }
                    }
                }
                (x, st, stats)
            })
            .collect();
        let mut states = Vec::with_capacity(results.len());
        let mut moved = Vec::with_capacity(results.len());
        for (p, s, k) in results {
            states.push(s);
            moved.push((p, k));
        }
        self.subsample.as_mut().unwrap().states = states;
        self.apply(moved)
    }
}

/// Sequential importance resampling, one datum at a time. Usable
/// incrementally, so adaptive designs can choose each control from the
/// current ensemble.
#[derive(Debug, Clone)]
pub struct Sir<'a> {
    engine: Engine<'a>,
    data: Vec<Datum>,
}

impl<'a> Sir<'a> {
    /// Starts from `cfg.particles` uniform draws over the model domain.
    pub fn new(model: &'a ModelSpec, cfg: SirConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, 0, u64::MAX - 1);
        let prior = WeightedEnsemble::from_prior(model.domain(), cfg.particles, &mut rng);
        Self::from_ensemble(model, cfg, prior, seed)
    }

    pub fn from_ensemble(model: &'a ModelSpec, cfg: SirConfig, ensemble: WeightedEnsemble, seed: u64) -> Result<Self> {
        Ok(Self {
            engine: Engine::new(model, cfg, ensemble, seed)?,
            data: Vec::new(),
        })
    }

    pub fn ensemble(&self) -> &WeightedEnsemble {
        &self.engine.ensemble
    }

    pub fn trace(&self) -> &RunTrace {
        &self.engine.trace
    }

    pub fn moments(&self) -> Moments {
        self.engine.ensemble.moments()
    }

    pub fn data(&self) -> &[Datum] {
        &self.data
    }

    pub fn model(&self) -> &ModelSpec {
        self.engine.model
    }

    /// Bayes update by one datum, followed by resampling and moves when the
    /// ESS drops below threshold.
    pub fn update(&mut self, d: Datum) -> Result<()> {
        self.engine.model.check_controls(&d.controls)?;
        let iteration = self.data.len() + 1;
        let degenerate = |e: Error| match e {
            Error::DegenerateEnsemble => Error::DegenerateAt { iteration },
            other => other,
        };
        let log_norm = self
            .engine
            .ensemble
            .reweight(self.engine.model, &d, 1.0)
            .map_err(degenerate)?;
        self.data.push(d);
        let m = self.engine.ensemble.len() as f64;
        let ess = self.engine.ensemble.ess()?;
        let resampled = ess < self.engine.cfg.threshold * m;
        let mut stats = None;
        if resampled {
            self.engine.resample().map_err(degenerate)?;
        }
        if resampled || self.engine.cfg.move_every_step {
            let data = std::mem::take(&mut self.data);
            let out = self.engine.move_particles(&data, 1.0);
            self.data = data;
            stats = out.map_err(degenerate)?;
        }
        self.engine.record(log_norm, ess, resampled, stats, Some(d.controls.t));
        Ok(())
    }

    pub fn into_parts(self) -> (WeightedEnsemble, RunTrace) {
        (self.engine.ensemble, self.engine.trace)
    }
}

/// Runs SIR over `data` (reordered per `cfg.ordering`) from a uniform prior.
pub fn sir_run<R: Rng + ?Sized>(
    model: &ModelSpec,
    data: &[Datum],
    cfg: &SirConfig,
    rng: &mut R,
) -> Result<(WeightedEnsemble, RunTrace)> {
    let seed: u64 = rng.random();
    let ordered = order_dataset(data, cfg.ordering, rng);
    let mut sir = Sir::new(model, cfg.clone(), seed)?;
    for d in ordered {
        sir.update(d)?;
    }
    Ok(sir.into_parts())
}

/// Same as [`sir_run`] from a supplied ensemble.
pub fn sir_run_from<R: Rng + ?Sized>(
    model: &ModelSpec,
    prior: WeightedEnsemble,
    data: &[Datum],
    cfg: &SirConfig,
    rng: &mut R,
) -> Result<(WeightedEnsemble, RunTrace)> {
    let seed: u64 = rng.random();
    let ordered = order_dataset(data, cfg.ordering, rng);
    let mut sir = Sir::from_ensemble(model, cfg.clone(), prior, seed)?;
    for d in ordered {
        sir.update(d)?;
    }
    Ok(sir.into_parts())
}

/// Tempered likelihood estimation from a uniform prior.
pub fn tle_run<R: Rng + ?Sized>(
    model: &ModelSpec,
    data: &[Datum],
    schedule: &TemperSchedule,
    cfg: &SirConfig,
    rng: &mut R,
) -> Result<(WeightedEnsemble, RunTrace)> {
    let seed: u64 = rng.random();
    let mut prior_rng = stream(seed, 0, u64::MAX - 1);
    let prior = WeightedEnsemble::from_prior(model.domain(), cfg.particles, &mut prior_rng);
    tle_run_from(model, prior, data, schedule, cfg, seed)
}

/// Tempered likelihood estimation: stage `s` reweights by
/// `L(θ | data)^{γ_s − γ_{s−1}}`, then resamples and moves under the
/// `γ_s`-tempered posterior.
pub fn tle_run_from(
    model: &ModelSpec,
    prior: WeightedEnsemble,
    data: &[Datum],
    schedule: &TemperSchedule,
    cfg: &SirConfig,
    seed: u64,
) -> Result<(WeightedEnsemble, RunTrace)> {
    for d in data {
        model.check_controls(&d.controls)?;
    }
    let mut engine = Engine::new(model, cfg.clone(), prior, seed)?;
    let subsampled = cfg.kernel == KernelChoice::Ecs;
    let mut reference = None;
    if subsampled && cfg.subsample.warmup_fraction > 0.0 {
        reference = Some(warmup_reference(model, data, cfg, &engine.ensemble, seed)?);
    }
    let mut prev = 0.0;
    for (s, &gamma) in schedule.exponents().iter().enumerate() {
        let iteration = s + 1;
        let degenerate = |e: Error| match e {
            Error::DegenerateEnsemble => Error::DegenerateAt { iteration },
            other => other,
        };
        let inc = gamma - prev;
        prev = gamma;
        let lls: Vec<Option<f64>> = if subsampled {
            engine
                .refresh_control_variates(data, reference.take().as_deref())
                .map_err(degenerate)?;
            engine
                .estimates(data)
                .into_iter()
                .map(|e| (!e.clamped).then(|| e.log_corrected()))
                .collect()
        } else {
            let target = TemperedPosterior::new(model, data, 1.0);
            engine
                .ensemble
                .particles()
                .par_iter()
                .map(|p| target.log_density(p))
                .collect()
        };
        let log_norm = engine.ensemble.reweight_log(&lls, inc).map_err(degenerate)?;
        let ess = engine.ensemble.ess()?;
        let resampled = ess < cfg.threshold * engine.ensemble.len() as f64;
        let mut stats = None;
        if resampled {
            engine.resample().map_err(degenerate)?;
        }
        if resampled || cfg.move_every_step {
            stats = engine.move_particles(data, gamma).map_err(degenerate)?;
        }
        engine.record(log_norm, ess, resampled, stats, None);
    }
    Ok((engine.ensemble, engine.trace))
}

/// Mean of an SIR pass over the shortest-time fraction of the data.
fn warmup_reference(
    model: &ModelSpec,
    data: &[Datum],
    cfg: &SirConfig,
    prior: &WeightedEnsemble,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = stream(seed, 0, u64::MAX - 2);
    let ordered = order_dataset(data, OrderPolicy::TimeAscending, &mut rng);
    let k = ((data.len() as f64 * cfg.subsample.warmup_fraction).round() as usize).max(1);
    let warm_cfg = SirConfig {
        kernel: KernelChoice::Rwm,
        ordering: OrderPolicy::AsGiven,
        ..cfg.clone()
    };
    let (e, _) = sir_run_from(model, prior.clone(), &ordered[..k], &warm_cfg, &mut rng)?;
    Ok(e.moments().mean)
}
