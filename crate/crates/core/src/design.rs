//! Choice of experiment controls: offline schedules and adaptive heuristics
//! driven by the current posterior ensemble.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Moments, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::models::{Controls, Datum, DomainBox, ModelSpec};
use crate::smc::named_enum;

/// Redraws allowed when the particle guess heuristic picks coincident points.
pub const PGH_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeuristicKind {
    FixedGrid,
    Random,
    IncrementalRandom,
    Exponential,
    SigmaInverse,
    Pgh,
    Occupation,
    GreedyVariance,
}

named_enum!(HeuristicKind {
    FixedGrid => "fixed-grid",
    Random => "random",
    IncrementalRandom => "incremental-random",
    Exponential => "exponential",
    SigmaInverse => "sigma-inverse",
    Pgh => "pgh",
    Occupation => "occupation",
    GreedyVariance => "greedy-variance",
});

impl HeuristicKind {
    /// Offline schedules do not look at the ensemble.
    pub fn is_offline(&self) -> bool {
        matches!(
            self,
            Self::FixedGrid | Self::Random | Self::IncrementalRandom | Self::Exponential
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicConfig {
    pub kind: HeuristicKind,
    /// Fixed-grid spacing.
    pub increment: f64,
    /// Exponential growth factor.
    pub c: f64,
    /// Incremental-random ceiling step.
    pub c1: f64,
    /// Incremental-random iterations per ceiling step.
    pub c2: f64,
    /// Occupation-heuristic scale; `None` uses the reciprocal prior std.
    pub base: Option<f64>,
    /// Grid resolution per axis for the occupation rate.
    pub bins: usize,
    pub candidates: usize,
    /// Multiplicative spread of greedy candidates around `1/σ`.
    pub candidate_spread: f64,
    /// Proportionality constant of the σ⁻¹ and PGH times.
    pub time_scale: f64,
    pub t_max: Option<f64>,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self {
            kind: HeuristicKind::SigmaInverse,
            increment: 0.08,
            c: 9.0 / 8.0,
            c1: 10.0,
            c2: 5.0,
            base: None,
            bins: 20,
            candidates: 20,
            candidate_spread: 0.3,
            time_scale: 1.0,
            t_max: None,
        }
    }
}

impl HeuristicConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("heuristic.increment", self.increment),
            ("heuristic.c", self.c),
            ("heuristic.c1", self.c1),
            ("heuristic.c2", self.c2),
            ("heuristic.candidate_spread", self.candidate_spread),
            ("heuristic.time_scale", self.time_scale),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key} must be positive, got {v}")));
            }
        }
        if let Some(b) = self.base {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("heuristic.base must be positive, got {b}")));
            }
        }
        if let Some(t) = self.t_max {
            if !(t > 0.0) {
                return Err(Error::Config(format!("heuristic.t_max must be positive, got {t}")));
            }
        }
        if self.candidates == 0 {
            return Err(Error::Config("heuristic.candidates must be at least 1".into()));
        }
        if self.bins == 0 {
            return Err(Error::Config("heuristic.bins must be at least 1".into()));
        }
        if self.kind == HeuristicKind::Random && self.t_max.is_none() {
            return Err(Error::Config(
                "heuristic.t_max is required by the random schedule".into(),
            ));
        }
        Ok(())
    }

    fn cap(&self, t: f64) -> f64 {
        self.t_max.map_or(t, |c| t.min(c))
    }
}

/// `1/σ`, with σ the largest marginal standard deviation.
pub fn sigma_inverse_time(moments: &Moments) -> Result<f64> {
    let s = moments.max_std();
    if s > 0.0 && s.is_finite() {
        Ok(1.0 / s)
    } else {
        Err(Error::DegenerateUncertainty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PghTime {
    pub t: f64,
    /// All redraws coincided and the σ⁻¹ rule was used instead.
    pub fallback: bool,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Reciprocal distance between two weighted draws from the ensemble.
pub fn pgh_time<R: Rng + ?Sized>(e: &WeightedEnsemble, rng: &mut R) -> Result<PghTime> {
    let dist = WeightedIndex::new(e.weights()).map_err(|_| Error::DegenerateEnsemble)?;
    let p = e.particles();
    for _ in 0..PGH_REDRAWS {
        let d = distance(&p[dist.sample(rng)], &p[dist.sample(rng)]);
        if d > 0.0 {
            return Ok(PghTime {
                t: 1.0 / d,
                fallback: false,
            });
        }
    }
    Ok(PghTime {
        t: sigma_inverse_time(&e.moments())?,
        fallback: true,
    })
}

/// Reciprocal of the largest marginal std of the uniform prior on `domain`.
pub fn prior_inverse_std(domain: &DomainBox) -> f64 {
    let widest = (0..domain.dim()).map(|k| domain.width(k)).fold(0.0, f64::max);
    12f64.sqrt() / widest
}

/// `base / (occupation · ess/M)`.
pub fn occupation_time(e: &WeightedEnsemble, domain: &DomainBox, ess: f64, m: usize, cfg: &HeuristicConfig) -> f64 {
    let base = cfg.base.unwrap_or_else(|| prior_inverse_std(domain));
    let rate = e.occupation_rate(domain, cfg.bins);
    base / (rate * ess / m as f64)
}

/// Expected posterior variance (trace) for each candidate, and the argmin.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyChoice {
    pub t: f64,
    /// `(t, expected variance)` per candidate, in input order.
    pub table: Vec<(f64, f64)>,
}

/// Trace of the weighted covariance under weights `w` (not necessarily
/// normalized).
fn weighted_variance(e: &WeightedEnsemble, w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    let dim = e.dim();
    let p = e.particles();
    let mut var = 0.0;
    for k in 0..dim {
        let shift = p[0][k];
        let (mut s1, mut s2) = (0.0, 0.0);
        for (x, wi) in p.iter().zip(w) {
            let y = x[k] - shift;
            s1 += wi * y;
            s2 += wi * y * y;
        }
        let mean = s1 / total;
        var += (s2 / total - mean * mean).max(0.0);
    }
    var
}

/// One-step lookahead under quadratic loss: the candidate control minimizing
/// `Σ_D P̂(D)·Var(θ | D)` over both outcomes, ties going to the smallest time.
pub fn greedy_variance_time(e: &WeightedEnsemble, model: &ModelSpec, candidates: &[f64]) -> Result<GreedyChoice> {
    if candidates.is_empty() {
        return Err(Error::Config("greedy design needs at least one candidate".into()));
    }
    let table = candidates
        .par_iter()
        .map(|&t| {
            let c = Controls::time(t);
            model.check_controls(&c)?;
            let d1 = Datum::from_bool(c, true);
            let p1: Vec<f64> = e
                .particles()
                .iter()
                .map(|x| model.outcome_probability(x, &d1))
                .collect();
            let w1: Vec<f64> = e.weights().iter().zip(&p1).map(|(w, p)| w * p).collect();
            let w0: Vec<f64> = e.weights().iter().zip(&p1).map(|(w, p)| w * (1.0 - p)).collect();
            let mut expected = 0.0;
            for w in [&w0, &w1] {
                let pd: f64 = w.iter().sum();
                if pd > 0.0 {
                    expected += pd * weighted_variance(e, w);
                }
            }
            let total: f64 = e.weights().iter().sum();
            Ok((t, expected / total))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = table[0];
    for &(t, v) in &table[1..] {
        if v < best.1 || (v == best.1 && t < best.0) {
            best = (t, v);
        }
    }
    Ok(GreedyChoice { t: best.0, table })
}

/// `count` log-normal draws around `1/σ` with multiplicative spread `spread`.
pub fn greedy_candidates<R: Rng + ?Sized>(sigma: f64, count: usize, spread: f64, rng: &mut R) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (spread * z).exp() / sigma
        })
        .collect()
}

/// Offline schedules. `k` counts from 1.
pub fn schedule_times<R: Rng + ?Sized>(
    kind: HeuristicKind,
    k: usize,
    cfg: &HeuristicConfig,
    rng: &mut R,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("schedule index starts at 1".into()));
    }
    let upper_uniform = |hi: f64, rng: &mut R| hi * (1.0 - rng.random::<f64>());
    let t = match kind {
        HeuristicKind::FixedGrid => k as f64 * cfg.increment,
        HeuristicKind::Exponential => cfg.c.powi(k as i32),
        HeuristicKind::Random => {
            let hi = cfg
                .t_max
                .ok_or_else(|| Error::Config("heuristic.t_max is required by the random schedule".into()))?;
            upper_uniform(hi, rng)
        }
        HeuristicKind::IncrementalRandom => {
            let hi = cfg.c1 * ((k as f64 / cfg.c2).floor() + 1.0);
            upper_uniform(hi, rng)
        }
        other => {
            return Err(Error::Config(format!("'{other}' is adaptive, not a schedule")));
        }
    };
    Ok(cfg.cap(t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeChoice {
    pub t: f64,
    pub fallback: bool,
}

/// Next evolution time for iteration `k` (from 1) given the ensemble after
/// `k − 1` updates. `ess` is the ensemble's current effective sample size.
pub fn choose_time<R: Rng + ?Sized>(
    cfg: &HeuristicConfig,
    k: usize,
    e: &WeightedEnsemble,
    model: &ModelSpec,
    rng: &mut R,
) -> Result<TimeChoice> {
    let plain = |t: f64| TimeChoice { t, fallback: false };
    let choice = match cfg.kind {
        kind if kind.is_offline() => plain(schedule_times(kind, k, cfg, rng)?),
        HeuristicKind::SigmaInverse => plain(cfg.time_scale * sigma_inverse_time(&e.moments())?),
        HeuristicKind::Pgh => {
            let p = pgh_time(e, rng)?;
            TimeChoice {
                t: cfg.time_scale * p.t,
                fallback: p.fallback,
            }
        }
        HeuristicKind::Occupation => plain(occupation_time(e, model.domain(), e.ess()?, e.len(), cfg)),
        HeuristicKind::GreedyVariance => {
            let sigma = e.moments().max_std();
            if !(sigma > 0.0) {
                return Err(Error::DegenerateUncertainty);
            }
            let cands = greedy_candidates(sigma, cfg.candidates, cfg.candidate_spread, rng);
            let capped: Vec<f64> = cands.into_iter().map(|t| cfg.cap(t)).collect();
            plain(greedy_variance_time(e, model, &capped)?.t)
        }
        _ => unreachable!(),
    };
    Ok(TimeChoice {
        t: cfg.cap(choice.t),
        ..choice
    })
}

/// Phase-estimation controls from a Gaussian summary: `m = max(1, ⌈1.25/σ⌉)`
/// and a rotation cancelling the mean phase, `θ = −m·μ mod 2π`.
pub fn ipe_controls(mean: f64, std: f64, m_max: u32) -> Controls {
    let m = if std > 0.0 {
        ((1.25 / std).ceil().min(m_max as f64) as u32).max(1)
    } else {
        m_max.max(1)
    };
    let theta = (-(m as f64) * mean).rem_euclid(2.0 * PI);
    Controls::ipe(m, if theta >= 2.0 * PI { 0.0 } else { theta })
}
