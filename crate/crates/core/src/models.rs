//! Binary-outcome likelihood models for single-qubit characterization.
//!
//! Every model returns the probability of outcome `1` given the parameters and
//! the experimental controls; outcome `0` is the complement. Log-likelihoods
//! are clamped at [`LOG_LIKELIHOOD_FLOOR`] so that zero-probability points can
//! be recognised by the samplers instead of producing `-inf`.
//!
//! | kind          | parameters     | P(1 \| θ; controls)                              |
//! |---------------|----------------|--------------------------------------------------|
//! | precession    | ω              | sin²(ωt)                                         |
//! | multi-cosine  | ω₁..ω_d        | (1/d) Σ cos²(ω_j t / 2)                          |
//! | t1-decay      | T₁             | exp(-Δt/T₁)                                      |
//! | hahn-echo-t2  | T₂             | 1/2 + exp(-Δt/T₂)/2                              |
//! | hahn-echo-ab  | T₂             | A exp(-Δt/T₂) + B                                |
//! | ramsey-decay  | δ, γ₂*         | e^{-γt} cos²(δt/2) + (1 - e^{-γt})/2             |
//! | ipe           | φ              | sin²((mφ + θ_ctl)/2)                             |

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp value returned by [`ModelSpec::log_likelihood`] for impossible outcomes.
pub const LOG_LIKELIHOOD_FLOOR: f64 = -1e9;

/// Outcome probabilities below this are treated as exact zeros.
///
/// Outcome probabilities are only resolved to about one ulp of 1.0, so
/// anything smaller cannot be told apart from an exact zero of the model.
pub const ZERO_PROBABILITY: f64 = 1e-15;

/// A point in parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterPoint(pub Vec<f64>);

impl ParameterPoint {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParameterPoint {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParameterPoint {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParameterPoint {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Axis-aligned box of admissible parameter values (inclusive bounds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Spec(format!(
                "domain bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::Spec(format!(
                    "domain dimension {i} has non-positive width [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn cube(dim: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }

    /// Errors with the first offending coordinate.
    pub fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        for (index, &value) in theta.iter().enumerate() {
            let (lower, upper) = (self.lower[index], self.upper[index]);
            if !(value >= lower && value <= upper) {
                return Err(Error::Domain {
                    index,
                    value,
                    lower,
                    upper,
                });
            }
        }
        Ok(())
    }

    /// Euclidean length of the box diagonal.
    pub fn diameter(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i).powi(2)).sum::<f64>().sqrt()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).product()
    }

    pub fn clamp(&self, theta: &mut [f64]) {
        for (i, x) in theta.iter_mut().enumerate() {
            *x = x.clamp(self.lower[i], self.upper[i]);
        }
    }

    /// Uniform draw from the box.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterPoint {
        ParameterPoint(
            self.lower
                .iter()
                .zip(&self.upper)
                .map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
                .collect(),
        )
    }
}

/// Experimental controls. Models read only the fields they use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Controls {
    /// Evolution or waiting time (µs).
    pub t: f64,
    /// Phase-estimation repetition count.
    pub m: u32,
    /// Phase-estimation rotation angle (radians, in [0, 2π)).
    pub theta_ctl: f64,
}

impl Controls {
    pub fn time(t: f64) -> Self {
        Self {
            t,
            m: 1,
            theta_ctl: 0.0,
        }
    }

    pub fn ipe(m: u32, theta_ctl: f64) -> Self {
        Self { t: 0.0, m, theta_ctl }
    }
}

/// One measurement outcome and the controls it was taken under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Datum {
    pub controls: Controls,
    outcome: u8,
}

impl Datum {
    pub fn new(controls: Controls, outcome: i64) -> Result<Self> {
        match outcome {
            0 | 1 => Ok(Self {
                controls,
                outcome: outcome as u8,
            }),
            other => Err(Error::Outcome(other)),
        }
    }

    pub fn from_bool(controls: Controls, one: bool) -> Self {
        Self {
            controls,
            outcome: one as u8,
        }
    }

    pub fn outcome(&self) -> u8 {
        self.outcome
    }

    pub fn is_one(&self) -> bool {
        self.outcome == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Precession,
    MultiCosine,
    T1Decay,
    HahnEchoT2,
    HahnEchoAb,
    RamseyDecay,
    Ipe,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Precession => "precession",
            ModelKind::MultiCosine => "multi-cosine",
            ModelKind::T1Decay => "t1-decay",
            ModelKind::HahnEchoT2 => "hahn-echo-t2",
            ModelKind::HahnEchoAb => "hahn-echo-ab",
            ModelKind::RamseyDecay => "ramsey-decay",
            ModelKind::Ipe => "ipe",
        }
    }

    /// Fixed dimension, or `None` for multi-cosine.
    pub fn fixed_dim(&self) -> Option<usize> {
        match self {
            ModelKind::MultiCosine => None,
            ModelKind::RamseyDecay => Some(2),
            _ => Some(1),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "precession" => ModelKind::Precession,
            "multi-cosine" => ModelKind::MultiCosine,
            "t1-decay" => ModelKind::T1Decay,
            "hahn-echo-t2" => ModelKind::HahnEchoT2,
            "hahn-echo-ab" => ModelKind::HahnEchoAb,
            "ramsey-decay" => ModelKind::RamseyDecay,
            "ipe" => ModelKind::Ipe,
            other => return Err(Error::Spec(format!("unknown model kind `{other}`"))),
        })
    }
}

/// Log-likelihood value with a flag telling whether it hit the floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLik {
    pub value: f64,
    pub clamped: bool,
}

impl LogLik {
    pub(crate) fn of_probability(p: f64) -> Self {
        if p < ZERO_PROBABILITY {
            Self {
                value: LOG_LIKELIHOOD_FLOOR,
                clamped: true,
            }
        } else {
            Self {
                value: p.ln(),
                clamped: false,
            }
        }
    }
}

/// A likelihood model together with its parameter domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    kind: ModelKind,
    domain: DomainBox,
    /// Hahn-echo-ab decay amplitude A.
    amplitude: f64,
    /// Hahn-echo-ab baseline B.
    offset: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, domain: DomainBox) -> Result<Self> {
        Self::with_hyperparameters(kind, domain, 0.5, 0.5)
    }

    pub fn with_hyperparameters(kind: ModelKind, domain: DomainBox, amplitude: f64, offset: f64) -> Result<Self> {
        if let Some(d) = kind.fixed_dim() {
            if domain.dim() != d {
                return Err(Error::Spec(format!(
                    "{kind} expects dimension {d}, domain has {}",
                    domain.dim()
                )));
            }
        }
        if matches!(kind, ModelKind::T1Decay | ModelKind::HahnEchoT2 | ModelKind::HahnEchoAb) && domain.lower()[0] < 0.0
        {
            return Err(Error::Spec(format!("{kind} needs a non-negative time constant domain")));
        }
        if kind == ModelKind::HahnEchoAb && !(amplitude >= 0.0 && offset >= 0.0 && amplitude + offset <= 1.0) {
            return Err(Error::Spec(format!(
                "A = {amplitude}, B = {offset} do not give a probability"
            )));
        }
        Ok(Self {
            kind,
            domain,
            amplitude,
            offset,
        })
    }

    pub fn precession(lower: f64, upper: f64) -> Result<Self> {
        Self::new(ModelKind::Precession, DomainBox::cube(1, lower, upper)?)
    }

    pub fn multi_cosine(dim: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(ModelKind::MultiCosine, DomainBox::cube(dim, lower, upper)?)
    }

    pub fn t1_decay(lower: f64, upper: f64) -> Result<Self> {
        Self::new(ModelKind::T1Decay, DomainBox::cube(1, lower, upper)?)
    }

    pub fn hahn_echo_t2(lower: f64, upper: f64) -> Result<Self> {
        Self::new(ModelKind::HahnEchoT2, DomainBox::cube(1, lower, upper)?)
    }

    pub fn hahn_echo_ab(a: f64, b: f64, lower: f64, upper: f64) -> Result<Self> {
        Self::with_hyperparameters(ModelKind::HahnEchoAb, DomainBox::cube(1, lower, upper)?, a, b)
    }

    /// Detuning δ and decay rate γ₂* = 1/T₂*.
    pub fn ramsey_decay(delta: (f64, f64), gamma: (f64, f64)) -> Result<Self> {
        Self::new(
            ModelKind::RamseyDecay,
            DomainBox::new(vec![delta.0, gamma.0], vec![delta.1, gamma.1])?,
        )
    }

    /// Phase φ on [0, 2π].
    pub fn ipe() -> Result<Self> {
        Self::new(ModelKind::Ipe, DomainBox::cube(1, 0.0, 2.0 * PI)?)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn param_names(&self) -> Vec<String> {
        match self.kind {
            ModelKind::Precession => vec!["omega".into()],
            ModelKind::MultiCosine => (0..self.dim()).map(|i| format!("omega_{i}")).collect(),
            ModelKind::T1Decay => vec!["T1".into()],
            ModelKind::HahnEchoT2 | ModelKind::HahnEchoAb => vec!["T2".into()],
            ModelKind::RamseyDecay => vec!["delta".into(), "gamma2".into()],
            ModelKind::Ipe => vec!["phi".into()],
        }
    }

    pub fn check_controls(&self, c: &Controls) -> Result<()> {
        if self.kind == ModelKind::Ipe {
            if c.m < 1 {
                return Err(Error::Control(format!("repetition count m = {} < 1", c.m)));
            }
            if !(c.theta_ctl >= 0.0 && c.theta_ctl < 2.0 * PI) {
                return Err(Error::Control(format!(
                    "rotation angle {} outside [0, 2π)",
                    c.theta_ctl
                )));
            }
        } else if !(c.t >= 0.0 && c.t.is_finite()) {
            return Err(Error::Control(format!("negative or non-finite time {}", c.t)));
        }
        Ok(())
    }

    fn check(&self, theta: &[f64], c: &Controls) -> Result<()> {
        self.domain.check(theta)?;
        self.check_controls(c)
    }

    /// P(outcome | θ; controls).
    pub fn likelihood(&self, theta: &[f64], d: &Datum) -> Result<f64> {
        self.check(theta, &d.controls)?;
        Ok(self.outcome_probability(theta, d))
    }

    pub fn log_likelihood(&self, theta: &[f64], d: &Datum) -> Result<LogLik> {
        self.check(theta, &d.controls)?;
        Ok(self.log_likelihood_unchecked(theta, d))
    }

    /// Analytic ∇_θ log P(outcome | θ; controls).
    pub fn grad_log_likelihood(&self, theta: &[f64], d: &Datum) -> Result<Vec<f64>> {
        self.check(theta, &d.controls)?;
        let mut g = vec![0.0; self.dim()];
        self.add_grad_log_likelihood(theta, d, 1.0, &mut g)?;
        Ok(g)
    }

    /// Analytic Hessian of log P(outcome | θ; controls), row-major.
    pub fn hess_log_likelihood(&self, theta: &[f64], d: &Datum) -> Result<Vec<f64>> {
        self.check(theta, &d.controls)?;
        let n = self.dim();
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n * n];
        let (p0, p1) = self.eval(theta, &d.controls, Some(&mut grad), Some(&mut hess));
        let (p, sign) = if d.is_one() { (p1, 1.0) } else { (p0, -1.0) };
        if p < ZERO_PROBABILITY {
            return Err(Error::GradientSingularity { likelihood: p });
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = sign * hess[i * n + j] / p - grad[i] * grad[j] / (p * p);
            }
        }
        Ok(out)
    }

    /// Draws an outcome from the model at the ground-truth parameters.
    pub fn simulate_outcome<R: Rng + ?Sized>(&self, truth: &[f64], c: Controls, rng: &mut R) -> Result<Datum> {
        self.check(truth, &c)?;
        let (_, p1) = self.eval(truth, &c, None, None);
        Ok(Datum::from_bool(c, rng.random::<f64>() < p1))
    }

    /// All coordinate permutations of `truth` (the dim! posterior modes of
    /// the multi-cosine model).
    pub fn mode_set(&self, truth: &[f64]) -> Result<Vec<ParameterPoint>> {
        if self.kind != ModelKind::MultiCosine {
            return Err(Error::Spec(format!(
                "mode set is defined for multi-cosine, not {}",
                self.kind
            )));
        }
        if truth.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: truth.len(),
            });
        }
        let mut out = Vec::new();
        let mut idx: Vec<usize> = (0..truth.len()).collect();
        permute(&mut idx, 0, &mut |p| {
            out.push(ParameterPoint(p.iter().map(|&i| truth[i]).collect()))
        });
        Ok(out)
    }

    // ---- unchecked fast paths used by the samplers ----

    pub(crate) fn outcome_probability(&self, theta: &[f64], d: &Datum) -> f64 {
        let (p0, p1) = self.eval(theta, &d.controls, None, None);
        if d.is_one() {
            p1
        } else {
            p0
        }
    }

    pub(crate) fn log_likelihood_unchecked(&self, theta: &[f64], d: &Datum) -> LogLik {
        LogLik::of_probability(self.outcome_probability(theta, d))
    }

    /// `out += scale * ∇ log P(d | θ)`.
    pub(crate) fn add_grad_log_likelihood(&self, theta: &[f64], d: &Datum, scale: f64, out: &mut [f64]) -> Result<()> {
        let mut grad = [0.0; 8];
        let mut heap;
        let grad: &mut [f64] = if self.dim() <= 8 {
            &mut grad[..self.dim()]
        } else {
            heap = vec![0.0; self.dim()];
            &mut heap
        };
        let (p0, p1) = self.eval(theta, &d.controls, Some(grad), None);
        let (p, sign) = if d.is_one() { (p1, 1.0) } else { (p0, -1.0) };
        if p < ZERO_PROBABILITY {
            return Err(Error::GradientSingularity { likelihood: p });
        }
        let f = scale * sign / p;
        for (o, g) in out.iter_mut().zip(grad.iter()) {
            *o += f * g;
        }
        Ok(())
    }

    /// Returns `(P(0), P(1))`; optionally writes ∇P(1) and the row-major
    /// Hessian of P(1).
    pub(crate) fn eval(
        &self,
        theta: &[f64],
        c: &Controls,
        grad: Option<&mut [f64]>,
        hess: Option<&mut [f64]>,
    ) -> (f64, f64) {
        let t = c.t;
        match self.kind {
            ModelKind::Precession => {
                let (s, co) = (theta[0] * t).sin_cos();
                if let Some(g) = grad {
                    g[0] = 2.0 * t * s * co;
                }
                if let Some(h) = hess {
                    h[0] = 2.0 * t * t * (co * co - s * s);
                }
                (co * co, s * s)
            }
            ModelKind::MultiCosine => {
                let n = theta.len() as f64;
                let mut p1 = 0.0;
                let mut p0 = 0.0;
                let mut grad = grad;
                let mut hess = hess;
                let dim = theta.len();
                if let Some(h) = hess.as_deref_mut() {
                    h.iter_mut().for_each(|x| *x = 0.0);
                }
                for (j, w) in theta.iter().enumerate() {
                    let (s, co) = (w * t / 2.0).sin_cos();
                    p1 += co * co;
                    p0 += s * s;
                    if let Some(g) = grad.as_deref_mut() {
                        g[j] = -(t / (2.0 * n)) * (w * t).sin();
                    }
                    if let Some(h) = hess.as_deref_mut() {
                        h[j * dim + j] = -(t * t / (2.0 * n)) * (w * t).cos();
                    }
                }
                (p0 / n, p1 / n)
            }
            ModelKind::T1Decay => {
                let tau = theta[0];
                let e = (-t / tau).exp();
                if let Some(g) = grad {
                    g[0] = e * t / (tau * tau);
                }
                if let Some(h) = hess {
                    h[0] = e * (t * t / tau.powi(4) - 2.0 * t / tau.powi(3));
                }
                (-(-t / tau).exp_m1(), e)
            }
            ModelKind::HahnEchoT2 | ModelKind::HahnEchoAb => {
                let (a, b) = (self.amplitude, self.offset);
                let tau = theta[0];
                let e = (-t / tau).exp();
                if let Some(g) = grad {
                    g[0] = a * e * t / (tau * tau);
                }
                if let Some(h) = hess {
                    h[0] = a * e * (t * t / tau.powi(4) - 2.0 * t / tau.powi(3));
                }
                let p1 = a * e + b;
                let p0 = if self.kind == ModelKind::HahnEchoT2 {
                    -0.5 * (-t / tau).exp_m1()
                } else {
                    1.0 - p1
                };
                (p0, p1)
            }
            ModelKind::RamseyDecay => {
                let (delta, gamma) = (theta[0], theta[1]);
                let e = (-gamma * t).exp();
                let (s, co) = (delta * t).sin_cos();
                if let Some(g) = grad {
                    g[0] = -0.5 * t * e * s;
                    g[1] = -0.5 * t * e * co;
                }
                if let Some(h) = hess {
                    let k = 0.5 * t * t * e;
                    h[0] = -k * co;
                    h[1] = k * s;
                    h[2] = k * s;
                    h[3] = k * co;
                }
                (0.5 * (1.0 - e * co), 0.5 * (1.0 + e * co))
            }
            ModelKind::Ipe => {
                let m = c.m as f64;
                let arg = m * theta[0] + c.theta_ctl;
                let (s, co) = (arg / 2.0).sin_cos();
                if let Some(g) = grad {
                    g[0] = 0.5 * m * arg.sin();
                }
                if let Some(h) = hess {
                    h[0] = 0.5 * m * m * arg.cos();
                }
                (co * co, s * s)
            }
        }
    }
}

fn permute(idx: &mut Vec<usize>, k: usize, emit: &mut dyn FnMut(&[usize])) {
    if k == idx.len() {
        emit(idx);
        return;
    }
    for i in k..idx.len() {
        idx.swap(k, i);
        permute(idx, k + 1, emit);
        idx.swap(k, i);
    }
}

/// Estimates Hahn-echo A and B from calibration shots at `t = 0` and at a
/// long waiting time: B is the long-time frequency of `1`, A the excess at
/// `t = 0`.
pub fn calibrate_ab(shots_t0: &[Datum], shots_long: &[Datum]) -> Result<(f64, f64)> {
    if shots_t0.is_empty() || shots_long.is_empty() {
        return Err(Error::Spec("calibration needs shots at both points".into()));
    }
    let freq = |s: &[Datum]| s.iter().filter(|d| d.is_one()).count() as f64 / s.len() as f64;
    let b = freq(shots_long);
    let a = (freq(shots_t0) - b).max(0.0);
    Ok((a, b.min(1.0 - a)))
}
