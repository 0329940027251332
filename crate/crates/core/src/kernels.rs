//! Particle refresh and Markov transition kernels.
//!
//! Targets are unnormalized log densities on a domain box with a flat prior.
//! Every kernel is a pure function of its inputs and the caller's RNG, so the
//! SMC drivers can run one kernel per particle on independent streams.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Moments, WeightedEnsemble, COVARIANCE_RIDGE};
use crate::error::{Error, Result};
use crate::models::{Datum, DomainBox, ModelSpec, ParameterPoint};

/// Unnormalized log posterior over a domain box.
pub trait LogTarget: Sync {
    fn domain(&self) -> &DomainBox;

    /// Log density up to a constant; `None` where the density is zero,
    /// including everywhere outside the domain.
    fn log_density(&self, theta: &[f64]) -> Option<f64>;

    /// Gradient of the log density; `None` where it is singular.
    fn grad_log_density(&self, theta: &[f64]) -> Option<Vec<f64>>;
}

/// Flat prior on the model domain times the full-data likelihood raised to
/// `power`.
#[derive(Debug, Clone, Copy)]
pub struct TemperedPosterior<'a> {
    pub model: &'a ModelSpec,
    pub data: &'a [Datum],
    pub power: f64,
}

impl<'a> TemperedPosterior<'a> {
    pub fn new(model: &'a ModelSpec, data: &'a [Datum], power: f64) -> Self {
        Self { model, data, power }
    }
}

impl LogTarget for TemperedPosterior<'_> {
    fn domain(&self) -> &DomainBox {
        self.model.domain()
    }

    fn log_density(&self, theta: &[f64]) -> Option<f64> {
        if !self.model.domain().contains(theta) {
            return None;
        }
        let mut total = 0.0;
        for d in self.data {
            let l = self.model.log_likelihood_unchecked(theta, d);
            if l.clamped {
                return None;
            }
            total += l.value;
        }
        Some(self.power * total)
    }

    fn grad_log_density(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let mut g = vec![0.0; theta.len()];
        for d in self.data {
            self.model.add_grad_log_likelihood(theta, d, self.power, &mut g).ok()?;
        }
        g.iter().all(|x| x.is_finite()).then_some(g)
    }
}

/// Returns `A` with `A Aᵀ = cov`, using a Cholesky factor when the ridged
/// covariance is positive definite and a clipped eigen-root otherwise.
pub fn covariance_root(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    let ridged = cov + DMatrix::identity(n, n) * COVARIANCE_RIDGE;
    if let Some(ch) = ridged.clone().cholesky() {
        return ch.l();
    }
    let eig = nalgebra::SymmetricEigen::new(ridged);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

// ---------------------------------------------------------------------------
// Liu-West

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiuWestConfig {
    pub a: f64,
}

impl Default for LiuWestConfig {
    fn default() -> Self {
        Self { a: 0.98 }
    }
}

impl LiuWestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.a) {
            return Err(Error::Config(format!("liu_west.a = {} outside [0, 1]", self.a)));
        }
        Ok(())
    }
}

/// Attempts per particle before an out-of-domain draw is clamped.
pub const LIU_WEST_REDRAWS: usize = 100;

/// Bootstrap with kernel shrinkage toward the mean, preserving the first two
/// moments in expectation. Output weights are uniform.
pub fn liu_west_resample<R: Rng + ?Sized>(
    e: &WeightedEnsemble,
    cfg: &LiuWestConfig,
    domain: &DomainBox,
    rng: &mut R,
) -> Result<WeightedEnsemble> {
    cfg.validate()?;
    let m = e.len();
    let d = e.dim();
    let mom = e.moments();
    let idx = e.resample_indices(m, rng)?;
    let spread = 1.0 - cfg.a * cfg.a;
    let degenerate = (0..d).all(|k| mom.covariance[(k, k)] <= 0.0);
    if cfg.a == 1.0 || degenerate {
        return Ok(WeightedEnsemble::uniform(
            idx.into_iter().map(|i| e.particles()[i].clone()).collect(),
        ));
    }
    let root = covariance_root(&(mom.covariance.clone() * spread));
    let mut out = Vec::with_capacity(m);
    for i in idx {
        let src = &e.particles()[i];
        let centre: Vec<f64> = (0..d).map(|k| cfg.a * src[k] + (1.0 - cfg.a) * mom.mean[k]).collect();
        let mut draw = vec![0.0; d];
        for attempt in 0..LIU_WEST_REDRAWS {
            let z = &root * standard_normal(d, rng);
            for k in 0..d {
                draw[k] = centre[k] + z[k];
            }
            if domain.contains(&draw) {
                break;
            }
            if attempt + 1 == LIU_WEST_REDRAWS {
                domain.clamp(&mut draw);
            }
        }
        out.push(ParameterPoint(draw));
    }
    Ok(WeightedEnsemble::uniform(out))
}

// ---------------------------------------------------------------------------
// Random walk Metropolis

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RwmConfig {
    /// Proposal standard deviation as a multiple of the ensemble spread.
    pub scale: f64,
    pub target_acceptance: f64,
}

impl Default for RwmConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            target_acceptance: 0.65,
        }
    }
}

impl RwmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config("rwm.scale must be positive".into()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::Config("rwm.target_acceptance must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Multiplicative step toward the target acceptance rate.
    pub fn adapt(&mut self, acceptance_rate: f64) {
        if acceptance_rate > self.target_acceptance {
            self.scale *= 1.1;
        } else {
            self.scale /= 1.1;
        }
    }
}

/// Gaussian random-walk proposal with a fixed covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct RwmProposal {
    root: DMatrix<f64>,
}

impl RwmProposal {
    /// Covariance `scale² · cov`.
    pub fn from_covariance(cov: &DMatrix<f64>, scale: f64) -> Self {
        Self {
            root: covariance_root(cov) * scale,
        }
    }

    pub fn from_moments(m: &Moments, scale: f64) -> Self {
        Self::from_covariance(&m.covariance, scale)
    }

    pub fn isotropic(dim: usize, std: f64) -> Self {
        Self {
            root: DMatrix::identity(dim, dim) * std,
        }
    }

    pub fn dim(&self) -> usize {
        self.root.nrows()
    }

    pub fn propose<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Vec<f64> {
        let z = &self.root * standard_normal(self.dim(), rng);
        theta.iter().zip(z.iter()).map(|(a, b)| a + b).collect()
    }
}

/// One Metropolis-Hastings transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub theta: ParameterPoint,
    pub log_density: f64,
    pub accepted: bool,
    pub accept_prob: f64,
}

impl Transition {
    fn stay(theta: &ParameterPoint, log_density: f64, accept_prob: f64) -> Self {
        Self {
            theta: theta.clone(),
            log_density,
            accepted: false,
            accept_prob,
        }
    }
}

/// `min(1, exp(log_ratio))`, zero for NaN.
pub fn metropolis_probability(log_ratio: f64) -> f64 {
    if log_ratio.is_nan() {
        0.0
    } else if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

fn accept<R: Rng + ?Sized>(prob: f64, rng: &mut R) -> bool {
    prob >= 1.0 || rng.random::<f64>() < prob
}

/// `log_density` is the target's value at `theta`, carried by the caller to
/// avoid recomputation.
pub fn rwm_step<T: LogTarget + ?Sized, R: Rng + ?Sized>(
    theta: &ParameterPoint,
    log_density: f64,
    target: &T,
    proposal: &RwmProposal,
    rng: &mut R,
) -> Transition {
    let cand = proposal.propose(theta, rng);
    let Some(ld) = target.log_density(&cand) else {
        return Transition::stay(theta, log_density, 0.0);
    };
    let prob = metropolis_probability(ld - log_density);
    if accept(prob, rng) {
        Transition {
            theta: ParameterPoint(cand),
            log_density: ld,
            accepted: true,
            accept_prob: prob,
        }
    } else {
        Transition::stay(theta, log_density, prob)
    }
}

// ---------------------------------------------------------------------------
// Hamiltonian dynamics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub epsilon: f64,
    pub steps: usize,
    /// Mass matrix, row-major. `None` means the inverse ensemble covariance
    /// inside SMC and the identity elsewhere.
    pub mass: Option<Vec<f64>>,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            steps: 10,
            mass: None,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || self.steps == 0 {
            return Err(Error::Config("hmc needs epsilon > 0 and steps >= 1".into()));
        }
        if let Some(m) = &self.mass {
            let n = (m.len() as f64).sqrt().round() as usize;
            if n * n != m.len() {
                return Err(Error::Config("hmc.mass must be a square matrix".into()));
            }
            Kinetic::from_mass(DMatrix::from_row_slice(n, n, m))?;
        }
        Ok(())
    }

    /// Kinetic energy for this config; `covariance` supplies the default mass.
    pub fn kinetic(&self, dim: usize, covariance: Option<&DMatrix<f64>>) -> Result<Kinetic> {
        match (&self.mass, covariance) {
            (Some(m), _) => {
                if m.len() != dim * dim {
                    return Err(Error::Dimension {
                        expected: dim * dim,
                        got: m.len(),
                    });
                }
                Kinetic::from_mass(DMatrix::from_row_slice(dim, dim, m))
            }
            (None, Some(c)) => Kinetic::from_covariance(c),
            (None, None) => Ok(Kinetic::identity(dim)),
        }
    }
}

/// Gaussian kinetic energy `½ pᵀ M⁻¹ p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kinetic {
    mass_root: DMatrix<f64>,
    inv_mass: DMatrix<f64>,
}

impl Kinetic {
    pub fn identity(dim: usize) -> Self {
        Self {
            mass_root: DMatrix::identity(dim, dim),
            inv_mass: DMatrix::identity(dim, dim),
        }
    }

    pub fn from_mass(mass: DMatrix<f64>) -> Result<Self> {
        if (&mass - mass.transpose()).amax() > 1e-12 * mass.amax().max(1.0) {
            return Err(Error::Config("mass matrix must be symmetric".into()));
        }
        let ch = mass
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Config("mass matrix must be positive definite".into()))?;
        Ok(Self {
            inv_mass: ch.inverse(),
            mass_root: ch.l(),
        })
    }

    /// Mass equal to the inverse of the ridged covariance.
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        let n = cov.nrows();
        let ridged = cov + DMatrix::identity(n, n) * COVARIANCE_RIDGE;
        let ch = ridged.clone().cholesky().ok_or(Error::DegenerateEnsemble)?;
        let mass = ch.inverse();
        let mass = (&mass + mass.transpose()) * 0.5;
        let root = mass
            .clone()
            .cholesky()
            .map(|c| c.l())
            .ok_or(Error::DegenerateEnsemble)?;
        Ok(Self {
            mass_root: root,
            inv_mass: ridged,
        })
    }

    pub fn dim(&self) -> usize {
        self.inv_mass.nrows()
    }

    pub fn inverse_mass(&self) -> &DMatrix<f64> {
        &self.inv_mass
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (&self.mass_root * standard_normal(self.dim(), rng))
            .iter()
            .copied()
            .collect()
    }

    pub fn velocity(&self, p: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| (0..n).map(|j| self.inv_mass[(i, j)] * p[j]).sum())
            .collect()
    }

    pub fn energy(&self, p: &[f64]) -> f64 {
        0.5 * self.velocity(p).iter().zip(p).map(|(v, q)| v * q).sum::<f64>()
    }
}

/// Outcome of a leapfrog integration.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub theta: Vec<f64>,
    pub p: Vec<f64>,
    pub diverged: bool,
    pub reflections: usize,
}

const MAX_REFLECTIONS_PER_STEP: usize = 10_000;

/// Moves `theta` for time `eps` at velocity `M⁻¹p`, reflecting elastically off
/// the box faces. Returns the number of reflections, or `None` if the bounce
/// limit was hit.
fn drift(theta: &mut [f64], p: &mut [f64], eps: f64, kin: &Kinetic, domain: Option<&DomainBox>) -> Option<usize> {
    let mut v = kin.velocity(p);
    let Some(dom) = domain else {
        theta.iter_mut().zip(&v).for_each(|(x, vx)| *x += eps * vx);
        return Some(0);
    };
    let mut remaining = eps;
    let mut count = 0;
    while count <= MAX_REFLECTIONS_PER_STEP {
        let mut hit: Option<(f64, usize, f64)> = None;
        for k in 0..theta.len() {
            let end = theta[k] + remaining * v[k];
            let bound = if v[k] > 0.0 && end > dom.upper()[k] {
                dom.upper()[k]
            } else if v[k] < 0.0 && end < dom.lower()[k] {
                dom.lower()[k]
            } else {
                continue;
            };
            let tau = ((bound - theta[k]) / v[k]).max(0.0);
            if hit.is_none_or(|h| tau < h.0) {
                hit = Some((tau, k, bound));
            }
        }
        match hit {
            None => {
                theta.iter_mut().zip(&v).for_each(|(x, vx)| *x += remaining * vx);
                return Some(count);
            }
            Some((tau, k, bound)) => {
                theta.iter_mut().zip(&v).for_each(|(x, vx)| *x += tau * vx);
                theta[k] = bound;
                // reflect the velocity component k in the kinetic metric;
                // only p_k changes and the kinetic energy is preserved
                p[k] -= 2.0 * v[k] / kin.inv_mass[(k, k)];
                v = kin.velocity(p);
                remaining -= tau;
                count += 1;
            }
        }
    }
    None
}

/// Leapfrog integration of Hamilton's equations for potential gradient
/// `grad_u`, reflecting off the faces of `domain` when given.
pub fn leapfrog<F>(
    theta0: &[f64],
    p0: &[f64],
    epsilon: f64,
    steps: usize,
    kin: &Kinetic,
    mut grad_u: F,
    domain: Option<&DomainBox>,
) -> Trajectory
where
    F: FnMut(&[f64]) -> Option<Vec<f64>>,
{
    let mut theta = theta0.to_vec();
    let mut p = p0.to_vec();
    let mut reflections = 0;
    let diverged = |theta: Vec<f64>, p: Vec<f64>, reflections| Trajectory {
        theta,
        p,
        diverged: true,
        reflections,
    };
    let Some(mut g) = grad_u(&theta) else {
        return diverged(theta, p, reflections);
    };
    p.iter_mut().zip(&g).for_each(|(q, gi)| *q -= 0.5 * epsilon * gi);
    for i in 0..steps {
        match drift(&mut theta, &mut p, epsilon, kin, domain) {
            Some(n) => reflections += n,
            None => return diverged(theta, p, reflections),
        }
        g = match grad_u(&theta) {
            Some(g) if g.iter().all(|x| x.is_finite()) => g,
            _ => return diverged(theta, p, reflections),
        };
        let w = if i + 1 == steps { 0.5 * epsilon } else { epsilon };
        p.iter_mut().zip(&g).for_each(|(q, gi)| *q -= w * gi);
    }
    let ok = theta.iter().chain(&p).all(|x| x.is_finite());
    Trajectory {
        theta,
        p,
        diverged: !ok,
        reflections,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcTransition {
    pub transition: Transition,
    pub diverged: bool,
}

/// One HMC transition with momentum drawn from `kin`.
pub fn hmc_step<T: LogTarget + ?Sized, R: Rng + ?Sized>(
    theta: &ParameterPoint,
    log_density: f64,
    target: &T,
    kin: &Kinetic,
    epsilon: f64,
    steps: usize,
    rng: &mut R,
) -> HmcTransition {
    let p0 = kin.sample(rng);
    let h0 = -log_density + kin.energy(&p0);
    let traj = leapfrog(
        theta,
        &p0,
        epsilon,
        steps,
        kin,
        |x| target.grad_log_density(x).map(|g| g.into_iter().map(|v| -v).collect()),
        Some(target.domain()),
    );
    if traj.diverged {
        return HmcTransition {
            transition: Transition::stay(theta, log_density, 0.0),
            diverged: true,
        };
    }
    let Some(ld) = target.log_density(&traj.theta) else {
        return HmcTransition {
            transition: Transition::stay(theta, log_density, 0.0),
            diverged: false,
        };
    };
    let h1 = -ld + kin.energy(&traj.p);
    let prob = metropolis_probability(h0 - h1);
    let transition = if accept(prob, rng) {
        Transition {
            theta: ParameterPoint(traj.theta),
            log_density: ld,
            accepted: true,
            accept_prob: prob,
        }
    } else {
        Transition::stay(theta, log_density, prob)
    };
    HmcTransition {
        transition,
        diverged: false,
    }
}

// ---------------------------------------------------------------------------
// Hybrid HMC then RWM

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    /// An RWM step follows HMC when the acceptance estimate is below this.
    pub threshold: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self { threshold: 0.01 }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("hybrid.threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HybridKind {
    Hmc,
    HmcThenRwm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridTransition {
    pub hmc: HmcTransition,
    pub rwm: Option<Transition>,
    pub kind: HybridKind,
}

impl HybridTransition {
    pub fn theta(&self) -> &ParameterPoint {
        self.rwm.as_ref().map_or(&self.hmc.transition.theta, |t| &t.theta)
    }

    pub fn log_density(&self) -> f64 {
        self.rwm
            .as_ref()
            .map_or(self.hmc.transition.log_density, |t| t.log_density)
    }

    pub fn accepted(&self) -> bool {
        self.hmc.transition.accepted || self.rwm.as_ref().is_some_and(|t| t.accepted)
    }
}

/// HMC followed by an RWM step when the acceptance estimate falls below the
/// screen. With `acceptance_estimate = None` the HMC step's own acceptance
/// probability is screened.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_step<T: LogTarget + ?Sized, R: Rng + ?Sized>(
    theta: &ParameterPoint,
    log_density: f64,
    target: &T,
    kin: &Kinetic,
    hmc: &HmcConfig,
    proposal: &RwmProposal,
    cfg: &HybridConfig,
    acceptance_estimate: Option<f64>,
    rng: &mut R,
) -> HybridTransition {
    let h = hmc_step(theta, log_density, target, kin, hmc.epsilon, hmc.steps, rng);
    let estimate = acceptance_estimate.unwrap_or(h.transition.accept_prob);
    if estimate < cfg.threshold {
        let r = rwm_step(&h.transition.theta, h.transition.log_density, target, proposal, rng);
        HybridTransition {
            hmc: h,
            rwm: Some(r),
            kind: HybridKind::HmcThenRwm,
        }
    } else {
        HybridTransition {
            hmc: h,
            rwm: None,
            kind: HybridKind::Hmc,
        }
    }
}

// ---------------------------------------------------------------------------
// Stochastic gradient HMC

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SghmcConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub batch: usize,
    /// Friction in excess of the estimated gradient-noise term; `None`
    /// disables friction and injected noise entirely.
    pub friction: Option<f64>,
    /// Inject the fluctuation noise matching the friction.
    pub thermal_noise: bool,
}

impl Default for SghmcConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            steps: 10,
            batch: 10,
            friction: Some(1.0),
            thermal_noise: true,
        }
    }
}

impl SghmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("sghmc needs epsilon > 0, steps >= 1, batch >= 1".into()));
        }
        if self.friction.is_some_and(|g| !(g >= 0.0)) {
            return Err(Error::Config("sghmc.friction must be non-negative".into()));
        }
        Ok(())
    }
}

/// Minibatch estimate of the tempered log-likelihood gradient and the
/// covariance of that estimate.
struct NoisyGradient {
    grad: Vec<f64>,
    noise: DMatrix<f64>,
}

fn minibatch_gradient<R: Rng + ?Sized>(
    theta: &[f64],
    model: &ModelSpec,
    data: &[Datum],
    power: f64,
    batch: usize,
    rng: &mut R,
) -> Option<NoisyGradient> {
    let n = data.len();
    let m = batch.min(n);
    let d = theta.len();
    let picks: Vec<usize> = if m == n {
        (0..n).collect()
    } else {
        index::sample(rng, n, m).into_vec()
    };
    let mut per: Vec<Vec<f64>> = Vec::with_capacity(m);
    for &k in &picks {
        let mut g = vec![0.0; d];
        model.add_grad_log_likelihood(theta, &data[k], power, &mut g).ok()?;
        per.push(g);
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| per.iter().map(|g| g[j]).sum::<f64>() / m as f64)
        .collect();
    let grad = mean.iter().map(|x| x * n as f64).collect();
    let mut noise = DMatrix::zeros(d, d);
    if m > 1 && m < n {
        for g in &per {
            for i in 0..d {
                for j in 0..d {
                    noise[(i, j)] += (g[i] - mean[i]) * (g[j] - mean[j]);
                }
            }
        }
        let fpc = 1.0 - m as f64 / n as f64;
        noise *= (n * n) as f64 / m as f64 * fpc / (m - 1) as f64;
    }
    Some(NoisyGradient { grad, noise })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SghmcOutcome {
    pub theta: ParameterPoint,
    pub p: Vec<f64>,
    /// A minibatch gradient was singular; the trajectory stopped early.
    pub stalled: bool,
}

/// Friction-augmented Hamiltonian dynamics with minibatch gradients, started
/// from momentum `p0` and run without a Metropolis correction.
#[allow(clippy::too_many_arguments)]
pub fn sghmc_trajectory<R: Rng + ?Sized>(
    theta0: &[f64],
    p0: &[f64],
    model: &ModelSpec,
    data: &[Datum],
    power: f64,
    kin: &Kinetic,
    cfg: &SghmcConfig,
    rng: &mut R,
) -> SghmcOutcome {
    let d = theta0.len();
    let eps = cfg.epsilon;
    let mut theta = theta0.to_vec();
    let mut p = p0.to_vec();
    let stop = |theta: Vec<f64>, p: Vec<f64>| SghmcOutcome {
        theta: ParameterPoint(theta),
        p,
        stalled: true,
    };
    let Some(mut g) = minibatch_gradient(&theta, model, data, power, cfg.batch, rng) else {
        return stop(theta, p);
    };
    // ∇U = -∇ log L; flat prior
    p.iter_mut().zip(&g.grad).for_each(|(q, gi)| *q += 0.5 * eps * gi);
    for i in 0..cfg.steps {
        if drift(&mut theta, &mut p, eps, kin, Some(model.domain())).is_none() {
            return stop(theta, p);
        }
        g = match minibatch_gradient(&theta, model, data, power, cfg.batch, rng) {
            Some(g) => g,
            None => return stop(theta, p),
        };
        let w = if i + 1 == cfg.steps { 0.5 * eps } else { eps };
        p.iter_mut().zip(&g.grad).for_each(|(q, gi)| *q += w * gi);
        if let Some(offset) = cfg.friction {
            let b_hat = &g.noise * (0.5 * eps);
            let friction = &b_hat + DMatrix::identity(d, d) * offset;
            let v = DVector::from_vec(kin.velocity(&p));
            let damp = &friction * v;
            p.iter_mut().zip(damp.iter()).for_each(|(q, f)| *q -= eps * f);
            if cfg.thermal_noise && offset > 0.0 {
                // 2ε(C - B̂) = 2ε·offset·I
                let s = (2.0 * eps * offset).sqrt();
                p.iter_mut()
                    .for_each(|q| *q += s * rng.sample::<f64, _>(StandardNormal));
            }
        }
        if !p.iter().chain(&theta).all(|x| x.is_finite()) {
            return stop(theta, p);
        }
    }
    SghmcOutcome {
        theta: ParameterPoint(theta),
        p,
        stalled: false,
    }
}

/// One SGHMC move: fresh momentum, then [`sghmc_trajectory`]. A stalled
/// trajectory leaves the particle where it started.
#[allow(clippy::too_many_arguments)]
pub fn sghmc_step<R: Rng + ?Sized>(
    theta: &ParameterPoint,
    model: &ModelSpec,
    data: &[Datum],
    power: f64,
    kin: &Kinetic,
    cfg: &SghmcConfig,
    rng: &mut R,
) -> SghmcOutcome {
    let p0 = kin.sample(rng);
    let out = sghmc_trajectory(theta, &p0, model, data, power, kin, cfg, rng);
    if out.stalled {
        SghmcOutcome {
            theta: theta.clone(),
            p: p0,
            stalled: true,
        }
    } else {
        out
    }
}

// ---------------------------------------------------------------------------
// Gaussian rejection filtering

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrfConfig {
    pub samples: usize,
}

impl Default for GrfConfig {
    fn default() -> Self {
        Self { samples: 1000 }
    }
}

impl GrfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::Config("grf.samples must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrfOutcome {
    pub moments: Moments,
    pub accepted: usize,
    /// Proposals drawn, across the retry.
    pub drawn: usize,
    /// Too few samples were accepted; `moments` is the unchanged prior.
    pub no_update: bool,
}

/// Bayes update of a Gaussian belief by rejection sampling with the datum's
/// likelihood as acceptance probability, then a Gaussian refit.
pub fn grf_update<R: Rng + ?Sized>(
    prior: &Moments,
    model: &ModelSpec,
    d: &Datum,
    cfg: &GrfConfig,
    rng: &mut R,
) -> Result<GrfOutcome> {
    cfg.validate()?;
    model.check_controls(&d.controls)?;
    let dim = prior.dim();
    let root = covariance_root(&prior.covariance);
    let mean = DVector::from_column_slice(&prior.mean);
    let mut n = cfg.samples;
    let mut drawn = 0;
    for _ in 0..2 {
        drawn += n;
        let mut kept = Vec::new();
        for _ in 0..n {
            let x = &mean + &root * standard_normal(dim, rng);
            if !model.domain().contains(x.as_slice()) {
                continue;
            }
            if rng.random::<f64>() < model.outcome_probability(x.as_slice(), d) {
                kept.push(ParameterPoint(x.as_slice().to_vec()));
            }
        }
        if kept.len() >= 2 {
            let accepted = kept.len();
            return Ok(GrfOutcome {
                moments: WeightedEnsemble::uniform(kept).moments(),
                accepted,
                drawn,
                no_update: false,
            });
        }
        n *= 2;
    }
    Ok(GrfOutcome {
        moments: prior.clone(),
        accepted: 0,
        drawn,
        no_update: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Controls;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Gaussian log density with optional support box.
    struct Gauss {
        domain: DomainBox,
        mean: f64,
        std: f64,
    }

    impl LogTarget for Gauss {
        fn domain(&self) -> &DomainBox {
            &self.domain
        }
        fn log_density(&self, x: &[f64]) -> Option<f64> {
            self.domain
                .contains(x)
                .then(|| -0.5 * ((x[0] - self.mean) / self.std).powi(2))
        }
        fn grad_log_density(&self, x: &[f64]) -> Option<Vec<f64>> {
            Some(vec![-(x[0] - self.mean) / (self.std * self.std)])
        }
    }

    fn wide_gauss() -> Gauss {
        Gauss {
            domain: DomainBox::cube(1, -1e6, 1e6).unwrap(),
            mean: 0.0,
            std: 1.0,
        }
    }

    struct Flat(DomainBox);

    impl LogTarget for Flat {
        fn domain(&self) -> &DomainBox {
            &self.0
        }
        fn log_density(&self, x: &[f64]) -> Option<f64> {
            self.0.contains(x).then_some(0.0)
        }
        fn grad_log_density(&self, x: &[f64]) -> Option<Vec<f64>> {
            Some(vec![0.0; x.len()])
        }
    }

    fn cloud(xs: &[f64]) -> WeightedEnsemble {
        WeightedEnsemble::uniform(xs.iter().map(|x| ParameterPoint(vec![*x])).collect())
    }

    fn normal_cloud(m: usize, rng: &mut ChaCha8Rng) -> WeightedEnsemble {
        let xs: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        cloud(&xs)
    }

    #[test]
    fn liu_west_a_one_is_bootstrap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = cloud(&[0.1, 0.4, 0.9]);
        let dom = DomainBox::cube(1, 0.0, 1.0).unwrap();
        let out = liu_west_resample(&e, &LiuWestConfig { a: 1.0 }, &dom, &mut rng).unwrap();
        for p in out.particles() {
            assert!([0.1, 0.4, 0.9].contains(&p[0]));
        }
        let same = cloud(&[0.3; 5]);
        let out = liu_west_resample(&same, &LiuWestConfig { a: 0.5 }, &dom, &mut rng).unwrap();
        assert!(out.particles().iter().all(|p| p[0] == 0.3));
    }

    #[test]
    fn liu_west_a_zero_is_gaussian_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // mean 1.5, variance 0.25
        let e = cloud(&[1.0, 2.0]);
        let dom = DomainBox::cube(1, -10.0, 10.0).unwrap();
        let big = WeightedEnsemble::uniform((0..20_000).map(|i| e.particles()[i % 2].clone()).collect());
        let out = liu_west_resample(&big, &LiuWestConfig { a: 0.0 }, &dom, &mut rng).unwrap();
        let m = out.moments();
        assert!((m.mean[0] - 1.5).abs() < 4.0 * 0.5 / (20_000f64).sqrt());
        assert!((m.covariance[(0, 0)] - 0.25).abs() < 0.01);
        // particle identity is lost
        assert!(out.particles().iter().all(|p| p[0] != 1.0 && p[0] != 2.0));
    }

    #[test]
    fn liu_west_preserves_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 10_000;
        let e = normal_cloud(m, &mut rng);
        let dom = DomainBox::cube(1, -100.0, 100.0).unwrap();
        let out = liu_west_resample(&e, &LiuWestConfig { a: 0.98 }, &dom, &mut rng).unwrap();
        let mo = out.moments();
        let mi = e.moments();
        assert!((mo.mean[0] - mi.mean[0]).abs() < 4.0 / (m as f64).sqrt());
        assert!((mo.covariance[(0, 0)] / mi.covariance[(0, 0)] - 1.0).abs() < 0.05);
    }

    #[test]
    fn liu_west_expected_moments_over_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = normal_cloud(1000, &mut rng);
        let mi = e.moments();
        let dom = DomainBox::cube(1, -100.0, 100.0).unwrap();
        let reps = 200;
        let (mut means, mut vars) = (0.0, 0.0);
        for _ in 0..reps {
            let o = liu_west_resample(&e, &LiuWestConfig { a: 0.98 }, &dom, &mut rng)
                .unwrap()
                .moments();
            means += o.mean[0];
            vars += o.covariance[(0, 0)];
        }
        let se = (mi.covariance[(0, 0)] / 1000.0 / reps as f64).sqrt();
        assert!((means / reps as f64 - mi.mean[0]).abs() < 4.0 * se);
        assert!((vars / reps as f64 / mi.covariance[(0, 0)] - 1.0).abs() < 0.1);
    }

    #[test]
    fn liu_west_stays_in_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dom = DomainBox::cube(1, 0.0, 1.0).unwrap();
        let e = cloud(&[0.0, 0.001, 0.999, 1.0, 0.5]);
        for _ in 0..50 {
            let out = liu_west_resample(&e, &LiuWestConfig { a: 0.3 }, &dom, &mut rng).unwrap();
            assert!(out.particles().iter().all(|p| dom.contains(p)));
        }
    }

    #[test]
    fn rwm_flat_target_always_accepts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = Flat(DomainBox::cube(1, -1e9, 1e9).unwrap());
        let prop = RwmProposal::isotropic(1, 0.5);
        let mut x = ParameterPoint(vec![0.0]);
        for _ in 0..100 {
            let tr = rwm_step(&x, 0.0, &t, &prop, &mut rng);
            assert!(tr.accepted);
            x = tr.theta;
        }
    }

    #[test]
    fn rwm_rejects_zero_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = ModelSpec::precession(0.0, 10.0).unwrap();
        // outcome 0 at t = π has zero likelihood at ω = 0.5
        let data = [Datum::new(Controls::time(PI), 0).unwrap()];
        let t = TemperedPosterior::new(&m, &data, 1.0);
        assert!(t.log_density(&[0.5]).is_none());
        let start = ParameterPoint(vec![1.0]);
        let ld = t.log_density(&start).unwrap();
        // degenerate proposal that lands exactly on 0.5
        let prop = RwmProposal::isotropic(1, 0.0);
        let tr = rwm_step(&ParameterPoint(vec![0.5]), ld, &t, &prop, &mut rng);
        assert!(!tr.accepted);
        assert_eq!(tr.accept_prob, 0.0);
    }

    #[test]
    fn rwm_long_chain_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = wide_gauss();
        let prop = RwmProposal::isotropic(1, 2.4);
        let mut x = ParameterPoint(vec![0.0]);
        let mut ld = 0.0;
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let tr = rwm_step(&x, ld, &t, &prop, &mut rng);
            x = tr.theta;
            ld = tr.log_density;
            s += x[0];
            s2 += x[0] * x[0];
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn rwm_adaptation_direction() {
        let mut c = RwmConfig::default();
        c.adapt(0.9);
        assert!((c.scale - 1.1).abs() < 1e-15);
        c.adapt(0.1);
        c.adapt(0.1);
        assert!((c.scale - 1.0 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn leapfrog_free_particle() {
        let kin = Kinetic::identity(1);
        let tr = leapfrog(&[0.0], &[1.0], 0.1, 10, &kin, |_| Some(vec![0.0]), None);
        assert!((tr.theta[0] - 1.0).abs() < 1e-12);
        assert_eq!(tr.p[0], 1.0);
        assert!(!tr.diverged);
    }

    #[test]
    fn leapfrog_harmonic_energy_is_bounded() {
        let kin = Kinetic::identity(1);
        let (mut x, mut p) = (vec![1.0], vec![0.0]);
        let h0 = 0.5;
        let mut worst: f64 = 0.0;
        let eps = 0.01;
        for k in 1..=10_000 {
            let tr = leapfrog(&x, &p, eps, 1, &kin, |q| Some(vec![q[0]]), None);
            x = tr.theta;
            p = tr.p;
            let h = 0.5 * x[0] * x[0] + 0.5 * p[0] * p[0];
            worst = worst.max((h - h0).abs());
            // exact rotation as oracle for the phase
            let exact = (k as f64 * eps).cos();
            assert!((x[0] - exact).abs() < 1e-3);
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn leapfrog_is_reversible() {
        let kin = Kinetic::from_mass(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let grad = |q: &[f64]| Some(vec![q[0].sin() + q[1], q[0] + 2.0 * q[1].powi(3)]);
        let dom = DomainBox::cube(2, -1.0, 1.0).unwrap();
        let fw = leapfrog(&[0.2, -0.4], &[3.0, -2.0], 0.05, 40, &kin, grad, Some(&dom));
        assert!(fw.reflections > 0);
        let back_p: Vec<f64> = fw.p.iter().map(|v| -v).collect();
        let bw = leapfrog(&fw.theta, &back_p, 0.05, 40, &kin, grad, Some(&dom));
        assert!((bw.theta[0] - 0.2).abs() < 1e-9 && (bw.theta[1] + 0.4).abs() < 1e-9);
        assert!((bw.p[0] + 3.0).abs() < 1e-9 && (bw.p[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn reflection_mirrors_position_and_momentum() {
        let kin = Kinetic::identity(1);
        let dom = DomainBox::cube(1, 0.0, 1.0).unwrap();
        let tr = leapfrog(&[0.9], &[1.0], 0.3, 1, &kin, |_| Some(vec![0.0]), Some(&dom));
        // 0.9 + 0.3 = 1.2 mirrors to 0.8
        assert!((tr.theta[0] - 0.8).abs() < 1e-12);
        assert_eq!(tr.p[0], -1.0);
        assert_eq!(tr.reflections, 1);
    }

    #[test]
    fn reflection_preserves_kinetic_energy_with_dense_mass() {
        let kin = Kinetic::from_mass(DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 2.0])).unwrap();
        let dom = DomainBox::cube(2, 0.0, 1.0).unwrap();
        let p0 = [2.0, 0.5];
        let tr = leapfrog(&[0.5, 0.5], &p0, 1.0, 3, &kin, |_| Some(vec![0.0, 0.0]), Some(&dom));
        assert!(tr.reflections > 0);
        assert!((kin.energy(&tr.p) - kin.energy(&p0)).abs() < 1e-12);
        assert!(dom.contains(&tr.theta));
    }

    #[test]
    fn leapfrog_flags_divergence() {
        let kin = Kinetic::identity(1);
        let tr = leapfrog(&[0.0], &[1.0], 0.1, 5, &kin, |q| (q[0] < 0.25).then(|| vec![0.0]), None);
        assert!(tr.diverged);
        let tr = leapfrog(&[0.0], &[1.0], 0.1, 5, &kin, |_| Some(vec![f64::NAN]), None);
        assert!(tr.diverged);
    }

    fn finite_jacobian_det(x: &[f64], p: &[f64], kin: &Kinetic, h: f64) -> f64 {
        let grad = |q: &[f64]| Some(q.iter().map(|v| v.sin() + 0.5 * v * v * v).collect::<Vec<_>>());
        let step = |z: &[f64]| {
            let n = z.len() / 2;
            let t = leapfrog(&z[..n], &z[n..], 0.1, 1, kin, grad, None);
            [t.theta, t.p].concat()
        };
        let z: Vec<f64> = [x, p].concat();
        let n = z.len();
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut up = z.clone();
            let mut dn = z.clone();
            up[j] += h;
            dn[j] -= h;
            let (fu, fd) = (step(&up), step(&dn));
            for i in 0..n {
                jac[(i, j)] = (fu[i] - fd[i]) / (2.0 * h);
            }
        }
        jac.determinant()
    }

    #[test]
    fn leapfrog_preserves_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for dim in [1usize, 2] {
            let kin = if dim == 1 {
                Kinetic::identity(1)
            } else {
                Kinetic::from_mass(DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.7])).unwrap()
            };
            for _ in 0..20 {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                let det = finite_jacobian_det(&x, &p, &kin, 1e-5);
                assert!((det - 1.0).abs() < 1e-8, "{det}");
            }
        }
    }

    #[test]
    fn hmc_exact_integration_accepts() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = wide_gauss();
        let kin = Kinetic::identity(1);
        let x = ParameterPoint(vec![0.3]);
        let ld = t.log_density(&x).unwrap();
        for _ in 0..100 {
            let s = hmc_step(&x, ld, &t, &kin, 1e-4, 100, &mut rng);
            assert!(s.transition.accept_prob > 0.999);
        }
    }

    #[test]
    fn metropolis_probability_formula() {
        assert!((metropolis_probability(-(2f64.ln())) - 0.5).abs() < 1e-15);
        assert_eq!(metropolis_probability(3.0), 1.0);
        assert_eq!(metropolis_probability(f64::NAN), 0.0);
    }

    #[test]
    fn hmc_never_accepts_divergent_trajectories() {
        struct Broken;
        impl LogTarget for Broken {
            fn domain(&self) -> &DomainBox {
                static D: std::sync::OnceLock<DomainBox> = std::sync::OnceLock::new();
                D.get_or_init(|| DomainBox::cube(1, -10.0, 10.0).unwrap())
            }
            fn log_density(&self, _: &[f64]) -> Option<f64> {
                Some(0.0)
            }
            fn grad_log_density(&self, x: &[f64]) -> Option<Vec<f64>> {
                (x[0].abs() < 0.05).then(|| vec![0.0])
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kin = Kinetic::identity(1);
        for _ in 0..200 {
            let s = hmc_step(&ParameterPoint(vec![0.0]), 0.0, &Broken, &kin, 0.1, 5, &mut rng);
            if s.diverged {
                assert!(!s.transition.accepted);
                assert_eq!(s.transition.theta[0], 0.0);
            }
        }
    }

    #[test]
    fn hmc_precession_posterior_acceptance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = ModelSpec::precession(0.0, 1.0).unwrap();
        let truth = [0.5];
        let data: Vec<Datum> = (1..=20)
            .map(|k| {
                model
                    .simulate_outcome(&truth, Controls::time(0.08 * k as f64), &mut rng)
                    .unwrap()
            })
            .collect();
        let t = TemperedPosterior::new(&model, &data, 1.0);
        // posterior spread from a fine grid
        let grid: Vec<f64> = (1..10_000).map(|i| i as f64 / 10_000.0).collect();
        let lw: Vec<f64> = grid
            .iter()
            .map(|w| t.log_density(&[*w]).unwrap_or(f64::NEG_INFINITY))
            .collect();
        let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lw.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        let mean: f64 = grid.iter().zip(&w).map(|(g, w)| g * w).sum::<f64>() / z;
        let var: f64 = grid.iter().zip(&w).map(|(g, w)| (g - mean).powi(2) * w).sum::<f64>() / z;
        let kin = Kinetic::from_covariance(&DMatrix::from_element(1, 1, var)).unwrap();
        let mut x = ParameterPoint(vec![mean]);
        let mut ld = t.log_density(&x).unwrap();
        let mut acc = 0.0;
        for _ in 0..1000 {
            let s = hmc_step(&x, ld, &t, &kin, 0.2, 5, &mut rng);
            acc += s.transition.accept_prob;
            x = s.transition.theta;
            ld = s.transition.log_density;
        }
        assert!(acc / 1000.0 >= 0.6, "{}", acc / 1000.0);
    }

    fn flux_test<F>(mut step: F, seed: u64)
    where
        F: FnMut(&ParameterPoint, f64, &mut ChaCha8Rng) -> (ParameterPoint, f64),
    {
        // discretized 1D target on [0, 1] with density ∝ 1 + x
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bins = 5;
        let bin = |x: f64| ((x * bins as f64) as usize).min(bins - 1);
        let mut flux = vec![vec![0u64; bins]; bins];
        let mut x = ParameterPoint(vec![0.5]);
        let mut ld = (1.5f64).ln();
        let n = 1_000_000;
        for _ in 0..n {
            let (y, l) = step(&x, ld, &mut rng);
            flux[bin(x[0])][bin(y[0])] += 1;
            x = y;
            ld = l;
        }
        for i in 0..bins {
            for j in (i + 1)..bins {
                let (a, b) = (flux[i][j] as f64, flux[j][i] as f64);
                // counts are roughly Poisson
                let se = (a + b).sqrt().max(1.0);
                assert!((a - b).abs() < 4.0 * se, "bins {i}->{j}: {a} vs {b}");
            }
        }
    }

    struct Linear(DomainBox);

    impl LogTarget for Linear {
        fn domain(&self) -> &DomainBox {
            &self.0
        }
        fn log_density(&self, x: &[f64]) -> Option<f64> {
            self.0.contains(x).then(|| (1.0 + x[0]).ln())
        }
        fn grad_log_density(&self, x: &[f64]) -> Option<Vec<f64>> {
            Some(vec![1.0 / (1.0 + x[0])])
        }
    }

    #[test]
    fn rwm_flux_is_balanced() {
        let t = Linear(DomainBox::cube(1, 0.0, 1.0).unwrap());
        let prop = RwmProposal::isotropic(1, 0.3);
        flux_test(
            |x, ld, rng| {
                let s = rwm_step(x, ld, &t, &prop, rng);
                (s.theta, s.log_density)
            },
            13,
        );
    }

    #[test]
    fn hmc_flux_is_balanced() {
        let t = Linear(DomainBox::cube(1, 0.0, 1.0).unwrap());
        let kin = Kinetic::from_mass(DMatrix::from_element(1, 1, 4.0)).unwrap();
        flux_test(
            |x, ld, rng| {
                let s = hmc_step(x, ld, &t, &kin, 0.2, 3, rng);
                (s.transition.theta, s.transition.log_density)
            },
            14,
        );
    }

    #[test]
    fn hybrid_screen() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let t = wide_gauss();
        let kin = Kinetic::identity(1);
        let hmc = HmcConfig::default();
        let prop = RwmProposal::isotropic(1, 0.5);
        let cfg = HybridConfig::default();
        let x = ParameterPoint(vec![0.0]);
        let s = hybrid_step(&x, 0.0, &t, &kin, &hmc, &prop, &cfg, Some(0.5), &mut rng);
        assert_eq!(s.kind, HybridKind::Hmc);
        assert!(s.rwm.is_none());
        let s = hybrid_step(&x, 0.0, &t, &kin, &hmc, &prop, &cfg, Some(0.0), &mut rng);
        assert_eq!(s.kind, HybridKind::HmcThenRwm);
        assert!(s.rwm.is_some());
    }

    #[test]
    fn sghmc_without_friction_or_noise_is_leapfrog() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let model = ModelSpec::precession(0.0, 2.0).unwrap();
        let data: Vec<Datum> = (1..=30)
            .map(|k| {
                model
                    .simulate_outcome(&[0.7], Controls::time(0.1 * k as f64), &mut rng)
                    .unwrap()
            })
            .collect();
        let kin = Kinetic::from_mass(DMatrix::from_element(1, 1, 50.0)).unwrap();
        let cfg = SghmcConfig {
            epsilon: 0.02,
            steps: 25,
            batch: data.len(),
            friction: None,
            thermal_noise: false,
        };
        let t = TemperedPosterior::new(&model, &data, 1.0);
        let lf = leapfrog(
            &[0.72],
            &[1.3],
            cfg.epsilon,
            cfg.steps,
            &kin,
            |x| t.grad_log_density(x).map(|g| g.into_iter().map(|v| -v).collect()),
            Some(model.domain()),
        );
        let sg = sghmc_trajectory(&[0.72], &[1.3], &model, &data, 1.0, &kin, &cfg, &mut rng);
        assert!((sg.theta[0] - lf.theta[0]).abs() < 1e-10);
        assert!((sg.p[0] - lf.p[0]).abs() < 1e-10);
    }

    #[test]
    fn sghmc_friction_decays_momentum_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // T1 likelihood with t = 0 carries no information: flat potential
        let model = ModelSpec::t1_decay(1.0, 1e9).unwrap();
        let data = vec![Datum::new(Controls::time(0.0), 1).unwrap(); 10];
        let mass = 2.0;
        let kin = Kinetic::from_mass(DMatrix::from_element(1, 1, mass)).unwrap();
        let (eps, gamma) = (0.01, 3.0);
        let mut p = vec![5.0];
        let mut x = vec![100.0];
        for _ in 0..50 {
            let cfg = SghmcConfig {
                epsilon: eps,
                steps: 1,
                batch: 3,
                friction: Some(gamma),
                thermal_noise: false,
            };
            let out = sghmc_trajectory(&x, &p, &model, &data, 1.0, &kin, &cfg, &mut rng);
            assert!((out.p[0] - p[0] * (1.0 - eps * gamma / mass)).abs() < 1e-12);
            p = out.p;
            x = out.theta.into_inner();
        }
    }

    #[test]
    fn grf_constant_likelihood_keeps_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        // T1 likelihood at t = 0 is identically 1 for outcome 1
        let model = ModelSpec::t1_decay(0.0, 100.0).unwrap();
        let prior = Moments::diagonal(vec![50.0], vec![5.0]);
        let d = Datum::new(Controls::time(0.0), 1).unwrap();
        let n = 20_000;
        let out = grf_update(&prior, &model, &d, &GrfConfig { samples: n }, &mut rng).unwrap();
        assert_eq!(out.accepted, n);
        assert!((out.moments.mean[0] - 50.0).abs() < 4.0 * 5.0 / (n as f64).sqrt());
        assert!((out.moments.std[0] / 5.0 - 1.0).abs() < 0.03);
    }

    #[test]
    fn grf_truncation_moves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        // sin²(ωt) with tω in (0, π/2) increases in ω: favours larger ω
        let model = ModelSpec::precession(0.0, 10.0).unwrap();
        let prior = Moments::diagonal(vec![1.0], vec![0.2]);
        let d = Datum::new(Controls::time(1.0), 1).unwrap();
        let out = grf_update(&prior, &model, &d, &GrfConfig::default(), &mut rng).unwrap();
        assert!(out.moments.mean[0] > 1.0);
        assert!(!out.no_update);
    }

    #[test]
    fn grf_no_update_when_nothing_accepted() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let model = ModelSpec::precession(0.0, 10.0).unwrap();
        // prior far outside the domain: every draw is rejected
        let prior = Moments::diagonal(vec![-50.0], vec![0.1]);
        let d = Datum::new(Controls::time(1.0), 1).unwrap();
        let out = grf_update(&prior, &model, &d, &GrfConfig::default(), &mut rng).unwrap();
        assert!(out.no_update);
        assert_eq!(out.moments, prior);
    }

    #[test]
    fn config_validation() {
        assert!(LiuWestConfig { a: 1.5 }.validate().is_err());
        assert!(RwmConfig {
            scale: 0.0,
            target_acceptance: 0.5
        }
        .validate()
        .is_err());
        assert!(HmcConfig {
            epsilon: 0.1,
            steps: 0,
            mass: None
        }
        .validate()
        .is_err());
        let bad_mass = HmcConfig {
            epsilon: 0.1,
            steps: 1,
            mass: Some(vec![1.0, 2.0, 2.0, 1.0]),
        };
        assert!(bad_mass.validate().is_err());
        assert!(HybridConfig { threshold: 1.0 }.validate().is_err());
        assert!(GrfConfig { samples: 1 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn reflected_trajectories_stay_in_box(x in 0.0f64..1.0, y in 0.0f64..1.0, px in -20.0f64..20.0, py in -20.0f64..20.0) {
            let kin = Kinetic::from_mass(DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0])).unwrap();
            let dom = DomainBox::cube(2, 0.0, 1.0).unwrap();
            let tr = leapfrog(&[x, y], &[px, py], 0.1, 10, &kin, |_| Some(vec![0.0, 0.0]), Some(&dom));
            prop_assert!(dom.contains(&tr.theta));
            prop_assert!((kin.energy(&tr.p) - kin.energy(&[px, py])).abs() < 1e-9 * (1.0 + kin.energy(&[px, py])));
        }

        #[test]
        fn grf_acceptance_is_bounded(mu in 0.5f64..3.0, t in 0.1f64..5.0, one in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let model = ModelSpec::precession(0.0, 10.0).unwrap();
            let prior = Moments::diagonal(vec![mu], vec![0.2]);
            let d = Datum::from_bool(Controls::time(t), one);
            let out = grf_update(&prior, &model, &d, &GrfConfig { samples: 200 }, &mut rng).unwrap();
            prop_assert!(out.accepted <= out.drawn);
        }
    }
}
