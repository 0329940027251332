//! Subsampled log-likelihood estimation with Taylor control variates, block
//! pseudo-marginal index updates, and the energy-conserving Gibbs kernel that
//! alternates index refreshes with HMC at fixed indices.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    hmc_step, metropolis_probability, rwm_step, HmcTransition, Kinetic, LogTarget, RwmProposal, Transition,
};
use crate::models::{Datum, DomainBox, ModelSpec, ParameterPoint};

/// Second-order Taylor expansions of every per-datum log-likelihood about a
/// reference point.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVariates {
    theta_star: Vec<f64>,
    values: Vec<f64>,
    grads: Vec<f64>,
    hessians: Vec<f64>,
    sum_value: f64,
    sum_grad: Vec<f64>,
    sum_hessian: Vec<f64>,
}

impl ControlVariates {
    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn reference(&self) -> &[f64] {
        &self.theta_star
    }

    pub fn sum_gradient(&self) -> &[f64] {
        &self.sum_grad
    }

    /// Row-major summed Hessian.
    pub fn sum_hessian(&self) -> &[f64] {
        &self.sum_hessian
    }

    fn delta(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&self.theta_star).map(|(a, b)| a - b).collect()
    }

    fn quad(value: f64, grad: &[f64], hess: &[f64], delta: &[f64]) -> f64 {
        let d = delta.len();
        let mut q = value;
        for i in 0..d {
            q += grad[i] * delta[i];
            let mut row = 0.0;
            for j in 0..d {
                row += hess[i * d + j] * delta[j];
            }
            q += 0.5 * delta[i] * row;
        }
        q
    }

    fn quad_grad(grad: &[f64], hess: &[f64], delta: &[f64], out: &mut [f64], scale: f64) {
        let d = delta.len();
        for i in 0..d {
            let mut g = grad[i];
            for j in 0..d {
                g += hess[i * d + j] * delta[j];
            }
            out[i] += scale * g;
        }
    }

    /// `q_k(θ)` for datum `k`.
    pub fn q(&self, k: usize, theta: &[f64]) -> f64 {
        let d = self.dim();
        let delta = self.delta(theta);
        Self::quad(
            self.values[k],
            &self.grads[k * d..(k + 1) * d],
            &self.hessians[k * d * d..(k + 1) * d * d],
            &delta,
        )
    }

    /// `Σ_k q_k(θ)` in constant time.
    pub fn q_sum(&self, theta: &[f64]) -> f64 {
        Self::quad(self.sum_value, &self.sum_grad, &self.sum_hessian, &self.delta(theta))
    }

    fn add_grad_q(&self, k: usize, delta: &[f64], out: &mut [f64], scale: f64) {
        let d = self.dim();
        Self::quad_grad(
            &self.grads[k * d..(k + 1) * d],
            &self.hessians[k * d * d..(k + 1) * d * d],
            delta,
            out,
            scale,
        );
    }
}

/// Taylor coefficients of each datum's log-likelihood at `theta_star`,
/// summed once over the full dataset.
pub fn build_control_variates(model: &ModelSpec, data: &[Datum], theta_star: &[f64]) -> Result<ControlVariates> {
    model.domain().check(theta_star)?;
    let d = model.dim();
    let n = data.len();
    let mut values = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n * d);
    let mut hessians = Vec::with_capacity(n * d * d);
    for (k, datum) in data.iter().enumerate() {
        let l = model.log_likelihood(theta_star, datum)?;
        if l.clamped {
            return Err(Error::ControlVariateSingularity { index: k });
        }
        let g = model
            .grad_log_likelihood(theta_star, datum)
            .map_err(|_| Error::ControlVariateSingularity { index: k })?;
        let h = model
            .hess_log_likelihood(theta_star, datum)
            .map_err(|_| Error::ControlVariateSingularity { index: k })?;
        values.push(l.value);
        grads.extend(g);
        // symmetrize against rounding
        for i in 0..d {
            for j in 0..d {
                hessians.push(0.5 * (h[i * d + j] + h[j * d + i]));
            }
        }
    }
    let sum_value = values.iter().sum();
    let sum_grad = (0..d).map(|i| (0..n).map(|k| grads[k * d + i]).sum()).collect();
    let sum_hessian = (0..d * d)
        .map(|i| (0..n).map(|k| hessians[k * d * d + i]).sum())
        .collect();
    Ok(ControlVariates {
        theta_star: theta_star.to_vec(),
        values,
        grads,
        hessians,
        sum_value,
        sum_grad,
        sum_hessian,
    })
}

/// How subsample indices are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum IndexSampling {
    /// Uniform i.i.d. indices.
    #[default]
    WithReplacement,
    /// Distinct indices; the variance estimate carries the finite-population
    /// correction, so `m = N` gives an exact estimator.
    WithoutReplacement,
}

/// Subsample indices split into contiguous blocks, refreshed one block at a
/// time in cyclic order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsampleState {
    indices: Vec<usize>,
    population: usize,
    blocks: usize,
    next_block: usize,
    sampling: IndexSampling,
}

impl SubsampleState {
    pub fn new(indices: Vec<usize>, population: usize, blocks: usize, sampling: IndexSampling) -> Result<Self> {
        let m = indices.len();
        if m == 0 || blocks == 0 || blocks > m {
            return Err(Error::Config(format!(
                "subsample of size {m} cannot be split into {blocks} blocks"
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= population) {
            return Err(Error::Config(format!(
                "subsample index {bad} outside dataset of size {population}"
            )));
        }
        if sampling == IndexSampling::WithoutReplacement {
            let mut sorted = indices.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != m {
                return Err(Error::Config("indices must be distinct without replacement".into()));
            }
        }
        Ok(Self {
            indices,
            population,
            blocks,
            next_block: 0,
            sampling,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        population: usize,
        m: usize,
        blocks: usize,
        sampling: IndexSampling,
        rng: &mut R,
    ) -> Result<Self> {
        if population == 0 || (sampling == IndexSampling::WithoutReplacement && m > population) {
            return Err(Error::Config(format!(
                "cannot draw {m} indices from a dataset of size {population}"
            )));
        }
        let indices = match sampling {
            IndexSampling::WithReplacement => (0..m).map(|_| rng.random_range(0..population)).collect(),
            IndexSampling::WithoutReplacement => index::sample(rng, population, m).into_vec(),
        };
        Self::new(indices, population, blocks, sampling)
    }

    /// Every datum exactly once.
    pub fn exact_cover(population: usize, blocks: usize) -> Result<Self> {
        Self::new(
            (0..population).collect(),
            population,
            blocks,
            IndexSampling::WithoutReplacement,
        )
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn m(&self) -> usize {
        self.indices.len()
    }

    pub fn population(&self) -> usize {
        self.population
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn sampling(&self) -> IndexSampling {
        self.sampling
    }

    pub fn next_block(&self) -> usize {
        self.next_block
    }

    /// Index range of block `b`; sizes differ by at most one.
    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        let m = self.m();
        (b * m / self.blocks)..((b + 1) * m / self.blocks)
    }

    /// Copy with block `b` redrawn.
    fn refreshed<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Self {
        let range = self.block_range(b);
        let mut next = self.clone();
        match self.sampling {
            IndexSampling::WithReplacement => {
                for slot in &mut next.indices[range] {
                    *slot = rng.random_range(0..self.population);
                }
            }
            IndexSampling::WithoutReplacement => {
                let mut taken = vec![false; self.population];
                for (j, &i) in self.indices.iter().enumerate() {
                    if !range.contains(&j) {
                        taken[i] = true;
                    }
                }
                let free: Vec<usize> = (0..self.population).filter(|&i| !taken[i]).collect();
                if free.len() > range.len() {
                    let pick = index::sample(rng, free.len(), range.len());
                    for (slot, p) in next.indices[range].iter_mut().zip(pick.iter()) {
                        *slot = free[p];
                    }
                }
                // otherwise the block can only be redrawn as itself
            }
        }
        next
    }
}

/// Difference-estimator output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    /// `ℓ̂_m`; `-∞` when a subsampled datum has zero likelihood.
    pub log_lik: f64,
    /// `σ̂²_m`.
    pub variance: f64,
    pub clamped: bool,
}

impl Estimate {
    /// `ln L̂_m = ℓ̂_m − σ̂²_m / 2`.
    pub fn log_corrected(&self) -> f64 {
        corrected_log_likelihood(self.log_lik, self.variance)
    }
}

/// `ln L̂ = ℓ̂ − σ̂²/2`; `-∞` propagates.
pub fn corrected_log_likelihood(log_lik: f64, variance: f64) -> f64 {
    if log_lik == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        log_lik - 0.5 * variance
    }
}

/// `L̂ = exp(ℓ̂ − σ̂²/2)`.
pub fn corrected_likelihood_estimator(log_lik: f64, variance: f64) -> f64 {
    corrected_log_likelihood(log_lik, variance).exp()
}

fn variance_factor(n: usize, m: usize, sampling: IndexSampling) -> f64 {
    let base = (n * n) as f64 / m as f64;
    match sampling {
        IndexSampling::WithReplacement => base,
        IndexSampling::WithoutReplacement => base * (1.0 - m as f64 / n as f64),
    }
}

/// `ℓ̂ = Σ q_k(θ) + (N/m) Σ_j (ℓ_{u_j}(θ) − q_{u_j}(θ))` and its variance
/// estimate from the spread of the differences.
pub fn difference_log_estimator(
    model: &ModelSpec,
    data: &[Datum],
    cv: &ControlVariates,
    s: &SubsampleState,
    theta: &[f64],
) -> Estimate {
    let n = data.len();
    let m = s.m();
    let mut diffs = Vec::with_capacity(m);
    for &k in s.indices() {
        let l = model.log_likelihood_unchecked(theta, &data[k]);
        if l.clamped {
            return Estimate {
                log_lik: f64::NEG_INFINITY,
                variance: 0.0,
                clamped: true,
            };
        }
        diffs.push(l.value - cv.q(k, theta));
    }
    let total: f64 = diffs.iter().sum();
    let mean = total / m as f64;
    let log_lik = cv.q_sum(theta) + n as f64 / m as f64 * total;
    let variance = if m > 1 {
        let s2 = diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        (variance_factor(n, m, s.sampling()) * s2).max(0.0)
    } else {
        0.0
    };
    Estimate {
        log_lik,
        variance,
        clamped: false,
    }
}

/// Gradient of `ln L̂_m` at fixed indices; `None` if singular.
pub fn grad_log_corrected(
    model: &ModelSpec,
    data: &[Datum],
    cv: &ControlVariates,
    s: &SubsampleState,
    theta: &[f64],
) -> Option<Vec<f64>> {
    let n = data.len();
    let m = s.m();
    let d = theta.len();
    let delta = cv.delta(theta);
    let mut diffs = Vec::with_capacity(m);
    let mut dgrads = vec![0.0; m * d];
    for (j, &k) in s.indices().iter().enumerate() {
        let l = model.log_likelihood_unchecked(theta, &data[k]);
        if l.clamped {
            return None;
        }
        diffs.push(l.value - cv.q(k, theta));
        let g = &mut dgrads[j * d..(j + 1) * d];
        model.add_grad_log_likelihood(theta, &data[k], 1.0, g).ok()?;
        cv.add_grad_q(k, &delta, g, -1.0);
    }
    let mut grad = vec![0.0; d];
    ControlVariates::quad_grad(&cv.sum_grad, &cv.sum_hessian, &delta, &mut grad, 1.0);
    let ratio = n as f64 / m as f64;
    for j in 0..m {
        for i in 0..d {
            grad[i] += ratio * dgrads[j * d + i];
        }
    }
    if m > 1 {
        let mean = diffs.iter().sum::<f64>() / m as f64;
        let mean_grad: Vec<f64> = (0..d)
            .map(|i| (0..m).map(|j| dgrads[j * d + i]).sum::<f64>() / m as f64)
            .collect();
        let c = variance_factor(n, m, s.sampling()) / (m - 1) as f64;
        for j in 0..m {
            for i in 0..d {
                // ∇σ̂² = 2c Σ (d_j − d̄)(∇d_j − ∇d̄); we subtract half of it
                grad[i] -= c * (diffs[j] - mean) * (dgrads[j * d + i] - mean_grad[i]);
            }
        }
    }
    grad.iter().all(|x| x.is_finite()).then_some(grad)
}

/// Borrowed model, data and control variates.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorContext<'a> {
    pub model: &'a ModelSpec,
    pub data: &'a [Datum],
    pub cv: &'a ControlVariates,
}

impl<'a> EstimatorContext<'a> {
    pub fn estimate(&self, s: &SubsampleState, theta: &[f64]) -> Estimate {
        difference_log_estimator(self.model, self.data, self.cv, s, theta)
    }

    /// The estimated posterior at fixed indices, tempered by `power`.
    pub fn target(&self, s: &'a SubsampleState, power: f64) -> EstimatedPosterior<'a> {
        EstimatedPosterior {
            ctx: *self,
            state: s,
            power,
        }
    }
}

/// Flat prior times `L̂_m(θ, u)^power` with `u` held fixed.
#[derive(Debug, Clone, Copy)]
pub struct EstimatedPosterior<'a> {
    pub ctx: EstimatorContext<'a>,
    pub state: &'a SubsampleState,
    pub power: f64,
}

impl LogTarget for EstimatedPosterior<'_> {
    fn domain(&self) -> &DomainBox {
        self.ctx.model.domain()
    }

    fn log_density(&self, theta: &[f64]) -> Option<f64> {
        if !self.domain().contains(theta) {
            return None;
        }
        let e = self.ctx.estimate(self.state, theta);
        (!e.clamped).then(|| self.power * e.log_corrected())
    }

    fn grad_log_density(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let mut g = grad_log_corrected(self.ctx.model, self.ctx.data, self.ctx.cv, self.state, theta)?;
        g.iter_mut().for_each(|x| *x *= self.power);
        Some(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexStep {
    pub state: SubsampleState,
    pub estimate: Estimate,
    pub accepted: bool,
}

/// Refreshes the next block of indices at fixed `theta` and accepts with
/// probability `min(1, (L̂'/L̂)^power)`. `current` is the estimate at the
/// incoming indices.
pub fn block_pm_index_step<R: Rng + ?Sized>(
    s: &SubsampleState,
    current: &Estimate,
    theta: &[f64],
    ctx: &EstimatorContext<'_>,
    power: f64,
    rng: &mut R,
) -> IndexStep {
    let b = s.next_block;
    let mut proposal = s.refreshed(b, rng);
    let advance = (b + 1) % s.blocks;
    proposal.next_block = advance;
    let est = ctx.estimate(&proposal, theta);
    let log_ratio = power * (est.log_corrected() - current.log_corrected());
    let prob = if est.clamped {
        0.0
    } else if current.clamped {
        1.0
    } else {
        metropolis_probability(log_ratio)
    };
    if prob >= 1.0 || rng.random::<f64>() < prob {
        IndexStep {
            state: proposal,
            estimate: est,
            accepted: true,
        }
    } else {
        let mut kept = s.clone();
        kept.next_block = advance;
        IndexStep {
            state: kept,
            estimate: *current,
            accepted: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcsOutcome {
    pub theta: ParameterPoint,
    pub state: SubsampleState,
    pub estimate: Estimate,
    pub index_accepted: bool,
    pub hmc: HmcTransition,
}

/// One Gibbs sweep: a block index update at fixed `theta`, then HMC on the
/// estimated posterior at the new fixed indices.
#[allow(clippy::too_many_arguments)]
pub fn ecs_gibbs_step<R: Rng + ?Sized>(
    theta: &ParameterPoint,
    s: &SubsampleState,
    current: &Estimate,
    ctx: &EstimatorContext<'_>,
    power: f64,
    kin: &Kinetic,
    epsilon: f64,
    steps: usize,
    rng: &mut R,
) -> EcsOutcome {
    let idx = block_pm_index_step(s, current, theta, ctx, power, rng);
    let target = ctx.target(&idx.state, power);
    let ld = power * idx.estimate.log_corrected();
    let hmc = hmc_step(theta, ld, &target, kin, epsilon, steps, rng);
    let estimate = if hmc.transition.accepted {
        ctx.estimate(&idx.state, &hmc.transition.theta)
    } else {
        idx.estimate
    };
    EcsOutcome {
        theta: hmc.transition.theta.clone(),
        state: idx.state,
        estimate,
        index_accepted: idx.accepted,
        hmc,
    }
}

/// Pseudo-marginal RWM at fixed indices, wrapped in the same Gibbs sweep as
/// [`ecs_gibbs_step`].
pub fn pm_rwm_gibbs_step<R: Rng + ?Sized>(
    theta: &ParameterPoint,
    s: &SubsampleState,
    current: &Estimate,
    ctx: &EstimatorContext<'_>,
    power: f64,
    proposal: &RwmProposal,
    rng: &mut R,
) -> PmRwmOutcome {
    let idx = block_pm_index_step(s, current, theta, ctx, power, rng);
    let target = ctx.target(&idx.state, power);
    let ld = power * idx.estimate.log_corrected();
    let step = rwm_step(theta, ld, &target, proposal, rng);
    let estimate = if step.accepted {
        ctx.estimate(&idx.state, &step.theta)
    } else {
        idx.estimate
    };
    PmRwmOutcome {
        theta: step.theta.clone(),
        state: idx.state,
        estimate,
        index_accepted: idx.accepted,
        rwm: step,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmRwmOutcome {
    pub theta: ParameterPoint,
    pub state: SubsampleState,
    pub estimate: Estimate,
    pub index_accepted: bool,
    pub rwm: Transition,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::TemperedPosterior;
    use crate::models::Controls;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn precession_data(n: usize, truth: f64, t_max: f64, rng: &mut ChaCha8Rng) -> (ModelSpec, Vec<Datum>) {
        let model = ModelSpec::precession(0.0, 2.0).unwrap();
        let data = (0..n)
            .map(|_| {
                let t = rng.random_range(0.0..t_max);
                model.simulate_outcome(&[truth], Controls::time(t), rng).unwrap()
            })
            .collect();
        (model, data)
    }

    fn full_ll(model: &ModelSpec, data: &[Datum], theta: &[f64]) -> f64 {
        data.iter().map(|d| model.log_likelihood(theta, d).unwrap().value).sum()
    }

    /// Posterior mode by grid search then Newton on the analytic derivatives.
    fn mode(model: &ModelSpec, data: &[Datum], lo: f64, hi: f64) -> f64 {
        let t = TemperedPosterior::new(model, data, 1.0);
        let mut best = (f64::NEG_INFINITY, lo);
        for i in 1..20_000 {
            let w = lo + (hi - lo) * i as f64 / 20_000.0;
            if let Some(l) = t.log_density(&[w]) {
                if l > best.0 {
                    best = (l, w);
                }
            }
        }
        let mut w = best.1;
        for _ in 0..20 {
            let g: f64 = data
                .iter()
                .map(|d| model.grad_log_likelihood(&[w], d).unwrap()[0])
                .sum();
            let h: f64 = data
                .iter()
                .map(|d| model.hess_log_likelihood(&[w], d).unwrap()[0])
                .sum();
            w -= g / h;
        }
        w
    }

    #[test]
    fn exact_cover_reproduces_full_log_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (model, data) = precession_data(100, 0.8, 10.0, &mut rng);
        let cv = build_control_variates(&model, &data, &[0.75]).unwrap();
        let s = SubsampleState::exact_cover(data.len(), 3).unwrap();
        for w in [0.7, 0.79, 0.8, 0.83] {
            let e = difference_log_estimator(&model, &data, &cv, &s, &[w]);
            let exact = full_ll(&model, &data, &[w]);
            assert!((e.log_lik - exact).abs() < 1e-9 * exact.abs().max(1.0));
            assert!(e.variance.abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_control_variates_at_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (model, data) = precession_data(60, 0.8, 10.0, &mut rng);
        let star = [0.81];
        let cv = build_control_variates(&model, &data, &star).unwrap();
        for _ in 0..20 {
            let s = SubsampleState::random(60, 7, 2, IndexSampling::WithReplacement, &mut rng).unwrap();
            let e = difference_log_estimator(&model, &data, &cv, &s, &star);
            assert!((e.log_lik - cv.q_sum(&star)).abs() < 1e-9);
            assert!(e.variance < 1e-20);
        }
    }

    #[test]
    fn gradient_sum_vanishes_at_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (model, data) = precession_data(200, 0.8, 10.0, &mut rng);
        let w = mode(&model, &data, 0.6, 1.0);
        let cv = build_control_variates(&model, &data, &[w]).unwrap();
        assert!(cv.sum_gradient()[0].abs() < 1e-6 * data.len() as f64);
    }

    #[test]
    fn taylor_sum_tracks_full_likelihood_near_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (model, data) = precession_data(400, 0.8, 100.0, &mut rng);
        let star = mode(&model, &data, 0.7, 0.9);
        let cv = build_control_variates(&model, &data, &[star]).unwrap();
        let sigma = (-1.0 / cv.sum_hessian()[0]).sqrt();
        for f in [-0.1, -0.05, 0.02, 0.1] {
            let w = star + f * sigma;
            let exact = full_ll(&model, &data, &[w]);
            assert!(((cv.q_sum(&[w]) - exact) / exact).abs() < 0.01);
        }
    }

    #[test]
    fn singular_reference_is_rejected() {
        let model = ModelSpec::precession(0.0, 10.0).unwrap();
        let data = vec![
            Datum::new(Controls::time(1.0), 1).unwrap(),
            Datum::new(Controls::time(std::f64::consts::PI), 0).unwrap(),
        ];
        assert_eq!(
            build_control_variates(&model, &data, &[0.5]),
            Err(Error::ControlVariateSingularity { index: 1 })
        );
    }

    #[test]
    fn estimator_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (model, data) = precession_data(400, 0.8, 100.0, &mut rng);
        let star = mode(&model, &data, 0.7, 0.9);
        let cv = build_control_variates(&model, &data, &[star]).unwrap();
        let sigma = (-1.0 / cv.sum_hessian()[0]).sqrt();
        for f in [-2.0, -0.5, 0.0, 1.0, 3.0] {
            let theta = [star + f * sigma];
            let exact = full_ll(&model, &data, &theta);
            let reps = 100_000;
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..reps {
                let s = SubsampleState::random(400, 50, 3, IndexSampling::WithReplacement, &mut rng).unwrap();
                let e = difference_log_estimator(&model, &data, &cv, &s, &theta);
                s1 += e.log_lik;
                s2 += e.log_lik * e.log_lik;
            }
            let mean = s1 / reps as f64;
            let sd = (s2 / reps as f64 - mean * mean).max(0.0).sqrt();
            assert!(
                (mean - exact).abs() <= 4.0 * sd / (reps as f64).sqrt() + 1e-9,
                "{f}: {mean} vs {exact}"
            );
        }
    }

    #[test]
    fn variance_shrinks_near_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let width = 2.0;
        let mut wins = 0;
        let trials = 40;
        for _ in 0..trials {
            let (model, data) = precession_data(400, 0.8, 10.0, &mut rng);
            let star = mode(&model, &data, 0.5, 1.2);
            let cv = build_control_variates(&model, &data, &[star]).unwrap();
            let s = SubsampleState::random(400, 50, 3, IndexSampling::WithReplacement, &mut rng).unwrap();
            let near = difference_log_estimator(&model, &data, &cv, &s, &[star + 0.01 * width]);
            let far_theta = if star + 0.5 * width < 2.0 {
                star + 0.5 * width
            } else {
                star - 0.5 * width
            };
            let far = difference_log_estimator(&model, &data, &cv, &s, &[far_theta]);
            if far.clamped || near.variance < far.variance {
                wins += 1;
            }
        }
        assert!(wins as f64 >= 0.95 * trials as f64, "{wins}");
    }

    #[test]
    fn corrected_estimator_cases() {
        assert_eq!(corrected_likelihood_estimator(-2.0, 0.0), (-2.0f64).exp());
        assert_eq!(corrected_likelihood_estimator(f64::NEG_INFINITY, 1.0), 0.0);
        // log-normal mean identity
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mu, var): (f64, f64) = (-1.0, 0.5);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let l = corrected_likelihood_estimator(mu + var.sqrt() * z, var);
            sum += l;
            sq += l * l;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - mu.exp()).abs() < 4.0 * se);
    }

    #[test]
    fn block_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = SubsampleState::random(400, 50, 3, IndexSampling::WithReplacement, &mut rng).unwrap();
        let sizes: Vec<usize> = (0..3).map(|b| s.block_range(b).len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 50);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for b in 0..3 {
            let r = s.refreshed(b, &mut rng);
            let changed = r.indices().iter().zip(s.indices()).filter(|(a, b)| a != b).count();
            assert!(changed <= 17);
            let kept = 50 - s.block_range(b).len();
            assert!(kept as f64 >= 2.0 / 3.0 * 50.0 - 1.0);
            for j in 0..50 {
                if !s.block_range(b).contains(&j) {
                    assert_eq!(r.indices()[j], s.indices()[j]);
                }
            }
        }
    }

    #[test]
    fn without_replacement_refresh_keeps_indices_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = SubsampleState::random(30, 20, 4, IndexSampling::WithoutReplacement, &mut rng).unwrap();
        for b in 0..40 {
            s = s.refreshed(b % 4, &mut rng);
            let mut v = s.indices().to_vec();
            v.sort_unstable();
            v.dedup();
            assert_eq!(v.len(), 20);
        }
    }

    #[test]
    fn index_moves_always_accepted_with_perfect_variates() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (model, data) = precession_data(20, 0.8, 10.0, &mut rng);
        let star = [0.8];
        let cv = build_control_variates(&model, &data, &star).unwrap();
        let ctx = EstimatorContext {
            model: &model,
            data: &data,
            cv: &cv,
        };
        let mut s = SubsampleState::random(20, 9, 3, IndexSampling::WithReplacement, &mut rng).unwrap();
        let mut est = ctx.estimate(&s, &star);
        let mut counts = vec![0u64; 20];
        let steps = 100_000;
        for k in 0..steps {
            assert_eq!(s.next_block(), k % 3);
            let out = block_pm_index_step(&s, &est, &star, &ctx, 1.0, &mut rng);
            assert!(out.accepted);
            s = out.state;
            est = out.estimate;
            // a full sweep renews every index, so sweep-end states are independent
            if k % 3 == 2 {
                for &i in s.indices() {
                    counts[i] += 1;
                }
            }
        }
        let total: u64 = counts.iter().sum();
        let expect = total as f64 / 20.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        let p = 1.0 - ChiSquared::new(19.0).unwrap().cdf(chi2);
        assert!(p > 0.001, "p = {p}");
    }

    #[test]
    fn identical_estimate_is_accepted() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (model, data) = precession_data(30, 0.8, 10.0, &mut rng);
        let cv = build_control_variates(&model, &data, &[0.8]).unwrap();
        let ctx = EstimatorContext {
            model: &model,
            data: &data,
            cv: &cv,
        };
        // exact cover: a refreshed block can only reproduce itself
        let s = SubsampleState::exact_cover(30, 3).unwrap();
        let est = ctx.estimate(&s, &[0.83]);
        let out = block_pm_index_step(&s, &est, &[0.83], &ctx, 1.0, &mut rng);
        assert!(out.accepted);
        assert_eq!(out.state.indices(), s.indices());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (model, data) = precession_data(200, 0.8, 20.0, &mut rng);
        let cv = build_control_variates(&model, &data, &[0.8]).unwrap();
        let ctx = EstimatorContext {
            model: &model,
            data: &data,
            cv: &cv,
        };
        let s = SubsampleState::random(200, 25, 3, IndexSampling::WithReplacement, &mut rng).unwrap();
        let t = ctx.target(&s, 0.7);
        for w in [0.78, 0.8, 0.805, 0.82] {
            let h = 1e-6;
            let fd = (t.log_density(&[w + h]).unwrap() - t.log_density(&[w - h]).unwrap()) / (2.0 * h);
            let g = t.grad_log_density(&[w]).unwrap()[0];
            assert!((g - fd).abs() < 1e-4 * fd.abs().max(1.0), "{g} vs {fd}");
        }
    }

    #[test]
    fn ecs_with_exact_cover_is_plain_hmc() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (model, data) = precession_data(60, 0.8, 10.0, &mut rng);
        let cv = build_control_variates(&model, &data, &[0.8]).unwrap();
        let ctx = EstimatorContext {
            model: &model,
            data: &data,
            cv: &cv,
        };
        let full = TemperedPosterior::new(&model, &data, 1.0);
        let kin = Kinetic::from_covariance(&DMatrix::from_element(1, 1, 1e-3)).unwrap();
        let mut s = SubsampleState::exact_cover(60, 3).unwrap();
        let mut x = ParameterPoint(vec![0.8]);
        let mut est = ctx.estimate(&s, &x);
        let mut y = x.clone();
        let mut ld = full.log_density(&y).unwrap();
        let mut rng_a = ChaCha8Rng::seed_from_u64(99);
        let mut rng_b = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let o = ecs_gibbs_step(&x, &s, &est, &ctx, 1.0, &kin, 0.1, 8, &mut rng_a);
            let h = hmc_step(&y, ld, &full, &kin, 0.1, 8, &mut rng_b);
            assert_eq!(o.hmc.transition.accepted, h.transition.accepted);
            assert!((o.theta[0] - h.transition.theta[0]).abs() < 1e-9);
            x = o.theta;
            s = o.state;
            est = o.estimate;
            y = h.transition.theta;
            ld = h.transition.log_density;
        }
    }

    /// Batch-means standard error of a correlated chain.
    fn batch_se(xs: &[f64], batches: usize) -> f64 {
        let b = xs.len() / batches;
        let means: Vec<f64> = (0..batches)
            .map(|i| xs[i * b..(i + 1) * b].iter().sum::<f64>() / b as f64)
            .collect();
        let mu = means.iter().sum::<f64>() / batches as f64;
        let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (batches - 1) as f64;
        (var / batches as f64).sqrt()
    }

    #[test]
    fn ecs_chain_matches_quadrature_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (model, data) = precession_data(50, 0.8, 10.0, &mut rng);
        let t = TemperedPosterior::new(&model, &data, 1.0);
        let grid: Vec<f64> = (1..200_000).map(|i| 2.0 * i as f64 / 200_000.0).collect();
        let lw: Vec<f64> = grid
            .iter()
            .map(|w| t.log_density(&[*w]).unwrap_or(f64::NEG_INFINITY))
            .collect();
        let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lw.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        let mean: f64 = grid.iter().zip(&w).map(|(g, w)| g * w).sum::<f64>() / z;
        let var: f64 = grid.iter().zip(&w).map(|(g, w)| (g - mean).powi(2) * w).sum::<f64>() / z;
        let cv = build_control_variates(&model, &data, &[mean]).unwrap();
        let ctx = EstimatorContext {
            model: &model,
            data: &data,
            cv: &cv,
        };
        let kin = Kinetic::from_covariance(&DMatrix::from_element(1, 1, var)).unwrap();
        let mut s = SubsampleState::random(50, 10, 3, IndexSampling::WithReplacement, &mut rng).unwrap();
        let mut x = ParameterPoint(vec![mean]);
        let mut est = ctx.estimate(&s, &x);
        let mut xs = Vec::new();
        let mut acc = 0.0;
        let n = 40_000;
        for i in 0..n {
            let o = ecs_gibbs_step(&x, &s, &est, &ctx, 1.0, &kin, 0.3, 4, &mut rng);
            acc += o.hmc.transition.accept_prob;
            x = o.theta;
            s = o.state;
            est = o.estimate;
            if i >= 1000 {
                xs.push(x[0]);
            }
        }
        assert!(acc / n as f64 > 0.6, "acceptance {}", acc / n as f64);
        let chain_mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let se = batch_se(&xs, 50);
        assert!(
            (chain_mean - mean).abs() < 3.0 * se.max(1e-12),
            "{chain_mean} vs {mean} (se {se})"
        );
    }
}
