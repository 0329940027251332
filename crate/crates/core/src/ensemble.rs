//! Weighted particle clouds.
//!
//! Weights are kept normalized. Reweighting happens in log space and returns
//! the log of the pre-normalization weight sum, which the SMC drivers
//! accumulate into the evidence estimate.

use std::collections::HashSet;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Datum, DomainBox, ModelSpec, ParameterPoint};

/// Tolerance used when checking that weights sum to one.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Ridge added to covariances before they are inverted or factorized.
pub const COVARIANCE_RIDGE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble {
    particles: Vec<ParameterPoint>,
    weights: Vec<f64>,
}

/// Weighted first and second moments of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub std: Vec<f64>,
}

impl Moments {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Diagonal moments from a mean and per-dimension standard deviations.
    pub fn diagonal(mean: Vec<f64>, std: Vec<f64>) -> Self {
        let covariance =
            DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(std.len(), std.iter().map(|s| s * s)));
        Self { mean, covariance, std }
    }

    /// Covariance with [`COVARIANCE_RIDGE`] added to the diagonal.
    pub fn regularized_covariance(&self) -> DMatrix<f64> {
        let n = self.dim();
        &self.covariance + DMatrix::identity(n, n) * COVARIANCE_RIDGE
    }

    /// Largest marginal standard deviation.
    pub fn max_std(&self) -> f64 {
        self.std.iter().cloned().fold(0.0, f64::max)
    }
}

impl WeightedEnsemble {
    /// Equal weights.
    pub fn uniform(particles: Vec<ParameterPoint>) -> Self {
        let n = particles.len();
        Self {
            particles,
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn new(particles: Vec<ParameterPoint>, weights: Vec<f64>) -> Result<Self> {
        if particles.len() != weights.len() || particles.is_empty() {
            return Err(Error::Config(format!(
                "{} particles but {} weights",
                particles.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("weights must be finite and non-negative".into()));
        }
        Ok(Self { particles, weights })
    }

    /// `m` independent uniform draws from the domain box.
    pub fn from_prior<R: Rng + ?Sized>(domain: &DomainBox, m: usize, rng: &mut R) -> Self {
        Self::uniform((0..m).map(|_| domain.sample(rng)).collect())
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles.first().map_or(0, |p| p.dim())
    }

    pub fn particles(&self) -> &[ParameterPoint] {
        &self.particles
    }

    pub fn particles_mut(&mut self) -> &mut [ParameterPoint] {
        &mut self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_parts(self) -> (Vec<ParameterPoint>, Vec<f64>) {
        (self.particles, self.weights)
    }

    /// Rescales the weights to sum to one; returns the old sum.
    pub fn normalize(&mut self) -> Result<f64> {
        let total: f64 = self.weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateEnsemble);
        }
        self.weights.iter_mut().for_each(|w| *w /= total);
        Ok(total)
    }

    fn check_normalized(&self) -> Result<()> {
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Unnormalized(total));
        }
        Ok(())
    }

    /// Multiplies each weight by `exp(power * log_lik[i])` and renormalizes.
    ///
    /// `None` marks a zero-likelihood particle. Returns the log of the
    /// weight sum before normalization.
    pub fn reweight_log(&mut self, log_liks: &[Option<f64>], power: f64) -> Result<f64> {
        assert_eq!(log_liks.len(), self.len());
        let log_w: Vec<f64> = self
            .weights
            .iter()
            .zip(log_liks)
            .map(|(w, l)| match l {
                Some(l) if *w > 0.0 => w.ln() + power * l,
                _ => f64::NEG_INFINITY,
            })
            .collect();
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY || max.is_nan() {
            return Err(Error::DegenerateEnsemble);
        }
        let sum: f64 = log_w.iter().map(|l| (l - max).exp()).sum();
        let log_norm = max + sum.ln();
        for (w, l) in self.weights.iter_mut().zip(&log_w) {
            *w = (l - log_norm).exp();
        }
        Ok(log_norm)
    }

    /// Bayes update by one datum with likelihood raised to `power`.
    ///
    /// Returns the log normalizer `ln Σ w_i L(θ_i | d)^power`.
    pub fn reweight(&mut self, model: &ModelSpec, d: &Datum, power: f64) -> Result<f64> {
        if !(power > 0.0 && power <= 1.0) {
            return Err(Error::Config(format!("reweight power {power} outside (0, 1]")));
        }
        self.check_normalized()?;
        let lls: Vec<Option<f64>> = self
            .particles
            .par_iter()
            .map(|p| {
                let l = model.log_likelihood_unchecked(p, d);
                (!l.clamped).then_some(l.value)
            })
            .collect();
        self.reweight_log(&lls, power)
    }

    /// Effective sample size `1 / Σ w²`.
    pub fn ess(&self) -> Result<f64> {
        self.check_normalized()?;
        Ok(1.0 / self.weights.iter().map(|w| w * w).sum::<f64>())
    }

    /// Indices of `n` multinomial draws according to the weights.
    pub fn resample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        let dist = WeightedIndex::new(&self.weights).map_err(|_| Error::DegenerateEnsemble)?;
        Ok((0..n).map(|_| dist.sample(rng)).collect())
    }

    /// M draws with replacement; output weights are all 1/M.
    pub fn multinomial_resample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self> {
        self.check_normalized()?;
        let idx = self.resample_indices(self.len(), rng)?;
        Ok(Self::uniform(
            idx.into_iter().map(|i| self.particles[i].clone()).collect(),
        ))
    }

    pub fn moments(&self) -> Moments {
        let d = self.dim();
        let total: f64 = self.weights.iter().sum();
        // shifted by the first particle so identical clouds give exact moments
        let origin = self.particles[0].clone();
        let mut shift = vec![0.0; d];
        for (p, w) in self.particles.iter().zip(&self.weights) {
            for k in 0..d {
                shift[k] += w * (p[k] - origin[k]);
            }
        }
        let mean: Vec<f64> = (0..d).map(|k| origin[k] + shift[k] / total).collect();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for (p, w) in self.particles.iter().zip(&self.weights) {
            for i in 0..d {
                let di = p[i] - mean[i];
                for j in i..d {
                    cov[(i, j)] += w * di * (p[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / total;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let std = (0..d).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
        Moments {
            mean,
            covariance: cov,
            std,
        }
    }

    /// Fraction of occupied cells in a regular `bins^dim` grid over the domain.
    pub fn occupation_rate(&self, domain: &DomainBox, bins: usize) -> f64 {
        let bins = bins.max(1);
        let cells: HashSet<Vec<usize>> = self
            .particles
            .iter()
            .map(|p| {
                (0..domain.dim())
                    .map(|k| {
                        let u = (p[k] - domain.lower()[k]) / domain.width(k);
                        ((u * bins as f64).floor().max(0.0) as usize).min(bins - 1)
                    })
                    .collect()
            })
            .collect();
        cells.len() as f64 / (bins as f64).powi(domain.dim() as i32)
    }

    /// Writes a `w,theta_0..theta_{d-1}` snapshot.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| Error::Io {
            path: "<ensemble>".into(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["w".to_string()];
        header.extend((0..self.dim()).map(|k| format!("theta_{k}")));
        w.write_record(&header).map_err(io)?;
        for (p, wt) in self.particles.iter().zip(&self.weights) {
            let mut row = vec![wt.to_string()];
            row.extend(p.iter().map(|x| x.to_string()));
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<ensemble>".into(),
            message: e.to_string(),
        })
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut particles = Vec::new();
        let mut weights = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Dataset {
                line,
                message: e.to_string(),
            })?;
            let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::Dataset {
                line,
                message: e.to_string(),
            })?;
            if vals.len() < 2 {
                return Err(Error::Dataset {
                    line,
                    message: "expected a weight and at least one coordinate".into(),
                });
            }
            weights.push(vals[0]);
            particles.push(ParameterPoint(vals[1..].to_vec()));
        }
        Self::new(particles, weights)
    }

    /// Mode-assignment diagnostics against known posterior modes.
    pub fn mode_metrics(
        &self,
        modes: &[ParameterPoint],
        domain: &DomainBox,
        thresholds: &ModeThresholds,
    ) -> ModeMetrics {
        assert!(!modes.is_empty(), "mode_metrics needs at least one mode");
        let k = modes.len();
        let d = self.dim();
        let diameter = domain.diameter();
        let radius = thresholds.coverage_radius * diameter;
        let dist = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() };
        let total: f64 = self.weights.iter().sum();

        let mut weight = vec![0.0; k];
        let mut local = vec![0.0; k];
        let mut sum = vec![vec![0.0; d]; k];
        let mut sq_to_mode = vec![0.0; k];
        let mut avg_distance = 0.0;
        let mut assignment = Vec::with_capacity(self.len());
        for (p, w) in self.particles.iter().zip(&self.weights) {
            let w = w / total;
            let (j, dj) = modes
                .iter()
                .enumerate()
                .map(|(j, m)| (j, dist(p, m)))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            assignment.push(j);
            weight[j] += w;
            if dj <= radius {
                local[j] += w;
            }
            for ((s, x), c) in sum[j].iter_mut().zip(p.iter()).zip(modes[j].iter()) {
                *s += w * (x - c);
            }
            sq_to_mode[j] += w * dj * dj;
            avg_distance += w * dj;
        }
        let centroids: Vec<Vec<f64>> = (0..k)
            .map(|j| {
                if weight[j] > 0.0 {
                    sum[j]
                        .iter()
                        .zip(modes[j].iter())
                        .map(|(s, c)| c + s / weight[j])
                        .collect()
                } else {
                    modes[j].to_vec()
                }
            })
            .collect();
        let mut spread = vec![0.0; k];
        for ((p, w), &j) in self.particles.iter().zip(&self.weights).zip(&assignment) {
            let dc = dist(p, &centroids[j]);
            spread[j] += w / total * dc * dc;
        }
        let per_mode: Vec<ModeStat> = (0..k)
            .map(|j| {
                let (std, rms) = if weight[j] > 0.0 {
                    ((spread[j] / weight[j]).sqrt(), (sq_to_mode[j] / weight[j]).sqrt())
                } else {
                    (0.0, 0.0)
                };
                ModeStat {
                    weight: weight[j],
                    local_weight: local[j],
                    centroid_distance: dist(&centroids[j], &modes[j]),
                    std,
                    rms_distance: rms,
                }
            })
            .collect();
        let std: f64 = per_mode.iter().map(|m| m.weight * m.std).sum();
        let real_error: f64 = per_mode.iter().map(|m| m.weight * m.rms_distance).sum();
        let target = 1.0 / k as f64;
        let min_w = target / thresholds.weight_factor;
        let max_w = target * thresholds.weight_factor;
        let covered_modes = per_mode.iter().filter(|m| m.local_weight >= min_w).count();
        let accuracy_ok = avg_distance < thresholds.distance * diameter;
        let precision_ok = per_mode
            .iter()
            .filter(|m| m.weight > 0.0)
            .all(|m| m.std < thresholds.std * diameter);
        let tiny = 1e-12 * diameter;
        let correctness_ok = if real_error <= tiny {
            std <= tiny
        } else {
            (std - real_error).abs() < thresholds.error_relative * real_error
        };
        let coverage_ok = covered_modes == k && per_mode.iter().all(|m| m.weight <= max_w);
        ModeMetrics {
            per_mode,
            avg_distance,
            std,
            real_error,
            covered_modes,
            accuracy_ok,
            precision_ok,
            correctness_ok,
            coverage_ok,
            success: accuracy_ok && precision_ok && correctness_ok && coverage_ok,
        }
    }
}

/// Pass/fail thresholds for [`WeightedEnsemble::mode_metrics`], as fractions
/// of the domain diameter unless noted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeThresholds {
    /// Mean particle distance to its assigned mode.
    pub distance: f64,
    /// Per-mode standard deviation.
    pub std: f64,
    /// Relative gap between the reported spread and the actual RMS error.
    pub error_relative: f64,
    /// Per-mode weight must be within this factor of 1/(number of modes).
    pub weight_factor: f64,
    /// A mode counts as covered only by weight lying within this radius.
    pub coverage_radius: f64,
}

impl Default for ModeThresholds {
    fn default() -> Self {
        Self {
            distance: 0.05,
            std: 0.05,
            error_relative: 0.5,
            weight_factor: 3.0,
            coverage_radius: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeStat {
    /// Weight of the particles assigned to this mode.
    pub weight: f64,
    /// Assigned weight lying within the coverage radius.
    pub local_weight: f64,
    pub centroid_distance: f64,
    /// Spread about the weighted centroid (root of the covariance trace).
    pub std: f64,
    /// Root-mean-square distance to the mode itself.
    pub rms_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeMetrics {
    pub per_mode: Vec<ModeStat>,
    pub avg_distance: f64,
    /// Weight-averaged per-mode standard deviation.
    pub std: f64,
    /// Weight-averaged RMS distance to the true modes.
    pub real_error: f64,
    pub covered_modes: usize,
    pub accuracy_ok: bool,
    pub precision_ok: bool,
    pub correctness_ok: bool,
    pub coverage_ok: bool,
    pub success: bool,
}

impl ModeMetrics {
    pub fn covered_fraction(&self) -> f64 {
        self.covered_modes as f64 / self.per_mode.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Controls;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn pts(xs: &[f64]) -> Vec<ParameterPoint> {
        xs.iter().map(|x| ParameterPoint(vec![*x])).collect()
    }

    #[test]
    fn constant_likelihood_leaves_weights() {
        let mut e = WeightedEnsemble::new(pts(&[0.1, 0.2, 0.3]), vec![0.2, 0.3, 0.5]).unwrap();
        let c: f64 = 0.37;
        let log_c = e.reweight_log(&[Some(c.ln()); 3], 1.0).unwrap();
        assert!((log_c.exp() - c).abs() < 1e-15);
        for (a, b) in e.weights().iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_likelihood_particle_loses_weight() {
        let m = ModelSpec::precession(0.0, 10.0).unwrap();
        // sin²(0.5π) = 1, sin²(π) ≈ 0
        let mut e = WeightedEnsemble::uniform(pts(&[0.5, 1.0]));
        let d = Datum::new(Controls::time(std::f64::consts::PI), 1).unwrap();
        let log_c = e.reweight(&m, &d, 1.0).unwrap();
        assert!((log_c.exp() - 0.5).abs() < 1e-12);
        assert_eq!(e.weights(), &[1.0, 0.0]);
    }

    #[test]
    fn all_zero_is_degenerate() {
        let mut e = WeightedEnsemble::uniform(pts(&[0.1, 0.2]));
        assert_eq!(e.reweight_log(&[None, None], 1.0), Err(Error::DegenerateEnsemble));
    }

    #[test]
    fn half_powers_compose() {
        let m = ModelSpec::precession(0.0, 10.0).unwrap();
        let d = Datum::new(Controls::time(1.3), 1).unwrap();
        let cloud = pts(&[0.1, 0.7, 1.9, 3.3, 4.2]);
        let mut once = WeightedEnsemble::uniform(cloud.clone());
        once.reweight(&m, &d, 1.0).unwrap();
        let mut twice = WeightedEnsemble::uniform(cloud);
        twice.reweight(&m, &d, 0.5).unwrap();
        twice.reweight(&m, &d, 0.5).unwrap();
        for (a, b) in once.weights().iter().zip(twice.weights()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ess_values() {
        let e = WeightedEnsemble::uniform(pts(&[1.0, 2.0, 3.0, 4.0]));
        assert!((e.ess().unwrap() - 4.0).abs() < 1e-12);
        let e = WeightedEnsemble::new(pts(&[1.0, 2.0, 3.0]), vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(e.ess().unwrap(), 1.0);
        let e = WeightedEnsemble::new(pts(&[1.0, 2.0, 3.0]), vec![0.5, 0.3, 0.2]).unwrap();
        // 1/(0.25 + 0.09 + 0.04) = 1/0.38
        assert!((e.ess().unwrap() - 2.631_578_947_368_421).abs() < 1e-12);
        let bad = WeightedEnsemble::new(pts(&[1.0, 2.0]), vec![0.5, 0.7]).unwrap();
        assert!(matches!(bad.ess(), Err(Error::Unnormalized(_))));
    }

    #[test]
    fn resample_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = WeightedEnsemble::new(pts(&[1.0, 2.0, 3.0]), vec![1.0, 0.0, 0.0]).unwrap();
        let r = e.multinomial_resample(&mut rng).unwrap();
        assert!(r.particles().iter().all(|p| p[0] == 1.0));
        assert!(r.weights().iter().all(|w| (*w - 1.0 / 3.0).abs() < 1e-15));
        let single = WeightedEnsemble::uniform(pts(&[7.0]));
        let r = single.multinomial_resample(&mut rng).unwrap();
        assert_eq!(r.particles()[0][0], 7.0);
        assert_eq!(r.weights(), &[1.0]);
    }

    #[test]
    fn resample_counts_are_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = WeightedEnsemble::new(pts(&[0.0, 1.0]), vec![0.7, 0.3]).unwrap();
        let idx = e.resample_indices(100_000, &mut rng).unwrap();
        let zeros = idx.iter().filter(|&&i| i == 0).count() as f64;
        assert!((zeros - 70_000.0).abs() < 3.0 * (100_000.0f64 * 0.21).sqrt());
    }

    #[test]
    fn resampling_preserves_mean_in_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let ws: Vec<f64> = (0..50).map(|i| 1.0 + (i % 7) as f64).collect();
        let mut e = WeightedEnsemble::new(pts(&xs), ws).unwrap();
        e.normalize().unwrap();
        let mu = e.moments().mean[0];
        let var = e.moments().covariance[(0, 0)];
        let reps = 1000;
        let grand: f64 = (0..reps)
            .map(|_| e.multinomial_resample(&mut rng).unwrap().moments().mean[0])
            .sum::<f64>()
            / reps as f64;
        // each resample mean has variance var/M
        let se = (var / 50.0 / reps as f64).sqrt();
        assert!((grand - mu).abs() < 4.0 * se);
    }

    #[test]
    fn moments_small_cases() {
        let e = WeightedEnsemble::uniform(pts(&[1.0, 3.0]));
        let m = e.moments();
        assert!((m.mean[0] - 2.0).abs() < 1e-15);
        assert!((m.covariance[(0, 0)] - 1.0).abs() < 1e-15);
        let e = WeightedEnsemble::uniform(pts(&[2.5; 10]));
        assert_eq!(e.moments().covariance[(0, 0)], 0.0);
    }

    #[test]
    fn moments_of_normal_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xs: Vec<f64> = (0..1_000_000).map(|_| rng.sample(StandardNormal)).collect();
        let m = WeightedEnsemble::uniform(pts(&xs)).moments();
        assert!(m.mean[0].abs() < 0.005);
        assert!((m.covariance[(0, 0)] - 1.0).abs() < 0.01);
    }

    #[test]
    fn occupation_rate_cases() {
        let dom = DomainBox::cube(2, 0.0, 1.0).unwrap();
        let e = WeightedEnsemble::uniform(vec![ParameterPoint(vec![0.51, 0.52]); 30]);
        assert!((e.occupation_rate(&dom, 10) - 0.01).abs() < 1e-15);
        let grid: Vec<ParameterPoint> = (0..10)
            .flat_map(|i| (0..10).map(move |j| ParameterPoint(vec![(i as f64 + 0.5) / 10.0, (j as f64 + 0.5) / 10.0])))
            .collect();
        assert_eq!(WeightedEnsemble::uniform(grid).occupation_rate(&dom, 10), 1.0);
        // upper boundary belongs to the last cell
        let e = WeightedEnsemble::uniform(vec![ParameterPoint(vec![1.0, 1.0])]);
        assert!((e.occupation_rate(&dom, 10) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn uniform_cloud_occupies_every_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dom = DomainBox::cube(1, 0.0, 1.0).unwrap();
        let e = WeightedEnsemble::from_prior(&dom, 10_000, &mut rng);
        assert_eq!(e.occupation_rate(&dom, 10), 1.0);
    }

    #[test]
    fn mode_metrics_exact_modes() {
        let dom = DomainBox::cube(2, 0.0, 1.0).unwrap();
        let modes = vec![ParameterPoint(vec![0.3, 0.7]), ParameterPoint(vec![0.7, 0.3])];
        let mut cloud = vec![modes[0].clone(); 10];
        cloud.extend(vec![modes[1].clone(); 10]);
        let mm = WeightedEnsemble::uniform(cloud).mode_metrics(&modes, &dom, &ModeThresholds::default());
        assert_eq!(mm.avg_distance, 0.0);
        assert!(mm.success, "{mm:?}");
        let one = WeightedEnsemble::uniform(vec![modes[0].clone(); 20]);
        let mm = one.mode_metrics(&modes, &dom, &ModeThresholds::default());
        assert!(!mm.coverage_ok && !mm.success);
        assert_eq!(mm.covered_modes, 1);
    }

    #[test]
    fn mode_metrics_gaussian_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dom = DomainBox::cube(2, 0.0, 1.0).unwrap();
        let modes = vec![ParameterPoint(vec![0.3, 0.7]), ParameterPoint(vec![0.7, 0.3])];
        let sigma = 0.01;
        let cloud: Vec<ParameterPoint> = (0..20_000)
            .map(|i| {
                let m = &modes[i % 2];
                ParameterPoint(
                    m.iter()
                        .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            })
            .collect();
        let mm = WeightedEnsemble::uniform(cloud).mode_metrics(&modes, &dom, &ModeThresholds::default());
        for m in &mm.per_mode {
            assert!((m.std - sigma * 2f64.sqrt()).abs() < 0.03 * sigma * 2f64.sqrt());
            assert!((m.weight - 0.5).abs() < 0.02);
        }
        assert!(mm.success);
    }

    #[test]
    fn snapshot_csv_round_trip() {
        let e = WeightedEnsemble::new(
            vec![ParameterPoint(vec![0.1, 2.5]), ParameterPoint(vec![-3.0, 1e-7])],
            vec![0.25, 0.75],
        )
        .unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("w,theta_0,theta_1\n"));
        assert_eq!(WeightedEnsemble::read_csv(&buf[..]).unwrap(), e);
    }

    proptest! {
        #[test]
        fn ess_bounded(ws in prop::collection::vec(0.0f64..10.0, 1..50)) {
            prop_assume!(ws.iter().sum::<f64>() > 1e-6);
            let n = ws.len();
            let mut e = WeightedEnsemble::new(pts(&vec![0.0; n]), ws).unwrap();
            e.normalize().unwrap();
            let ess = e.ess().unwrap();
            prop_assert!(ess >= 1.0 - 1e-9 && ess <= n as f64 + 1e-9);
            prop_assert!((e.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn reweight_powers_add(p in 0.05f64..0.5, q in 0.05f64..0.5, t in 0.1f64..20.0, one in any::<bool>()) {
            let m = ModelSpec::precession(0.0, 10.0).unwrap();
            let d = Datum::from_bool(Controls::time(t), one);
            let cloud = pts(&[0.3, 1.1, 2.7, 5.5, 8.9]);
            let mut a = WeightedEnsemble::uniform(cloud.clone());
            let mut b = WeightedEnsemble::uniform(cloud);
            if a.reweight(&m, &d, p).is_ok() && a.reweight(&m, &d, q).is_ok() {
                b.reweight(&m, &d, p + q).unwrap();
                for (x, y) in a.weights().iter().zip(b.weights()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn occupation_monotone(xs in prop::collection::vec(0.0f64..1.0, 1..40), extra in prop::collection::vec(0.0f64..1.0, 1..10)) {
            let dom = DomainBox::cube(1, 0.0, 1.0).unwrap();
            let before = WeightedEnsemble::uniform(pts(&xs)).occupation_rate(&dom, 20);
            let mut all = xs.clone();
            all.extend(extra);
            let after = WeightedEnsemble::uniform(pts(&all)).occupation_rate(&dom, 20);
            prop_assert!(after >= before);
        }
    }
}
