//! Independent reference computations used by the criteria.

use qbi::{Datum, ModelSpec};

/// Posterior summary from a dense uniform-prior grid.
#[derive(Debug, Clone, Copy)]
pub struct GridPosterior {
    pub mean: f64,
    pub std: f64,
    /// `∫ L(θ) π(θ) dθ` for the uniform prior π.
    pub evidence: f64,
}

/// Midpoint rule with `points` cells over the 1D domain of `model`.
pub fn grid_posterior(model: &ModelSpec, data: &[Datum], points: usize) -> GridPosterior {
    let lo = model.domain().lower()[0];
    let hi = model.domain().upper()[0];
    let h = (hi - lo) / points as f64;
    let log_l: Vec<(f64, f64)> = (0..points)
        .map(|i| {
            let x = lo + (i as f64 + 0.5) * h;
            let ll: f64 = data
                .iter()
                .map(|d| model.likelihood(&[x], d).unwrap().max(1e-300).ln())
                .sum();
            (x, ll)
        })
        .collect();
    let top = log_l.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for &(x, ll) in &log_l {
        let w = (ll - top).exp();
        z += w;
        s1 += w * x;
        s2 += w * x * x;
    }
    let mean = s1 / z;
    let var = (s2 / z - mean * mean).max(0.0);
    GridPosterior {
        mean,
        std: var.sqrt(),
        evidence: z / points as f64 * top.exp(),
    }
}

/// Two-sided sign test p-value for `wins` successes out of `n` untied pairs.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let k = wins.min(n - wins);
    let mut tail = 0.0;
    let mut c = 1.0f64;
    for i in 0..=k {
        if i > 0 {
            c *= (n - i + 1) as f64 / i as f64;
        }
        tail += c;
    }
    (2.0 * tail / 2f64.powi(n as i32)).min(1.0)
}
