//! The acceptance criteria. Each function runs at full size and returns a
//! verdict; `run` dispatches by number.

use std::time::Instant;

use nalgebra::DMatrix;
use qbi::design::HeuristicKind;
use qbi::harness::{median, quartiles, run_experiment, ExperimentConfig, Method, Mode, ModeSummary, RunReport, Source};
use qbi::kernels::{leapfrog, Kinetic, LogTarget, TemperedPosterior};
use qbi::rng::{run_seed, seeded};
use qbi::smc::{sir_run, KernelChoice, OrderPolicy, SirConfig};
use qbi::subsampling::{build_control_variates, difference_log_estimator, SubsampleState};
use qbi::{Controls, Datum, ModelKind, ModelSpec, Result, WeightedEnsemble};
use rand::Rng;

use crate::oracle::{grid_posterior, sign_test_p};
use crate::Verdict;

pub const NAMES: [&str; 11] = [
    "quadrature oracle equivalence",
    "liu-west vs rwm under multimodality",
    "tle vs sir mode coverage",
    "subsampled tle uncertainty inflation",
    "sghmc friction effect",
    "hybrid kernel statistics on phase estimation",
    "occupation heuristic vs random times",
    "adaptive vs offline hahn-ramsey",
    "sigma-inverse scaling exponent",
    "dataset ordering effect on t2",
    "numerical kernel properties",
];

/// Wall-clock budget of each criterion in seconds.
pub const BUDGETS: [u64; 11] = [60, 300, 1800, 600, 600, 300, 900, 300, 300, 600, 60];

pub fn run(id: usize) -> Verdict {
    let start = Instant::now();
    let out: Result<(bool, String)> = match id {
        1 => quadrature_equivalence(),
        2 => liu_west_vs_rwm(),
        3 => tempering_coverage(),
        4 => subsampling_inflation(),
        5 => friction_effect(),
        6 => hybrid_statistics(),
        7 => occupation_vs_random(),
        8 => adaptive_vs_offline(),
        9 => scaling_exponent(),
        10 => ordering_effect(),
        11 => kernel_properties(),
        _ => panic!("no criterion {id}"),
    };
    let (mut pass, mut detail) = out.unwrap_or_else(|e| (false, format!("error: {e}")));
    let elapsed = start.elapsed();
    if elapsed.as_secs_f64() > BUDGETS[id - 1] as f64 {
        pass = false;
        detail.push_str(&format!("; over the {} s budget", BUDGETS[id - 1]));
    }
    Verdict {
        id,
        name: NAMES[id - 1],
        pass,
        detail,
        elapsed,
    }
}

fn simulate<R: Rng>(model: &ModelSpec, truth: &[f64], times: &[f64], rng: &mut R) -> Result<Vec<Datum>> {
    times
        .iter()
        .map(|&t| model.simulate_outcome(truth, Controls::time(t), rng))
        .collect()
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

// ---------------------------------------------------------------------------
// 1

const REPLICATES: usize = 10;

fn quadrature_case(name: &str, model: &ModelSpec, data: &[Datum], seed: u64) -> Result<(bool, String)> {
    let grid = grid_posterior(model, data, 1_000_000);
    let cfg = SirConfig {
        particles: 10_000,
        ..SirConfig::default()
    };
    let mut means = Vec::new();
    let mut stds = Vec::new();
    let mut evs = Vec::new();
    for r in 0..REPLICATES {
        let mut rng = seeded(run_seed(seed, r as u64));
        let (e, trace) = sir_run(model, data, &cfg, &mut rng)?;
        let m = e.moments();
        means.push(m.mean[0]);
        stds.push(m.std[0]);
        evs.push(trace.log_evidence().exp());
    }
    let k = (REPLICATES as f64).sqrt();
    let (mm, mse) = mean_sd(&means);
    let (sm, sse) = mean_sd(&stds);
    let (em, _) = mean_sd(&evs);
    let mean_ok = (mm - grid.mean).abs() <= 3.0 * mse / k;
    let std_ok = (sm - grid.std).abs() <= 3.0 * sse / k;
    let ev_ok = evs.iter().all(|e| (e / grid.evidence - 1.0).abs() < 0.1);
    Ok((
        mean_ok && std_ok && ev_ok,
        format!(
            "{name}: mean {mm:.5} vs {:.5} (se {:.1e}), std {sm:.5} vs {:.5} (se {:.1e}), evidence {em:.4e} vs {:.4e}",
            grid.mean,
            mse / k,
            grid.std,
            sse / k,
            grid.evidence
        ),
    ))
}

fn quadrature_equivalence() -> Result<(bool, String)> {
    let mut rng = seeded(11);
    let prec = ModelSpec::precession(0.0, 1.0)?;
    let times: Vec<f64> = (1..=20).map(|k| 0.5 * k as f64).collect();
    let prec_data = simulate(&prec, &[0.5], &times, &mut rng)?;
    let t1 = ModelSpec::t1_decay(1.0, 100.0)?;
    let times: Vec<f64> = (1..=20).map(|k| 5.0 * k as f64).collect();
    let t1_data = simulate(&t1, &[62.45], &times, &mut rng)?;
    let a = quadrature_case("precession", &prec, &prec_data, 101)?;
    let b = quadrature_case("t1", &t1, &t1_data, 102)?;
    Ok((a.0 && b.0, format!("{}; {}", a.1, b.1)))
}

// ---------------------------------------------------------------------------
// 2

fn multimodal_2d(kernel: KernelChoice) -> Result<ExperimentConfig> {
    let model = ModelSpec::multi_cosine(2, 0.0, 1.0)?;
    let mut cfg = ExperimentConfig::new(model, Source::Truth(vec![0.25, 0.75]));
    cfg.shots = 100;
    cfg.runs = 50;
    cfg.seed = 202;
    cfg.mode_metrics = true;
    cfg.heuristic.kind = HeuristicKind::Random;
    cfg.heuristic.t_max = Some(50.0);
    cfg.sampler.particles = 225;
    cfg.sampler.kernel = kernel;
    cfg.sampler.moves = 20;
    cfg.sampler.ordering = OrderPolicy::TimeAscending;
    cfg.sampler.liu_west.a = 0.98;
    Ok(cfg)
}

fn liu_west_vs_rwm() -> Result<(bool, String)> {
    let rwm = run_experiment(&multimodal_2d(KernelChoice::Rwm)?)?;
    let lw = run_experiment(&multimodal_2d(KernelChoice::LiuWest)?)?;
    let modes = |r: &RunReport| -> Vec<ModeSummary> { r.runs.iter().filter_map(|s| s.modes.clone()).collect() };
    let (mr, ml) = (modes(&rwm), modes(&lw));
    let success = mr.iter().filter(|m| m.success).count();
    let both = ml.iter().filter(|m| m.covered_fraction >= 1.0).count();
    let cov_r = mr.iter().filter(|m| m.covered_fraction >= 1.0).count();
    let n = rwm.runs.len();
    Ok((
        mr.len() == n && success * 10 >= 7 * n && both * 5 <= n,
        format!(
            "rwm success {success}/{n} (both modes covered {cov_r}, failed runs {}); liu-west covers both modes {both}/{} (failed runs {})",
            rwm.failed(), lw.runs.len(), lw.failed()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 3

fn multimodal_4d(method: Method) -> Result<ExperimentConfig> {
    let model = ModelSpec::multi_cosine(4, 0.0, 1.0)?;
    let mut cfg = ExperimentConfig::new(model, Source::Truth(vec![0.2, 0.4, 0.6, 0.8]));
    cfg.method = method;
    cfg.stages = 5;
    cfg.shots = 250;
    cfg.runs = 10;
    cfg.seed = 303;
    cfg.mode_metrics = true;
    cfg.heuristic.kind = HeuristicKind::Random;
    cfg.heuristic.t_max = Some(100.0);
    cfg.sampler.particles = 12usize.pow(4);
    cfg.sampler.kernel = KernelChoice::Hmc;
    Ok(cfg)
}

fn tempering_coverage() -> Result<(bool, String)> {
    let sir = run_experiment(&multimodal_4d(Method::Sir)?)?;
    let tle = run_experiment(&multimodal_4d(Method::Tle)?)?;
    let cov = |r: &RunReport| -> Vec<Option<f64>> {
        r.runs
            .iter()
            .map(|s| s.modes.as_ref().map(|m| m.covered_fraction))
            .collect()
    };
    let (a, b) = (cov(&tle), cov(&sir));
    let pairs: Vec<(f64, f64)> = a.iter().zip(&b).filter_map(|(x, y)| Some(((*x)?, (*y)?))).collect();
    let wins = pairs.iter().filter(|(x, y)| x > y).count();
    let mt = median(&pairs.iter().map(|q| q.0).collect::<Vec<_>>());
    let ms = median(&pairs.iter().map(|q| q.1).collect::<Vec<_>>());
    Ok((
        pairs.len() == sir.runs.len() && wins >= 8,
        format!(
            "tle covers more modes in {wins}/{} paired seeds; median covered fraction tle {mt:.3} vs sir {ms:.3}",
            pairs.len()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 4

fn tempered_precession(kernel: KernelChoice) -> Result<ExperimentConfig> {
    let model = ModelSpec::precession(0.7, 0.9)?;
    let mut cfg = ExperimentConfig::new(model, Source::Truth(vec![0.8]));
    cfg.method = Method::Tle;
    cfg.stages = 10;
    cfg.shots = 400;
    cfg.runs = 20;
    cfg.seed = 404;
    cfg.heuristic.kind = HeuristicKind::Random;
    cfg.heuristic.t_max = Some(100.0);
    cfg.sampler.particles = 1000;
    cfg.sampler.kernel = kernel;
    cfg.sampler.subsample.m = 50;
    cfg.sampler.subsample.blocks = 3;
    Ok(cfg)
}

fn subsampling_inflation() -> Result<(bool, String)> {
    let full = run_experiment(&tempered_precession(KernelChoice::Hmc)?)?;
    let sub = run_experiment(&tempered_precession(KernelChoice::Ecs)?)?;
    let ratios: Vec<f64> = full
        .runs
        .iter()
        .zip(&sub.runs)
        .filter(|(a, b)| a.ok() && b.ok())
        .map(|(a, b)| b.final_std[0] / a.final_std[0])
        .collect();
    let r = median(&ratios);
    let sd = |x: &RunReport| median(&x.successful().map(|s| s.final_std[0]).collect::<Vec<_>>());
    let err = |x: &RunReport| {
        median(
            &x.successful()
                .map(|s| (s.final_mean[0] - 0.8).abs())
                .collect::<Vec<_>>(),
        )
    };
    Ok((
        ratios.len() == 20 && r <= 1.2,
        format!(
            "median std ratio {r:.3} over {} seeds; median std subsampled {:.2e} vs full {:.2e}; median |error| {:.1e} vs {:.1e}",
            ratios.len(),
            sd(&sub),
            sd(&full),
            err(&sub),
            err(&full)
        ),
    ))
}

// ---------------------------------------------------------------------------
// 5

fn sghmc_2d(friction: Option<f64>) -> Result<ExperimentConfig> {
    let model = ModelSpec::multi_cosine(2, 0.0, 1.0)?;
    let mut cfg = ExperimentConfig::new(model, Source::Truth(vec![0.25, 0.75]));
    cfg.shots = 100;
    cfg.runs = 20;
    cfg.seed = 505;
    cfg.mode_metrics = true;
    cfg.heuristic.kind = HeuristicKind::Random;
    cfg.heuristic.t_max = Some(20.0);
    cfg.sampler.particles = 225;
    cfg.sampler.kernel = KernelChoice::Sghmc;
    cfg.sampler.sghmc.friction = friction;
    Ok(cfg)
}

fn friction_effect() -> Result<(bool, String)> {
    let with = run_experiment(&sghmc_2d(Some(1.0))?)?;
    let without = run_experiment(&sghmc_2d(None)?)?;
    let dist = |r: &RunReport| -> Vec<Option<f64>> {
        r.runs
            .iter()
            .map(|s| s.modes.as_ref().map(|m| m.avg_distance))
            .collect()
    };
    let (a, b) = (dist(&with), dist(&without));
    let pairs: Vec<(f64, f64)> = a.iter().zip(&b).filter_map(|(x, y)| Some(((*x)?, (*y)?))).collect();
    let wins = pairs.iter().filter(|(x, y)| x < y).count();
    let p = sign_test_p(wins, pairs.len());
    let mx = median(&pairs.iter().map(|q| q.0).collect::<Vec<_>>());
    let my = median(&pairs.iter().map(|q| q.1).collect::<Vec<_>>());
    Ok((
        pairs.len() == 20 && p < 0.05,
        format!(
            "friction closer in {wins}/{} pairs (sign test p = {p:.4}); median distance {mx:.4} vs {my:.4}",
            pairs.len()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 6

const HYBRID_PARTICLES: usize = 1000;

fn hybrid_statistics() -> Result<(bool, String)> {
    let mut cfg = ExperimentConfig::new(ModelSpec::ipe()?, Source::Truth(vec![0.5]));
    cfg.shots = 100;
    cfg.runs = 20;
    cfg.seed = 606;
    cfg.sampler.kernel = KernelChoice::Hybrid;
    cfg.sampler.particles = HYBRID_PARTICLES;
    let r = run_experiment(&cfg)?;
    let ok: Vec<usize> = (0..r.runs.len()).filter(|&i| r.runs[i].ok()).collect();
    let frac: Vec<f64> = ok.iter().filter_map(|&i| r.traces[i].stats.hmc_fraction()).collect();
    let acc: Vec<f64> = ok.iter().filter_map(|&i| r.traces[i].stats.hmc_acceptance()).collect();
    let close = ok
        .iter()
        .filter(|&&i| (r.runs[i].final_mean[0] - 0.5).abs() < 0.05)
        .count();
    let (f, a) = (median(&frac), median(&acc));
    let share = close as f64 / r.runs.len() as f64;
    Ok((
        frac.len() == r.runs.len() && acc.len() == r.runs.len() && f < 0.15 && a > 0.9 && share >= 0.8,
        format!(
            "median HMC-only fraction {:.2}%, median HMC acceptance {a:.3}, |mean - 0.5| < 0.05 in {close}/{}",
            100.0 * f,
            r.runs.len()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 7

fn policy_2d(kind: HeuristicKind) -> Result<ExperimentConfig> {
    let model = ModelSpec::multi_cosine(2, 0.0, 1.0)?;
    let mut cfg = ExperimentConfig::new(model, Source::Truth(vec![0.25, 0.75]));
    cfg.shots = 100;
    cfg.runs = 100;
    cfg.seed = 707;
    cfg.mode_metrics = true;
    cfg.mode = Mode::Adaptive;
    cfg.heuristic.kind = kind;
    cfg.heuristic.t_max = (kind == HeuristicKind::Random).then_some(100.0);
    cfg.sampler.particles = 2000;
    cfg.sampler.moves = 5;
    Ok(cfg)
}

fn occupation_vs_random() -> Result<(bool, String)> {
    let occ = run_experiment(&policy_2d(HeuristicKind::Occupation)?)?;
    let rnd = run_experiment(&policy_2d(HeuristicKind::Random)?)?;
    let stats = |r: &RunReport| {
        let m: Vec<&ModeSummary> = r.runs.iter().filter_map(|s| s.modes.as_ref()).collect();
        let sd = median(&m.iter().map(|x| x.std).collect::<Vec<_>>());
        let ok = m.iter().filter(|x| x.success).count() as f64 / r.runs.len() as f64;
        (sd, ok)
    };
    let (so, ko) = stats(&occ);
    let (sr, kr) = stats(&rnd);
    Ok((
        occ.failed() == 0 && rnd.failed() == 0 && so <= sr && ko >= kr + 0.1,
        format!(
            "occupation: median std {so:.2e}, success {:.0}%; random: median std {sr:.2e}, success {:.0}%",
            100.0 * ko,
            100.0 * kr
        ),
    ))
}

// ---------------------------------------------------------------------------
// 8

fn hahn_ramsey(mode: Mode) -> Result<ExperimentConfig> {
    // echo-protected Ramsey: P(1) = cos²(δt/2), the one-axis multi-cosine model
    let model = ModelSpec::multi_cosine(1, 0.0, 10.0)?;
    let mut cfg = ExperimentConfig::new(model, Source::Truth(vec![1.83]));
    cfg.mode = mode;
    cfg.shots = 15;
    cfg.runs = 100;
    cfg.datasets = 10;
    cfg.seed = 808;
    cfg.sampler.particles = 100;
    cfg.sampler.threshold = 0.5;
    cfg.sampler.moves = 1;
    cfg.sampler.move_every_step = true;
    cfg.heuristic.increment = 2.0 / 15.0;
    if mode == Mode::Adaptive {
        cfg.heuristic.kind = HeuristicKind::GreedyVariance;
        cfg.heuristic.candidates = 20;
    }
    Ok(cfg)
}

fn adaptive_vs_offline() -> Result<(bool, String)> {
    let off = run_experiment(&hahn_ramsey(Mode::Offline)?)?;
    let ada = run_experiment(&hahn_ramsey(Mode::Adaptive)?)?;
    let sigma = |r: &RunReport| median(&r.successful().map(|s| s.final_std[0]).collect::<Vec<_>>());
    let err = |r: &RunReport| {
        median(
            &r.successful()
                .map(|s| (s.final_mean[0] - 1.83).abs())
                .collect::<Vec<_>>(),
        )
    };
    let (so, sa) = (sigma(&off), sigma(&ada));
    Ok((
        off.failed() == 0 && ada.failed() == 0 && sa <= 0.5 * so,
        format!(
            "median sigma adaptive {sa:.4} vs offline {so:.4} (ratio {:.3}); median |error| {:.4} vs {:.4}",
            sa / so,
            err(&ada),
            err(&off)
        ),
    ))
}

// ---------------------------------------------------------------------------
// 9

const SCALING_SHOTS: usize = 100;

fn scaling_exponent() -> Result<(bool, String)> {
    let mut rng = seeded(909);
    let mut exps = Vec::new();
    let mut failed = 0;
    for s in 0..100 {
        let model = ModelSpec::precession(0.0, 1.0)?;
        let truth = rng.random_range(0.1..0.9);
        let mut cfg = ExperimentConfig::new(model, Source::Truth(vec![truth]));
        cfg.mode = Mode::Adaptive;
        cfg.heuristic.kind = HeuristicKind::SigmaInverse;
        // t = 1/(2σ) for the sin²(ωt) convention
        cfg.heuristic.time_scale = 0.5;
        cfg.noiseless = true;
        cfg.shots = SCALING_SHOTS;
        cfg.sampler.particles = 1000;
        cfg.seed = 9000 + s;
        let r = run_experiment(&cfg)?;
        match r.runs[0].scaling_exponent {
            Some(e) => exps.push(e),
            None => failed += 1,
        }
    }
    let q = quartiles(&exps);
    Ok((
        failed == 0 && q.median <= -0.5,
        format!(
            "median exponent {:.3} (IQR {:.3}..{:.3}) over {} seeds, {failed} without a fit",
            q.median,
            q.q25,
            q.q75,
            exps.len()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 10

fn t2_decay(ordering: OrderPolicy) -> Result<ExperimentConfig> {
    let model = ModelSpec::hahn_echo_t2(0.5, 250.0)?;
    let mut cfg = ExperimentConfig::new(model, Source::Truth(vec![57.58]));
    cfg.shots = 1500;
    cfg.repeats = 20;
    cfg.heuristic.increment = 115.0 / 75.0;
    cfg.datasets = 1;
    cfg.runs = 50;
    cfg.seed = 1010;
    cfg.sampler.particles = 50;
    cfg.sampler.threshold = 0.8;
    cfg.sampler.moves = 1;
    cfg.sampler.move_every_step = true;
    cfg.sampler.ordering = ordering;
    Ok(cfg)
}

fn ordering_effect() -> Result<(bool, String)> {
    let asc = run_experiment(&t2_decay(OrderPolicy::TimeAscending)?)?;
    let desc = run_experiment(&t2_decay(OrderPolicy::TimeDescending)?)?;
    let q = |r: &RunReport| quartiles(&r.successful().map(|s| s.final_std[0]).collect::<Vec<_>>());
    let (qa, qd) = (q(&asc), q(&desc));
    Ok((
        asc.failed() == 0 && desc.failed() == 0 && qd.iqr() < qa.iqr(),
        format!(
            "final std IQR descending {:.3} (median {:.3}) vs ascending {:.3} (median {:.3})",
            qd.iqr(),
            qd.median,
            qa.iqr(),
            qa.median
        ),
    ))
}

// ---------------------------------------------------------------------------
// 11

fn random_in<R: Rng>(model: &ModelSpec, margin: f64, rng: &mut R) -> Vec<f64> {
    let dom = model.domain();
    (0..dom.dim())
        .map(|k| {
            let w = dom.width(k);
            dom.lower()[k] + w * rng.random_range(margin..1.0 - margin)
        })
        .collect()
}

fn potential_gradient<'a>(target: &'a TemperedPosterior<'a>) -> impl Fn(&[f64]) -> Option<Vec<f64>> + Copy + 'a {
    move |q: &[f64]| target.grad_log_density(q).map(|g| g.iter().map(|x| -x).collect())
}

fn leapfrog_reversibility<R: Rng>(rng: &mut R) -> Result<f64> {
    let model = ModelSpec::multi_cosine(2, 0.0, 1.0)?;
    let times: Vec<f64> = (0..20).map(|_| rng.random_range(0.1..5.0)).collect();
    let data = simulate(&model, &[0.3, 0.7], &times, rng)?;
    let target = TemperedPosterior::new(&model, &data, 1.0);
    let grad = potential_gradient(&target);
    let kin = Kinetic::from_mass(DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0]))?;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let x = random_in(&model, 0.05, rng);
        let p: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let fw = leapfrog(&x, &p, 0.02, 50, &kin, grad, Some(model.domain()));
        let back: Vec<f64> = fw.p.iter().map(|v| -v).collect();
        let bw = leapfrog(&fw.theta, &back, 0.02, 50, &kin, grad, Some(model.domain()));
        for k in 0..2 {
            worst = worst.max((bw.theta[k] - x[k]).abs()).max((bw.p[k] + p[k]).abs());
        }
    }
    Ok(worst)
}

fn leapfrog_jacobian<R: Rng>(rng: &mut R) -> Result<f64> {
    let model = ModelSpec::precession(0.0, 2.0)?;
    let times: Vec<f64> = (1..=20).map(|k| 0.1 * k as f64).collect();
    let data = simulate(&model, &[0.8], &times, rng)?;
    let target = TemperedPosterior::new(&model, &data, 1.0);
    let grad = potential_gradient(&target);
    let kin = Kinetic::identity(1);
    let step = |z: &[f64]| {
        let t = leapfrog(&z[..1], &z[1..], 0.01, 10, &kin, grad, None);
        [t.theta, t.p].concat()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let z = [rng.random_range(0.4..1.6), rng.random_range(-2.0..2.0)];
        let mut jac = DMatrix::zeros(2, 2);
        for j in 0..2 {
            let (mut up, mut dn) = (z.to_vec(), z.to_vec());
            up[j] += h;
            dn[j] -= h;
            let (fu, fd) = (step(&up), step(&dn));
            for i in 0..2 {
                jac[(i, j)] = (fu[i] - fd[i]) / (2.0 * h);
            }
        }
        worst = worst.max((jac.determinant() - 1.0).abs());
    }
    Ok(worst)
}

fn gradient_error<R: Rng>(rng: &mut R) -> Result<f64> {
    let models = [
        ModelSpec::precession(0.0, 2.0)?,
        ModelSpec::multi_cosine(3, 0.0, 1.0)?,
        ModelSpec::t1_decay(1.0, 100.0)?,
        ModelSpec::hahn_echo_t2(1.0, 100.0)?,
        ModelSpec::hahn_echo_ab(0.4, 0.1, 1.0, 100.0)?,
        ModelSpec::ramsey_decay((0.0, 2.0), (0.01, 0.5))?,
        ModelSpec::ipe()?,
    ];
    let mut worst: f64 = 0.0;
    for model in &models {
        for _ in 0..100 {
            let theta = random_in(model, 0.05, rng);
            let c = if model.kind() == ModelKind::Ipe {
                Controls::ipe(rng.random_range(1..8), rng.random_range(0.0..6.0))
            } else {
                Controls::time(rng.random_range(0.5..20.0))
            };
            let d = Datum::from_bool(c, rng.random_bool(0.5));
            let g = model.grad_log_likelihood(&theta, &d)?;
            for k in 0..theta.len() {
                let h = 1e-6 * model.domain().width(k);
                let (mut up, mut dn) = (theta.clone(), theta.clone());
                up[k] += h;
                dn[k] -= h;
                let fd = (model.log_likelihood(&up, &d)?.value - model.log_likelihood(&dn, &d)?.value) / (2.0 * h);
                let scale = g[k].abs().max(fd.abs()).max(1e-3);
                worst = worst.max((g[k] - fd).abs() / scale);
            }
        }
    }
    Ok(worst)
}

fn difference_estimator_error<R: Rng>(rng: &mut R) -> Result<f64> {
    let model = ModelSpec::multi_cosine(2, 0.0, 1.0)?;
    let times: Vec<f64> = (0..200).map(|_| rng.random_range(0.1..10.0)).collect();
    let data = simulate(&model, &[0.3, 0.7], &times, rng)?;
    let full = TemperedPosterior::new(&model, &data, 1.0);
    let cover = SubsampleState::exact_cover(data.len(), 4)?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let cv = build_control_variates(&model, &data, &random_in(&model, 0.1, rng))?;
        let theta = random_in(&model, 0.1, rng);
        let est = difference_log_estimator(&model, &data, &cv, &cover, &theta);
        let exact = full.log_density(&theta).unwrap();
        worst = worst.max((est.log_lik - exact).abs() / exact.abs().max(1.0));
    }
    Ok(worst)
}

/// `(ESS bound violations, worst normalization error)` over random reweights.
fn weight_checks<R: Rng>(rng: &mut R) -> Result<(usize, f64)> {
    let model = ModelSpec::precession(0.0, 1.0)?;
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let m = rng.random_range(2..500);
        let mut e = WeightedEnsemble::from_prior(model.domain(), m, rng);
        for _ in 0..rng.random_range(1..30) {
            let d = model.simulate_outcome(&[0.4], Controls::time(rng.random_range(0.1..40.0)), rng)?;
            e.reweight(&model, &d, rng.random_range(0.05..1.0))?;
            worst = worst.max((e.weights().iter().sum::<f64>() - 1.0).abs());
            let ess = e.ess()?;
            if !(ess >= 1.0 - 1e-9 && ess <= m as f64 * (1.0 + 1e-12)) {
                violations += 1;
            }
        }
    }
    Ok((violations, worst))
}

fn bit_identical() -> Result<bool> {
    let model = ModelSpec::multi_cosine(2, 0.0, 1.0)?;
    let mut cfg = ExperimentConfig::new(model, Source::Truth(vec![0.3, 0.7]));
    cfg.shots = 40;
    cfg.runs = 4;
    cfg.seed = 5;
    cfg.sampler.particles = 300;
    cfg.mode_metrics = true;
    let a = run_experiment(&cfg)?;
    cfg.workers = 1;
    let b = run_experiment(&cfg)?;
    let bits = |r: &RunReport| -> Vec<u64> {
        r.runs
            .iter()
            .flat_map(|s| s.final_mean.iter().chain(&s.final_std).chain(s.log_evidence.as_ref()))
            .map(|x| x.to_bits())
            .collect()
    };
    Ok(a.runs.iter().all(|r| r.ok()) && bits(&a) == bits(&b) && a.traces == b.traces)
}

fn kernel_properties() -> Result<(bool, String)> {
    let mut rng = seeded(1111);
    let rev = leapfrog_reversibility(&mut rng)?;
    let jac = leapfrog_jacobian(&mut rng)?;
    let grad = gradient_error(&mut rng)?;
    let diff = difference_estimator_error(&mut rng)?;
    let (ess_bad, norm) = weight_checks(&mut rng)?;
    let det = bit_identical()?;
    let pass = rev < 1e-9 && jac < 1e-8 && grad < 1e-4 && diff < 1e-12 && ess_bad == 0 && norm < 1e-12 && det;
    Ok((
        pass,
        format!(
            "reversibility {rev:.1e}, |det J - 1| {jac:.1e}, gradient rel err {grad:.1e}, \
             difference estimator rel err {diff:.1e}, ESS violations {ess_bad}, \
             normalization err {norm:.1e}, bit-identical reruns {det}"
        ),
    ))
}
