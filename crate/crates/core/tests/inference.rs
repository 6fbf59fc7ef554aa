//! Trained-model properties of the inference module on small analytic tasks.

use rand::RngCore;
use sbi_core::distributions::{normal_cdf, ContinuousDistribution};
use sbi_core::estimators::{ClassifierConfig, EstimatorConfig, EstimatorKind};
use sbi_core::inference::{nle_fit, nle_posterior, npe_fit, nre_fit, tsnpe, TruncationConfig, TruncationRegion};
use sbi_core::samplers::SamplerConfig;
use sbi_core::simulators::{
    generate_dataset, simulate_batch, BallThrow, BallThrowConfig, Ddm, DdmConfig, GenerateOptions, LinearGaussian, OutputKind,
    SimError, SimulatorSpec,
};
use sbi_core::trainer::{cyclic_shift, TrainConfig};
use sbi_core::{Dataset, Prior, Simulator, Tensor};

fn mdn(components: usize) -> EstimatorConfig {
    EstimatorConfig {
        kind: EstimatorKind::Mdn,
        components,
        hidden: vec![32, 32],
        ..Default::default()
    }
}

fn train(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 100,
        learning_rate: 3e-3,
        patience: 10,
        max_epochs: 150,
        seed,
        ..Default::default()
    }
}

fn data(prior: &Prior, sim: &dyn Simulator, n: usize, seed: u64) -> Dataset {
    generate_dataset(prior, sim, n, seed, &GenerateOptions::default()).unwrap()
}

/// Kolmogorov distance between a sample and the standard normal CDF.
fn ks_to_std_normal(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = normal_cdf(*x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

struct Constant;

impl Simulator for Constant {
    fn spec(&self) -> SimulatorSpec {
        SimulatorSpec {
            name: "constant".into(),
            theta_dim: 2,
            x_dim: 1,
            output_kind: OutputKind::Continuous,
        }
    }

    fn simulate(&self, _: &[f64], _: &mut dyn RngCore) -> Result<Vec<f64>, SimError> {
        Ok(vec![0.0])
    }
}

/// Output is standard noise that ignores θ.
struct Independent;

impl Simulator for Independent {
    fn spec(&self) -> SimulatorSpec {
        SimulatorSpec {
            name: "independent".into(),
            theta_dim: 1,
            x_dim: 1,
            output_kind: OutputKind::Continuous,
        }
    }

    fn simulate(&self, _: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>, SimError> {
        Ok(vec![rand_distr::Distribution::<f64>::sample(
            &rand_distr::StandardNormal,
            rng,
        )])
    }
}

#[test]
fn uninformative_simulator_returns_the_prior() {
    let prior = Prior::standard_normal(2);
    let ds = data(&prior, &Constant, 2000, 1);
    let (post, _) = npe_fit(&ds, &prior, &mdn(1), &train(1)).unwrap();
    let s = post.sample(&Tensor::matrix(1, 1, vec![0.0]), 2000, 2).unwrap().samples;
    for d in 0..2 {
        let ks = ks_to_std_normal(&s.column(d));
        assert!(ks < 0.05, "dimension {d}: Kolmogorov distance {ks}");
    }
}

#[test]
fn nle_matches_analytic_likelihood() {
    let sigma = 0.5;
    let prior = Prior::standard_normal(1);
    let sim = LinearGaussian::new(1, sigma).unwrap();
    let ds = data(&prior, &sim, 4000, 3);
    let (model, _) = nle_fit(&ds, &mdn(2), &train(3)).unwrap();

    let on_train = model.estimator.log_prob(&ds.x, &ds.theta).unwrap();
    assert!(on_train.iter().all(|v| v.is_finite()));

    let (mut xs, mut thetas) = (Vec::new(), Vec::new());
    for i in 0..11 {
        let t = -1.5 + 0.3 * i as f64;
        for k in -4..=4 {
            thetas.push(t);
            xs.push(t + sigma * 0.5 * k as f64);
        }
    }
    let n = xs.len();
    let lq = model
        .estimator
        .log_prob(&Tensor::matrix(n, 1, xs.clone()), &Tensor::matrix(n, 1, thetas.clone()))
        .unwrap();
    let err: f64 = (0..n)
        .map(|i| {
            let z = (xs[i] - thetas[i]) / sigma;
            let exact = -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            (lq[i] - exact).abs()
        })
        .sum::<f64>()
        / n as f64;
    assert!(err < 0.1, "mean absolute log-likelihood error {err}");
}

#[test]
fn nre_cannot_separate_independent_pairs() {
    let prior = Prior::standard_normal(1);
    let ds = data(&prior, &Independent, 4000, 5);
    let (clf, _) = nre_fit(&ds, &ClassifierConfig::default(), &train(5)).unwrap();
    let held = data(&prior, &Independent, 4000, 6);
    let matched = clf.logits(&held.theta, &held.x).unwrap();
    let shuffled = clf.logits(&cyclic_shift(&held.theta), &held.x).unwrap();
    let bce = (matched.iter().map(|l| softplus(-l)).sum::<f64>() + shuffled.iter().map(|l| softplus(*l)).sum::<f64>())
        / (2 * held.len()) as f64;
    assert!((bce - 2f64.ln()).abs() < 0.02, "held-out BCE {bce}");
}

#[test]
fn nre_scores_matched_pairs_above_shuffled() {
    let prior = Prior::standard_normal(1);
    let sim = LinearGaussian::new(1, 0.5).unwrap();
    let ds = data(&prior, &sim, 3000, 7);
    let (clf, _) = nre_fit(&ds, &ClassifierConfig::default(), &train(7)).unwrap();
    let held = data(&prior, &sim, 2000, 8);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let matched = mean(clf.logits(&held.theta, &held.x).unwrap());
    let shuffled = mean(clf.logits(&cyclic_shift(&held.theta), &held.x).unwrap());
    assert!(matched > shuffled + 0.5, "matched {matched}, shuffled {shuffled}");
}

#[test]
fn tsnpe_concentrates_ball_throw_rounds() {
    let prior = BallThrow::default_prior();
    let sim = BallThrow::new(BallThrowConfig::default()).unwrap();
    let x_o = Tensor::matrix(1, 1, vec![13.0]);
    let rounds = tsnpe(
        &prior,
        &sim,
        &x_o,
        2,
        1500,
        &mdn(5),
        &train(11),
        &TruncationConfig::default(),
        11,
    )
    .unwrap();
    assert!(rounds[1].new_theta.iter_rows().all(|r| prior.in_support(r)));
    assert_eq!(rounds[1].dataset.len(), 3000);

    let hpd90 = TruncationRegion::new(
        &rounds[0].posterior,
        &x_o,
        &TruncationConfig {
            epsilon: 0.1,
            reference_samples: 10_000,
        },
        12,
    )
    .unwrap();
    let s = rounds[1].posterior.sample(&x_o, 2000, 13).unwrap().samples;
    let inside = hpd90.contains(&s).unwrap().iter().filter(|b| **b).count() as f64 / 2000.0;
    assert!(inside >= 0.8, "round-2 mass inside the round-1 90% HPD set: {inside}");
}

#[test]
fn tsnpe_round_two_beats_single_round_on_conjugate_task() {
    let sigma = 0.2;
    let prior = Prior::standard_normal(1);
    let sim = LinearGaussian::new(1, sigma).unwrap();
    let x_o = Tensor::matrix(1, 1, vec![2.5]);
    let (mu, _) = sim.conjugate_posterior(1.0, 2.5, 1);
    let budget = 500;
    let mean_error = |post: &sbi_core::Posterior, seed: u64| {
        let s = post.sample(&x_o, 4000, seed).unwrap().samples;
        (s.column(0).iter().sum::<f64>() / 4000.0 - mu).abs()
    };
    let (mut seq, mut single) = (Vec::new(), Vec::new());
    for seed in 0..10 {
        let rounds = tsnpe(
            &prior,
            &sim,
            &x_o,
            2,
            budget,
            &mdn(2),
            &train(seed),
            &TruncationConfig::default(),
            seed,
        )
        .unwrap();
        seq.push(mean_error(&rounds[1].posterior, seed));
        let ds = data(&prior, &sim, 2 * budget, seed);
        let (post, _) = npe_fit(&ds, &prior, &mdn(2), &train(seed)).unwrap();
        single.push(mean_error(&post, seed));
    }
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        0.5 * (v[4] + v[5])
    };
    let (a, b) = (median(seq), median(single));
    assert!(a <= b, "median error: two rounds {a}, single round {b}");
}

#[test]
fn more_ddm_trials_tighten_the_posterior() {
    let prior = Ddm::default_prior();
    let sim = Ddm::new(DdmConfig::default()).unwrap();
    let ds = data(&prior, &sim, 20_000, 21);
    let est = EstimatorConfig {
        kind: EstimatorKind::Mixed,
        components: 5,
        hidden: vec![50, 50],
        ..Default::default()
    };
    let (lik, _) = nle_fit(
        &ds,
        &est,
        &TrainConfig {
            batch_size: 500,
            learning_rate: 2e-3,
            max_epochs: 40,
            ..train(21)
        },
    )
    .unwrap();
    let sampler = SamplerConfig {
        chains: 10,
        warmup: 200,
        thin: 1,
        ..Default::default()
    };
    let post = nle_posterior(lik, prior, sampler).unwrap();
    let truth = [0.8, 0.7, 0.1, 0.35, -0.4];
    let trials = simulate_batch(&sim, &Tensor::matrix(200, 5, truth.repeat(200)), 22, 1).unwrap();
    let std = |n: usize| {
        let x = trials.select_rows(&(0..n).collect::<Vec<_>>());
        let s = post.sample(&x, 1000, 23).unwrap().samples;
        s.column_moments().1
    };
    let (one, two) = (std(100), std(200));
    let tighter = one.iter().zip(&two).filter(|(a, b)| b < a).count();
    assert!(tighter >= 4, "std with 100 trials {one:?}, with 200 trials {two:?}");
}
