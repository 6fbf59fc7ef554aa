//! Predictive checks, simulation-based calibration, expected coverage, TARP,
//! local classifier two-sample tests, misspecification detection and rank
//! uniformity tests.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};
use thiserror::Error;

use crate::distributions::{ContinuousDistribution, Prior};
use crate::estimators::{Classifier, ClassifierConfig, Estimator, EstimatorConfig, EstimatorError, EstimatorKind};
use crate::inference::{InferenceError, Posterior};
use crate::ndiff::{ParamStore, Tape, Tensor, Var};
use crate::simulators::{default_workers, generate_dataset, simulate_batch, stream_rng, GenerateOptions, SimError, Simulator};
use crate::trainer::{fit, LossKind, TrainConfig, TrainError, Trainable};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Simulator(#[from] SimError),
    #[error("{0}")]
    Invalid(String),
}

/// A posterior that can be queried at any observation.
pub trait AmortizedPosterior: Sync {
    fn sample_at(&self, x: &[f64], n: usize, seed: u64) -> Result<Tensor<f64>, DiagnosticsError>;

    /// Log-density of each row of `theta`; `None` when the posterior has no
    /// evaluable density.
    fn log_prob_at(&self, theta: &Tensor<f64>, x: &[f64]) -> Result<Option<Vec<f64>>, DiagnosticsError>;
}

impl AmortizedPosterior for Posterior {
    fn sample_at(&self, x: &[f64], n: usize, seed: u64) -> Result<Tensor<f64>, DiagnosticsError> {
        Ok(self.sample(&Tensor::matrix(1, x.len(), x.to_vec()), n, seed)?.samples)
    }

    fn log_prob_at(&self, theta: &Tensor<f64>, x: &[f64]) -> Result<Option<Vec<f64>>, DiagnosticsError> {
        match self.log_prob(theta, &Tensor::matrix(1, x.len(), x.to_vec())) {
            Ok(v) => Ok(Some(v)),
            Err(InferenceError::NoDensity(_)) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

/// Prior draws, one simulation each, and `M` posterior draws per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub theta: Tensor<f64>,
    pub x: Tensor<f64>,
    pub samples: Vec<Tensor<f64>>,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn new(theta: Tensor<f64>, x: Tensor<f64>, samples: Vec<Tensor<f64>>, seed: u64) -> Result<Self, DiagnosticsError> {
        if theta.rows() != x.rows() || samples.len() != theta.rows() {
            return Err(DiagnosticsError::Invalid(format!(
                "{} parameters, {} observations and {} sample sets",
                theta.rows(),
                x.rows(),
                samples.len()
            )));
        }
        let m = samples.first().map_or(0, |s| s.rows());
        if samples.iter().any(|s| s.rows() != m || s.cols() != theta.cols()) {
            return Err(DiagnosticsError::Invalid(
                "posterior sample sets differ in size or width".into(),
            ));
        }
        Ok(Self { theta, x, samples, seed })
    }

    /// Simulate `n` prior pairs, then draw `m` posterior samples for each,
    /// in parallel across pairs.
    pub fn generate(
        prior: &Prior,
        simulator: &dyn Simulator,
        posterior: &dyn AmortizedPosterior,
        n: usize,
        m: usize,
        seed: u64,
    ) -> Result<Self, DiagnosticsError> {
        let ds = generate_dataset(prior, simulator, n, seed, &GenerateOptions::default())?;
        Self::for_pairs(ds.theta, ds.x, posterior, m, seed)
    }

    /// Posterior samples for given `(θ*, x)` pairs. Pair `i` samples with
    /// seed stream `2⁶³ + i`, disjoint from the streams that simulate pairs.
    pub fn for_pairs(
        theta: Tensor<f64>,
        x: Tensor<f64>,
        posterior: &dyn AmortizedPosterior,
        m: usize,
        seed: u64,
    ) -> Result<Self, DiagnosticsError> {
        let samples = (0..theta.rows())
            .into_par_iter()
            .map(|i| posterior.sample_at(x.row(i), m, stream_rng(seed, (1 << 63) | i as u64).random()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(theta, x, samples, seed)
    }

    pub fn len(&self) -> usize {
        self.theta.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.rows() == 0
    }

    /// Posterior draws per pair.
    pub fn m(&self) -> usize {
        self.samples.first().map_or(0, |s| s.rows())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    MarginalCoordinate,
    PosteriorLogDensity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankHistogram {
    pub projection: Projection,
    pub m: usize,
    /// Per projected dimension, the rank of every pair.
    pub ranks: Vec<Vec<usize>>,
}

impl RankHistogram {
    /// Per dimension, counts of each rank `0..=M`.
    pub fn counts(&self) -> Vec<Vec<usize>> {
        self.ranks
            .iter()
            .map(|r| {
                let mut c = vec![0; self.m + 1];
                for &k in r {
                    c[k] += 1;
                }
                c
            })
            .collect()
    }

    pub fn to_table(&self) -> String {
        let counts = self.counts();
        let mut s = String::from("rank");
        for d in 0..counts.len() {
            write!(s, "\tdim_{d}").unwrap();
        }
        s.push('\n');
        for k in 0..=self.m {
            write!(s, "{k}").unwrap();
            for c in &counts {
                write!(s, "\t{}", c[k]).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Number of `values` strictly below `x`, plus a uniform share of exact ties.
fn rank_with_ties(x: f64, values: impl Iterator<Item = f64>, rng: &mut dyn RngCore) -> usize {
    let (mut less, mut equal) = (0, 0);
    for v in values {
        if v < x {
            less += 1;
        } else if v == x {
            equal += 1;
        }
    }
    less + if equal > 0 { rng.random_range(0..=equal) } else { 0 }
}

/// Per-coordinate rank of `θ*` among its posterior samples.
pub fn sbc_ranks(cal: &CalibrationSet, rng: &mut dyn RngCore) -> Result<RankHistogram, DiagnosticsError> {
    if cal.m() < 20 {
        return Err(DiagnosticsError::Invalid(format!(
            "SBC needs at least 20 posterior draws per pair, got {}",
            cal.m()
        )));
    }
    let dim = cal.theta.cols();
    let mut ranks = vec![Vec::with_capacity(cal.len()); dim];
    for (i, s) in cal.samples.iter().enumerate() {
        for (d, r) in ranks.iter_mut().enumerate() {
            r.push(rank_with_ties(cal.theta.at(i, d), s.column(d).into_iter(), rng));
        }
    }
    Ok(RankHistogram {
        projection: Projection::MarginalCoordinate,
        m: cal.m(),
        ranks,
    })
}

/// Per-pair rank of `log q(θ* | x)` among the log-densities of its samples.
pub fn log_density_ranks(
    cal: &CalibrationSet,
    posterior: &dyn AmortizedPosterior,
    rng: &mut dyn RngCore,
) -> Result<RankHistogram, DiagnosticsError> {
    let per: Vec<(f64, Vec<f64>)> = (0..cal.len())
        .into_par_iter()
        .map(|i| {
            let x = cal.x.row(i);
            let no_density = || {
                DiagnosticsError::Invalid(
                    "expected coverage needs a posterior density; MCMC-backed posteriors should use TARP".into(),
                )
            };
            let truth = posterior
                .log_prob_at(&Tensor::matrix(1, cal.theta.cols(), cal.theta.row(i).to_vec()), x)?
                .ok_or_else(no_density)?;
            let lps = posterior.log_prob_at(&cal.samples[i], x)?.ok_or_else(no_density)?;
            Ok((truth[0], lps))
        })
        .collect::<Result<_, DiagnosticsError>>()?;
    let ranks = per
        .into_iter()
        .map(|(t, lps)| rank_with_ties(t, lps.into_iter(), rng))
        .collect();
    Ok(RankHistogram {
        projection: Projection::PosteriorLogDensity,
        m: cal.m(),
        ranks: vec![ranks],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniformityReport {
    pub ks_statistic: Vec<f64>,
    pub ks_p: Vec<f64>,
    pub chi2_statistic: Vec<f64>,
    pub chi2_p: Vec<f64>,
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-300 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// KS test against the discrete uniform on `0..=M` and a χ² test on
/// consecutive rank groups with at least five expected counts each.
pub fn uniformity_test(hist: &RankHistogram) -> Result<UniformityReport, DiagnosticsError> {
    let n = hist.ranks.first().map_or(0, Vec::len);
    if n < 50 {
        return Err(DiagnosticsError::Invalid(format!(
            "uniformity test needs at least 50 ranks, got {n}"
        )));
    }
    let levels = hist.m + 1;
    let groups = levels.min(n / 5).max(2);
    let mut report = UniformityReport {
        ks_statistic: vec![],
        ks_p: vec![],
        chi2_statistic: vec![],
        chi2_p: vec![],
    };
    for counts in hist.counts() {
        let mut cum = 0usize;
        let mut d: f64 = 0.0;
        for (k, c) in counts.iter().enumerate() {
            cum += c;
            d = d.max((cum as f64 / n as f64 - (k + 1) as f64 / levels as f64).abs());
        }
        let sn = (n as f64).sqrt();
        report.ks_statistic.push(d);
        report.ks_p.push(kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d));

        let mut chi2 = 0.0;
        for g in 0..groups {
            let (lo, hi) = (g * levels / groups, (g + 1) * levels / groups);
            let observed: usize = counts[lo..hi].iter().sum();
            let expected = n as f64 * (hi - lo) as f64 / levels as f64;
            chi2 += (observed as f64 - expected).powi(2) / expected;
        }
        let dist = ChiSquared::new((groups - 1) as f64).map_err(|e| DiagnosticsError::Invalid(e.to_string()))?;
        report.chi2_statistic.push(chi2);
        report.chi2_p.push(dist.sf(chi2));
    }
    Ok(report)
}

/// Empirical coverage per credibility level with a pointwise 95% binomial
/// band around the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageCurve {
    pub levels: Vec<f64>,
    pub coverage: Vec<f64>,
    pub band_low: Vec<f64>,
    pub band_high: Vec<f64>,
    /// Per pair: the credibility level at which `θ*` first falls inside.
    pub credibility: Vec<f64>,
}

impl CoverageCurve {
    fn from_credibility(credibility: Vec<f64>, levels: &[f64]) -> Result<Self, DiagnosticsError> {
        let n = credibility.len();
        if n == 0 {
            return Err(DiagnosticsError::Invalid("empty calibration set".into()));
        }
        let coverage = levels
            .iter()
            .map(|&l| credibility.iter().filter(|&&c| c <= l).count() as f64 / n as f64)
            .collect();
        let mut band_low = Vec::with_capacity(levels.len());
        let mut band_high = Vec::with_capacity(levels.len());
        for &l in levels {
            let (lo, hi) = binomial_band(n, l)?;
            band_low.push(lo);
            band_high.push(hi);
        }
        Ok(Self {
            levels: levels.to_vec(),
            coverage,
            band_low,
            band_high,
            credibility,
        })
    }

    /// Largest `|coverage − level|` over levels in `[lo, hi]`.
    pub fn max_deviation_between(&self, lo: f64, hi: f64) -> f64 {
        self.levels
            .iter()
            .zip(&self.coverage)
            .filter(|(l, _)| **l >= lo - 1e-12 && **l <= hi + 1e-12)
            .map(|(l, c)| (c - l).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_deviation(&self) -> f64 {
        self.max_deviation_between(0.0, 1.0)
    }

    /// True when some level falls outside the binomial band.
    pub fn leaves_band(&self) -> bool {
        self.coverage
            .iter()
            .zip(self.band_low.iter().zip(&self.band_high))
            .any(|(c, (lo, hi))| c < lo || c > hi)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("level\tcoverage\tband_low\tband_high\n");
        for i in 0..self.levels.len() {
            writeln!(
                s,
                "{:.4}\t{:.6}\t{:.6}\t{:.6}",
                self.levels[i], self.coverage[i], self.band_low[i], self.band_high[i]
            )
            .unwrap();
        }
        s
    }
}

/// Central 95% interval of `Binomial(n, p) / n`.
fn binomial_band(n: usize, p: f64) -> Result<(f64, f64), DiagnosticsError> {
    if p <= 0.0 {
        return Ok((0.0, 0.0));
    }
    if p >= 1.0 {
        return Ok((1.0, 1.0));
    }
    let b = Binomial::new(p, n as u64).map_err(|e| DiagnosticsError::Invalid(e.to_string()))?;
    let q = |target: f64| (0..=n as u64).find(|&k| b.cdf(k) >= target).unwrap_or(n as u64) as f64 / n as f64;
    Ok((q(0.025), q(0.975)))
}

/// Evenly spaced levels `0, 1/k, …, 1`.
pub fn level_grid(k: usize) -> Vec<f64> {
    (0..=k).map(|i| i as f64 / k as f64).collect()
}

/// Highest-density-region coverage. A pair with log-density rank `r` among
/// `M` samples enters the HPD region at level `(M − r + ½)/(M + 1)`.
pub fn expected_coverage(
    cal: &CalibrationSet,
    posterior: &dyn AmortizedPosterior,
    levels: &[f64],
    rng: &mut dyn RngCore,
) -> Result<CoverageCurve, DiagnosticsError> {
    let hist = log_density_ranks(cal, posterior, rng)?;
    let m = hist.m as f64;
    let cred = hist.ranks[0].iter().map(|&r| (m - r as f64 + 0.5) / (m + 1.0)).collect();
    CoverageCurve::from_credibility(cred, levels)
}

/// Tests of Accuracy with Random Points, with reference points drawn from
/// the prior. A pair with `k` of its `M` samples closer to the reference
/// point than `θ*` has credibility `(k + ½)/(M + 1)`.
pub fn tarp(
    cal: &CalibrationSet,
    prior: &Prior,
    levels: &[f64],
    rng: &mut dyn RngCore,
) -> Result<CoverageCurve, DiagnosticsError> {
    let m = cal.m();
    if m == 0 {
        return Err(DiagnosticsError::Invalid("TARP needs posterior samples".into()));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    let cred = (0..cal.len())
        .map(|i| {
            let r = prior.sample(rng);
            let d_true = dist(cal.theta.row(i), &r);
            let closer = cal.samples[i].iter_rows().filter(|s| dist(s, &r) < d_true).count();
            (closer as f64 + 0.5) / (m as f64 + 1.0)
        })
        .collect();
    CoverageCurve::from_credibility(cred, levels)
}

/// Classifier trained on labelled pairs; the label rides in the final
/// column of the parameter block.
struct LabelledClassifier(Classifier<f64>);

impl Trainable<f64> for LabelledClassifier {
    fn params(&self) -> &ParamStore<f64> {
        self.0.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        self.0.params_mut()
    }

    fn loss(&self, tape: &mut Tape<f64>, _: LossKind, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Var, TrainError> {
        let d = a.cols() - 1;
        let n = a.rows();
        let mut theta = Vec::with_capacity(n * d);
        let mut sign = Vec::with_capacity(n);
        for r in a.iter_rows() {
            theta.extend_from_slice(&r[..d]);
            // softplus(−z) for label 1, softplus(z) for label 0
            sign.push(if r[d] > 0.5 { -1.0 } else { 1.0 });
        }
        let th = tape.constant(Tensor::matrix(n, d, theta));
        let x = tape.constant(b.clone());
        let z = self.0.logit_tape(tape, th, x)?;
        let s = tape.constant(Tensor::matrix(n, 1, sign));
        let signed = tape.multiply(z, s)?;
        let l = tape.softplus(signed);
        Ok(tape.mean(l))
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Mean of `(P(class 1 | θ, x_o) − ½)²` over the given parameter draws.
pub fn lc2st_statistic(clf: &Classifier<f64>, theta: &Tensor<f64>, x_o: &[f64]) -> Result<f64, DiagnosticsError> {
    let x = crate::estimators::repeat_row(x_o, theta.rows());
    let z = clf.logits(theta, &x)?;
    Ok(z.iter().map(|&z| (sigmoid(z) - 0.5).powi(2)).sum::<f64>() / z.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lc2stConfig {
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    pub null_refits: usize,
    /// Posterior draws at `x_o` used for the statistic.
    pub eval_samples: usize,
}

impl Default for Lc2stConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierConfig::default(),
            train: TrainConfig::default(),
            null_refits: 100,
            eval_samples: 1000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Lc2stResult {
    pub classifier: Classifier<f64>,
    pub statistic: f64,
    /// Sorted null statistics.
    pub null: Vec<f64>,
    pub p_value: f64,
}

impl Lc2stResult {
    pub fn null_quantile(&self, q: f64) -> f64 {
        let k = ((q * self.null.len() as f64).ceil() as usize).clamp(1, self.null.len()) - 1;
        self.null[k]
    }

    /// Statistic above the null `1 − alpha` quantile.
    pub fn rejects(&self, alpha: f64) -> bool {
        self.statistic > self.null_quantile(1.0 - alpha)
    }
}

fn train_labelled(
    theta0: &Tensor<f64>,
    x0: &Tensor<f64>,
    theta1: &Tensor<f64>,
    x1: &Tensor<f64>,
    cfg: &Lc2stConfig,
    seed: u64,
) -> Result<Classifier<f64>, DiagnosticsError> {
    let label = |t: &Tensor<f64>, l: f64| {
        let ones = Tensor::full(&[t.rows(), 1], l);
        Tensor::hstack(&[t, &ones])
    };
    let a = Tensor::vstack(&[&label(theta0, 0.0).unwrap(), &label(theta1, 1.0).unwrap()]).unwrap();
    let b = Tensor::vstack(&[x0, x1]).unwrap();
    let theta_all = Tensor::vstack(&[theta0, theta1]).unwrap();
    let mut clf = LabelledClassifier(Classifier::for_data(&cfg.classifier, &theta_all, &b, seed));
    fit(
        &mut clf,
        &a,
        &b,
        LossKind::BinaryCrossEntropy,
        &TrainConfig {
            seed,
            ..cfg.train.clone()
        },
    )?;
    Ok(clf.0)
}

/// Local classifier two-sample test at `x_o`. Class 0 holds the true joint
/// pairs `(θₙ, xₙ)`, class 1 the pairs `(θᵠₙ, xₙ)` with one posterior draw
/// each. The null refits split the true pairs into two random halves.
pub fn lc2st(
    cal: &CalibrationSet,
    posterior: &dyn AmortizedPosterior,
    x_o: &[f64],
    cfg: &Lc2stConfig,
    seed: u64,
) -> Result<Lc2stResult, DiagnosticsError> {
    if cal.m() < 1 || cal.len() < 20 {
        return Err(DiagnosticsError::Invalid(
            "L-C2ST needs at least 20 pairs with a posterior draw each".into(),
        ));
    }
    let d = cal.theta.cols();
    let q_theta = Tensor::matrix(cal.len(), d, cal.samples.iter().flat_map(|s| s.row(0).to_vec()).collect());
    let classifier = train_labelled(&cal.theta, &cal.x, &q_theta, &cal.x, cfg, seed)?;
    let eval = posterior.sample_at(x_o, cfg.eval_samples, seed ^ 0xc2)?;
    let statistic = lc2st_statistic(&classifier, &eval, x_o)?;
    let mut null = (0..cfg.null_refits as u64)
        .into_par_iter()
        .map(|r| {
            let mut idx: Vec<usize> = (0..cal.len()).collect();
            idx.shuffle(&mut stream_rng(seed, r + 1));
            let (h0, h1) = idx.split_at(idx.len() / 2);
            let clf = train_labelled(
                &cal.theta.select_rows(h0),
                &cal.x.select_rows(h0),
                &cal.theta.select_rows(h1),
                &cal.x.select_rows(h1),
                cfg,
                seed.wrapping_add(r + 1),
            )?;
            lc2st_statistic(&clf, &eval, x_o)
        })
        .collect::<Result<Vec<_>, _>>()?;
    null.sort_by(f64::total_cmp);
    let p_value = (1 + null.iter().filter(|&&s| s >= statistic).count()) as f64 / (1 + null.len()) as f64;
    Ok(Lc2stResult {
        classifier,
        statistic,
        null,
        p_value,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MisspecConfig {
    pub estimator: EstimatorConfig,
    pub train: TrainConfig,
    /// Flag when the rank quantile of `log p(x_o)` is below this.
    pub threshold: f64,
}

impl Default for MisspecConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorConfig {
                kind: EstimatorKind::Mdn,
                components: 5,
                ..Default::default()
            },
            train: TrainConfig::default(),
            threshold: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MisspecReport {
    pub log_density: f64,
    /// Number of training outputs with a lower log-density than `x_o`.
    pub rank: usize,
    pub n: usize,
    pub flagged: bool,
}

/// Unconditional density over simulated outputs with the sorted
/// log-densities of its training rows.
#[derive(Clone, Debug)]
pub struct MisspecDetector {
    pub model: Estimator<f64>,
    train_log_densities: Vec<f64>,
    threshold: f64,
}

impl MisspecDetector {
    pub fn fit(x: &Tensor<f64>, cfg: &MisspecConfig) -> Result<Self, DiagnosticsError> {
        if x.rows() < 500 {
            return Err(DiagnosticsError::Invalid(format!(
                "misspecification check needs ≥ 500 rows, got {}",
                x.rows()
            )));
        }
        // a constant context turns the conditional estimator into p(x)
        let ctx = Tensor::zeros(&[x.rows(), 1]);
        let mut model = Estimator::fit_standardized(&cfg.estimator, x, &ctx, cfg.train.seed)?;
        fit(&mut model, x, &ctx, LossKind::NegLogDensity, &cfg.train)?;
        let mut lps = model.log_prob(x, &ctx)?;
        lps.sort_by(f64::total_cmp);
        Ok(Self {
            model,
            train_log_densities: lps,
            threshold: cfg.threshold,
        })
    }

    /// Flag `x_o` if its log-density is exceptionally low among the
    /// training outputs.
    pub fn check(&self, x_o: &[f64]) -> Result<MisspecReport, DiagnosticsError> {
        if x_o.len() != self.model.target_dim() {
            return Err(DiagnosticsError::Invalid(format!(
                "x_o has {} entries, data has {}",
                x_o.len(),
                self.model.target_dim()
            )));
        }
        let lo = self
            .model
            .log_prob(&Tensor::matrix(1, x_o.len(), x_o.to_vec()), &Tensor::zeros(&[1, 1]))?[0];
        let lps = &self.train_log_densities;
        let rank = lps.partition_point(|&l| l < lo);
        Ok(MisspecReport {
            log_density: lo,
            rank,
            n: lps.len(),
            flagged: (rank as f64) < self.threshold * lps.len() as f64,
        })
    }
}

/// Fit a detector on the simulated outputs and check one observation.
pub fn misspec_check(x: &Tensor<f64>, x_o: &[f64], cfg: &MisspecConfig) -> Result<MisspecReport, DiagnosticsError> {
    MisspecDetector::fit(x, cfg)?.check(x_o)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveCheck {
    pub theta: Tensor<f64>,
    pub x: Tensor<f64>,
    /// Euclidean distance of each simulated output to `x_o`.
    pub distances: Vec<f64>,
}

impl PredictiveCheck {
    pub fn median_distance(&self) -> f64 {
        let mut d = self.distances.clone();
        d.sort_by(f64::total_cmp);
        let n = d.len();
        if n % 2 == 1 {
            d[n / 2]
        } else {
            0.5 * (d[n / 2 - 1] + d[n / 2])
        }
    }

    pub fn fraction_within(&self, column: usize, lo: f64, hi: f64) -> f64 {
        let c = self.x.column(column);
        c.iter().filter(|v| **v >= lo && **v <= hi).count() as f64 / c.len() as f64
    }
}

/// Simulate once at each row of `theta` (posterior or prior draws) and
/// measure the distance to `x_o`.
pub fn predictive_check(
    theta: &Tensor<f64>,
    simulator: &dyn Simulator,
    x_o: &[f64],
    seed: u64,
) -> Result<PredictiveCheck, DiagnosticsError> {
    if theta.rows() == 0 {
        return Err(DiagnosticsError::Invalid("predictive check needs at least one draw".into()));
    }
    let x = simulate_batch(simulator, theta, seed, default_workers())?;
    let distances = x
        .iter_rows()
        .map(|r| r.iter().zip(x_o).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    Ok(PredictiveCheck {
        theta: theta.clone(),
        x,
        distances,
    })
}

/// Exact posterior of the linear-Gaussian simulator under an isotropic
/// `N(0, s₀² I)` prior, optionally widened or narrowed by `std_scale` and
/// moved by `shift` (in prior standard deviations) to emulate miscalibrated
/// estimators.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianReference {
    pub prior_std: f64,
    pub noise_std: f64,
    pub std_scale: f64,
    pub shift: f64,
}

impl GaussianReference {
    pub fn exact(prior_std: f64, noise_std: f64) -> Self {
        Self {
            prior_std,
            noise_std,
            std_scale: 1.0,
            shift: 0.0,
        }
    }

    /// Per-coordinate mean and std given one observation row.
    pub fn moments(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let prec = 1.0 / (self.prior_std * self.prior_std) + 1.0 / (self.noise_std * self.noise_std);
        let var = 1.0 / prec;
        let mean = x
            .iter()
            .map(|xi| var * xi / (self.noise_std * self.noise_std) + self.shift * self.prior_std)
            .collect();
        (mean, var.sqrt() * self.std_scale)
    }
}

impl AmortizedPosterior for GaussianReference {
    fn sample_at(&self, x: &[f64], n: usize, seed: u64) -> Result<Tensor<f64>, DiagnosticsError> {
        let (mean, std) = self.moments(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * mean.len());
        for _ in 0..n {
            for m in &mean {
                data.push(m + std * crate::distributions::std_normal::<f64>(&mut rng));
            }
        }
        Ok(Tensor::matrix(n, mean.len(), data))
    }

    fn log_prob_at(&self, theta: &Tensor<f64>, x: &[f64]) -> Result<Option<Vec<f64>>, DiagnosticsError> {
        let (mean, std) = self.moments(x);
        Ok(Some(
            theta
                .iter_rows()
                .map(|r| {
                    r.iter()
                        .zip(&mean)
                        .map(|(t, m)| crate::distributions::std_normal_log_pdf((t - m) / std) - std.ln())
                        .sum()
                })
                .collect(),
        ))
    }
}

/// Prior draws for a prior predictive check.
pub fn prior_draws(prior: &Prior, n: usize, seed: u64) -> Tensor<f64> {
    prior.sample_n(&mut ChaCha8Rng::seed_from_u64(seed), n)
}

#[cfg(test)]
mod tests;
