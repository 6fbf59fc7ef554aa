//! Neural posterior, likelihood and ratio estimation, truncated sequential
//! NPE and posterior ensembles.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{ContinuousDistribution, Prior, PriorSpec};
use crate::estimators::{repeat_row, Classifier, ClassifierConfig, Estimator, EstimatorConfig, EstimatorError};
use crate::ndiff::{Tape, Tensor};
use crate::samplers::{slice_sample, ChainDiagnostics, DifferentiableDensity, SamplerConfig, SamplerError};
use crate::scalar::log_sum_exp;
use crate::simulators::{default_workers, generate_dataset, simulate_batch, Dataset, GenerateOptions, SimError, Simulator};
use crate::trainer::{fit, LossKind, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Simulator(#[from] SimError),
    #[error("{0}")]
    Invalid(String),
    #[error("posterior has no evaluable density ({0}); use a sample-based diagnostic such as TARP")]
    NoDensity(&'static str),
    #[error("rejection sampling accepted {accepted} of {attempts} proposals; the {what} and the prior barely overlap")]
    LowAcceptance {
        what: &'static str,
        accepted: usize,
        attempts: usize,
    },
    #[error("posterior file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A trained conditional density estimator and the configuration it was
/// built from.
#[derive(Clone, Debug)]
pub struct DensityModel {
    pub estimator: Estimator<f64>,
    pub config: EstimatorConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorKind {
    Direct,
    Ensemble,
    Mcmc,
}

/// Posterior handle. Every kind is amortized: the observation is supplied
/// when sampling or evaluating, as one row for direct and ensemble
/// posteriors or as i.i.d. trial rows for the MCMC-backed kinds.
#[derive(Clone, Debug)]
pub enum Posterior {
    Direct {
        model: Arc<DensityModel>,
        prior: Prior,
    },
    Ensemble {
        members: Vec<Arc<DensityModel>>,
        prior: Prior,
    },
    /// `log p(θ) + Σᵢ log q(xᵢ | θ)`.
    Likelihood {
        model: Arc<DensityModel>,
        prior: Prior,
        sampler: SamplerConfig,
    },
    /// `log p(θ) + Σᵢ logit(θ, xᵢ)`.
    Ratio {
        model: Arc<Classifier<f64>>,
        prior: Prior,
        sampler: SamplerConfig,
    },
}

/// Draws and, for MCMC-backed posteriors, chain diagnostics.
#[derive(Clone, Debug)]
pub struct PosteriorSamples {
    pub samples: Tensor<f64>,
    pub diagnostics: Option<ChainDiagnostics>,
}

fn single_row(x: &Tensor<f64>, want: usize) -> Result<&[f64], InferenceError> {
    if x.rows() != 1 || x.cols() != want {
        return Err(InferenceError::Invalid(format!(
            "direct posteriors condition on one observation row of width {want}, got {:?}",
            x.shape()
        )));
    }
    Ok(x.row(0))
}

impl Posterior {
    pub fn direct(model: DensityModel, prior: Prior) -> Result<Self, InferenceError> {
        if model.estimator.target_dim() != prior.dim() {
            return Err(InferenceError::Invalid(format!(
                "estimator targets {} dimensions, prior has {}",
                model.estimator.target_dim(),
                prior.dim()
            )));
        }
        Ok(Posterior::Direct {
            model: Arc::new(model),
            prior,
        })
    }

    pub fn kind(&self) -> PosteriorKind {
        match self {
            Posterior::Direct { .. } => PosteriorKind::Direct,
            Posterior::Ensemble { .. } => PosteriorKind::Ensemble,
            Posterior::Likelihood { .. } | Posterior::Ratio { .. } => PosteriorKind::Mcmc,
        }
    }

    pub fn prior(&self) -> &Prior {
        match self {
            Posterior::Direct { prior, .. }
            | Posterior::Ensemble { prior, .. }
            | Posterior::Likelihood { prior, .. }
            | Posterior::Ratio { prior, .. } => prior,
        }
    }

    /// Sampler settings of an MCMC-backed posterior.
    pub fn sampler_config(&self) -> Option<SamplerConfig> {
        match self {
            Posterior::Likelihood { sampler, .. } | Posterior::Ratio { sampler, .. } => Some(sampler.clone()),
            _ => None,
        }
    }

    /// Replace the sampler settings; direct and ensemble posteriors are
    /// returned unchanged.
    pub fn with_sampler(self, config: SamplerConfig) -> Result<Self, InferenceError> {
        config.validate()?;
        Ok(match self {
            Posterior::Likelihood { model, prior, .. } => Posterior::Likelihood {
                model,
                prior,
                sampler: config,
            },
            Posterior::Ratio { model, prior, .. } => Posterior::Ratio {
                model,
                prior,
                sampler: config,
            },
            other => other,
        })
    }

    pub fn dim(&self) -> usize {
        self.prior().dim()
    }

    /// Width of one observation row.
    pub fn x_dim(&self) -> usize {
        match self {
            Posterior::Direct { model, .. } => model.estimator.context_dim(),
            Posterior::Ensemble { members, .. } => members[0].estimator.context_dim(),
            Posterior::Likelihood { model, .. } => model.estimator.target_dim(),
            Posterior::Ratio { model, .. } => model.x_dim(),
        }
    }

    fn members(&self) -> Vec<&DensityModel> {
        match self {
            Posterior::Direct { model, .. } => vec![model],
            Posterior::Ensemble { members, .. } => members.iter().map(|m| m.as_ref()).collect(),
            _ => vec![],
        }
    }

    /// Normalized-estimator log-density of each row of `theta` at one
    /// observation; `−∞` outside the prior support. Mass the estimator puts
    /// outside the support is not renormalized.
    pub fn log_prob(&self, theta: &Tensor<f64>, x_o: &Tensor<f64>) -> Result<Vec<f64>, InferenceError> {
        let members = self.members();
        if members.is_empty() {
            return Err(InferenceError::NoDensity("MCMC-backed"));
        }
        let x = single_row(x_o, self.x_dim())?;
        let per: Vec<Vec<f64>> = members
            .iter()
            .map(|m| m.estimator.log_prob_at(theta, x))
            .collect::<Result<_, _>>()?;
        let ln_k = (per.len() as f64).ln();
        let prior = self.prior();
        Ok((0..theta.rows())
            .map(|i| {
                if !prior.in_support(theta.row(i)) {
                    return f64::NEG_INFINITY;
                }
                let lps: Vec<f64> = per.iter().map(|p| p[i]).collect();
                log_sum_exp(&lps) - ln_k
            })
            .collect())
    }

    /// Unnormalized log posterior; for direct kinds this is [`Self::log_prob`].
    pub fn log_target(&self, theta: &[f64], x_o: &Tensor<f64>) -> Result<f64, InferenceError> {
        match self {
            Posterior::Likelihood { model, prior, .. } => Ok(likelihood_target(&model.estimator, prior, theta, x_o)),
            Posterior::Ratio { model, prior, .. } => Ok(ratio_target(model, prior, theta, x_o)),
            _ => Ok(self.log_prob(&Tensor::matrix(1, theta.len(), theta.to_vec()), x_o)?[0]),
        }
    }

    /// `n` draws given the observation rows in `x_o`.
    pub fn sample(&self, x_o: &Tensor<f64>, n: usize, seed: u64) -> Result<PosteriorSamples, InferenceError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            Posterior::Direct { model, prior } => {
                let x = single_row(x_o, self.x_dim())?;
                Ok(PosteriorSamples {
                    samples: sample_in_support(&model.estimator, prior, x, n, &mut rng)?,
                    diagnostics: None,
                })
            }
            Posterior::Ensemble { members, prior } => {
                let x = single_row(x_o, self.x_dim())?;
                let mut counts = vec![0usize; members.len()];
                for _ in 0..n {
                    counts[rng.random_range(0..members.len())] += 1;
                }
                let mut parts = Vec::with_capacity(members.len());
                for (m, &c) in members.iter().zip(&counts) {
                    parts.push(sample_in_support(&m.estimator, prior, x, c, &mut rng)?);
                }
                let refs: Vec<&Tensor<f64>> = parts.iter().collect();
                let stacked = Tensor::vstack(&refs).map_err(|e| InferenceError::Invalid(e.to_string()))?;
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                Ok(PosteriorSamples {
                    samples: stacked.select_rows(&order),
                    diagnostics: None,
                })
            }
            Posterior::Likelihood { model, prior, sampler } => {
                check_observations(x_o, model.estimator.target_dim())?;
                let target = |t: &[f64]| likelihood_target(&model.estimator, prior, t, x_o);
                let (samples, diag) = slice_sample(&target, prior, sampler, seed, n)?;
                Ok(PosteriorSamples {
                    samples,
                    diagnostics: Some(diag),
                })
            }
            Posterior::Ratio { model, prior, sampler } => {
                check_observations(x_o, model.x_dim())?;
                let target = |t: &[f64]| ratio_target(model, prior, t, x_o);
                let (samples, diag) = slice_sample(&target, prior, sampler, seed, n)?;
                Ok(PosteriorSamples {
                    samples,
                    diagnostics: Some(diag),
                })
            }
        }
    }

    /// Maximum-a-posteriori estimate from `restarts` posterior-sample starts.
    pub fn map(&self, x_o: &Tensor<f64>, restarts: usize, seed: u64) -> Result<crate::samplers::MapResult, InferenceError> {
        if self.members().is_empty() {
            return Err(InferenceError::NoDensity("MAP needs a differentiable density"));
        }
        let starts = self.sample(x_o, restarts.max(1), seed)?.samples;
        let starts: Vec<Vec<f64>> = starts.iter_rows().map(<[f64]>::to_vec).collect();
        let density = PosteriorDensityAt {
            posterior: self,
            x: single_row(x_o, self.x_dim())?.to_vec(),
        };
        Ok(crate::samplers::map_estimate(&density, self.prior(), &starts)?)
    }

    /// First line: JSON header; then one estimator or classifier blob per
    /// member.
    pub fn save(&self, w: &mut impl Write) -> Result<(), InferenceError> {
        let (kind, sampler, members) = match self {
            Posterior::Direct { .. } => ("direct", None, 1),
            Posterior::Ensemble { members, .. } => ("ensemble", None, members.len()),
            Posterior::Likelihood { sampler, .. } => ("likelihood", Some(sampler.clone()), 1),
            Posterior::Ratio { sampler, .. } => ("ratio", Some(sampler.clone()), 1),
        };
        let header = PosteriorHeader {
            format: POSTERIOR_FORMAT.into(),
            kind: kind.into(),
            prior: self.prior().spec(),
            sampler,
            members,
        };
        writeln!(
            w,
            "{}",
            serde_json::to_string(&header).map_err(|e| InferenceError::Format(e.to_string()))?
        )?;
        match self {
            Posterior::Ratio { model, .. } => model.save(w)?,
            Posterior::Likelihood { model, .. } => model.estimator.save(&model.config, w)?,
            _ => {
                for m in self.members() {
                    m.estimator.save(&m.config, w)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(r: &mut impl BufRead) -> Result<Self, InferenceError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let h: PosteriorHeader = serde_json::from_str(line.trim()).map_err(|e| InferenceError::Format(e.to_string()))?;
        if h.format != POSTERIOR_FORMAT {
            return Err(InferenceError::Format(format!(
                "expected {POSTERIOR_FORMAT}, found {}",
                h.format
            )));
        }
        let prior = Prior::from_spec(&h.prior).map_err(|e| InferenceError::Format(e.to_string()))?;
        let load_model = |mut r: &mut dyn BufRead| -> Result<DensityModel, InferenceError> {
            let (estimator, config) = Estimator::load(&mut r)?;
            Ok(DensityModel { estimator, config })
        };
        let sampler = || {
            h.sampler
                .clone()
                .ok_or_else(|| InferenceError::Format("missing sampler config".into()))
        };
        match h.kind.as_str() {
            "direct" => Posterior::direct(load_model(r)?, prior),
            "ensemble" => {
                let members = (0..h.members).map(|_| load_model(r)).collect::<Result<Vec<_>, _>>()?;
                ensemble(
                    members
                        .into_iter()
                        .map(|m| Posterior::direct(m, prior.clone()))
                        .collect::<Result<Vec<_>, _>>()?,
                )
            }
            "likelihood" => nle_posterior(load_model(r)?, prior, sampler()?),
            "ratio" => nre_posterior(Classifier::load(r)?, prior, sampler()?),
            other => Err(InferenceError::Format(format!("unknown posterior kind {other}"))),
        }
    }
}

const POSTERIOR_FORMAT: &str = "sbi-posterior v1";

#[derive(Serialize, Deserialize)]
struct PosteriorHeader {
    format: String,
    kind: String,
    prior: PriorSpec,
    sampler: Option<SamplerConfig>,
    members: usize,
}

fn check_observations(x_o: &Tensor<f64>, width: usize) -> Result<(), InferenceError> {
    if x_o.rows() == 0 || x_o.cols() != width {
        return Err(InferenceError::Invalid(format!(
            "expected at least one observation row of width {width}, got {:?}",
            x_o.shape()
        )));
    }
    Ok(())
}

fn likelihood_target(est: &Estimator<f64>, prior: &Prior, theta: &[f64], x_o: &Tensor<f64>) -> f64 {
    let lp = match prior.log_prob(theta) {
        Ok(v) if v.is_finite() => v,
        _ => return f64::NEG_INFINITY,
    };
    match est.log_prob(x_o, &repeat_row(theta, x_o.rows())) {
        Ok(v) => lp + v.iter().sum::<f64>(),
        Err(_) => f64::NEG_INFINITY,
    }
}

fn ratio_target(clf: &Classifier<f64>, prior: &Prior, theta: &[f64], x_o: &Tensor<f64>) -> f64 {
    let lp = match prior.log_prob(theta) {
        Ok(v) if v.is_finite() => v,
        _ => return f64::NEG_INFINITY,
    };
    match clf.logits(&repeat_row(theta, x_o.rows()), x_o) {
        Ok(v) => lp + v.iter().sum::<f64>(),
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Draws from `q(θ | x)` with those outside the prior support rejected.
fn sample_in_support(
    est: &Estimator<f64>,
    prior: &Prior,
    x: &[f64],
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<Tensor<f64>, InferenceError> {
    let dim = est.target_dim();
    let mut kept = Vec::with_capacity(n * dim);
    let (mut accepted, mut attempts) = (0, 0);
    while accepted < n {
        let want = (n - accepted).max(16);
        let batch = est.sample(x, want, rng)?;
        attempts += want;
        for r in batch.iter_rows() {
            if accepted < n && prior.in_support(r) && r.iter().all(|v| v.is_finite()) {
                kept.extend_from_slice(r);
                accepted += 1;
            }
        }
        if attempts >= 10_000 && (accepted as f64) < 1e-3 * attempts as f64 {
            return Err(InferenceError::LowAcceptance {
                what: "posterior estimate",
                accepted,
                attempts,
            });
        }
    }
    Ok(Tensor::matrix(n, dim, kept))
}

/// Gradient access to a direct or ensemble posterior at one observation.
pub struct PosteriorDensityAt<'a> {
    pub posterior: &'a Posterior,
    pub x: Vec<f64>,
}

impl DifferentiableDensity for PosteriorDensityAt<'_> {
    fn dim(&self) -> usize {
        self.posterior.dim()
    }

    fn log_density_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>), SamplerError> {
        let members = self.posterior.members();
        let mut lps = Vec::with_capacity(members.len());
        let mut grads = Vec::with_capacity(members.len());
        for m in members {
            let mut tape = Tape::new();
            let t = tape.watch(Tensor::matrix(1, theta.len(), theta.to_vec()));
            let c = tape.constant(Tensor::matrix(1, self.x.len(), self.x.clone()));
            let lp = m
                .estimator
                .log_prob_tape(&mut tape, t, c)
                .map_err(|e| SamplerError::Density(e.to_string()))?;
            let s = tape.sum(lp);
            let g = tape.backward(s).map_err(|e| SamplerError::Density(e.to_string()))?;
            lps.push(tape.value(s).item());
            grads.push(g.wrt(t).map_or_else(|| vec![0.0; theta.len()], |g| g.data().to_vec()));
        }
        let total = log_sum_exp(&lps);
        let mut grad = vec![0.0; theta.len()];
        for (lp, g) in lps.iter().zip(&grads) {
            let w = (lp - total).exp();
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += w * gi;
            }
        }
        Ok((total - (lps.len() as f64).ln(), grad))
    }
}

fn check_dataset(ds: &Dataset, min_rows: usize) -> Result<(), InferenceError> {
    if ds.len() < min_rows {
        return Err(InferenceError::Invalid(format!(
            "need at least {min_rows} rows, dataset has {}",
            ds.len()
        )));
    }
    Ok(())
}

/// Train `q(θ | x)` on the dataset with the mean negative log-density loss.
pub fn npe_fit(
    ds: &Dataset,
    prior: &Prior,
    est_cfg: &EstimatorConfig,
    train_cfg: &TrainConfig,
) -> Result<(Posterior, TrainReport), InferenceError> {
    check_dataset(ds, 10)?;
    if ds.theta_dim() != prior.dim() {
        return Err(InferenceError::Invalid(format!(
            "dataset θ has {} columns, prior has {} dimensions",
            ds.theta_dim(),
            prior.dim()
        )));
    }
    let (model, report) = fit_density(&ds.theta, &ds.x, est_cfg, train_cfg)?;
    Ok((Posterior::direct(model, prior.clone())?, report))
}

fn fit_density(
    targets: &Tensor<f64>,
    contexts: &Tensor<f64>,
    est_cfg: &EstimatorConfig,
    train_cfg: &TrainConfig,
) -> Result<(DensityModel, TrainReport), InferenceError> {
    let mut est = Estimator::fit_standardized(est_cfg, targets, contexts, train_cfg.seed)?;
    let report = fit(&mut est, targets, contexts, LossKind::NegLogDensity, train_cfg)?;
    Ok((
        DensityModel {
            estimator: est,
            config: est_cfg.clone(),
        },
        report,
    ))
}

/// Train `q(x | θ)`; the mixed estimator handles `[choice, rt]` outputs.
pub fn nle_fit(
    ds: &Dataset,
    est_cfg: &EstimatorConfig,
    train_cfg: &TrainConfig,
) -> Result<(DensityModel, TrainReport), InferenceError> {
    check_dataset(ds, 10)?;
    fit_density(&ds.x, &ds.theta, est_cfg, train_cfg)
}

pub fn nle_posterior(model: DensityModel, prior: Prior, sampler: SamplerConfig) -> Result<Posterior, InferenceError> {
    if model.estimator.context_dim() != prior.dim() {
        return Err(InferenceError::Invalid(format!(
            "likelihood conditions on {} parameters, prior has {}",
            model.estimator.context_dim(),
            prior.dim()
        )));
    }
    sampler.validate()?;
    Ok(Posterior::Likelihood {
        model: Arc::new(model),
        prior,
        sampler,
    })
}

/// Train a classifier on matched against cyclically shifted `(θ, x)` pairs.
pub fn nre_fit(
    ds: &Dataset,
    clf_cfg: &ClassifierConfig,
    train_cfg: &TrainConfig,
) -> Result<(Classifier<f64>, TrainReport), InferenceError> {
    check_dataset(ds, 2 * train_cfg.batch_size)?;
    let mut clf = Classifier::for_data(clf_cfg, &ds.theta, &ds.x, train_cfg.seed);
    let report = fit(&mut clf, &ds.theta, &ds.x, LossKind::BinaryCrossEntropy, train_cfg)?;
    Ok((clf, report))
}

pub fn nre_posterior(model: Classifier<f64>, prior: Prior, sampler: SamplerConfig) -> Result<Posterior, InferenceError> {
    if model.theta_dim() != prior.dim() {
        return Err(InferenceError::Invalid(format!(
            "classifier takes {} parameters, prior has {}",
            model.theta_dim(),
            prior.dim()
        )));
    }
    sampler.validate()?;
    Ok(Posterior::Ratio {
        model: Arc::new(model),
        prior,
        sampler,
    })
}

/// Uniform-weight mixture of direct posteriors.
pub fn ensemble(members: Vec<Posterior>) -> Result<Posterior, InferenceError> {
    if members.len() < 2 {
        return Err(InferenceError::Invalid("an ensemble needs at least two members".into()));
    }
    let prior = members[0].prior().clone();
    let x_dim = members[0].x_dim();
    let mut models = Vec::with_capacity(members.len());
    for m in members {
        match m {
            Posterior::Direct { model, prior: p } => {
                if p != prior || model.estimator.context_dim() != x_dim {
                    return Err(InferenceError::Invalid(
                        "ensemble members differ in prior or observation width".into(),
                    ));
                }
                models.push(model);
            }
            _ => return Err(InferenceError::Invalid("ensemble members must be direct posteriors".into())),
        }
    }
    Ok(Posterior::Ensemble { members: models, prior })
}

/// `k` NPE fits differing only in seed, trained concurrently.
pub fn npe_ensemble_fit(
    ds: &Dataset,
    prior: &Prior,
    est_cfg: &EstimatorConfig,
    train_cfg: &TrainConfig,
    k: usize,
) -> Result<(Posterior, Vec<TrainReport>), InferenceError> {
    let fits: Vec<Result<(Posterior, TrainReport), InferenceError>> = (0..k as u64)
        .into_par_iter()
        .map(|i| {
            let cfg = TrainConfig {
                seed: train_cfg.seed.wrapping_add(i),
                ..train_cfg.clone()
            };
            npe_fit(ds, prior, est_cfg, &cfg)
        })
        .collect();
    let mut posts = Vec::with_capacity(k);
    let mut reports = Vec::with_capacity(k);
    for f in fits {
        let (p, r) = f?;
        posts.push(p);
        reports.push(r);
    }
    Ok((ensemble(posts)?, reports))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruncationConfig {
    /// Posterior mass excluded from the highest-density region.
    pub epsilon: f64,
    /// Posterior draws used to place the density cutoff.
    pub reference_samples: usize,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            reference_samples: 10_000,
        }
    }
}

/// Approximate `(1 − ε)` highest-density set of a direct posterior at `x_o`.
#[derive(Clone, Debug)]
pub struct TruncationRegion {
    posterior: Posterior,
    x_o: Tensor<f64>,
    cutoff: f64,
}

impl TruncationRegion {
    pub fn new(posterior: &Posterior, x_o: &Tensor<f64>, cfg: &TruncationConfig, seed: u64) -> Result<Self, InferenceError> {
        if posterior.kind() == PosteriorKind::Mcmc {
            return Err(InferenceError::NoDensity("truncation needs a direct posterior"));
        }
        let cutoff = if cfg.epsilon <= 0.0 {
            f64::NEG_INFINITY
        } else {
            let s = posterior.sample(x_o, cfg.reference_samples, seed)?.samples;
            let mut lp = posterior.log_prob(&s, x_o)?;
            lp.sort_by(f64::total_cmp);
            let k = ((cfg.epsilon * lp.len() as f64).floor() as usize).min(lp.len() - 1);
            lp[k]
        };
        Ok(Self {
            posterior: posterior.clone(),
            x_o: x_o.clone(),
            cutoff,
        })
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// Membership of each row of `theta`; points outside the prior support
    /// are never members.
    pub fn contains(&self, theta: &Tensor<f64>) -> Result<Vec<bool>, InferenceError> {
        let prior = self.posterior.prior();
        if self.cutoff == f64::NEG_INFINITY {
            return Ok(theta.iter_rows().map(|r| prior.in_support(r)).collect());
        }
        Ok(self
            .posterior
            .log_prob(theta, &self.x_o)?
            .into_iter()
            .map(|lp| lp >= self.cutoff)
            .collect())
    }

    /// `n` prior draws restricted to the region by rejection.
    pub fn sample_prior(&self, n: usize, rng: &mut dyn RngCore) -> Result<Tensor<f64>, InferenceError> {
        let prior = self.posterior.prior();
        let dim = prior.dim();
        let mut kept = Vec::with_capacity(n * dim);
        let (mut accepted, mut attempts) = (0, 0);
        while accepted < n {
            let batch = prior.sample_n(rng, 4096);
            attempts += batch.rows();
            for (r, inside) in batch.iter_rows().zip(self.contains(&batch)?) {
                if inside && accepted < n {
                    kept.extend_from_slice(r);
                    accepted += 1;
                }
            }
            if attempts >= 100_000 && (accepted as f64) < 1e-3 * attempts as f64 {
                return Err(InferenceError::LowAcceptance {
                    what: "truncation region",
                    accepted,
                    attempts,
                });
            }
        }
        Ok(Tensor::matrix(n, dim, kept))
    }
}

/// Output of one truncated sequential NPE round.
#[derive(Debug)]
pub struct TsnpeRound {
    pub posterior: Posterior,
    /// All simulations so far, earlier rounds first.
    pub dataset: Dataset,
    /// Parameters drawn in this round.
    pub new_theta: Tensor<f64>,
    pub report: TrainReport,
}

/// Simulate `n_new` parameters from the prior truncated to the current
/// posterior's high-density region at `x_o` and retrain on all data.
#[allow(clippy::too_many_arguments)]
pub fn tsnpe_round(
    current: &Posterior,
    accumulated: &Dataset,
    simulator: &dyn Simulator,
    x_o: &Tensor<f64>,
    n_new: usize,
    est_cfg: &EstimatorConfig,
    train_cfg: &TrainConfig,
    trunc: &TruncationConfig,
    seed: u64,
) -> Result<TsnpeRound, InferenceError> {
    if current.kind() != PosteriorKind::Direct {
        return Err(InferenceError::Invalid("TSNPE rounds start from a direct posterior".into()));
    }
    let region = TruncationRegion::new(current, x_o, trunc, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5e);
    let theta = region.sample_prior(n_new, &mut rng)?;
    let fresh = simulate_fixed(&theta, simulator, seed)?;
    let dataset = accumulated.append(&fresh)?;
    let (posterior, report) = npe_fit(&dataset, current.prior(), est_cfg, train_cfg)?;
    Ok(TsnpeRound {
        posterior,
        dataset,
        new_theta: theta,
        report,
    })
}

/// Simulate every row of `theta`, dropping rows with non-finite output.
fn simulate_fixed(theta: &Tensor<f64>, simulator: &dyn Simulator, seed: u64) -> Result<Dataset, InferenceError> {
    let x = simulate_batch(simulator, theta, seed, default_workers())?;
    let keep: Vec<usize> = (0..x.rows()).filter(|&i| x.row(i).iter().all(|v| v.is_finite())).collect();
    Ok(Dataset::from_parts(theta.select_rows(&keep), x.select_rows(&keep))?)
}

/// Prior simulations followed by `rounds − 1` truncated rounds, each with
/// `per_round` simulations.
#[allow(clippy::too_many_arguments)]
pub fn tsnpe(
    prior: &Prior,
    simulator: &dyn Simulator,
    x_o: &Tensor<f64>,
    rounds: usize,
    per_round: usize,
    est_cfg: &EstimatorConfig,
    train_cfg: &TrainConfig,
    trunc: &TruncationConfig,
    seed: u64,
) -> Result<Vec<TsnpeRound>, InferenceError> {
    if rounds == 0 {
        return Err(InferenceError::Invalid("TSNPE needs at least one round".into()));
    }
    let ds = generate_dataset(prior, simulator, per_round, seed, &GenerateOptions::default())?;
    let (posterior, report) = npe_fit(&ds, prior, est_cfg, train_cfg)?;
    let mut out = vec![TsnpeRound {
        posterior,
        new_theta: ds.theta.clone(),
        dataset: ds,
        report,
    }];
    for r in 1..rounds {
        let last = out.last().unwrap();
        let next = tsnpe_round(
            &last.posterior,
            &last.dataset,
            simulator,
            x_o,
            per_round,
            est_cfg,
            &TrainConfig {
                seed: train_cfg.seed.wrapping_add(r as u64),
                ..train_cfg.clone()
            },
            trunc,
            seed.wrapping_add(r as u64),
        )?;
        out.push(next);
    }
    Ok(out)
}
