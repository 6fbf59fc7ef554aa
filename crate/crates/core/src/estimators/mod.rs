//! Conditional density estimators and the ratio classifier.
//!
//! Every estimator models `q(target | context)`: for posterior estimation
//! the target is `θ` and the context `x`, for likelihood estimation the
//! roles swap. Targets and contexts are z-scored with training statistics
//! stored inside the model, and densities are reported in original
//! coordinates.

mod classifier;
mod flow;
mod mdn;
mod mixed;
mod mlp;

pub use classifier::{Classifier, ClassifierConfig};
pub use flow::{Flow, LOG_SCALE_CLAMP};
pub use mdn::Mdn;
pub use mixed::MixedEstimator;
pub use mlp::{Activation, ContextNet, Mlp, OutputInit, Standardizer};

use std::io::{BufRead, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::DistError;
use crate::ndiff::{NdiffError, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

pub(crate) use mlp::repeat_row;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
    #[error(transparent)]
    Distribution(#[from] DistError),
    #[error("invalid estimator configuration: {0}")]
    Config(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    Mdn,
    Flow,
    Mixed,
}

/// Learned feature map applied to the context before the estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Mixture components (MDN, and the RT head of the mixed estimator).
    pub components: usize,
    /// Coupling layers (flow).
    pub layers: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub embedding: Option<EmbeddingConfig>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            kind: EstimatorKind::Mdn,
            components: 10,
            layers: 5,
            hidden: vec![50, 50],
            activation: Activation::Tanh,
            embedding: None,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: &str| Err(EstimatorError::Config(m.into()));
        if self.components == 0 {
            return bad("components must be ≥ 1");
        }
        if self.layers == 0 {
            return bad("layers must be ≥ 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be ≥ 1");
        }
        if let Some(e) = &self.embedding {
            if e.output_dim == 0 || e.hidden.contains(&0) {
                return bad("embedding widths must be ≥ 1");
            }
            if self.kind == EstimatorKind::Mixed {
                return bad("the mixed estimator does not take an embedding network");
            }
        }
        Ok(())
    }
}

/// A trained or untrained conditional density estimator with its parameters.
#[derive(Clone, Debug)]
pub enum Estimator<T: Scalar> {
    Mdn(Mdn, ParamStore<T>),
    Flow(Flow, ParamStore<T>),
    Mixed(MixedEstimator, ParamStore<T>),
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: EstimatorConfig,
    target_dim: usize,
    context_dim: usize,
    standardizers: Vec<Standardizer>,
}

const FORMAT: &str = "sbi-estimator v1";

impl<T: Scalar> Estimator<T> {
    /// Identity standardization; mostly for tests and constructed models.
    pub fn untrained(cfg: &EstimatorConfig, target_dim: usize, context_dim: usize, seed: u64) -> Result<Self, EstimatorError> {
        let stds = match cfg.kind {
            EstimatorKind::Mixed => vec![
                Standardizer::identity(1),
                Standardizer::identity(context_dim),
                Standardizer::identity(context_dim + 1),
            ],
            _ => vec![Standardizer::identity(target_dim), Standardizer::identity(context_dim)],
        };
        Self::build(cfg, target_dim, context_dim, stds, seed)
    }

    /// Standardization statistics taken from the training pairs.
    pub fn fit_standardized(
        cfg: &EstimatorConfig,
        targets: &Tensor<T>,
        contexts: &Tensor<T>,
        seed: u64,
    ) -> Result<Self, EstimatorError> {
        let stds = match cfg.kind {
            EstimatorKind::Mixed => {
                if targets.cols() != 2 {
                    return Err(EstimatorError::Config(
                        "the mixed estimator needs [choice, rt] targets".into(),
                    ));
                }
                let log_rt = Tensor::matrix(
                    targets.rows(),
                    1,
                    targets.column(1).iter().map(|&r| r.max(T::c(1e-300)).ln()).collect(),
                );
                let choice = Tensor::matrix(targets.rows(), 1, targets.column(0));
                let joint = Tensor::hstack(&[contexts, &choice])?;
                vec![
                    Standardizer::fit(&log_rt),
                    Standardizer::fit(contexts),
                    Standardizer::fit(&joint),
                ]
            }
            _ => vec![Standardizer::fit(targets), Standardizer::fit(contexts)],
        };
        Self::build(cfg, targets.cols(), contexts.cols(), stds, seed)
    }

    fn build(
        cfg: &EstimatorConfig,
        target_dim: usize,
        context_dim: usize,
        mut stds: Vec<Standardizer>,
        seed: u64,
    ) -> Result<Self, EstimatorError> {
        cfg.validate()?;
        if target_dim == 0 {
            return Err(EstimatorError::Config("target dimension must be ≥ 1".into()));
        }
        let consistent = match cfg.kind {
            EstimatorKind::Mixed => stds.len() == 3 && stds[1].dim() == context_dim && stds[2].dim() == context_dim + 1,
            _ => stds.len() == 2 && stds[0].dim() == target_dim && stds[1].dim() == context_dim,
        };
        if !consistent {
            return Err(EstimatorError::Format(
                "standardization does not match the declared dimensions".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, std: Standardizer| {
            let embedding = cfg.embedding.as_ref().filter(|_| std.dim() > 0).map(|e| {
                let mut sizes = vec![std.dim()];
                sizes.extend_from_slice(&e.hidden);
                sizes.push(e.output_dim);
                Mlp::new(store, "embedding", &sizes, cfg.activation, OutputInit::Glorot, rng)
            });
            ContextNet {
                standardizer: std,
                embedding,
            }
        };
        Ok(match cfg.kind {
            EstimatorKind::Mdn => {
                let ctx_std = stds.pop().unwrap();
                let tgt_std = stds.pop().unwrap();
                let context = embed(&mut store, &mut rng, ctx_std);
                let m = Mdn::new(
                    &mut store,
                    "mdn",
                    tgt_std,
                    context,
                    cfg.components,
                    &cfg.hidden,
                    cfg.activation,
                    &mut rng,
                );
                Estimator::Mdn(m, store)
            }
            EstimatorKind::Flow => {
                let ctx_std = stds.pop().unwrap();
                let tgt_std = stds.pop().unwrap();
                let context = embed(&mut store, &mut rng, ctx_std);
                let f = Flow::new(
                    &mut store,
                    "flow",
                    tgt_std,
                    context,
                    cfg.layers,
                    &cfg.hidden,
                    cfg.activation,
                    &mut rng,
                );
                Estimator::Flow(f, store)
            }
            EstimatorKind::Mixed => {
                if target_dim != 2 {
                    return Err(EstimatorError::Config(
                        "the mixed estimator needs [choice, rt] targets".into(),
                    ));
                }
                let joint_std = stds.pop().unwrap();
                let theta_std = stds.pop().unwrap();
                let rt_std = stds.pop().unwrap();
                let rt = Mdn::new(
                    &mut store,
                    "rt",
                    rt_std,
                    ContextNet {
                        standardizer: joint_std,
                        embedding: None,
                    },
                    cfg.components,
                    &cfg.hidden,
                    cfg.activation,
                    &mut rng,
                );
                let m = MixedEstimator::new(&mut store, theta_std, rt, &cfg.hidden, cfg.activation, &mut rng);
                Estimator::Mixed(m, store)
            }
        })
    }

    pub fn kind(&self) -> EstimatorKind {
        match self {
            Estimator::Mdn(..) => EstimatorKind::Mdn,
            Estimator::Flow(..) => EstimatorKind::Flow,
            Estimator::Mixed(..) => EstimatorKind::Mixed,
        }
    }

    pub fn target_dim(&self) -> usize {
        match self {
            Estimator::Mdn(m, _) => m.target_dim,
            Estimator::Flow(f, _) => f.target_dim,
            Estimator::Mixed(..) => 2,
        }
    }

    pub fn context_dim(&self) -> usize {
        match self {
            Estimator::Mdn(m, _) => m.context.standardizer.dim(),
            Estimator::Flow(f, _) => f.context.standardizer.dim(),
            Estimator::Mixed(m, _) => m.theta_std.dim(),
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        match self {
            Estimator::Mdn(_, s) | Estimator::Flow(_, s) | Estimator::Mixed(_, s) => s,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Estimator::Mdn(_, s) | Estimator::Flow(_, s) | Estimator::Mixed(_, s) => s,
        }
    }

    /// `B×1` log-densities recorded on `tape`, differentiable in the
    /// parameters and in `target`.
    pub fn log_prob_tape(&self, tape: &mut Tape<T>, target: Var, context: Var) -> Result<Var, NdiffError> {
        match self {
            Estimator::Mdn(m, s) => m.log_prob_tape(tape, s, target, context),
            Estimator::Flow(f, s) => f.log_prob_tape(tape, s, target, context),
            Estimator::Mixed(m, s) => m.log_prob_tape(tape, s, target, context),
        }
    }

    fn check_dims(&self, targets: &Tensor<T>, contexts: &Tensor<T>) -> Result<(), EstimatorError> {
        if targets.cols() != self.target_dim() || contexts.cols() != self.context_dim() || targets.rows() != contexts.rows() {
            return Err(EstimatorError::Config(format!(
                "expected targets n×{} and contexts n×{}, got {:?} and {:?}",
                self.target_dim(),
                self.context_dim(),
                targets.shape(),
                contexts.shape()
            )));
        }
        Ok(())
    }

    /// Row-wise log-densities. For the mixed estimator, rows with a
    /// non-positive reaction time get `-inf`.
    pub fn log_prob(&self, targets: &Tensor<T>, contexts: &Tensor<T>) -> Result<Vec<T>, EstimatorError> {
        self.check_dims(targets, contexts)?;
        let mut targets = targets.clone();
        let mut invalid = vec![false; targets.rows()];
        if let Estimator::Mixed(..) = self {
            for (i, bad) in invalid.iter_mut().enumerate() {
                let r = targets.row_mut(i);
                if !(r[1] > T::zero()) {
                    *bad = true;
                    r[1] = T::one();
                }
            }
        }
        let mut tape = Tape::new();
        let t = tape.constant(targets);
        let c = tape.constant(contexts.clone());
        let lp = self.log_prob_tape(&mut tape, t, c)?;
        Ok(tape
            .value(lp)
            .data()
            .iter()
            .zip(invalid)
            .map(|(&v, bad)| if bad || v.is_nan() { T::neg_infinity() } else { v })
            .collect())
    }

    /// Log-densities of many targets under one context row.
    pub fn log_prob_at(&self, targets: &Tensor<T>, context: &[T]) -> Result<Vec<T>, EstimatorError> {
        self.log_prob(targets, &repeat_row(context, targets.rows()))
    }

    /// `n` draws from `q(· | context)`.
    pub fn sample(&self, context: &[T], n: usize, rng: &mut dyn RngCore) -> Result<Tensor<T>, EstimatorError> {
        if context.len() != self.context_dim() {
            return Err(EstimatorError::Config(format!(
                "context has {} entries, estimator expects {}",
                context.len(),
                self.context_dim()
            )));
        }
        match self {
            Estimator::Mdn(m, s) => m.sample(s, context, n, rng),
            Estimator::Flow(f, s) => f.sample(s, context, n, rng),
            Estimator::Mixed(m, s) => m.sample(s, context, n, rng),
        }
    }

    fn standardizers(&self) -> Vec<Standardizer> {
        match self {
            Estimator::Mdn(m, _) => vec![m.target_std.clone(), m.context.standardizer.clone()],
            Estimator::Flow(f, _) => vec![f.target_std.clone(), f.context.standardizer.clone()],
            Estimator::Mixed(m, _) => vec![
                m.rt.target_std.clone(),
                m.theta_std.clone(),
                m.rt.context.standardizer.clone(),
            ],
        }
    }

    /// One JSON manifest line (architecture and standardization) followed by
    /// the parameter blob.
    pub fn save(&self, cfg: &EstimatorConfig, w: &mut impl Write) -> Result<(), EstimatorError> {
        let m = Manifest {
            format: FORMAT.into(),
            config: cfg.clone(),
            target_dim: self.target_dim(),
            context_dim: self.context_dim(),
            standardizers: self.standardizers(),
        };
        writeln!(
            w,
            "{}",
            serde_json::to_string(&m).map_err(|e| EstimatorError::Format(e.to_string()))?
        )?;
        self.params().write_to(w)?;
        Ok(())
    }

    pub fn load(r: &mut impl BufRead) -> Result<(Self, EstimatorConfig), EstimatorError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let m: Manifest = serde_json::from_str(line.trim()).map_err(|e| EstimatorError::Format(e.to_string()))?;
        if m.format != FORMAT {
            return Err(EstimatorError::Format(format!("expected {FORMAT}, found {}", m.format)));
        }
        let mut est = Self::build(&m.config, m.target_dim, m.context_dim, m.standardizers, 0)?;
        let stored = ParamStore::read_from(r)?;
        est.params_mut().load_values(&stored)?;
        Ok((est, m.config))
    }
}
