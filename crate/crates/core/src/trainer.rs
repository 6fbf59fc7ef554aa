//! Train/validation splitting, minibatch Adam, epoch-level early stopping
//! and best-checkpoint restoration.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{Classifier, Estimator, EstimatorError};
use crate::ndiff::{AdamConfig, NdiffError, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {message}; parameters restored to the best checkpoint (epoch {best_epoch:?})")]
    Diverged {
        epoch: usize,
        best_epoch: Option<usize>,
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 200,
            learning_rate: 5e-4,
            validation_fraction: 0.1,
            patience: 20,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return Err(TrainError::Config(format!(
                "validation fraction {} must lie in (0, 0.5)",
                self.validation_fraction
            )));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config("patience, batch size and max epochs must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean of `−log q(a | b)`.
    NegLogDensity,
    /// Matched `(θ, x)` pairs against cyclically shifted pairs.
    BinaryCrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// Tab-separated per-epoch loss table.
    pub fn to_table(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_loss\n");
        for r in &self.epochs {
            writeln!(s, "{}\t{:.10e}\t{:.10e}", r.epoch, r.train_loss, r.val_loss).unwrap();
        }
        writeln!(s, "# best_epoch {}", self.best_epoch).unwrap();
        writeln!(s, "# best_val_loss {:.10e}", self.best_val_loss).unwrap();
        writeln!(s, "# stopped_early {}", self.stopped_early).unwrap();
        s
    }
}

/// A model the trainer can optimize.
pub trait Trainable<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;

    fn params_mut(&mut self) -> &mut ParamStore<T>;

    /// Scalar loss over the paired rows of `a` and `b`.
    fn loss(&self, tape: &mut Tape<T>, kind: LossKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Var, TrainError>;
}

impl<T: Scalar> Trainable<T> for Estimator<T> {
    fn params(&self) -> &ParamStore<T> {
        Estimator::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        Estimator::params_mut(self)
    }

    fn loss(&self, tape: &mut Tape<T>, kind: LossKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Var, TrainError> {
        if kind != LossKind::NegLogDensity {
            return Err(TrainError::Config(
                "density estimators train on the negative log-density".into(),
            ));
        }
        let t = tape.constant(a.clone());
        let c = tape.constant(b.clone());
        let lp = self.log_prob_tape(tape, t, c)?;
        let m = tape.mean(lp);
        Ok(tape.negate(m))
    }
}

/// Row `i` of the result is row `(i + 1) mod n` of `t`.
pub fn cyclic_shift<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let n = t.rows();
    let idx: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
    t.select_rows(&idx)
}

impl<T: Scalar> Trainable<T> for Classifier<T> {
    fn params(&self) -> &ParamStore<T> {
        Classifier::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        Classifier::params_mut(self)
    }

    fn loss(&self, tape: &mut Tape<T>, kind: LossKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Var, TrainError> {
        if kind != LossKind::BinaryCrossEntropy {
            return Err(TrainError::Config("the classifier trains on binary cross-entropy".into()));
        }
        if a.rows() < 2 {
            return Err(TrainError::Config("contrastive batches need at least two rows".into()));
        }
        // class 1: (θᵢ, xᵢ); class 0: (θ_{i+1}, xᵢ), exactly balanced
        let th = tape.constant(a.clone());
        let shifted = tape.constant(cyclic_shift(a));
        let x = tape.constant(b.clone());
        let pos = self.logit_tape(tape, th, x)?;
        let neg = self.logit_tape(tape, shifted, x)?;
        let npos = tape.negate(pos);
        let lpos = tape.softplus(npos);
        let lneg = tape.softplus(neg);
        let both = tape.concat(&[lpos, lneg], 0)?;
        Ok(tape.mean(both))
    }
}

/// Deterministic shuffled split of `n` row indices into `(train, validation)`.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if n < 10 {
        return Err(TrainError::Config(format!("need at least 10 rows to split, got {n}")));
    }
    let n_val = (validation_fraction * n as f64).round() as usize;
    if n_val < 2 {
        return Err(TrainError::Config(format!(
            "validation fraction {validation_fraction} leaves {n_val} validation rows; need at least 2"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

/// Split the paired rows, then train.
pub fn fit<T: Scalar, M: Trainable<T>>(
    model: &mut M,
    a: &Tensor<T>,
    b: &Tensor<T>,
    kind: LossKind,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if a.rows() != b.rows() {
        return Err(TrainError::Config(format!("{} rows paired with {} rows", a.rows(), b.rows())));
    }
    let (tr, va) = split_indices(a.rows(), cfg.validation_fraction, cfg.seed)?;
    fit_split(
        model,
        (&a.select_rows(&tr), &b.select_rows(&tr)),
        (&a.select_rows(&va), &b.select_rows(&va)),
        kind,
        cfg,
    )
}

fn full_loss<T: Scalar, M: Trainable<T>>(model: &M, kind: LossKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let l = model.loss(&mut tape, kind, a, b)?;
    Ok(tape.value(l).item().f64())
}

/// Train on an explicit split. On return the parameters are those of the
/// epoch with the lowest validation loss.
pub fn fit_split<T: Scalar, M: Trainable<T>>(
    model: &mut M,
    train: (&Tensor<T>, &Tensor<T>),
    val: (&Tensor<T>, &Tensor<T>),
    kind: LossKind,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let start = Instant::now();
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let n = train.0.rows();
    let min_batch = if kind == LossKind::BinaryCrossEntropy { 2 } else { 1 };
    if n < min_batch {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor<T>>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let a = train.0.select_rows(chunk);
            let b = train.1.select_rows(chunk);
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, kind, &a, &b)?;
            let lv = tape.value(loss).item().f64();
            let step = if lv.is_finite() {
                let grads = tape.backward(loss)?.for_store(model.params());
                model.params_mut().adam_step(&grads, &adam).map_err(|e| e.to_string())
            } else {
                Err(format!("non-finite training loss {lv}"))
            };
            if let Err(message) = step {
                return Err(diverged(model, &best, epoch, message));
            }
            sum += lv * chunk.len() as f64;
            count += chunk.len();
        }
        let val_loss = full_loss(model, kind, val.0, val.1)?;
        if !val_loss.is_finite() {
            return Err(diverged(
                model,
                &best,
                epoch,
                format!("non-finite validation loss {val_loss}"),
            ));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: sum / count.max(1) as f64,
            val_loss,
        });
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((epoch, val_loss, model.params().snapshot()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_loss, snap) = best.expect("at least one epoch ran");
    model.params_mut().restore(&snap);
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_loss,
        stopped_early,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

fn diverged<T: Scalar, M: Trainable<T>>(
    model: &mut M,
    best: &Option<(usize, f64, Vec<Tensor<T>>)>,
    epoch: usize,
    message: String,
) -> TrainError {
    if let Some((_, _, snap)) = best {
        model.params_mut().restore(snap);
    }
    TrainError::Diverged {
        epoch,
        best_epoch: best.as_ref().map(|b| b.0),
        message,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{EstimatorConfig, EstimatorKind};
    use crate::ndiff::ParamId;

    /// One scalar parameter `p`; the loss is `−min(p, cap)`, so its gradient
    /// is a constant −1 until `p` reaches `cap` and zero afterwards.
    struct Plateau {
        store: ParamStore<f64>,
        p: ParamId,
        cap: f64,
    }

    impl Trainable<f64> for Plateau {
        fn params(&self) -> &ParamStore<f64> {
            &self.store
        }
        fn params_mut(&mut self) -> &mut ParamStore<f64> {
            &mut self.store
        }
        fn loss(&self, tape: &mut Tape<f64>, _: LossKind, _: &Tensor<f64>, _: &Tensor<f64>) -> Result<Var, TrainError> {
            let p = tape.param(&self.store, self.p);
            let cap = tape.constant(Tensor::matrix(1, 1, vec![self.cap]));
            let gap = tape.sub(cap, p)?;
            let r = tape.relu(gap);
            let min = tape.sub(cap, r)?;
            let s = tape.sum(min);
            Ok(tape.negate(s))
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let (tr, va) = split_indices(100, 0.1, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (90, 10));
        assert_eq!(split_indices(100, 0.1, 3).unwrap(), (tr.clone(), va.clone()));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(split_indices(9, 0.3, 0).is_err());
        assert!(split_indices(10, 0.1, 0).is_err());
    }

    #[test]
    fn split_rows_recombine_exactly() {
        let a = Tensor::matrix(30, 2, (0..60).map(|v| v as f64 * 0.37).collect());
        let (tr, va) = split_indices(30, 0.2, 9).unwrap();
        let mut rows: Vec<Vec<f64>> = tr.iter().chain(&va).map(|&i| a.row(i).to_vec()).collect();
        rows.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let orig: Vec<Vec<f64>> = a.iter_rows().map(|r| r.to_vec()).collect();
        assert_eq!(rows, orig);
    }

    #[test]
    fn plateau_stops_after_patience_and_restores_best() {
        // 20 training rows, batch 10: two Adam steps per epoch, each moving p by lr
        let lr = 0.01;
        let steps_per_epoch = 2.0;
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::matrix(1, 1, vec![0.0]));
        let mut model = Plateau {
            store,
            p,
            // reached during epoch 5 (0-based), flat afterwards
            cap: 5.9 * steps_per_epoch * lr,
        };
        let a = Tensor::zeros(&[20, 1]);
        let cfg = TrainConfig {
            batch_size: 10,
            learning_rate: lr,
            patience: 4,
            max_epochs: 100,
            ..Default::default()
        };
        let report = fit_split(&mut model, (&a, &a), (&a, &a), LossKind::NegLogDensity, &cfg).unwrap();
        assert_eq!(report.best_epoch, 5);
        assert!(report.stopped_early);
        assert_eq!(report.epochs.len(), 5 + 4 + 1);
        let p_val = model.store.value(p).data()[0];
        assert!((p_val - 6.0 * steps_per_epoch * lr).abs() < 1e-6, "{p_val}");
        let min = report.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_val_loss, min);
        assert!(report.best_val_loss <= report.epochs.last().unwrap().val_loss);
    }

    fn toy_data(n: usize) -> (Tensor<f64>, Tensor<f64>) {
        let theta: Vec<f64> = (0..n).map(|i| ((i * 7919) % 97) as f64 / 97.0 * 2.0 - 1.0).collect();
        let x: Vec<f64> = theta
            .iter()
            .enumerate()
            .map(|(i, t)| t + 0.1 * (((i * 31) % 13) as f64 / 13.0 - 0.5))
            .collect();
        (Tensor::matrix(n, 1, theta), Tensor::matrix(n, 1, x))
    }

    #[test]
    fn training_is_deterministic() {
        let (th, x) = toy_data(200);
        let cfg = TrainConfig {
            batch_size: 50,
            max_epochs: 15,
            seed: 4,
            ..Default::default()
        };
        let ecfg = EstimatorConfig {
            components: 2,
            hidden: vec![8],
            ..Default::default()
        };
        let run = || {
            let mut est = Estimator::fit_standardized(&ecfg, &th, &x, 1).unwrap();
            let r = fit(&mut est, &th, &x, LossKind::NegLogDensity, &cfg).unwrap();
            (r.epochs, r.best_epoch, est.params().snapshot())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn oversized_model_learns_small_dataset() {
        let (th, x) = toy_data(50);
        let cfg = TrainConfig {
            batch_size: 10,
            learning_rate: 3e-3,
            max_epochs: 300,
            patience: 300,
            validation_fraction: 0.2,
            seed: 1,
        };
        let ecfg = EstimatorConfig {
            kind: EstimatorKind::Mdn,
            components: 5,
            hidden: vec![64, 64],
            ..Default::default()
        };
        let mut est = Estimator::fit_standardized(&ecfg, &th, &x, 2).unwrap();
        let r = fit(&mut est, &th, &x, LossKind::NegLogDensity, &cfg).unwrap();
        let first = r.epochs[0].train_loss;
        let at_best = r.epochs[r.best_epoch].train_loss;
        // losses are negative log-densities; measure the drop relative to |first|
        assert!(first - at_best >= 0.5 * first.abs(), "{first} -> {at_best}");
    }

    #[test]
    fn non_finite_loss_aborts_with_checkpoint() {
        struct Exploding(ParamStore<f64>, ParamId);
        impl Trainable<f64> for Exploding {
            fn params(&self) -> &ParamStore<f64> {
                &self.0
            }
            fn params_mut(&mut self) -> &mut ParamStore<f64> {
                &mut self.0
            }
            fn loss(&self, tape: &mut Tape<f64>, _: LossKind, _: &Tensor<f64>, _: &Tensor<f64>) -> Result<Var, TrainError> {
                // loss −p until p passes 0.05, then log of a negative number
                let p = tape.param(&self.0, self.1);
                let lim = tape.constant(Tensor::scalar(0.05));
                let gap = tape.sub(lim, p)?;
                let l = tape.log(gap);
                let s = tape.sum(l);
                Ok(s)
            }
        }
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(0.0));
        let mut m = Exploding(store, p);
        let a = Tensor::zeros(&[20, 1]);
        let cfg = TrainConfig {
            batch_size: 10,
            learning_rate: 0.01,
            ..Default::default()
        };
        let err = fit_split(&mut m, (&a, &a), (&a, &a), LossKind::NegLogDensity, &cfg).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
        assert!(m.0.value(p).item() < 0.05);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            validation_fraction: 0.6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"batch_size": 64}"#).unwrap();
        assert_eq!(cfg.learning_rate, 5e-4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"batchsize": 64}"#).is_err());
    }
}
