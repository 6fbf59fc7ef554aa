use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Mlp, OutputInit, Standardizer};
use super::EstimatorError;
use crate::ndiff::{NdiffError, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![50, 50],
            activation: Activation::Tanh,
        }
    }
}

/// MLP on `concat(θ, x)` emitting one logit; at the optimum of the
/// matched-vs-shuffled classification task the logit estimates
/// `log p(x|θ) − log p(x)`.
#[derive(Clone, Debug)]
pub struct Classifier<T: Scalar> {
    config: ClassifierConfig,
    theta_std: Standardizer,
    x_std: Standardizer,
    net: Mlp,
    seed: u64,
    store: ParamStore<T>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ClassifierConfig,
    theta_std: Standardizer,
    x_std: Standardizer,
    seed: u64,
}

const FORMAT: &str = "sbi-classifier v1";

impl<T: Scalar> Classifier<T> {
    /// Zero-initialized output layer: every logit starts at 0.
    pub fn new(config: &ClassifierConfig, theta_std: Standardizer, x_std: Standardizer, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![theta_std.dim() + x_std.dim()];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(1);
        let net = Mlp::new(
            &mut store,
            "classifier",
            &sizes,
            config.activation,
            OutputInit::Zero,
            &mut rng,
        );
        Self {
            config: config.clone(),
            theta_std,
            x_std,
            net,
            seed,
            store,
        }
    }

    /// Standardization fitted on the given training pairs.
    pub fn for_data(config: &ClassifierConfig, theta: &Tensor<T>, x: &Tensor<T>, seed: u64) -> Self {
        Self::new(config, Standardizer::fit(theta), Standardizer::fit(x), seed)
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_std.dim()
    }

    pub fn x_dim(&self) -> usize {
        self.x_std.dim()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// `B×1` logits.
    pub fn logit_tape(&self, tape: &mut Tape<T>, theta: Var, x: Var) -> Result<Var, NdiffError> {
        let t = self.theta_std.forward(tape, theta)?;
        let xs = self.x_std.forward(tape, x)?;
        let inp = tape.concat(&[t, xs], 1)?;
        self.net.forward(tape, &self.store, inp)
    }

    pub fn logits(&self, theta: &Tensor<T>, x: &Tensor<T>) -> Result<Vec<T>, EstimatorError> {
        let mut tape = Tape::new();
        let t = tape.constant(theta.clone());
        let xv = tape.constant(x.clone());
        let l = self.logit_tape(&mut tape, t, xv)?;
        Ok(tape.value(l).data().to_vec())
    }

    pub fn logit(&self, theta: &[T], x: &[T]) -> Result<T, EstimatorError> {
        let t = Tensor::matrix(1, theta.len(), theta.to_vec());
        let xv = Tensor::matrix(1, x.len(), x.to_vec());
        Ok(self.logits(&t, &xv)?[0])
    }

    pub fn save(&self, w: &mut impl Write) -> Result<(), EstimatorError> {
        let m = Manifest {
            format: FORMAT.into(),
            config: self.config.clone(),
            theta_std: self.theta_std.clone(),
            x_std: self.x_std.clone(),
            seed: self.seed,
        };
        writeln!(
            w,
            "{}",
            serde_json::to_string(&m).map_err(|e| EstimatorError::Format(e.to_string()))?
        )?;
        self.store.write_to(w)?;
        Ok(())
    }

    pub fn load(r: &mut impl BufRead) -> Result<Self, EstimatorError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let m: Manifest = serde_json::from_str(line.trim()).map_err(|e| EstimatorError::Format(e.to_string()))?;
        if m.format != FORMAT {
            return Err(EstimatorError::Format(format!("expected {FORMAT}, found {}", m.format)));
        }
        let mut c = Self::new(&m.config, m.theta_std, m.x_std, m.seed);
        let stored = ParamStore::read_from(r)?;
        c.store.load_values(&stored)?;
        Ok(c)
    }
}
