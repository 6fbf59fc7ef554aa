use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::ndiff::{NdiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

/// How the last layer of an [`Mlp`] is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputInit {
    Glorot,
    Zero,
}

/// Fully connected network: activations between layers, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    activation: Activation,
    sizes: Vec<usize>,
}

impl Mlp {
    /// `sizes = [input, hidden…, output]`. Weights are Glorot-uniform and
    /// biases zero.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        sizes: &[usize],
        activation: Activation,
        output_init: OutputInit,
        rng: &mut dyn RngCore,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut layers = Vec::new();
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let last = l + 2 == sizes.len();
            let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| {
                    if last && output_init == OutputInit::Zero {
                        T::zero()
                    } else {
                        T::c(bound * (2.0 * rng.random::<f64>() - 1.0))
                    }
                })
                .collect();
            let wid = store.add(format!("{prefix}.{l}.weight"), Tensor::matrix(fan_in, fan_out, data));
            let bid = store.add(format!("{prefix}.{l}.bias"), Tensor::zeros(&[1, fan_out]));
            layers.push((wid, bid));
        }
        Self {
            layers,
            activation,
            sizes: sizes.to_vec(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Parameter ids as `(weight, bias)` per layer.
    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NdiffError> {
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            h = tape.affine(h, wv, bv)?;
            if l + 1 < self.layers.len() {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        Ok(h)
    }
}

/// Per-column affine whitening `(v − mean) / std` using training statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Column statistics of `data`; constant columns keep unit scale.
    pub fn fit<T: Scalar>(data: &Tensor<T>) -> Self {
        let (mean, std) = data.column_moments();
        Self {
            mean: mean.iter().map(|m| m.f64()).collect(),
            std: std
                .iter()
                .map(|s| {
                    let s = s.f64();
                    if s > 1e-12 && s.is_finite() {
                        s
                    } else {
                        1.0
                    }
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `Σ ln std`: subtract from a standardized-space log-density to get the
    /// density in original coordinates.
    pub fn log_scale(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }

    /// Record `(x − mean)/std` on the tape as one affine op with a diagonal
    /// weight, so gradients flow back to `x`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, NdiffError> {
        let d = self.dim();
        let mut w = vec![T::zero(); d * d];
        for i in 0..d {
            w[i * d + i] = T::c(1.0 / self.std[i]);
        }
        let b = self.mean.iter().zip(&self.std).map(|(m, s)| T::c(-m / s)).collect();
        let wv = tape.constant(Tensor::matrix(d, d, w));
        let bv = tape.constant(Tensor::matrix(1, d, b));
        tape.affine(x, wv, bv)
    }

    pub fn apply<T: Scalar>(&self, row: &[T]) -> Vec<T> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v - T::c(m)) / T::c(s))
            .collect()
    }

    pub fn invert<T: Scalar>(&self, row: &[T]) -> Vec<T> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| v * T::c(s) + T::c(m))
            .collect()
    }

    pub fn apply_rows<T: Scalar>(&self, t: &Tensor<T>) -> Tensor<T> {
        let mut out = t.clone();
        for i in 0..t.rows() {
            let r = self.apply(t.row(i));
            out.row_mut(i).copy_from_slice(&r);
        }
        out
    }

    pub fn invert_rows<T: Scalar>(&self, t: &Tensor<T>) -> Tensor<T> {
        let mut out = t.clone();
        for i in 0..t.rows() {
            let r = self.invert(t.row(i));
            out.row_mut(i).copy_from_slice(&r);
        }
        out
    }
}

/// Optional feature extractor applied to the context before the estimator
/// proper; its parameters live in the estimator's store and are trained
/// jointly.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextNet {
    pub standardizer: Standardizer,
    pub embedding: Option<Mlp>,
}

impl ContextNet {
    pub fn output_dim(&self) -> usize {
        self.embedding.as_ref().map_or(self.standardizer.dim(), |e| e.output_dim())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ctx: Var) -> Result<Var, NdiffError> {
        if self.standardizer.dim() == 0 {
            return Ok(ctx);
        }
        let s = self.standardizer.forward(tape, ctx)?;
        match &self.embedding {
            Some(e) => e.forward(tape, store, s),
            None => Ok(s),
        }
    }
}

/// Broadcast a `rows×1` column to `rows×n` with a matmul against ones.
pub(crate) fn broadcast_col<T: Scalar>(tape: &mut Tape<T>, col: Var, n: usize) -> Result<Var, NdiffError> {
    let ones = tape.constant(Tensor::full(&[1, n], T::one()));
    tape.matmul(col, ones)
}

/// Repeat a single row `n` times.
pub(crate) fn repeat_row<T: Scalar>(row: &[T], n: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(row.len() * n);
    for _ in 0..n {
        data.extend_from_slice(row);
    }
    Tensor::matrix(n, row.len(), data)
}
