use rand::RngCore;

use super::mlp::{repeat_row, Activation, ContextNet, Mlp, OutputInit, Standardizer};
use super::EstimatorError;
use crate::distributions::std_normal;
use crate::ndiff::{NdiffError, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
/// Log-scales are squashed to `(−CLAMP, CLAMP)` by `CLAMP·tanh(s/CLAMP)`.
pub const LOG_SCALE_CLAMP: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
struct Coupling {
    /// Columns read by the conditioner.
    cond: (usize, usize),
    /// Columns transformed by this layer.
    trans: (usize, usize),
    net: Mlp,
}

/// Conditional affine coupling flow with a standard-Gaussian base.
///
/// Layers alternate which half of the (standardized) target is transformed.
/// A one-dimensional target has no second half, so its layers are
/// conditioned on the context alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    pub(crate) target_dim: usize,
    pub(crate) context: ContextNet,
    pub(crate) target_std: Standardizer,
    layers: Vec<Coupling>,
}

fn row_sum<T: Scalar>(tape: &mut Tape<T>, a: Var, width: usize) -> Result<Var, NdiffError> {
    let ones = tape.constant(Tensor::full(&[width, 1], T::one()));
    tape.matmul(a, ones)
}

impl Flow {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        target_std: Standardizer,
        context: ContextNet,
        num_layers: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut dyn RngCore,
    ) -> Self {
        let d = target_std.dim();
        let half = d / 2;
        let layers = (0..num_layers)
            .map(|l| {
                let (cond, trans) = if d == 1 {
                    ((0, 0), (0, 1))
                } else if l % 2 == 0 {
                    ((0, half), (half, d))
                } else {
                    ((half, d), (0, half))
                };
                let inp = (cond.1 - cond.0) + context.output_dim();
                let mut sizes = vec![inp.max(1)];
                sizes.extend_from_slice(hidden);
                sizes.push(2 * (trans.1 - trans.0));
                let net = Mlp::new(store, &format!("{prefix}.{l}"), &sizes, activation, OutputInit::Zero, rng);
                Coupling { cond, trans, net }
            })
            .collect();
        Self {
            target_dim: d,
            context,
            target_std,
            layers,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Shift and clamped log-scale of one coupling.
    fn conditioner<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        layer: &Coupling,
        y: Var,
        ctx: Var,
    ) -> Result<(Var, Var), NdiffError> {
        let rows = tape.value(y).rows();
        let mut parts = Vec::new();
        if layer.cond.1 > layer.cond.0 {
            parts.push(tape.slice(y, 1, layer.cond.0, layer.cond.1)?);
        }
        if tape.value(ctx).cols() > 0 {
            parts.push(ctx);
        }
        let inp = match parts.len() {
            0 => tape.constant(Tensor::full(&[rows, 1], T::one())),
            1 => parts[0],
            _ => tape.concat(&parts, 1)?,
        };
        let out = layer.net.forward(tape, store, inp)?;
        let n = layer.trans.1 - layer.trans.0;
        let shift = tape.slice(out, 1, 0, n)?;
        let raw = tape.slice(out, 1, n, 2 * n)?;
        let squashed = tape.scale(raw, 1.0 / LOG_SCALE_CLAMP);
        let squashed = tape.tanh(squashed);
        let s = tape.scale(squashed, LOG_SCALE_CLAMP);
        Ok((shift, s))
    }

    fn reassemble<T: Scalar>(&self, tape: &mut Tape<T>, layer: &Coupling, y: Var, new_trans: Var) -> Result<Var, NdiffError> {
        if layer.cond.1 == layer.cond.0 {
            return Ok(new_trans);
        }
        let cond = tape.slice(y, 1, layer.cond.0, layer.cond.1)?;
        if layer.trans.0 > layer.cond.0 {
            tape.concat(&[cond, new_trans], 1)
        } else {
            tape.concat(&[new_trans, cond], 1)
        }
    }

    /// Standardized target to base space: returns `(z, log|det ∂z/∂y|)` with
    /// the log-determinant as a `B×1` column.
    fn to_base_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        y: Var,
        ctx: Var,
    ) -> Result<(Var, Option<Var>), NdiffError> {
        let mut cur = y;
        let mut logdet: Option<Var> = None;
        for layer in &self.layers {
            let (shift, s) = self.conditioner(tape, store, layer, cur, ctx)?;
            let trans = tape.slice(cur, 1, layer.trans.0, layer.trans.1)?;
            let centered = tape.sub(trans, shift)?;
            let neg_s = tape.negate(s);
            let inv = tape.exp(neg_s);
            let v = tape.multiply(centered, inv)?;
            cur = self.reassemble(tape, layer, cur, v)?;
            let ld = row_sum(tape, neg_s, layer.trans.1 - layer.trans.0)?;
            logdet = Some(match logdet {
                Some(acc) => tape.add(acc, ld)?,
                None => ld,
            });
        }
        Ok((cur, logdet))
    }

    pub fn log_prob_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        target: Var,
        context: Var,
    ) -> Result<Var, NdiffError> {
        let ctx = self.context.forward(tape, store, context)?;
        let y = self.target_std.forward(tape, target)?;
        let (z, logdet) = self.to_base_tape(tape, store, y, ctx)?;
        let z2 = tape.square(z);
        let sq = row_sum(tape, z2, self.target_dim)?;
        let mut lp = tape.scale(sq, -0.5);
        if let Some(ld) = logdet {
            lp = tape.add(lp, ld)?;
        }
        let c = -(self.target_dim as f64) * HALF_LN_2PI - self.target_std.log_scale();
        let c = tape.constant(Tensor::matrix(1, 1, vec![T::c(c)]));
        tape.add(lp, c)
    }

    /// Raw targets to base samples with the full log-determinant (including
    /// standardization) per row.
    pub fn to_base<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        target: &Tensor<T>,
        context: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<T>), EstimatorError> {
        let mut tape = Tape::new();
        let t = tape.constant(target.clone());
        let c = tape.constant(context.clone());
        let ctx = self.context.forward(&mut tape, store, c)?;
        let y = self.target_std.forward(&mut tape, t)?;
        let (z, ld) = self.to_base_tape(&mut tape, store, y, ctx)?;
        let shift = -self.target_std.log_scale();
        let ld = match ld {
            Some(v) => tape.value(v).data().iter().map(|&x| x + T::c(shift)).collect(),
            None => vec![T::c(shift); target.rows()],
        };
        Ok((tape.value(z).clone(), ld))
    }

    /// Base samples to raw targets (the sampling direction).
    pub fn from_base<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        z: &Tensor<T>,
        context: &Tensor<T>,
    ) -> Result<Tensor<T>, EstimatorError> {
        let mut tape = Tape::new();
        let c = tape.constant(context.clone());
        let ctx = self.context.forward(&mut tape, store, c)?;
        let mut cur = tape.constant(z.clone());
        for layer in self.layers.iter().rev() {
            // the conditioning half is identical before and after this layer
            let (shift, s) = self.conditioner(&mut tape, store, layer, cur, ctx)?;
            let v = tape.slice(cur, 1, layer.trans.0, layer.trans.1)?;
            let scale = tape.exp(s);
            let scaled = tape.multiply(v, scale)?;
            let u = tape.add(scaled, shift)?;
            cur = self.reassemble(&mut tape, layer, cur, u)?;
        }
        Ok(self.target_std.invert_rows(tape.value(cur)))
    }

    pub fn sample<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        context: &[T],
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor<T>, EstimatorError> {
        let d = self.target_dim;
        let z = Tensor::matrix(n, d, (0..n * d).map(|_| std_normal::<T>(rng)).collect());
        self.from_base(store, &z, &repeat_row(context, n))
    }
}
