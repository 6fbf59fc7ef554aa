use rand::RngCore;

use super::mlp::{broadcast_col, Activation, ContextNet, Mlp, OutputInit, Standardizer};
use super::EstimatorError;
use crate::distributions::{ContinuousDistribution, DiagGaussian, MixtureDiagGaussian};
use crate::ndiff::{NdiffError, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Conditional mixture of `K` diagonal Gaussians whose weights, means and
/// log-stds are emitted by an MLP of the (standardized) context.
#[derive(Clone, Debug, PartialEq)]
pub struct Mdn {
    pub(crate) target_dim: usize,
    pub(crate) components: usize,
    pub(crate) context: ContextNet,
    pub(crate) target_std: Standardizer,
    pub(crate) trunk: Mlp,
}

/// Raw head outputs on the tape, all in standardized target space.
pub(crate) struct Heads {
    /// `B×K` normalized log-weights
    pub log_w: Var,
    /// `B×KD`, component-major
    pub means: Var,
    /// `B×KD`
    pub log_std: Var,
}

impl Mdn {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        target_std: Standardizer,
        context: ContextNet,
        components: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut dyn RngCore,
    ) -> Self {
        let d = target_std.dim();
        let k = components;
        let mut sizes = vec![context.output_dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(k + 2 * k * d);
        let trunk = Mlp::new(store, prefix, &sizes, activation, OutputInit::Glorot, rng);
        Self {
            target_dim: d,
            components: k,
            context,
            target_std,
            trunk,
        }
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub(crate) fn heads<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ctx: Var) -> Result<Heads, NdiffError> {
        let (k, d) = (self.components, self.target_dim);
        let c = self.context.forward(tape, store, ctx)?;
        let out = self.trunk.forward(tape, store, c)?;
        let logits = tape.slice(out, 1, 0, k)?;
        let means = tape.slice(out, 1, k, k + k * d)?;
        let log_std = tape.slice(out, 1, k + k * d, k + 2 * k * d)?;
        let lse = tape.logsumexp(logits, 1)?;
        let lse_b = broadcast_col(tape, lse, k)?;
        let log_w = tape.sub(logits, lse_b)?;
        Ok(Heads { log_w, means, log_std })
    }

    /// Log-density `B×1` of standardized targets `y` given the heads.
    pub(crate) fn mixture_log_prob<T: Scalar>(&self, tape: &mut Tape<T>, heads: &Heads, y: Var) -> Result<Var, NdiffError> {
        let (k, d) = (self.components, self.target_dim);
        // tile y across components: R[i, c·D + i] = 1
        let mut tile = vec![T::zero(); d * k * d];
        for c in 0..k {
            for i in 0..d {
                tile[i * k * d + c * d + i] = T::one();
            }
        }
        let tile = tape.constant(Tensor::matrix(d, k * d, tile));
        let y_rep = tape.matmul(y, tile)?;
        let diff = tape.sub(y_rep, heads.means)?;
        let neg_ls = tape.negate(heads.log_std);
        let inv_std = tape.exp(neg_ls);
        let z = tape.multiply(diff, inv_std)?;
        let z2 = tape.square(z);
        let half = tape.scale(z2, -0.5);
        let per_coord = tape.sub(half, heads.log_std)?;
        // sum coordinates per component: G[c·D + i, c] = 1
        let mut group = vec![T::zero(); k * d * k];
        for c in 0..k {
            for i in 0..d {
                group[(c * d + i) * k + c] = T::one();
            }
        }
        let group = tape.constant(Tensor::matrix(k * d, k, group));
        let comp = tape.matmul(per_coord, group)?;
        let norm = tape.constant(Tensor::full(&[1, k], T::c(-(d as f64) * HALF_LN_2PI)));
        let comp = tape.add(comp, norm)?;
        let weighted = tape.add(comp, heads.log_w)?;
        tape.logsumexp(weighted, 1)
    }

    /// Log-density `B×1` of raw targets given raw contexts, in original
    /// coordinates.
    pub fn log_prob_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        target: Var,
        context: Var,
    ) -> Result<Var, NdiffError> {
        let heads = self.heads(tape, store, context)?;
        let y = self.target_std.forward(tape, target)?;
        let lp = self.mixture_log_prob(tape, &heads, y)?;
        let jac = tape.constant(Tensor::matrix(1, 1, vec![T::c(-self.target_std.log_scale())]));
        tape.add(lp, jac)
    }

    /// The mixture in original target coordinates for one context row.
    pub fn mixture<T: Scalar>(&self, store: &ParamStore<T>, context: &[T]) -> Result<MixtureDiagGaussian<T>, EstimatorError> {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::matrix(1, context.len(), context.to_vec()));
        let h = self.heads(&mut tape, store, c)?;
        let (k, d) = (self.components, self.target_dim);
        let lw = tape.value(h.log_w).data().to_vec();
        let mu = tape.value(h.means).data().to_vec();
        let ls = tape.value(h.log_std).data().to_vec();
        let comps = (0..k)
            .map(|c| {
                let m = self.target_std.invert(&mu[c * d..(c + 1) * d]);
                let s = (0..d).map(|i| ls[c * d + i] + T::c(self.target_std.std[i].ln())).collect();
                DiagGaussian::new(m, s)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MixtureDiagGaussian::new(lw, comps)?)
    }

    pub fn sample<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        context: &[T],
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor<T>, EstimatorError> {
        Ok(self.mixture(store, context)?.sample_n(rng, n))
    }
}
