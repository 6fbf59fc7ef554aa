use rand::{Rng, RngCore};

use super::mdn::Mdn;
use super::mlp::{broadcast_col, Activation, Mlp, OutputInit, Standardizer};
use super::EstimatorError;
use crate::distributions::ContinuousDistribution;
use crate::ndiff::{NdiffError, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Joint density of a binary choice and a positive reaction time.
///
/// `log p(c, rt | θ) = log P(c | θ) + log q(log rt | θ, c) − log rt`, with a
/// categorical head and an MDN over log-RT on separate trunks.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedEstimator {
    pub(crate) theta_std: Standardizer,
    pub(crate) choice_net: Mlp,
    pub(crate) rt: Mdn,
}

impl MixedEstimator {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        theta_std: Standardizer,
        rt: Mdn,
        hidden: &[usize],
        activation: Activation,
        rng: &mut dyn RngCore,
    ) -> Self {
        let mut sizes = vec![theta_std.dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(2);
        let choice_net = Mlp::new(store, "choice", &sizes, activation, OutputInit::Glorot, rng);
        Self {
            theta_std,
            choice_net,
            rt,
        }
    }

    fn choice_log_probs<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, theta: Var) -> Result<Var, NdiffError> {
        let s = self.theta_std.forward(tape, theta)?;
        let logits = self.choice_net.forward(tape, store, s)?;
        let lse = tape.logsumexp(logits, 1)?;
        let lse_b = broadcast_col(tape, lse, 2)?;
        tape.sub(logits, lse_b)
    }

    /// `B×1` log-density of targets `[choice, rt]` given `θ`. Reaction times
    /// must be positive.
    pub fn log_prob_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        target: Var,
        theta: Var,
    ) -> Result<Var, NdiffError> {
        let choice = tape.slice(target, 1, 0, 1)?;
        let rt = tape.slice(target, 1, 1, 2)?;
        let logp = self.choice_log_probs(tape, store, theta)?;
        let neg = tape.negate(choice);
        let one = tape.constant(Tensor::matrix(1, 1, vec![T::one()]));
        let other = tape.add(neg, one)?;
        let onehot = tape.concat(&[other, choice], 1)?;
        let picked = tape.multiply(onehot, logp)?;
        let ones = tape.constant(Tensor::full(&[2, 1], T::one()));
        let lp_choice = tape.matmul(picked, ones)?;
        let log_rt = tape.log(rt);
        let ctx = tape.concat(&[theta, choice], 1)?;
        let lp_rt = self.rt.log_prob_tape(tape, store, log_rt, ctx)?;
        let lp = tape.add(lp_choice, lp_rt)?;
        tape.sub(lp, log_rt)
    }

    /// `[P(choice 0 | θ), P(choice 1 | θ)]`.
    pub fn choice_probs<T: Scalar>(&self, store: &ParamStore<T>, theta: &[T]) -> Result<[T; 2], EstimatorError> {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::matrix(1, theta.len(), theta.to_vec()));
        let lp = self.choice_log_probs(&mut tape, store, t)?;
        let v = tape.value(lp).data();
        Ok([v[0].exp(), v[1].exp()])
    }

    pub fn sample<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        theta: &[T],
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor<T>, EstimatorError> {
        let p = self.choice_probs(store, theta)?;
        let mut mixtures = Vec::with_capacity(2);
        for c in 0..2 {
            let mut ctx = theta.to_vec();
            ctx.push(T::c(c as f64));
            mixtures.push(self.rt.mixture(store, &ctx)?);
        }
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let c = usize::from(rng.random::<f64>() < p[1].f64());
            let log_rt = mixtures[c].sample(rng)[0];
            data.push(T::c(c as f64));
            data.push(log_rt.exp());
        }
        Ok(Tensor::matrix(n, 2, data))
    }
}
