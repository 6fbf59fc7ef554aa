//! Central finite-difference gradient checking.
//!
//! Only forward values are used, so the check is independent of the reverse
//! sweep it validates.

use crate::scalar::Scalar;

use super::{NdiffError, Tape, Tensor, Var};

/// Outcome of a gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// Number of scalar input coordinates perturbed.
    pub coords: usize,
}

/// Denominator floor for relative errors; gradients below it are compared
/// absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Compare the reverse-mode gradient of a scalar function against central
/// differences with step `h`, perturbing every coordinate of every input.
pub fn check_gradients<T, F>(inputs: &[Tensor<T>], h: f64, f: F) -> Result<GradCheck, NdiffError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, NdiffError>,
{
    let eval = |vals: &[Tensor<T>]| -> Result<f64, NdiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().f64())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.watch(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut max_rel_err: f64 = 0.0;
    let mut coords = 0;
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].len() {
            let x0 = inputs[i].data()[k];
            work[i].data_mut()[k] = x0 + T::c(h);
            let fp = eval(&work)?;
            work[i].data_mut()[k] = x0 - T::c(h);
            let fm = eval(&work)?;
            work[i].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[k].f64();
            let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            max_rel_err = max_rel_err.max((a - numeric).abs() / denom);
            coords += 1;
        }
    }
    Ok(GradCheck { max_rel_err, coords })
}

/// Every primitive the tape records, checked on random shapes with entries
/// in `[-3, 3]`. Returns `(primitive, worst relative error)` per primitive.
pub fn check_all_primitives(seed: u64, trials: usize, h: f64) -> Result<Vec<(&'static str, f64)>, NdiffError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let names = [
        "matmul",
        "add",
        "add_bias",
        "multiply",
        "affine",
        "tanh",
        "relu",
        "softplus",
        "exp",
        "log",
        "logsumexp_rows",
        "logsumexp_cols",
        "sum",
        "mean",
        "square",
        "negate",
        "scale",
        "concat_rows",
        "concat_cols",
        "slice_rows",
        "slice_cols",
    ];
    let mut worst = vec![0.0f64; names.len()];
    for _ in 0..trials {
        let m = rng.random_range(1..5usize);
        let n = rng.random_range(1..5usize);
        let k = rng.random_range(1..5usize);
        let mut rand_t = |r: usize, c: usize| -> Tensor<f64> {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-3.0..3.0)).collect())
        };
        let a_mn = rand_t(m, n);
        let b_mn = rand_t(m, n);
        let a_mk = rand_t(m, k);
        let b_kn = rand_t(k, n);
        let bias = rand_t(1, n);
        let w_mn = rand_t(m, n);
        let w_m1 = rand_t(m, 1);
        let w_1n = rand_t(1, n);
        let w_m2n = rand_t(m, 2 * n);
        let w_2mn = rand_t(2 * m, n);
        let positive = a_mn.map(|x| x.abs() + 0.1);
        // keep relu inputs away from the kink
        let away = a_mn.map(|x| if x.abs() < 1e-2 { x + 0.05 } else { x });
        let c: f64 = rng.random_range(-3.0..3.0);
        let r0 = rng.random_range(0..m);
        let r1 = rng.random_range(r0 + 1..=m);
        let c0 = rng.random_range(0..n);
        let c1 = rng.random_range(c0 + 1..=n);

        let weighted = |t: &mut Tape<f64>, out: Var, w: &Tensor<f64>| -> Result<Var, NdiffError> {
            let wv = t.constant(w.clone());
            let p = t.multiply(out, wv)?;
            Ok(t.sum(p))
        };
        let slice_rw = Tensor::matrix(r1 - r0, n, w_mn.data()[r0 * n..r1 * n].to_vec());
        let slice_cw = Tensor::matrix(m, c1 - c0, (0..m).flat_map(|i| w_mn.row(i)[c0..c1].to_vec()).collect());

        let results = [
            check_gradients(&[a_mk.clone(), b_kn.clone()], h, |t, v| {
                let o = t.matmul(v[0], v[1])?;
                weighted(t, o, &w_mn)
            })?,
            check_gradients(&[a_mn.clone(), b_mn.clone()], h, |t, v| {
                let o = t.add(v[0], v[1])?;
                weighted(t, o, &w_mn)
            })?,
            check_gradients(&[a_mn.clone(), bias.clone()], h, |t, v| {
                let o = t.add(v[0], v[1])?;
                weighted(t, o, &w_mn)
            })?,
            check_gradients(&[a_mn.clone(), b_mn.clone()], h, |t, v| {
                let o = t.multiply(v[0], v[1])?;
                weighted(t, o, &w_mn)
            })?,
            check_gradients(&[a_mk.clone(), b_kn.clone(), bias.clone()], h, |t, v| {
                let o = t.affine(v[0], v[1], v[2])?;
                weighted(t, o, &w_mn)
            })?,
            check_gradients(std::slice::from_ref(&a_mn), h, |t, v| {
                let o = t.tanh(v[0]);
                weighted(t, o, &w_mn)
            })?,
            check_gradients(&[away], h, |t, v| {
                let o = t.relu(v[0]);
                weighted(t, o, &w_mn)
            })?,
            check_gradients(std::slice::from_ref(&a_mn), h, |t, v| {
                let o = t.softplus(v[0]);
                weighted(t, o, &w_mn)
            })?,
            check_gradients(std::slice::from_ref(&a_mn), h, |t, v| {
                let o = t.exp(v[0]);
                weighted(t, o, &w_mn)
            })?,
            check_gradients(&[positive], h, |t, v| {
                let o = t.log(v[0]);
                weighted(t, o, &w_mn)
            })?,
            check_gradients(std::slice::from_ref(&a_mn), h, |t, v| {
                let o = t.logsumexp(v[0], 1)?;
                weighted(t, o, &w_m1)
            })?,
            check_gradients(std::slice::from_ref(&a_mn), h, |t, v| {
                let o = t.logsumexp(v[0], 0)?;
                weighted(t, o, &w_1n)
            })?,
            check_gradients(std::slice::from_ref(&a_mn), h, |t, v| {
                let o = t.sum(v[0]);
                Ok(t.scale(o, c))
            })?,
            check_gradients(std::slice::from_ref(&a_mn), h, |t, v| {
                let o = t.mean(v[0]);
                Ok(t.scale(o, c))
            })?,
            check_gradients(std::slice::from_ref(&a_mn), h, |t, v| {
                let o = t.square(v[0]);
                weighted(t, o, &w_mn)
            })?,
            check_gradients(std::slice::from_ref(&a_mn), h, |t, v| {
                let o = t.negate(v[0]);
                weighted(t, o, &w_mn)
            })?,
            check_gradients(std::slice::from_ref(&a_mn), h, |t, v| {
                let o = t.scale(v[0], c);
                weighted(t, o, &w_mn)
            })?,
            check_gradients(&[a_mn.clone(), b_mn.clone()], h, |t, v| {
                let o = t.concat(&[v[0], v[1]], 0)?;
                weighted(t, o, &w_2mn)
            })?,
            check_gradients(&[a_mn.clone(), b_mn.clone()], h, |t, v| {
                let o = t.concat(&[v[0], v[1]], 1)?;
                weighted(t, o, &w_m2n)
            })?,
            check_gradients(std::slice::from_ref(&a_mn), h, |t, v| {
                let o = t.slice(v[0], 0, r0, r1)?;
                weighted(t, o, &slice_rw)
            })?,
            check_gradients(std::slice::from_ref(&a_mn), h, |t, v| {
                let o = t.slice(v[0], 1, c0, c1)?;
                weighted(t, o, &slice_cw)
            })?,
        ];
        for (w, r) in worst.iter_mut().zip(results.iter()) {
            *w = w.max(r.max_rel_err);
        }
    }
    Ok(names.iter().copied().zip(worst).collect())
}
