use crate::scalar::Scalar;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};
use super::NdiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds recorded on the tape.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Multiply(usize, usize),
    Affine(usize, usize, usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    LogSumExp(usize, usize),
    Sum(usize),
    Mean(usize),
    Square(usize),
    Negate(usize),
    Scale(usize, f64),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Dynamic record of one forward pass. Nodes are appended in evaluation
/// order, so every input precedes its consumers and the reverse sweep only
/// has to walk the node list backwards.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NdiffError {
    NdiffError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn require_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize), NdiffError> {
    if t.is_matrix() {
        Ok((t.rows(), t.cols()))
    } else {
        Err(NdiffError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        })
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    if x > T::c(20.0) {
        x
    } else if x < T::c(-37.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose adjoint is reported by [`Tape::backward`].
    pub fn watch(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Watched leaf bound to a parameter of `store`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.watch(store.value(id).clone());
        self.params.push((id, v.0));
        v
    }

    /// Matrix product of `m×k` and `k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = require_matrix("matmul", av)?;
        let (k2, n) = require_matrix("matmul", bv)?;
        if k != k2 {
            return Err(mismatch("matmul", av.shape(), bv.shape()));
        }
        let out = Tensor::matrix(m, n, matmul_raw(av.data(), bv.data(), m, k, n));
        let g = self.grad_of(&[a.0, b.0]);
        Ok(self.push(out, Op::MatMul(a.0, b.0), g))
    }

    /// Elementwise sum. `b` may also be a `1×n` row broadcast over the rows
    /// of an `m×n` `a` (bias addition).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if av.is_matrix() && bv.is_matrix() && bv.rows() == 1 && bv.cols() == av.cols() {
            let n = av.cols();
            let bias = bv.data();
            let data = av.data().iter().enumerate().map(|(i, &x)| x + bias[i % n.max(1)]).collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else {
            return Err(mismatch("add", av.shape(), bv.shape()));
        };
        let g = self.grad_of(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), g))
    }

    /// `a - b`, recorded as `add(a, negate(b))`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        let nb = self.negate(b);
        self.add(a, nb)
    }

    /// Elementwise (Hadamard) product of equal shapes.
    pub fn multiply(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(mismatch("multiply", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let g = self.grad_of(&[a.0, b.0]);
        Ok(self.push(out, Op::Multiply(a.0, b.0), g))
    }

    /// `x·w + b` with `x: m×k`, `w: k×n`, `b: 1×n`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NdiffError> {
        let (xv, wv, bv) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (m, k) = require_matrix("affine", xv)?;
        let (k2, n) = require_matrix("affine", wv)?;
        if k != k2 {
            return Err(mismatch("affine", xv.shape(), wv.shape()));
        }
        if bv.shape() != [1, n] {
            return Err(mismatch("affine", wv.shape(), bv.shape()));
        }
        let mut data = matmul_raw(xv.data(), wv.data(), m, k, n);
        for row in data.chunks_mut(n.max(1)) {
            for (o, &bias) in row.iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        let out = Tensor::matrix(m, n, data);
        let g = self.grad_of(&[x.0, w.0, b.0]);
        Ok(self.push(out, Op::Affine(x.0, w.0, b.0), g))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let out = self.nodes[a.0].value.map(f);
        let g = self.nodes[a.0].needs_grad;
        self.push(out, op, g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), |x| x.tanh())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| x.max(T::zero()))
    }

    /// `ln(1 + eˣ)`, evaluated in threshold form so large inputs do not
    /// overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a.0), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), |x| x.ln())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    pub fn negate(&mut self, a: Var) -> Var {
        self.unary(a, Op::Negate(a.0), |x| -x)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ct = T::c(c);
        self.unary(a, Op::Scale(a.0, c), move |x| x * ct)
    }

    /// Max-shifted log-sum-exp over `axis` of a matrix; the reduced axis is
    /// kept with extent 1.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var, NdiffError> {
        let av = &self.nodes[a.0].value;
        let (m, n) = require_matrix("logsumexp", av)?;
        let lse = |it: &mut dyn Iterator<Item = T>| -> T {
            let vals: Vec<T> = it.collect();
            crate::scalar::log_sum_exp(&vals)
        };
        let out = match axis {
            1 => {
                let data = (0..m).map(|i| lse(&mut av.row(i).iter().copied())).collect();
                Tensor::matrix(m, 1, data)
            }
            0 => {
                let data = (0..n).map(|j| lse(&mut (0..m).map(|i| av.at(i, j)))).collect();
                Tensor::matrix(1, n, data)
            }
            _ => return Err(mismatch("logsumexp", av.shape(), &[axis])),
        };
        let g = self.nodes[a.0].needs_grad;
        Ok(self.push(out, Op::LogSumExp(a.0, axis), g))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().copied().sum();
        let g = self.nodes[a.0].needs_grad;
        self.push(Tensor::scalar(s), Op::Sum(a.0), g)
    }

    /// Mean of all entries as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let n = T::from_usize(v.len().max(1)).unwrap();
        let s = v.data().iter().copied().sum::<T>() / n;
        let g = self.nodes[a.0].needs_grad;
        self.push(Tensor::scalar(s), Op::Mean(a.0), g)
    }

    /// Concatenate matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NdiffError> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        for t in &tensors {
            require_matrix("concat", t)?;
        }
        let out = match axis {
            0 => Tensor::vstack(&tensors)?,
            1 => Tensor::hstack(&tensors)?,
            _ => return Err(mismatch("concat", &[], &[axis])),
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let g = self.grad_of(&ids);
        Ok(self.push(out, Op::Concat(ids, axis), g))
    }

    /// Half-open range `start..end` of a matrix along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, NdiffError> {
        let av = &self.nodes[a.0].value;
        let (m, n) = require_matrix("slice", av)?;
        let extent = if axis == 0 { m } else { n };
        if axis > 1 || start > end || end > extent {
            return Err(mismatch("slice", av.shape(), &[axis, start, end]));
        }
        let out = if axis == 0 {
            Tensor::matrix(end - start, n, av.data()[start * n..end * n].to_vec())
        } else {
            let w = end - start;
            let mut data = Vec::with_capacity(m * w);
            for i in 0..m {
                data.extend_from_slice(&av.row(i)[start..end]);
            }
            Tensor::matrix(m, w, data)
        };
        let g = self.nodes[a.0].needs_grad;
        Ok(self.push(out, Op::Slice(a.0, axis, start, end), g))
    }

    /// Reverse sweep from a one-element `seed`. Adjoints are accumulated in
    /// exact reverse recording order, so replaying a tape is bit-reproducible.
    pub fn backward(&self, seed: Var) -> Result<Gradients<T>, NdiffError> {
        let sv = &self.nodes[seed.0].value;
        if sv.len() != 1 {
            return Err(NdiffError::NonScalarSeed {
                shape: sv.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        adj[seed.0] = Some(Tensor::full(sv.shape(), T::one()));

        for idx in (0..=seed.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = adj[idx].take() else { continue };
            self.propagate(idx, &dy, &mut adj);
            adj[idx] = Some(dy);
        }
        Ok(Gradients {
            adj,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, idx: usize, dy: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].needs_grad;
        let elementwise = |a: usize, f: &dyn Fn(usize) -> T| -> Tensor<T> {
            let data = (0..dy.len()).map(|k| dy.data()[k] * f(k)).collect();
            Tensor::new(val(a).shape().to_vec(), data).expect("shape")
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).cols();
                if wants(a) {
                    let g = matmul_nt(dy.data(), val(b).data(), m, n, k);
                    accumulate(adj, a, Tensor::matrix(m, k, g));
                }
                if wants(b) {
                    let g = matmul_tn(val(a).data(), dy.data(), m, k, n);
                    accumulate(adj, b, Tensor::matrix(k, n, g));
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    accumulate(adj, a, dy.clone());
                }
                if wants(b) {
                    if val(b).shape() == dy.shape() {
                        accumulate(adj, b, dy.clone());
                    } else {
                        accumulate(adj, b, column_sums(dy));
                    }
                }
            }
            &Op::Multiply(a, b) => {
                if wants(a) {
                    let bv = val(b).data();
                    accumulate(adj, a, elementwise(a, &|k| bv[k]));
                }
                if wants(b) {
                    let av = val(a).data();
                    accumulate(adj, b, elementwise(b, &|k| av[k]));
                }
            }
            &Op::Affine(x, w, b) => {
                let (m, k) = (val(x).rows(), val(x).cols());
                let n = val(w).cols();
                if wants(x) {
                    let g = matmul_nt(dy.data(), val(w).data(), m, n, k);
                    accumulate(adj, x, Tensor::matrix(m, k, g));
                }
                if wants(w) {
                    let g = matmul_tn(val(x).data(), dy.data(), m, k, n);
                    accumulate(adj, w, Tensor::matrix(k, n, g));
                }
                if wants(b) {
                    accumulate(adj, b, column_sums(dy));
                }
            }
            &Op::Tanh(a) => {
                let yd = y.data();
                accumulate(adj, a, elementwise(a, &|k| T::one() - yd[k] * yd[k]));
            }
            &Op::Relu(a) => {
                let av = val(a).data();
                let g = elementwise(a, &|k| if av[k] > T::zero() { T::one() } else { T::zero() });
                accumulate(adj, a, g);
            }
            &Op::Softplus(a) => {
                let av = val(a).data();
                accumulate(adj, a, elementwise(a, &|k| sigmoid(av[k])));
            }
            &Op::Exp(a) => {
                let yd = y.data();
                accumulate(adj, a, elementwise(a, &|k| yd[k]));
            }
            &Op::Log(a) => {
                let av = val(a).data();
                accumulate(adj, a, elementwise(a, &|k| T::one() / av[k]));
            }
            &Op::Square(a) => {
                let av = val(a).data();
                accumulate(adj, a, elementwise(a, &|k| T::c(2.0) * av[k]));
            }
            &Op::Negate(a) => {
                accumulate(adj, a, dy.map(|d| -d));
            }
            &Op::Scale(a, c) => {
                let ct = T::c(c);
                accumulate(adj, a, dy.map(|d| d * ct));
            }
            &Op::LogSumExp(a, axis) => {
                let av = val(a);
                let (m, n) = (av.rows(), av.cols());
                let mut g = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        let (lse, d) = if axis == 1 {
                            (y.data()[i], dy.data()[i])
                        } else {
                            (y.data()[j], dy.data()[j])
                        };
                        if lse.is_finite() {
                            g[i * n + j] = d * (av.at(i, j) - lse).exp();
                        }
                    }
                }
                accumulate(adj, a, Tensor::matrix(m, n, g));
            }
            &Op::Sum(a) => {
                let d = dy.item();
                accumulate(adj, a, Tensor::full(val(a).shape(), d));
            }
            &Op::Mean(a) => {
                let n = T::from_usize(val(a).len().max(1)).unwrap();
                accumulate(adj, a, Tensor::full(val(a).shape(), dy.item() / n));
            }
            Op::Concat(ids, axis) => {
                let mut offset = 0;
                for &p in ids {
                    let pv = val(p);
                    let (pm, pn) = (pv.rows(), pv.cols());
                    if wants(p) {
                        let g = if *axis == 0 {
                            let c = dy.cols();
                            Tensor::matrix(pm, pn, dy.data()[offset * c..(offset + pm) * c].to_vec())
                        } else {
                            let mut data = Vec::with_capacity(pm * pn);
                            for i in 0..pm {
                                data.extend_from_slice(&dy.row(i)[offset..offset + pn]);
                            }
                            Tensor::matrix(pm, pn, data)
                        };
                        accumulate(adj, p, g);
                    }
                    offset += if *axis == 0 { pm } else { pn };
                }
            }
            &Op::Slice(a, axis, start, end) => {
                let av = val(a);
                let (m, n) = (av.rows(), av.cols());
                let mut g = Tensor::zeros(&[m, n]);
                if axis == 0 {
                    g.data_mut()[start * n..end * n].copy_from_slice(dy.data());
                } else {
                    for i in 0..m {
                        g.row_mut(i)[start..end].copy_from_slice(dy.row(i));
                    }
                }
                accumulate(adj, a, g);
            }
        }
    }
}

fn column_sums<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let n = dy.cols();
    let mut s = vec![T::zero(); n];
    for r in dy.iter_rows() {
        for (acc, &v) in s.iter_mut().zip(r) {
            *acc += v;
        }
    }
    Tensor::matrix(1, n, s)
}

fn accumulate<T: Scalar>(adj: &mut [Option<Tensor<T>>], i: usize, g: Tensor<T>) {
    match &mut adj[i] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints produced by one reverse sweep.
pub struct Gradients<T> {
    adj: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of a watched leaf (or any node that received one).
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.adj.get(v.0).and_then(|a| a.as_ref())
    }

    /// Per-parameter gradients in store order. Parameters that did not take
    /// part in the forward pass get zeros; a parameter bound several times
    /// receives the sum of its adjoints.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        for &(id, node) in &self.params {
            if let Some(g) = &self.adj[node] {
                for (o, &v) in out[id.index()].data_mut().iter_mut().zip(g.data()) {
                    *o += v;
                }
            }
        }
        out
    }
}
