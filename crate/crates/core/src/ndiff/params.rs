use std::io::{BufRead, Write};

use crate::scalar::Scalar;

use super::tensor::Tensor;
use super::NdiffError;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T: Scalar> {
    name: String,
    value: Tensor<T>,
    first_moment: Tensor<T>,
    second_moment: Tensor<T>,
}

/// Named trainable tensors together with their Adam accumulators.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<Entry<T>>,
    step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

const MAGIC: &str = "sbi-paramstore v1";

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            step: 0,
        }
    }

    /// Register a parameter. Names must be unique within a store.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter name {name}");
        let zeros = Tensor::zeros(value.shape());
        self.entries.push(Entry {
            name,
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Snapshot of all parameter values (used for checkpoints).
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Restore values from a [`ParamStore::snapshot`]. Moments are left as is.
    pub fn restore(&mut self, snapshot: &[Tensor<T>]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for (e, v) in self.entries.iter_mut().zip(snapshot) {
            e.value = v.clone();
        }
    }

    /// Copy values from another store by name; every parameter of `self`
    /// must be present there with the same shape.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<(), NdiffError> {
        for e in &mut self.entries {
            let id = other
                .find(&e.name)
                .ok_or_else(|| NdiffError::Format(format!("missing parameter {}", e.name)))?;
            let v = other.value(id);
            if v.shape() != e.value.shape() {
                return Err(NdiffError::ShapeMismatch {
                    op: "load_values",
                    lhs: e.value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            e.value = v.clone();
        }
        Ok(())
    }

    /// Bias-corrected Adam update.
    pub fn adam_step(&mut self, grads: &[Tensor<T>], cfg: &AdamConfig) -> Result<(), NdiffError> {
        if grads.len() != self.entries.len() {
            return Err(NdiffError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![self.entries.len()],
                rhs: vec![grads.len()],
            });
        }
        for (e, g) in self.entries.iter().zip(grads) {
            if g.shape() != e.value.shape() {
                return Err(NdiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: e.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(NdiffError::NonFiniteGradient { param: e.name.clone() });
            }
        }
        self.step += 1;
        let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
        let t = self.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::c(cfg.lr), T::c(cfg.eps));
        for (e, g) in self.entries.iter_mut().zip(grads) {
            let m = e.first_moment.data_mut();
            let v = e.second_moment.data_mut();
            let p = e.value.data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Text manifest (one `param` line per tensor with shape and byte
    /// offset) followed by the values as little-endian `f64`, in declaration
    /// order.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), NdiffError> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "count {}", self.entries.len())?;
        let mut offset = 0usize;
        for e in &self.entries {
            let shape: Vec<String> = e.value.shape().iter().map(|s| s.to_string()).collect();
            writeln!(
                w,
                "param {} shape {} offset {} len {}",
                e.name,
                if shape.is_empty() { "-".to_string() } else { shape.join(",") },
                offset,
                e.value.len()
            )?;
            offset += 8 * e.value.len();
        }
        writeln!(w, "bytes {offset}")?;
        for e in &self.entries {
            for &x in e.value.data() {
                w.write_all(&x.f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self, NdiffError> {
        let mut line = String::new();
        let mut next_line = |r: &mut dyn BufRead| -> Result<String, NdiffError> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(NdiffError::Format("unexpected end of manifest".into()));
            }
            Ok(line.trim_end().to_string())
        };
        if next_line(r)? != MAGIC {
            return Err(NdiffError::Format("bad parameter store header".into()));
        }
        let count: usize = next_line(r)?
            .strip_prefix("count ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| NdiffError::Format("missing count".into()))?;
        let mut specs = Vec::with_capacity(count);
        for _ in 0..count {
            let l = next_line(r)?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() != 8 || toks[0] != "param" || toks[2] != "shape" || toks[4] != "offset" {
                return Err(NdiffError::Format(format!("bad manifest line: {l}")));
            }
            let shape: Vec<usize> = if toks[3] == "-" {
                vec![]
            } else {
                toks[3]
                    .split(',')
                    .map(|s| s.parse().map_err(|_| NdiffError::Format(format!("bad shape {s}"))))
                    .collect::<Result<_, _>>()?
            };
            let offset: usize = toks[5]
                .parse()
                .map_err(|_| NdiffError::Format(format!("bad offset {}", toks[5])))?;
            specs.push((toks[1].to_string(), shape, offset));
        }
        let total: usize = next_line(r)?
            .strip_prefix("bytes ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| NdiffError::Format("missing byte count".into()))?;
        let mut blob = vec![0u8; total];
        r.read_exact(&mut blob)?;
        let mut store = ParamStore::new();
        for (name, shape, offset) in specs {
            let n: usize = shape.iter().product();
            let end = offset + 8 * n;
            if end > blob.len() {
                return Err(NdiffError::Format(format!("parameter {name} overruns data")));
            }
            let data = blob[offset..end]
                .chunks_exact(8)
                .map(|c| T::c(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            store.add(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v));
        (s, id)
    }

    #[test]
    fn adam_first_step_matches_hand_formula() {
        // m1 = 0.1 g, v1 = 0.001 g²; m̂ = g, v̂ = g²; Δ = -lr·g/(|g| + ε).
        let (mut s, id) = scalar_store(1.0);
        let g = 0.3;
        let cfg = AdamConfig::with_lr(0.01);
        s.adam_step(&[Tensor::scalar(g)], &cfg).unwrap();
        let expected = 1.0 - 0.01 * g / (g + 1e-8);
        assert!((s.value(id).item() - expected).abs() < 1e-15);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let (mut s, id) = scalar_store(2.5);
        s.adam_step(&[Tensor::scalar(0.0)], &AdamConfig::default()).unwrap();
        assert_eq!(s.value(id).item(), 2.5);
    }

    #[test]
    fn adam_moves_against_constant_gradient() {
        let (mut s, id) = scalar_store(0.0);
        let cfg = AdamConfig::with_lr(0.1);
        s.adam_step(&[Tensor::scalar(-2.0)], &cfg).unwrap();
        let p1 = s.value(id).item();
        s.adam_step(&[Tensor::scalar(-2.0)], &cfg).unwrap();
        let p2 = s.value(id).item();
        assert!(p1 > 0.0 && p2 > p1);
        assert!(s.step() == 2);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let (mut s, _) = scalar_store(0.0);
        let err = s.adam_step(&[Tensor::scalar(f64::NAN)], &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, NdiffError::NonFiniteGradient { .. }));
        assert_eq!(s.step(), 0);
        let err = s.adam_step(&[Tensor::zeros(&[2])], &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, NdiffError::ShapeMismatch { .. }));
    }

    #[test]
    fn manifest_round_trip() {
        let mut s = ParamStore::<f64>::new();
        s.add("layer.0.weight", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 1e-300, 0.1, 7.0]));
        s.add("layer.0.bias", Tensor::matrix(1, 3, vec![0.25, 0.5, -0.75]));
        s.add("scalar", Tensor::scalar(std::f64::consts::PI));
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let text_end = buf.windows(6).position(|w| w == b"bytes ").unwrap();
        let header = std::str::from_utf8(&buf[..text_end]).unwrap();
        assert!(header.contains("param layer.0.bias shape 1,3 offset 48 len 3"));
        let back = ParamStore::<f64>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        for id in s.ids() {
            assert_eq!(back.name(id), s.name(id));
            assert_eq!(back.value(id), s.value(id));
        }
    }
}
