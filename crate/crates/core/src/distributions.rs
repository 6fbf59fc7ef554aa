//! Analytic distributions: priors, flow bases and mixture components.
//!
//! All densities are over `ℝ^d` with diagonal structure. Support membership
//! uses closed intervals, and `log_prob` returns exactly `-inf` (never NaN)
//! outside the support.

use rand::RngCore;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndiff::Tensor;
use crate::scalar::{log_sum_exp, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum DistError {
    #[error("dimension mismatch: distribution has {expected}, point has {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub(crate) fn std_normal<T: Scalar>(rng: &mut dyn RngCore) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::c(z)
}

fn uniform01(rng: &mut dyn RngCore) -> f64 {
    // 53 random mantissa bits in [0, 1)
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal log-density.
pub fn std_normal_log_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

/// Common interface of the analytic distributions.
pub trait ContinuousDistribution<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<T>;

    fn log_prob(&self, x: &[T]) -> Result<T, DistError>;

    fn in_support(&self, x: &[T]) -> bool;

    fn mean(&self) -> Vec<T>;

    fn std(&self) -> Vec<T>;

    /// Per-dimension closed support interval (possibly infinite).
    fn bounds(&self) -> Vec<(T, T)>;

    /// `n` draws stacked as rows.
    fn sample_n(&self, rng: &mut dyn RngCore, n: usize) -> Tensor<T> {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend(self.sample(rng));
        }
        Tensor::matrix(n, d, data)
    }

    /// Log-density of every row of `x`.
    fn log_prob_rows(&self, x: &Tensor<T>) -> Result<Vec<T>, DistError> {
        x.iter_rows().map(|r| self.log_prob(r)).collect()
    }

    /// Project a point onto the support box.
    fn clamp(&self, x: &mut [T]) {
        for (v, (lo, hi)) in x.iter_mut().zip(self.bounds()) {
            *v = v.max(lo).min(hi);
        }
    }
}

fn check_dim(expected: usize, got: usize) -> Result<(), DistError> {
    if expected == got {
        Ok(())
    } else {
        Err(DistError::Dimension { expected, got })
    }
}

/// Independent uniform coordinates on `[lower, upper]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxUniform<T> {
    lower: Vec<T>,
    upper: Vec<T>,
    log_density: T,
}

impl<T: Scalar> BoxUniform<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self, DistError> {
        check_dim(lower.len(), upper.len())?;
        if lower.is_empty() {
            return Err(DistError::InvalidParameters("empty box".into()));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l < u) || !l.is_finite() || !u.is_finite() {
                return Err(DistError::InvalidParameters(format!(
                    "lower[{i}] = {l} must be finite and below upper[{i}] = {u}"
                )));
            }
        }
        let log_density = -lower.iter().zip(&upper).map(|(&l, &u)| (u - l).ln()).sum::<T>();
        Ok(Self {
            lower,
            upper,
            log_density,
        })
    }

    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }
}

impl<T: Scalar> ContinuousDistribution<T> for BoxUniform<T> {
    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<T> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| l + (u - l) * T::c(uniform01(rng)))
            .collect()
    }

    fn log_prob(&self, x: &[T]) -> Result<T, DistError> {
        check_dim(self.dim(), x.len())?;
        Ok(if self.in_support(x) {
            self.log_density
        } else {
            T::neg_infinity()
        })
    }

    fn in_support(&self, x: &[T]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&v, (&l, &u))| v >= l && v <= u)
    }

    fn mean(&self) -> Vec<T> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| (l + u) * T::c(0.5))
            .collect()
    }

    fn std(&self) -> Vec<T> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| (u - l) / T::c(12f64.sqrt()))
            .collect()
    }

    fn bounds(&self) -> Vec<(T, T)> {
        self.lower.iter().copied().zip(self.upper.iter().copied()).collect()
    }
}

/// Gaussian with diagonal covariance, parameterized by log standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian<T> {
    mean: Vec<T>,
    log_std: Vec<T>,
}

impl<T: Scalar> DiagGaussian<T> {
    pub fn new(mean: Vec<T>, log_std: Vec<T>) -> Result<Self, DistError> {
        check_dim(mean.len(), log_std.len())?;
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(DistError::InvalidParameters("non-finite Gaussian parameter".into()));
        }
        Ok(Self { mean, log_std })
    }

    pub fn from_std(mean: Vec<T>, std: Vec<T>) -> Result<Self, DistError> {
        if std.iter().any(|&s| !(s > T::zero())) {
            return Err(DistError::InvalidParameters("standard deviations must be positive".into()));
        }
        Self::new(mean, std.into_iter().map(|s| s.ln()).collect())
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            log_std: vec![T::zero(); dim],
        }
    }

    pub fn log_std(&self) -> &[T] {
        &self.log_std
    }
}

impl<T: Scalar> ContinuousDistribution<T> for DiagGaussian<T> {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<T> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &ls)| m + ls.exp() * std_normal::<T>(rng))
            .collect()
    }

    fn log_prob(&self, x: &[T]) -> Result<T, DistError> {
        check_dim(self.dim(), x.len())?;
        let mut lp = T::zero();
        for ((&v, &m), &ls) in x.iter().zip(&self.mean).zip(&self.log_std) {
            let z = (v - m) / ls.exp();
            lp += T::c(-0.5) * z * z - ls - T::c(LN_SQRT_2PI);
        }
        Ok(if lp.is_nan() { T::neg_infinity() } else { lp })
    }

    fn in_support(&self, x: &[T]) -> bool {
        x.iter().all(|v| v.is_finite())
    }

    fn mean(&self) -> Vec<T> {
        self.mean.clone()
    }

    fn std(&self) -> Vec<T> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    fn bounds(&self) -> Vec<(T, T)> {
        vec![(T::neg_infinity(), T::infinity()); self.dim()]
    }
}

/// One-dimensional normal restricted to `[low, high]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedNormal<T> {
    loc: T,
    scale: T,
    low: T,
    high: T,
    /// `ln(Φ(β) − Φ(α))`
    log_mass: T,
}

impl<T: Scalar> TruncatedNormal<T> {
    pub fn new(loc: T, scale: T, low: T, high: T) -> Result<Self, DistError> {
        if !(scale > T::zero()) || !(low < high) || !loc.is_finite() {
            return Err(DistError::InvalidParameters(format!(
                "truncated normal needs scale > 0 and low < high (scale {scale}, low {low}, high {high})"
            )));
        }
        let a = ((low - loc) / scale).f64();
        let b = ((high - loc) / scale).f64();
        let mass = normal_cdf(b) - normal_cdf(a);
        if !(mass > 0.0) {
            return Err(DistError::InvalidParameters("truncation interval has zero mass".into()));
        }
        Ok(Self {
            loc,
            scale,
            low,
            high,
            log_mass: T::c(mass.ln()),
        })
    }

    /// Probability mass of the untruncated normal inside `[low, high]`.
    pub fn mass(&self) -> T {
        self.log_mass.exp()
    }

    pub fn cdf(&self, x: T) -> T {
        if x <= self.low {
            return T::zero();
        }
        if x >= self.high {
            return T::one();
        }
        let a = ((self.low - self.loc) / self.scale).f64();
        let z = ((x - self.loc) / self.scale).f64();
        T::c((normal_cdf(z) - normal_cdf(a)) / self.log_mass.f64().exp())
    }
}

impl<T: Scalar> ContinuousDistribution<T> for TruncatedNormal<T> {
    fn dim(&self) -> usize {
        1
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<T> {
        // Rejection against the parent normal; the mass is large for every
        // prior used here, with an inverse-CDF fallback for deep tails.
        if self.mass().f64() > 0.05 {
            loop {
                let x = self.loc + self.scale * std_normal::<T>(rng);
                if x >= self.low && x <= self.high {
                    return vec![x];
                }
            }
        }
        let a = normal_cdf(((self.low - self.loc) / self.scale).f64());
        let b = normal_cdf(((self.high - self.loc) / self.scale).f64());
        let u = a + (b - a) * uniform01(rng);
        let n = statrs::distribution::Normal::standard();
        let z = statrs::distribution::ContinuousCDF::inverse_cdf(&n, u);
        let x = self.loc + self.scale * T::c(z);
        vec![x.max(self.low).min(self.high)]
    }

    fn log_prob(&self, x: &[T]) -> Result<T, DistError> {
        check_dim(1, x.len())?;
        let v = x[0];
        if !self.in_support(x) {
            return Ok(T::neg_infinity());
        }
        let z = (v - self.loc) / self.scale;
        Ok(T::c(-0.5) * z * z - self.scale.ln() - T::c(LN_SQRT_2PI) - self.log_mass)
    }

    fn in_support(&self, x: &[T]) -> bool {
        x[0] >= self.low && x[0] <= self.high
    }

    fn mean(&self) -> Vec<T> {
        let (a, b) = (
            ((self.low - self.loc) / self.scale).f64(),
            ((self.high - self.loc) / self.scale).f64(),
        );
        let z = self.log_mass.f64().exp();
        let phi = |u: f64| std_normal_log_pdf(u).exp();
        vec![self.loc + self.scale * T::c((phi(a) - phi(b)) / z)]
    }

    fn std(&self) -> Vec<T> {
        let (a, b) = (
            ((self.low - self.loc) / self.scale).f64(),
            ((self.high - self.loc) / self.scale).f64(),
        );
        let z = self.log_mass.f64().exp();
        let phi = |u: f64| std_normal_log_pdf(u).exp();
        let r = (phi(a) - phi(b)) / z;
        let var = 1.0 + (a * phi(a) - b * phi(b)) / z - r * r;
        vec![self.scale * T::c(var.max(0.0).sqrt())]
    }

    fn bounds(&self) -> Vec<(T, T)> {
        vec![(self.low, self.high)]
    }
}

/// Finite mixture of diagonal Gaussians with log-softmax-normalized weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDiagGaussian<T> {
    log_weights: Vec<T>,
    components: Vec<DiagGaussian<T>>,
}

impl<T: Scalar> MixtureDiagGaussian<T> {
    /// Weights are given as unnormalized log-weights (logits).
    pub fn new(logits: Vec<T>, components: Vec<DiagGaussian<T>>) -> Result<Self, DistError> {
        check_dim(logits.len(), components.len())?;
        if components.is_empty() {
            return Err(DistError::InvalidParameters("mixture needs a component".into()));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(DistError::InvalidParameters("components differ in dimension".into()));
        }
        let lse = log_sum_exp(&logits);
        if !lse.is_finite() {
            return Err(DistError::InvalidParameters("mixture weights are degenerate".into()));
        }
        Ok(Self {
            log_weights: logits.iter().map(|&l| l - lse).collect(),
            components,
        })
    }

    pub fn log_weights(&self) -> &[T] {
        &self.log_weights
    }

    pub fn components(&self) -> &[DiagGaussian<T>] {
        &self.components
    }

    /// Index drawn from the mixture weights.
    pub fn sample_component(&self, rng: &mut dyn RngCore) -> usize {
        let u = uniform01(rng);
        let mut acc = 0.0;
        for (k, lw) in self.log_weights.iter().enumerate() {
            acc += lw.f64().exp();
            if u < acc {
                return k;
            }
        }
        // rounding: fall back to the last component with nonzero weight
        self.log_weights
            .iter()
            .rposition(|w| w.f64() > f64::NEG_INFINITY)
            .unwrap_or(0)
    }
}

impl<T: Scalar> ContinuousDistribution<T> for MixtureDiagGaussian<T> {
    fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<T> {
        let k = self.sample_component(rng);
        self.components[k].sample(rng)
    }

    fn log_prob(&self, x: &[T]) -> Result<T, DistError> {
        check_dim(self.dim(), x.len())?;
        let terms = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, &lw)| c.log_prob(x).map(|lp| lp + lw))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(log_sum_exp(&terms))
    }

    fn in_support(&self, x: &[T]) -> bool {
        x.iter().all(|v| v.is_finite())
    }

    fn mean(&self) -> Vec<T> {
        let mut m = vec![T::zero(); self.dim()];
        for (c, lw) in self.components.iter().zip(&self.log_weights) {
            for (mi, ci) in m.iter_mut().zip(c.mean()) {
                *mi += lw.exp() * ci;
            }
        }
        m
    }

    fn std(&self) -> Vec<T> {
        let mu = self.mean();
        let mut second = vec![T::zero(); self.dim()];
        for (c, lw) in self.components.iter().zip(&self.log_weights) {
            for ((s, ci), si) in second.iter_mut().zip(c.mean()).zip(c.std()) {
                *s += lw.exp() * (si * si + ci * ci);
            }
        }
        second
            .iter()
            .zip(mu)
            .map(|(&s, m)| (s - m * m).max(T::zero()).sqrt())
            .collect()
    }

    fn bounds(&self) -> Vec<(T, T)> {
        vec![(T::neg_infinity(), T::infinity()); self.dim()]
    }
}

/// Serializable prior description, e.g.
/// `{"kind":"box_uniform","lower":[0.0],"upper":[1.0]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    BoxUniform { lower: Vec<f64>, upper: Vec<f64> },
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    TruncatedNormal { loc: f64, scale: f64, low: f64, high: f64 },
}

/// Validated prior over simulator parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    BoxUniform(BoxUniform<f64>),
    Gaussian(DiagGaussian<f64>),
    TruncatedNormal(TruncatedNormal<f64>),
}

impl Prior {
    pub fn from_spec(spec: &PriorSpec) -> Result<Self, DistError> {
        Ok(match spec {
            PriorSpec::BoxUniform { lower, upper } => Prior::BoxUniform(BoxUniform::new(lower.clone(), upper.clone())?),
            PriorSpec::Gaussian { mean, std } => Prior::Gaussian(DiagGaussian::from_std(mean.clone(), std.clone())?),
            &PriorSpec::TruncatedNormal { loc, scale, low, high } => {
                Prior::TruncatedNormal(TruncatedNormal::new(loc, scale, low, high)?)
            }
        })
    }

    pub fn spec(&self) -> PriorSpec {
        match self {
            Prior::BoxUniform(b) => PriorSpec::BoxUniform {
                lower: b.lower.clone(),
                upper: b.upper.clone(),
            },
            Prior::Gaussian(g) => PriorSpec::Gaussian {
                mean: g.mean.clone(),
                std: g.std(),
            },
            Prior::TruncatedNormal(t) => PriorSpec::TruncatedNormal {
                loc: t.loc,
                scale: t.scale,
                low: t.low,
                high: t.high,
            },
        }
    }

    fn inner(&self) -> &dyn ContinuousDistribution<f64> {
        match self {
            Prior::BoxUniform(b) => b,
            Prior::Gaussian(g) => g,
            Prior::TruncatedNormal(t) => t,
        }
    }

    /// Standard normal prior of the given dimension.
    pub fn standard_normal(dim: usize) -> Self {
        Prior::Gaussian(DiagGaussian::standard(dim))
    }
}

impl ContinuousDistribution<f64> for Prior {
    fn dim(&self) -> usize {
        self.inner().dim()
    }
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.inner().sample(rng)
    }
    fn log_prob(&self, x: &[f64]) -> Result<f64, DistError> {
        self.inner().log_prob(x)
    }
    fn in_support(&self, x: &[f64]) -> bool {
        self.inner().in_support(x)
    }
    fn mean(&self) -> Vec<f64> {
        self.inner().mean()
    }
    fn std(&self) -> Vec<f64> {
        self.inner().std()
    }
    fn bounds(&self) -> Vec<(f64, f64)> {
        self.inner().bounds()
    }
}
