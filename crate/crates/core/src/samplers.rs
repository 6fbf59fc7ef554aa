//! Axis-aligned slice sampling with SIR initialization, chain diagnostics,
//! MAP optimization and trapezoid quadrature.

use std::fmt::Write as _;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{ContinuousDistribution, Prior};
use crate::ndiff::{AdamConfig, ParamStore, Tensor};
use crate::simulators::stream_rng;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("initialization failed: {0}")]
    Init(String),
    #[error("log-target is not finite at {0:?}")]
    NonFinite(Vec<f64>),
    #[error("all {restarts} MAP restarts diverged: {trace}")]
    MapDiverged { restarts: usize, trace: String },
    #[error("density evaluation failed: {0}")]
    Density(String),
}

/// Unnormalized log-density over parameter space; `−∞` outside the support.
pub type LogTarget<'a> = dyn Fn(&[f64]) -> f64 + Sync + 'a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    Sir,
    Prior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub thin: usize,
    pub init: InitMethod,
    pub sir_pool: usize,
    /// Initial slice width per dimension; one prior std when absent.
    pub step_width: Option<Vec<f64>>,
    pub max_step_outs: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 100,
            warmup: 1000,
            thin: 2,
            init: InitMethod::Sir,
            sir_pool: 1000,
            step_width: None,
            max_step_outs: 50,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.chains == 0 || self.thin == 0 || self.sir_pool == 0 || self.max_step_outs == 0 {
            return Err(SamplerError::Config(
                "chains, thin, sir_pool and max_step_outs must be ≥ 1".into(),
            ));
        }
        if self.init == InitMethod::Sir && self.sir_pool < self.chains {
            return Err(SamplerError::Config(format!(
                "SIR pool of {} cannot seed {} chains",
                self.sir_pool, self.chains
            )));
        }
        if let Some(w) = &self.step_width {
            if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(SamplerError::Config("step widths must be positive and finite".into()));
            }
        }
        Ok(())
    }

    fn widths(&self, prior: &Prior) -> Result<Vec<f64>, SamplerError> {
        match &self.step_width {
            Some(w) if w.len() != prior.dim() => Err(SamplerError::Config(format!(
                "{} step widths for a {}-dimensional prior",
                w.len(),
                prior.dim()
            ))),
            Some(w) => Ok(w.clone()),
            None => Ok(prior
                .std()
                .into_iter()
                .map(|s| if s.is_finite() && s > 0.0 { s } else { 1.0 })
                .collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainDiagnostics {
    /// Per chain: accepted slice proposals over all proposals.
    pub acceptance: Vec<f64>,
    /// Split-R̂ per dimension.
    pub rhat: Vec<f64>,
    /// Effective sample size per dimension.
    pub ess: Vec<f64>,
    pub draws_per_chain: usize,
}

impl ChainDiagnostics {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().copied().fold(1.0, f64::max)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("dimension\trhat\tess\n");
        for (d, (r, e)) in self.rhat.iter().zip(&self.ess).enumerate() {
            writeln!(s, "{d}\t{r:.6}\t{e:.1}").unwrap();
        }
        s.push_str("chain\tacceptance\n");
        for (c, a) in self.acceptance.iter().enumerate() {
            writeln!(s, "{c}\t{a:.4}").unwrap();
        }
        s
    }

    /// Compute diagnostics from per-chain draws (each `n × D`).
    pub fn from_chains(chains: &[Tensor<f64>], acceptance: Vec<f64>) -> Self {
        let n = chains.first().map_or(0, |c| c.rows());
        let dim = chains.first().map_or(0, |c| c.cols());
        let mut rhat = Vec::with_capacity(dim);
        let mut ess = Vec::with_capacity(dim);
        for d in 0..dim {
            let cols: Vec<Vec<f64>> = chains.iter().map(|c| c.column(d)).collect();
            rhat.push(split_rhat(&cols));
            ess.push(effective_sample_size(&cols));
        }
        Self {
            acceptance,
            rhat,
            ess,
            draws_per_chain: n,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Within-chain variance and the pooled variance estimate.
fn variance_components(chains: &[&[f64]]) -> (f64, f64) {
    let n = chains[0].len() as f64;
    let w = chains.iter().map(|c| sample_var(c)).sum::<f64>() / chains.len() as f64;
    let b_over_n = if chains.len() > 1 {
        sample_var(&chains.iter().map(|c| mean(c)).collect::<Vec<_>>())
    } else {
        0.0
    };
    (w, (n - 1.0) / n * w + b_over_n)
}

/// Split-R̂ of one scalar quantity; at least 1, infinite when fewer than
/// four draws per chain are available.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains.first().map_or(0, Vec::len);
    if n < 4 {
        return f64::INFINITY;
    }
    let h = n / 2;
    let halves: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..h], &c[n - h..]]).collect();
    let (w, var_plus) = variance_components(&halves);
    if w <= 0.0 {
        return if var_plus <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    (var_plus / w).sqrt().max(1.0)
}

/// Multi-chain effective sample size with Geyer's initial positive
/// sequence, clamped to `[1, total draws]`.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let n = chains.first().map_or(0, Vec::len);
    let total = (n * chains.len()) as f64;
    if n < 4 {
        return total;
    }
    let refs: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
    let (w, var_plus) = variance_components(&refs);
    if var_plus <= 0.0 {
        return total;
    }
    let centered: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| {
            let m = mean(c);
            c.iter().map(|x| x - m).collect()
        })
        .collect();
    let rho = |t: usize| {
        let acov = centered
            .iter()
            .map(|c| c[..n - t].iter().zip(&c[t..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
            .sum::<f64>()
            / chains.len() as f64;
        1.0 - (w - acov) / var_plus
    };
    let mut tau = -1.0;
    let mut t = 0;
    while t + 1 < n {
        let pair = rho(t) + rho(t + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        t += 2;
    }
    (total / tau.max(1.0 / total)).clamp(1.0, total)
}

/// Monte-Carlo standard error of the mean by batch means with about `√n`
/// batches of `⌊√n⌋` draws.
pub fn batch_means_mcse(xs: &[f64]) -> f64 {
    let n = xs.len();
    let b = (n as f64).sqrt().floor() as usize;
    if b < 2 {
        return f64::NAN;
    }
    let batches = n / b;
    let means: Vec<f64> = (0..batches).map(|k| mean(&xs[k * b..(k + 1) * b])).collect();
    (sample_var(&means) / batches as f64).sqrt()
}

/// One coordinate update by stepping out and shrinkage. Returns the new log
/// target value and the number of shrinkage proposals used.
pub fn slice_update(
    target: &LogTarget,
    x: &mut [f64],
    lp: f64,
    d: usize,
    width: f64,
    max_step_outs: usize,
    rng: &mut dyn RngCore,
) -> (f64, usize) {
    let e: f64 = Exp1.sample(rng);
    let level = lp - e;
    let x0 = x[d];
    let eval = |v: f64, x: &mut [f64]| {
        x[d] = v;
        target(x)
    };
    let mut left = x0 - width * rng.random::<f64>();
    let mut right = left + width;
    // split the step-out budget between the two ends, as in Neal (2003)
    let mut j = (max_step_outs as f64 * rng.random::<f64>()).floor() as usize;
    let mut k = max_step_outs - 1 - j.min(max_step_outs - 1);
    while j > 0 && eval(left, x) > level {
        left -= width;
        j -= 1;
    }
    while k > 0 && eval(right, x) > level {
        right += width;
        k -= 1;
    }
    let mut proposals = 0;
    loop {
        proposals += 1;
        let v = left + (right - left) * rng.random::<f64>();
        let lv = eval(v, x);
        if lv > level {
            return (lv, proposals);
        }
        if v < x0 {
            left = v;
        } else {
            right = v;
        }
        if right - left < 1e-300 {
            x[d] = x0;
            return (lp, proposals);
        }
    }
}

/// One full sweep over all coordinates in fixed order.
pub fn slice_sweep(
    target: &LogTarget,
    x: &mut [f64],
    lp: f64,
    widths: &[f64],
    max_step_outs: usize,
    rng: &mut dyn RngCore,
) -> (f64, usize) {
    let mut lp = lp;
    let mut proposals = 0;
    for (d, &w) in widths.iter().enumerate() {
        let (l, p) = slice_update(target, x, lp, d, w, max_step_outs, rng);
        lp = l;
        proposals += p;
    }
    (lp, proposals)
}

/// Systematic resampling of `count` indices from unnormalized log-weights.
pub fn systematic_resample(log_w: &[f64], count: usize, rng: &mut dyn RngCore) -> Option<Vec<usize>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let u0 = rng.random::<f64>();
    let mut out = Vec::with_capacity(count);
    let (mut acc, mut i) = (w[0] / total, 0);
    for k in 0..count {
        let u = (u0 + k as f64) / count as f64;
        while u > acc && i + 1 < w.len() {
            i += 1;
            acc += w[i] / total;
        }
        out.push(i);
    }
    Some(out)
}

/// Initial points resampled from a prior pool with weights
/// `∝ exp(log target − log prior)`, in pool order.
pub fn sir_init(
    target: &LogTarget,
    prior: &Prior,
    pool_size: usize,
    chains: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<Vec<f64>>, SamplerError> {
    if pool_size < chains {
        return Err(SamplerError::Config(format!(
            "pool {pool_size} smaller than chain count {chains}"
        )));
    }
    let mut pool: Vec<Vec<f64>> = (0..pool_size).map(|_| prior.sample(rng)).collect();
    // systematic resampling over a coordinate-ordered pool keeps the share of
    // chains in each region of the first axis within one of its weight
    pool.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let log_w: Vec<f64> = pool
        .iter()
        .map(|p| {
            let lw = target(p) - prior.log_prob(p).unwrap_or(f64::NEG_INFINITY);
            if lw.is_nan() {
                f64::NEG_INFINITY
            } else {
                lw
            }
        })
        .collect();
    let idx = systematic_resample(&log_w, chains, rng)
        .ok_or_else(|| SamplerError::Init(format!("log-target is −∞ at all {pool_size} SIR candidates")))?;
    Ok(idx.into_iter().map(|i| pool[i].clone()).collect())
}

fn prior_init(target: &LogTarget, prior: &Prior, rng: &mut dyn RngCore) -> Result<Vec<f64>, SamplerError> {
    for _ in 0..1000 {
        let p = prior.sample(rng);
        if target(&p).is_finite() {
            return Ok(p);
        }
    }
    Err(SamplerError::Init("no finite log-target among 1000 prior draws".into()))
}

/// `n` draws pooled chain-major across `cfg.chains` chains after warmup and
/// thinning. Chain `c` uses RNG stream `c + 1` of `seed`; stream 0 drives
/// initialization.
pub fn slice_sample(
    target: &LogTarget,
    prior: &Prior,
    cfg: &SamplerConfig,
    seed: u64,
    n: usize,
) -> Result<(Tensor<f64>, ChainDiagnostics), SamplerError> {
    cfg.validate()?;
    let widths = cfg.widths(prior)?;
    let dim = prior.dim();
    let mut init_rng = stream_rng(seed, 0);
    let starts = match cfg.init {
        InitMethod::Sir => sir_init(target, prior, cfg.sir_pool, cfg.chains, &mut init_rng)?,
        InitMethod::Prior => (0..cfg.chains)
            .map(|_| prior_init(target, prior, &mut init_rng))
            .collect::<Result<_, _>>()?,
    };
    let per_chain = n.div_ceil(cfg.chains);
    let runs: Vec<Result<(Tensor<f64>, f64), SamplerError>> = starts
        .into_par_iter()
        .enumerate()
        .map(|(c, mut x)| {
            let mut rng = stream_rng(seed, c as u64 + 1);
            let mut lp = target(&x);
            if !lp.is_finite() {
                return Err(SamplerError::NonFinite(x));
            }
            let mut proposals = 0;
            let sweeps = cfg.warmup + per_chain * cfg.thin;
            let mut out = Vec::with_capacity(per_chain * dim);
            for s in 0..sweeps {
                let (l, p) = slice_sweep(target, &mut x, lp, &widths, cfg.max_step_outs, &mut rng);
                lp = l;
                proposals += p;
                if s >= cfg.warmup && (s - cfg.warmup + 1).is_multiple_of(cfg.thin) {
                    out.extend_from_slice(&x);
                }
            }
            let acc = (sweeps * dim) as f64 / proposals.max(1) as f64;
            Ok((Tensor::matrix(per_chain, dim, out), acc))
        })
        .collect();
    let mut chains = Vec::with_capacity(cfg.chains);
    let mut acceptance = Vec::with_capacity(cfg.chains);
    for r in runs {
        let (t, a) = r?;
        chains.push(t);
        acceptance.push(a);
    }
    let diag = ChainDiagnostics::from_chains(&chains, acceptance);
    let parts: Vec<&Tensor<f64>> = chains.iter().collect();
    let pooled = Tensor::vstack(&parts).map_err(|e| SamplerError::Config(e.to_string()))?;
    let keep: Vec<usize> = (0..n).collect();
    Ok((pooled.select_rows(&keep), diag))
}

/// A log-density with gradients with respect to its argument.
pub trait DifferentiableDensity: Sync {
    fn dim(&self) -> usize;

    fn log_density_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>), SamplerError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    pub theta: Vec<f64>,
    pub log_density: f64,
    /// Log-density after every step, per restart.
    pub traces: Vec<Vec<f64>>,
}

pub const MAP_LEARNING_RATE: f64 = 0.01;
pub const MAP_STEPS: usize = 1000;

/// Gradient ascent with Adam from each start, projected onto the prior
/// support after every step; the restart with the highest final
/// log-density wins.
pub fn map_estimate(density: &dyn DifferentiableDensity, prior: &Prior, starts: &[Vec<f64>]) -> Result<MapResult, SamplerError> {
    map_estimate_with(density, prior, starts, MAP_STEPS, &AdamConfig::with_lr(MAP_LEARNING_RATE))
}

pub fn map_estimate_with(
    density: &dyn DifferentiableDensity,
    prior: &Prior,
    starts: &[Vec<f64>],
    steps: usize,
    adam: &AdamConfig,
) -> Result<MapResult, SamplerError> {
    let dim = density.dim();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut traces = Vec::with_capacity(starts.len());
    let mut failures = Vec::new();
    for (r, start) in starts.iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("theta", Tensor::matrix(1, dim, start.clone()));
        let mut trace = Vec::with_capacity(steps + 1);
        let mut last = None;
        for _ in 0..=steps {
            let theta = store.value(id).data().to_vec();
            let (lp, grad) = match density.log_density_grad(&theta) {
                Ok(v) if v.0.is_finite() && v.1.iter().all(|g| g.is_finite()) => v,
                Ok(v) => {
                    failures.push(format!("restart {r}: non-finite log-density {} at {theta:?}", v.0));
                    last = None;
                    break;
                }
                Err(e) => {
                    failures.push(format!("restart {r}: {e}"));
                    last = None;
                    break;
                }
            };
            trace.push(lp);
            last = Some((theta, lp));
            if trace.len() > steps {
                break;
            }
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            store
                .adam_step(&[Tensor::matrix(1, dim, neg)], adam)
                .map_err(|e| SamplerError::Density(e.to_string()))?;
            prior.clamp(store.value_mut(id).data_mut());
        }
        traces.push(trace);
        if let Some((theta, lp)) = last {
            if best.as_ref().is_none_or(|b| lp > b.1) {
                best = Some((theta, lp));
            }
        }
    }
    let (mut theta, log_density) = best.ok_or_else(|| SamplerError::MapDiverged {
        restarts: starts.len(),
        trace: failures.join("; "),
    })?;
    prior.clamp(&mut theta);
    Ok(MapResult {
        theta,
        log_density,
        traces,
    })
}

/// Trapezoid nodes and weights on `[a, b]`.
pub fn trapezoid_rule(a: f64, b: f64, nodes: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(nodes >= 2, "trapezoid rule needs at least two nodes");
    let h = (b - a) / (nodes - 1) as f64;
    let xs = (0..nodes).map(|i| a + i as f64 * h).collect();
    let ws = (0..nodes)
        .map(|i| if i == 0 || i == nodes - 1 { 0.5 * h } else { h })
        .collect();
    (xs, ws)
}

/// Trapezoid estimate of `∫_a^b f`.
pub fn quadrature_1d(f: impl Fn(f64) -> f64, (a, b): (f64, f64), nodes: usize) -> f64 {
    let (xs, ws) = trapezoid_rule(a, b, nodes);
    xs.iter().zip(&ws).map(|(x, w)| w * f(*x)).sum()
}

/// Tensor-product trapezoid estimate over a rectangle.
pub fn quadrature_2d(f: impl Fn(f64, f64) -> f64, x: (f64, f64), y: (f64, f64), nodes: (usize, usize)) -> f64 {
    let (xs, wx) = trapezoid_rule(x.0, x.1, nodes.0);
    let (ys, wy) = trapezoid_rule(y.0, y.1, nodes.1);
    let mut total = 0.0;
    for (xi, wi) in xs.iter().zip(&wx) {
        for (yj, wj) in ys.iter().zip(&wy) {
            total += wi * wj * f(*xi, *yj);
        }
    }
    total
}
