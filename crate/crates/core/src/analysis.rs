//! Posterior summaries: Monte-Carlo moments, conditional slices by
//! quadrature, Bayesian decisions and corner-plot histograms.

use std::fmt::Write as _;

use thiserror::Error;

use crate::distributions::{ContinuousDistribution, Prior};
use crate::inference::{InferenceError, Posterior};
use crate::ndiff::Tensor;
use crate::samplers::{batch_means_mcse, trapezoid_rule};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("{0}")]
    Invalid(String),
    #[error("conditional slice is degenerate: every grid density is zero")]
    DegenerateSlice,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentReport {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Batch-means standard error of each mean.
    pub mcse: Vec<f64>,
}

impl MomentReport {
    pub fn to_table(&self) -> String {
        let mut s = String::from("dimension\tmean\tstd\tmcse\n");
        for d in 0..self.mean.len() {
            writeln!(s, "{d}\t{:.8e}\t{:.8e}\t{:.8e}", self.mean[d], self.std[d], self.mcse[d]).unwrap();
        }
        s.push_str("# covariance\n");
        for row in &self.covariance {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
            writeln!(s, "{}", cells.join("\t")).unwrap();
        }
        s
    }
}

/// Plug-in mean, std and covariance of the sample rows.
pub fn marginal_moments(samples: &Tensor<f64>) -> Result<MomentReport, AnalysisError> {
    let n = samples.rows();
    if n < 100 {
        return Err(AnalysisError::Invalid(format!("moments need at least 100 draws, got {n}")));
    }
    let d = samples.cols();
    let cols: Vec<Vec<f64>> = (0..d).map(|j| samples.column(j)).collect();
    let mean: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let mut covariance = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in i..d {
            let c = cols[i]
                .iter()
                .zip(&cols[j])
                .map(|(a, b)| (a - mean[i]) * (b - mean[j]))
                .sum::<f64>()
                / (n - 1) as f64;
            covariance[i][j] = c;
            covariance[j][i] = c;
        }
    }
    Ok(MomentReport {
        std: (0..d).map(|i| covariance[i][i].sqrt()).collect(),
        mcse: cols.iter().map(|c| batch_means_mcse(c)).collect(),
        mean,
        covariance,
    })
}

/// Moments of `n` posterior draws at `x_o`.
pub fn posterior_moments(posterior: &Posterior, x_o: &Tensor<f64>, n: usize, seed: u64) -> Result<MomentReport, AnalysisError> {
    marginal_moments(&posterior.sample(x_o, n, seed)?.samples)
}

pub const DEFAULT_NODES_1D: usize = 512;
pub const DEFAULT_NODES_2D: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalSlice {
    /// One or two conditioned dimensions.
    pub dims: Vec<usize>,
    /// Values of every coordinate; the sliced ones are overwritten on the grid.
    pub point: Vec<f64>,
    /// Grid nodes per sliced dimension.
    pub grid: Vec<Vec<f64>>,
    /// Normalized density on the grid, row-major over the sliced dimensions.
    pub density: Vec<f64>,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl ConditionalSlice {
    pub fn std(&self) -> Vec<f64> {
        (0..self.dims.len()).map(|i| self.covariance[i][i].sqrt()).collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let names: Vec<String> = self.dims.iter().map(|d| format!("theta_{d}")).collect();
        writeln!(s, "# point {:?}", self.point).unwrap();
        writeln!(s, "# mean {:?}", self.mean).unwrap();
        writeln!(s, "{}\tdensity", names.join("\t")).unwrap();
        let n1 = self.grid.get(1).map_or(1, Vec::len);
        for (k, p) in self.density.iter().enumerate() {
            if self.dims.len() == 1 {
                writeln!(s, "{:.8e}\t{p:.8e}", self.grid[0][k]).unwrap();
            } else {
                writeln!(s, "{:.8e}\t{:.8e}\t{p:.8e}", self.grid[0][k / n1], self.grid[1][k % n1]).unwrap();
            }
        }
        s
    }
}

/// Integration interval of one prior dimension: its support, or eight
/// standard deviations either side of the mean when unbounded.
fn slice_bounds(prior: &Prior, d: usize) -> (f64, f64) {
    let (lo, hi) = prior.bounds()[d];
    let (m, s) = (prior.mean()[d], prior.std()[d]);
    (
        if lo.is_finite() { lo } else { m - 8.0 * s },
        if hi.is_finite() { hi } else { m + 8.0 * s },
    )
}

/// Batched log-density over rows of parameters.
pub type LogDensityFn<'a> = dyn Fn(&Tensor<f64>) -> Result<Vec<f64>, AnalysisError> + 'a;

/// Conditional density of one or two coordinates with the others held at
/// `point`, normalized by trapezoid quadrature over the prior support.
pub fn conditional_slice(
    log_density: &LogDensityFn,
    prior: &Prior,
    dims: &[usize],
    point: &[f64],
    nodes: usize,
) -> Result<ConditionalSlice, AnalysisError> {
    let dim = prior.dim();
    if dims.is_empty() || dims.len() > 2 || dims.iter().any(|&d| d >= dim) || (dims.len() == 2 && dims[0] == dims[1]) {
        return Err(AnalysisError::Invalid(format!(
            "condition on one or two distinct dimensions below {dim}, got {dims:?}"
        )));
    }
    if point.len() != dim || !prior.in_support(point) {
        return Err(AnalysisError::Invalid(
            "conditioning point must lie in the prior support".into(),
        ));
    }
    if nodes < 16 {
        return Err(AnalysisError::Invalid("quadrature needs at least 16 nodes per axis".into()));
    }
    let rules: Vec<(Vec<f64>, Vec<f64>)> = dims
        .iter()
        .map(|&d| {
            let (a, b) = slice_bounds(prior, d);
            trapezoid_rule(a, b, nodes)
        })
        .collect();
    let cells: Vec<Vec<usize>> = if dims.len() == 1 {
        (0..nodes).map(|i| vec![i]).collect()
    } else {
        (0..nodes * nodes).map(|k| vec![k / nodes, k % nodes]).collect()
    };
    let mut pts = Vec::with_capacity(cells.len() * dim);
    for c in &cells {
        let mut p = point.to_vec();
        for (j, &d) in dims.iter().enumerate() {
            p[d] = rules[j].0[c[j]];
        }
        pts.extend(p);
    }
    let lps = log_density(&Tensor::matrix(cells.len(), dim, pts))?;
    let max = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(AnalysisError::DegenerateSlice);
    }
    let weights: Vec<f64> = cells
        .iter()
        .map(|c| (0..dims.len()).map(|j| rules[j].1[c[j]]).product())
        .collect();
    let unnorm: Vec<f64> = lps.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = unnorm.iter().zip(&weights).map(|(p, w)| p * w).sum();
    if !(z > 0.0) {
        return Err(AnalysisError::DegenerateSlice);
    }
    let density: Vec<f64> = unnorm.iter().map(|p| p / z).collect();
    let k = dims.len();
    let coord = |c: &[usize], j: usize| rules[j].0[c[j]];
    let mean: Vec<f64> = (0..k)
        .map(|j| {
            cells
                .iter()
                .zip(&density)
                .zip(&weights)
                .map(|((c, p), w)| coord(c, j) * p * w)
                .sum()
        })
        .collect();
    let mut covariance = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in 0..k {
            covariance[a][b] = cells
                .iter()
                .zip(&density)
                .zip(&weights)
                .map(|((c, p), w)| (coord(c, a) - mean[a]) * (coord(c, b) - mean[b]) * p * w)
                .sum();
        }
    }
    Ok(ConditionalSlice {
        dims: dims.to_vec(),
        point: point.to_vec(),
        grid: rules.into_iter().map(|r| r.0).collect(),
        density,
        mean,
        covariance,
    })
}

/// Conditional slice of a direct or ensemble posterior at `x_o`.
pub fn conditional_moments(
    posterior: &Posterior,
    x_o: &Tensor<f64>,
    dims: &[usize],
    point: &[f64],
    nodes: usize,
) -> Result<ConditionalSlice, AnalysisError> {
    let f = |t: &Tensor<f64>| posterior.log_prob(t, x_o).map_err(AnalysisError::from);
    conditional_slice(&f, posterior.prior(), dims, point, nodes)
}

/// The highest-density draw among `n` posterior samples.
pub fn default_conditioning_point(
    posterior: &Posterior,
    x_o: &Tensor<f64>,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>, AnalysisError> {
    let s = posterior.sample(x_o, n, seed)?.samples;
    let lp = posterior.log_prob(&s, x_o)?;
    let best = (0..lp.len())
        .max_by(|&a, &b| lp[a].total_cmp(&lp[b]))
        .ok_or_else(|| AnalysisError::Invalid("no draws".into()))?;
    Ok(s.row(best).to_vec())
}

/// Finite action set with a cost per `(θ, action)`.
pub struct DecisionProblem<'a, A> {
    pub actions: Vec<A>,
    pub cost: &'a dyn Fn(&[f64], &A) -> f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionResult {
    /// Index of the chosen action.
    pub best: usize,
    pub expected_cost: Vec<f64>,
    pub mcse: Vec<f64>,
    /// Actions whose expected cost is within one MCSE of the paired
    /// difference to the minimum, in listed order.
    pub tied: Vec<usize>,
}

/// Monte-Carlo expected cost of each action over the same draws; the
/// first-listed action among those tied with the minimum wins.
pub fn optimal_action<A>(samples: &Tensor<f64>, problem: &DecisionProblem<A>) -> Result<DecisionResult, AnalysisError> {
    if problem.actions.is_empty() {
        return Err(AnalysisError::Invalid("empty action set".into()));
    }
    let n = samples.rows();
    if n == 0 {
        return Err(AnalysisError::Invalid("no posterior draws".into()));
    }
    let costs: Vec<Vec<f64>> = problem
        .actions
        .iter()
        .map(|a| samples.iter_rows().map(|t| (problem.cost)(t, a)).collect())
        .collect();
    let expected_cost: Vec<f64> = costs.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let se = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        if xs.len() < 2 {
            return 0.0;
        }
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / ((xs.len() - 1) * xs.len()) as f64).sqrt()
    };
    let mcse: Vec<f64> = costs.iter().map(|c| se(c)).collect();
    let argmin = (0..expected_cost.len())
        .min_by(|&a, &b| expected_cost[a].total_cmp(&expected_cost[b]))
        .unwrap();
    let tied: Vec<usize> = (0..costs.len())
        .filter(|&k| {
            let diff: Vec<f64> = costs[k].iter().zip(&costs[argmin]).map(|(a, b)| a - b).collect();
            expected_cost[k] - expected_cost[argmin] <= se(&diff)
        })
        .collect();
    Ok(DecisionResult {
        best: tied[0],
        expected_cost,
        mcse,
        tied,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CornerData {
    /// Bin edges per dimension.
    pub edges: Vec<Vec<f64>>,
    pub marginals: Vec<Vec<usize>>,
    /// `(i, j, counts)` for `i < j`, counts indexed `[bin_i][bin_j]`.
    pub pairs: Vec<(usize, usize, Vec<Vec<usize>>)>,
}

impl CornerData {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (d, e) in self.edges.iter().enumerate() {
            let cells: Vec<String> = e.iter().map(|v| format!("{v:.8e}")).collect();
            writeln!(s, "edges\t{d}\t{}", cells.join("\t")).unwrap();
        }
        for (d, c) in self.marginals.iter().enumerate() {
            let cells: Vec<String> = c.iter().map(|v| v.to_string()).collect();
            writeln!(s, "marginal\t{d}\t{}", cells.join("\t")).unwrap();
        }
        for (i, j, c) in &self.pairs {
            for (b, row) in c.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(s, "pair\t{i}\t{j}\t{b}\t{}", cells.join("\t")).unwrap();
            }
        }
        s
    }
}

/// Histograms of every marginal and every pair of dimensions. Ranges
/// default to the sample extent; values outside a range fall in the edge
/// bins.
pub fn corner_export(samples: &Tensor<f64>, bins: usize, ranges: Option<&[(f64, f64)]>) -> Result<CornerData, AnalysisError> {
    let n = samples.rows();
    if bins == 0 || n < bins * bins {
        return Err(AnalysisError::Invalid(format!(
            "need at least bins² = {} draws, got {n}",
            bins * bins
        )));
    }
    let d = samples.cols();
    let ranges: Vec<(f64, f64)> = match ranges {
        Some(r) if r.len() == d => r.to_vec(),
        Some(r) => return Err(AnalysisError::Invalid(format!("{} ranges for {d} dimensions", r.len()))),
        None => (0..d)
            .map(|j| {
                let c = samples.column(j);
                let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    (lo, hi)
                } else {
                    (lo - 0.5, lo + 0.5)
                }
            })
            .collect(),
    };
    let bin_of = |j: usize, v: f64| {
        let (lo, hi) = ranges[j];
        (((v - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
    };
    let idx: Vec<Vec<usize>> = samples
        .iter_rows()
        .map(|r| (0..d).map(|j| bin_of(j, r[j])).collect())
        .collect();
    let mut marginals = vec![vec![0; bins]; d];
    for r in &idx {
        for j in 0..d {
            marginals[j][r[j]] += 1;
        }
    }
    let mut pairs = Vec::new();
    for i in 0..d {
        for j in i + 1..d {
            let mut c = vec![vec![0; bins]; bins];
            for r in &idx {
                c[r[i]][r[j]] += 1;
            }
            pairs.push((i, j, c));
        }
    }
    let edges = ranges
        .iter()
        .map(|&(lo, hi)| (0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect())
        .collect();
    Ok(CornerData { edges, marginals, pairs })
}
