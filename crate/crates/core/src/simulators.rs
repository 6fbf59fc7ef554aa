//! Stochastic simulators and batch dataset generation.
//!
//! A simulator is a pure function of `(θ, rng)`. [`generate_dataset`] draws
//! parameters from a prior, runs the simulator, discards invalid outputs and
//! gives every row its own counter-derived RNG stream so that the result does
//! not depend on the number of workers.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distributions::{BoxUniform, ContinuousDistribution, Prior, PriorSpec, TruncatedNormal};
use crate::ndiff::Tensor;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid parameter for {simulator}: {reason}")]
    InvalidParameter { simulator: &'static str, reason: String },
    #[error("parameter dimension {got} does not match simulator dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(
        "discard rate {rate:.3} exceeds 50% ({discarded} discarded for {n} valid rows); \
         the simulator or prior is likely misspecified"
    )]
    DiscardRate { rate: f64, discarded: u64, n: usize },
    #[error("row {row} produced no valid simulation in {attempts} attempts; the simulator or prior is likely misspecified")]
    RowExhausted { row: usize, attempts: usize },
    #[error("prior dimension {prior} does not match simulator dimension {simulator}")]
    PriorMismatch { prior: usize, simulator: usize },
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Whether outputs are purely continuous or carry a discrete coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Continuous,
    /// First coordinate is a binary choice, the rest continuous.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimulatorSpec {
    pub name: String,
    pub theta_dim: usize,
    pub x_dim: usize,
    pub output_kind: OutputKind,
}

pub trait Simulator: Send + Sync {
    fn spec(&self) -> SimulatorSpec;

    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>, SimError>;
}

fn gauss(rng: &mut dyn RngCore) -> f64 {
    StandardNormal.sample(rng)
}

fn check_theta(spec_dim: usize, theta: &[f64]) -> Result<(), SimError> {
    if theta.len() != spec_dim {
        return Err(SimError::Dimension {
            expected: spec_dim,
            got: theta.len(),
        });
    }
    Ok(())
}

/// Physical constants and noise levels of the ball throw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BallThrowConfig {
    /// m/s
    pub launch_speed: f64,
    /// m/s²
    pub gravity: f64,
    /// m/s, added to the horizontal velocity
    pub tailwind_std: f64,
    /// m, added to the range
    pub noise_std: f64,
}

impl Default for BallThrowConfig {
    fn default() -> Self {
        Self {
            launch_speed: 12.5,
            gravity: 9.81,
            tailwind_std: 1.0,
            noise_std: 0.25,
        }
    }
}

/// Distance reached by a ball thrown at `angle_deg` with a tailwind `wind`.
pub fn ball_range(cfg: &BallThrowConfig, angle_deg: f64, wind: f64) -> f64 {
    let a = angle_deg.to_radians();
    let vx = cfg.launch_speed * a.cos() + wind;
    let vy = cfg.launch_speed * a.sin();
    vx * 2.0 * vy / cfg.gravity
}

#[derive(Clone, Debug, Default)]
pub struct BallThrow {
    pub config: BallThrowConfig,
}

impl BallThrow {
    pub fn new(config: BallThrowConfig) -> Result<Self, SimError> {
        if !(config.launch_speed > 0.0) || !(config.gravity > 0.0) || config.tailwind_std < 0.0 || config.noise_std < 0.0 {
            return Err(SimError::InvalidParameter {
                simulator: "ball_throw",
                reason: "launch speed and gravity must be positive, noise levels non-negative".into(),
            });
        }
        Ok(Self { config })
    }

    /// Truncated-normal angle prior in degrees.
    pub fn default_prior() -> Prior {
        Prior::TruncatedNormal(TruncatedNormal::new(45.0, 25.0, 0.0, 90.0).expect("valid prior"))
    }
}

impl Simulator for BallThrow {
    fn spec(&self) -> SimulatorSpec {
        SimulatorSpec {
            name: "ball_throw".into(),
            theta_dim: 1,
            x_dim: 1,
            output_kind: OutputKind::Continuous,
        }
    }

    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>, SimError> {
        check_theta(1, theta)?;
        let angle = theta[0];
        if !(0.0..=90.0).contains(&angle) {
            return Err(SimError::InvalidParameter {
                simulator: "ball_throw",
                reason: format!("angle {angle} outside [0, 90] degrees"),
            });
        }
        let wind = self.config.tailwind_std * gauss(rng);
        let noise = self.config.noise_std * gauss(rng);
        Ok(vec![ball_range(&self.config, angle, wind) + noise])
    }
}

/// `x = θ + σ·ε` with isotropic standard-normal `ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussian {
    pub dim: usize,
    pub sigma: f64,
}

impl LinearGaussian {
    pub fn new(dim: usize, sigma: f64) -> Result<Self, SimError> {
        if dim == 0 || !(sigma >= 0.0) {
            return Err(SimError::InvalidParameter {
                simulator: "linear_gaussian",
                reason: format!("need dim ≥ 1 and σ ≥ 0, got dim {dim}, σ {sigma}"),
            });
        }
        Ok(Self { dim, sigma })
    }

    /// Posterior mean and std per dimension for a `N(0, s0²)` prior and `n`
    /// observations with sample mean `xbar`.
    pub fn conjugate_posterior(&self, prior_std: f64, xbar: f64, n: usize) -> (f64, f64) {
        let prec = 1.0 / (prior_std * prior_std) + n as f64 / (self.sigma * self.sigma);
        let mean = (n as f64 * xbar / (self.sigma * self.sigma)) / prec;
        (mean, prec.sqrt().recip())
    }
}

impl Simulator for LinearGaussian {
    fn spec(&self) -> SimulatorSpec {
        SimulatorSpec {
            name: "linear_gaussian".into(),
            theta_dim: self.dim,
            x_dim: self.dim,
            output_kind: OutputKind::Continuous,
        }
    }

    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>, SimError> {
        check_theta(self.dim, theta)?;
        Ok(theta.iter().map(|t| t + self.sigma * gauss(rng)).collect())
    }
}

/// Drift-diffusion parameters in prior order `(v, a, w, τ, γ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdmParams {
    pub v: f64,
    pub a: f64,
    pub w: f64,
    pub tau: f64,
    pub gamma: f64,
}

impl DdmParams {
    pub fn from_slice(theta: &[f64]) -> Result<Self, SimError> {
        check_theta(5, theta)?;
        let p = Self {
            v: theta[0],
            a: theta[1],
            w: theta[2],
            tau: theta[3],
            gamma: theta[4],
        };
        if !(p.a > 0.0) || !(p.tau > 0.0) || !(p.w > -0.5 && p.w < 0.5) || !p.v.is_finite() || !p.gamma.is_finite() {
            return Err(SimError::InvalidParameter {
                simulator: "ddm",
                reason: format!("need a > 0, τ > 0, w ∈ (−0.5, 0.5); got {p:?}"),
            });
        }
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialOutcome {
    /// 1 for the upper boundary, 0 for the lower.
    pub choice: u8,
    /// Seconds, including the non-decision time.
    pub rt: f64,
    /// The decision process hit the time cap before either boundary.
    pub censored: bool,
}

/// Integration settings of the drift-diffusion simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdmConfig {
    /// Euler step in seconds.
    pub dt: f64,
    /// Decision-time cap in seconds.
    pub max_time: f64,
}

impl Default for DdmConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            max_time: 10.0,
        }
    }
}

/// One drift-diffusion trial.
///
/// Euler–Maruyama steps of `dz = v dt + dW` from `z₀ = w·a` until
/// `|z| ≥ (a/2)·exp(γt)`. Between grid points the path is treated as a
/// Brownian bridge, so a crossing that happens and reverts inside one step
/// is still detected with its exact conditional probability under a
/// linearly interpolated boundary.
pub fn ddm_trial(p: &DdmParams, cfg: &DdmConfig, rng: &mut dyn RngCore) -> TrialOutcome {
    let dt = cfg.dt;
    let sqdt = dt.sqrt();
    let steps = (cfg.max_time / dt).round() as u64;
    let mut z = p.w * p.a;
    let mut b_prev = 0.5 * p.a;
    for k in 1..=steps {
        let t = k as f64 * dt;
        let b = 0.5 * p.a * (p.gamma * t).exp();
        let z_new = z + p.v * dt + sqdt * gauss(rng);
        let hit = if z_new >= b {
            Some(1)
        } else if z_new <= -b {
            Some(0)
        } else {
            let up = (-2.0 * (b_prev - z) * (b - z_new) / dt).exp();
            let down = (-2.0 * (b_prev + z) * (b + z_new) / dt).exp();
            let u: f64 = rng.random();
            if u < up {
                Some(1)
            } else if u < up + down * (1.0 - up) {
                Some(0)
            } else {
                None
            }
        };
        if let Some(choice) = hit {
            // a bridge crossing lies somewhere inside the step; use its midpoint
            let crossed_inside = z_new.abs() < b;
            let t_hit = if crossed_inside { t - 0.5 * dt } else { t };
            return TrialOutcome {
                choice,
                rt: p.tau + t_hit,
                censored: false,
            };
        }
        z = z_new;
        b_prev = b;
    }
    let choice = if z > 0.0 {
        1
    } else if z < 0.0 {
        0
    } else {
        rng.random_range(0..2u8)
    };
    TrialOutcome {
        choice,
        rt: p.tau + cfg.max_time,
        censored: true,
    }
}

/// Drift-diffusion model with exponentially collapsing boundaries.
/// Emits `[choice, rt]`.
#[derive(Debug, Default)]
pub struct Ddm {
    pub config: DdmConfig,
    censored: AtomicU64,
}

impl Ddm {
    pub fn new(config: DdmConfig) -> Result<Self, SimError> {
        if !(config.dt > 0.0) || !(config.max_time > config.dt) {
            return Err(SimError::InvalidParameter {
                simulator: "ddm",
                reason: "need 0 < dt < max_time".into(),
            });
        }
        Ok(Self {
            config,
            censored: AtomicU64::new(0),
        })
    }

    /// Uniform prior over `(v, a, w, τ, γ)`.
    pub fn default_prior() -> Prior {
        Prior::BoxUniform(
            BoxUniform::new(vec![-2.5, 0.25, -0.25, 0.05, -1.0], vec![2.5, 1.0, 0.25, 0.95, -0.1]).expect("valid prior"),
        )
    }

    /// Number of trials that hit the time cap so far.
    pub fn censored_count(&self) -> u64 {
        self.censored.load(Ordering::Relaxed)
    }
}

impl Simulator for Ddm {
    fn spec(&self) -> SimulatorSpec {
        SimulatorSpec {
            name: "ddm".into(),
            theta_dim: 5,
            x_dim: 2,
            output_kind: OutputKind::Mixed,
        }
    }

    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>, SimError> {
        let p = DdmParams::from_slice(theta)?;
        let out = ddm_trial(&p, &self.config, rng);
        if out.censored {
            self.censored.fetch_add(1, Ordering::Relaxed);
        }
        Ok(vec![out.choice as f64, out.rt])
    }
}

pub type SummaryMap = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// Applies a summary-statistic map to another simulator's raw output.
pub struct Summarized<S> {
    pub inner: S,
    pub out_dim: usize,
    pub map: Arc<SummaryMap>,
}

impl<S: Simulator> Simulator for Summarized<S> {
    fn spec(&self) -> SimulatorSpec {
        SimulatorSpec {
            x_dim: self.out_dim,
            ..self.inner.spec()
        }
    }

    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>, SimError> {
        let raw = self.inner.simulate(theta, rng)?;
        Ok((self.map)(&raw))
    }
}

/// Counts how often the wrapped simulator runs.
pub struct CountingSimulator<S> {
    pub inner: S,
    calls: AtomicU64,
}

impl<S> CountingSimulator<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<S: Simulator> Simulator for CountingSimulator<S> {
    fn spec(&self) -> SimulatorSpec {
        self.inner.spec()
    }

    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>, SimError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.simulate(theta, rng)
    }
}

/// Simulator selection as it appears in config files, e.g.
/// `{"name":"linear_gaussian","dim":2,"sigma":0.1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum SimulatorConfig {
    BallThrow {
        #[serde(default)]
        launch_speed: Option<f64>,
        #[serde(default)]
        gravity: Option<f64>,
        #[serde(default)]
        tailwind_std: Option<f64>,
        #[serde(default)]
        noise_std: Option<f64>,
    },
    LinearGaussian {
        dim: usize,
        sigma: f64,
    },
    Ddm {
        #[serde(default)]
        dt: Option<f64>,
        #[serde(default)]
        max_time: Option<f64>,
    },
}

impl SimulatorConfig {
    pub fn ball_throw() -> Self {
        SimulatorConfig::BallThrow {
            launch_speed: None,
            gravity: None,
            tailwind_std: None,
            noise_std: None,
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Simulator>, SimError> {
        Ok(match *self {
            SimulatorConfig::BallThrow {
                launch_speed,
                gravity,
                tailwind_std,
                noise_std,
            } => {
                let d = BallThrowConfig::default();
                Arc::new(BallThrow::new(BallThrowConfig {
                    launch_speed: launch_speed.unwrap_or(d.launch_speed),
                    gravity: gravity.unwrap_or(d.gravity),
                    tailwind_std: tailwind_std.unwrap_or(d.tailwind_std),
                    noise_std: noise_std.unwrap_or(d.noise_std),
                })?)
            }
            SimulatorConfig::LinearGaussian { dim, sigma } => Arc::new(LinearGaussian::new(dim, sigma)?),
            SimulatorConfig::Ddm { dt, max_time } => {
                let d = DdmConfig::default();
                Arc::new(Ddm::new(DdmConfig {
                    dt: dt.unwrap_or(d.dt),
                    max_time: max_time.unwrap_or(d.max_time),
                })?)
            }
        })
    }

    /// Built-in prior used when a config does not give one.
    pub fn default_prior(&self) -> Prior {
        match self {
            SimulatorConfig::BallThrow { .. } => BallThrow::default_prior(),
            SimulatorConfig::LinearGaussian { dim, .. } => Prior::standard_normal(*dim),
            SimulatorConfig::Ddm { .. } => Ddm::default_prior(),
        }
    }
}

/// Provenance of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub simulator: String,
    pub prior: Option<PriorSpec>,
    pub seed: u64,
    pub discarded: u64,
}

/// Parameter rows paired with simulation-output rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub theta: Tensor<f64>,
    pub x: Tensor<f64>,
    pub meta: DatasetMeta,
}

const DATASET_MAGIC: &str = "# sbi-engine dataset v1";

impl Dataset {
    pub fn new(theta: Tensor<f64>, x: Tensor<f64>, meta: DatasetMeta) -> Result<Self, SimError> {
        if theta.rows() != x.rows() {
            return Err(SimError::Format(format!(
                "{} parameter rows but {} output rows",
                theta.rows(),
                x.rows()
            )));
        }
        Ok(Self { theta, x, meta })
    }

    /// Dataset without provenance, for constructed inputs.
    pub fn from_parts(theta: Tensor<f64>, x: Tensor<f64>) -> Result<Self, SimError> {
        Self::new(
            theta,
            x,
            DatasetMeta {
                simulator: "custom".into(),
                prior: None,
                seed: 0,
                discarded: 0,
            },
        )
    }

    pub fn len(&self) -> usize {
        self.theta.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn theta_dim(&self) -> usize {
        self.theta.cols()
    }

    pub fn x_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            theta: self.theta.select_rows(idx),
            x: self.x.select_rows(idx),
            meta: self.meta.clone(),
        }
    }

    /// Row-wise concatenation; provenance of `self` is kept.
    pub fn append(&self, other: &Self) -> Result<Self, SimError> {
        let bad = |e: crate::ndiff::NdiffError| SimError::Format(e.to_string());
        Ok(Self {
            theta: Tensor::vstack(&[&self.theta, &other.theta]).map_err(bad)?,
            x: Tensor::vstack(&[&self.x, &other.x]).map_err(bad)?,
            meta: DatasetMeta {
                discarded: self.meta.discarded + other.meta.discarded,
                ..self.meta.clone()
            },
        })
    }

    fn data_rows(&self) -> String {
        let mut s = String::new();
        for i in 0..self.len() {
            let row: Vec<String> = self
                .theta
                .row(i)
                .iter()
                .chain(self.x.row(i))
                .map(|v| format!("{v:.16e}"))
                .collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Hex SHA-256 over the serialized data rows.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.data_rows().as_bytes()))
    }

    pub fn write(&self, w: &mut impl Write) -> Result<(), SimError> {
        let mut head = String::new();
        let prior = self
            .meta
            .prior
            .as_ref()
            .map(|p| serde_json::to_string(p).expect("prior serializes"))
            .unwrap_or_else(|| "none".into());
        writeln!(head, "{DATASET_MAGIC}").unwrap();
        writeln!(head, "# simulator {}", self.meta.simulator).unwrap();
        writeln!(head, "# prior {prior}").unwrap();
        writeln!(head, "# seed {}", self.meta.seed).unwrap();
        writeln!(head, "# discarded {}", self.meta.discarded).unwrap();
        writeln!(head, "# theta_dim {}", self.theta_dim()).unwrap();
        writeln!(head, "# x_dim {}", self.x_dim()).unwrap();
        let names: Vec<String> = (0..self.theta_dim())
            .map(|i| format!("theta_{i}"))
            .chain((0..self.x_dim()).map(|i| format!("x_{i}")))
            .collect();
        writeln!(head, "{}", names.join(",")).unwrap();
        w.write_all(head.as_bytes())?;
        w.write_all(self.data_rows().as_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read(r: &mut impl BufRead) -> Result<Self, SimError> {
        let bad = |m: &str| SimError::Format(m.to_string());
        let mut meta = DatasetMeta {
            simulator: String::new(),
            prior: None,
            seed: 0,
            discarded: 0,
        };
        let (mut dt, mut dx) = (None, None);
        let mut theta = Vec::new();
        let mut x = Vec::new();
        let mut saw_magic = false;
        let mut saw_header = false;
        for line in r.lines() {
            let line = line?;
            if line == DATASET_MAGIC {
                saw_magic = true;
                continue;
            }
            if let Some(rest) = line.strip_prefix("# ") {
                let (key, val) = rest.split_once(' ').ok_or_else(|| bad("metadata line without value"))?;
                let num = |v: &str| v.parse::<u64>().map_err(|_| bad("bad integer in metadata"));
                match key {
                    "simulator" => meta.simulator = val.to_string(),
                    "prior" if val == "none" => meta.prior = None,
                    "prior" => meta.prior = Some(serde_json::from_str(val).map_err(|e| SimError::Format(e.to_string()))?),
                    "seed" => meta.seed = num(val)?,
                    "discarded" => meta.discarded = num(val)?,
                    "theta_dim" => dt = Some(num(val)? as usize),
                    "x_dim" => dx = Some(num(val)? as usize),
                    _ => {}
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (dt, dx) = (
                dt.ok_or_else(|| bad("missing theta_dim"))?,
                dx.ok_or_else(|| bad("missing x_dim"))?,
            );
            if !saw_header {
                saw_header = true;
                if line.starts_with("theta_") || line.starts_with("x_") {
                    continue;
                }
            }
            let vals = line
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| bad("non-numeric value")))
                .collect::<Result<Vec<_>, _>>()?;
            if vals.len() != dt + dx {
                return Err(bad("row width does not match declared dimensions"));
            }
            theta.extend_from_slice(&vals[..dt]);
            x.extend_from_slice(&vals[dt..]);
        }
        if !saw_magic {
            return Err(bad("missing dataset header"));
        }
        let (dt, dx) = (
            dt.ok_or_else(|| bad("missing theta_dim"))?,
            dx.ok_or_else(|| bad("missing x_dim"))?,
        );
        let n = theta.len() / dt.max(1);
        Dataset::new(Tensor::matrix(n, dt, theta), Tensor::matrix(n, dx, x), meta)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Extra acceptance test applied to `(θ, x)` on top of the finiteness check.
pub type ValidityFilter = dyn Fn(&[f64], &[f64]) -> bool + Send + Sync;

pub struct GenerateOptions<'a> {
    pub workers: usize,
    pub filter: Option<&'a ValidityFilter>,
    /// Attempts per row before the whole run is aborted.
    pub max_attempts: usize,
}

impl Default for GenerateOptions<'_> {
    fn default() -> Self {
        Self {
            workers: default_workers(),
            filter: None,
            max_attempts: 1000,
        }
    }
}

/// Worker count after applying the `SBI_ENGINE_THREADS` cap.
pub fn effective_workers(requested: usize) -> usize {
    let cap = std::env::var("SBI_ENGINE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&c| c >= 1);
    let w = requested.max(1);
    cap.map_or(w, |c| w.min(c))
}

/// All available cores, subject to the `SBI_ENGINE_THREADS` cap.
pub fn default_workers() -> usize {
    effective_workers(std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// RNG stream for item `index` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Run `f` inside a pool of `workers` threads.
pub fn with_pool<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R, SimError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(effective_workers(workers))
        .build()
        .map_err(|e| SimError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Draw `n` valid `(θ, x)` rows.
///
/// Rows whose output is non-finite or rejected by the filter are discarded
/// and redrawn from the same row stream. Errors out if more than half of all
/// simulations are discarded.
pub fn generate_dataset(
    prior: &Prior,
    simulator: &dyn Simulator,
    n: usize,
    seed: u64,
    opts: &GenerateOptions,
) -> Result<Dataset, SimError> {
    let spec = simulator.spec();
    if prior.dim() != spec.theta_dim {
        return Err(SimError::PriorMismatch {
            prior: prior.dim(),
            simulator: spec.theta_dim,
        });
    }
    let n = n.max(1);
    let row = |i: usize| -> Result<(Vec<f64>, Vec<f64>, u64), SimError> {
        let mut rng = stream_rng(seed, i as u64);
        for attempt in 0..opts.max_attempts {
            let theta = prior.sample(&mut rng);
            let x = match simulator.simulate(&theta, &mut rng) {
                Ok(x) => x,
                Err(SimError::InvalidParameter { .. }) => continue,
                Err(e) => return Err(e),
            };
            let valid = x.len() == spec.x_dim && x.iter().all(|v| v.is_finite()) && opts.filter.is_none_or(|f| f(&theta, &x));
            if valid {
                return Ok((theta, x, attempt as u64));
            }
        }
        Err(SimError::RowExhausted {
            row: i,
            attempts: opts.max_attempts,
        })
    };
    let rows = with_pool(opts.workers, || {
        (0..n).into_par_iter().map(row).collect::<Result<Vec<_>, _>>()
    })??;
    let discarded: u64 = rows.iter().map(|r| r.2).sum();
    let rate = discarded as f64 / (discarded as f64 + n as f64);
    if rate > 0.5 {
        return Err(SimError::DiscardRate { rate, discarded, n });
    }
    let mut theta = Vec::with_capacity(n * spec.theta_dim);
    let mut x = Vec::with_capacity(n * spec.x_dim);
    for (t, xv, _) in rows {
        theta.extend(t);
        x.extend(xv);
    }
    Dataset::new(
        Tensor::matrix(n, spec.theta_dim, theta),
        Tensor::matrix(n, spec.x_dim, x),
        DatasetMeta {
            simulator: spec.name,
            prior: Some(prior.spec()),
            seed,
            discarded,
        },
    )
}

/// Simulate once for every row of `theta`, each with its own stream.
/// Invalid outputs are kept as they are.
pub fn simulate_batch(
    simulator: &dyn Simulator,
    theta: &Tensor<f64>,
    seed: u64,
    workers: usize,
) -> Result<Tensor<f64>, SimError> {
    let xd = simulator.spec().x_dim;
    let rows = with_pool(workers, || {
        (0..theta.rows())
            .into_par_iter()
            .map(|i| simulator.simulate(theta.row(i), &mut stream_rng(seed, i as u64)))
            .collect::<Result<Vec<_>, _>>()
    })??;
    Ok(Tensor::matrix(theta.rows(), xd, rows.concat()))
}
