//! Run configuration, artifact files and the simulate → train → sample →
//! diagnose → analyze workflow.
//!
//! Every artifact starts with a `# config_digest <sha256>` line naming the
//! configuration that produced it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{
    conditional_moments, corner_export, default_conditioning_point, marginal_moments, optimal_action, DecisionProblem,
    DEFAULT_NODES_1D, DEFAULT_NODES_2D,
};
use crate::diagnostics::{
    expected_coverage, lc2st, level_grid, predictive_check, prior_draws, sbc_ranks, tarp, uniformity_test, CalibrationSet,
    Lc2stConfig, MisspecConfig, MisspecDetector,
};
use crate::distributions::{ContinuousDistribution, Prior, PriorSpec};
use crate::estimators::{ClassifierConfig, EstimatorConfig, EstimatorKind};
use crate::inference::{nle_fit, nle_posterior, npe_fit, nre_fit, nre_posterior, Posterior, PosteriorKind};
use crate::ndiff::Tensor;
use crate::samplers::SamplerConfig;
use crate::simulators::{default_workers, generate_dataset, Dataset, GenerateOptions, SimulatorConfig};
use crate::trainer::{TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Npe,
    Nle,
    Nre,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    /// Valid simulations to generate.
    pub n: usize,
    /// Worker threads; all cores when absent.
    pub workers: Option<usize>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            workers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Posterior draws at the observation.
    pub n: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { n: 10_000 }
    }
}

/// Posterior predictive check; passes when simulations from posterior
/// draws land closer to `x_o` (median distance) than prior predictive ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpcCheck {
    pub draws: usize,
}

impl Default for PpcCheck {
    fn default() -> Self {
        Self { draws: 1000 }
    }
}

/// Simulation-based calibration; passes when every per-dimension KS
/// p-value exceeds `min_p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SbcCheck {
    pub pairs: usize,
    pub draws: usize,
    pub min_p: f64,
}

impl Default for SbcCheck {
    fn default() -> Self {
        Self {
            pairs: 200,
            draws: 100,
            min_p: 0.01,
        }
    }
}

/// Expected coverage or TARP; passes when the curve stays within
/// `max_deviation` of the diagonal between levels 0.1 and 0.9.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoverageCheck {
    pub pairs: usize,
    pub draws: usize,
    /// Number of level intervals on `[0, 1]`.
    pub levels: usize,
    pub max_deviation: f64,
}

impl Default for CoverageCheck {
    fn default() -> Self {
        Self {
            pairs: 200,
            draws: 100,
            levels: 10,
            max_deviation: 0.1,
        }
    }
}

/// Local C2ST at the first observation; passes unless rejected at `alpha`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lc2stCheck {
    pub pairs: usize,
    pub alpha: f64,
    pub settings: Lc2stConfig,
}

impl Default for Lc2stCheck {
    fn default() -> Self {
        Self {
            pairs: 2000,
            alpha: 0.05,
            settings: Lc2stConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub ppc: Option<PpcCheck>,
    pub sbc: Option<SbcCheck>,
    pub coverage: Option<CoverageCheck>,
    pub tarp: Option<CoverageCheck>,
    pub lc2st: Option<Lc2stCheck>,
    /// Fails when any observation is flagged.
    pub misspec: Option<MisspecConfig>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionalConfig {
    pub dims: Vec<usize>,
    /// Quadrature nodes per axis; 512 in 1-D and 128 in 2-D when absent.
    pub nodes: Option<usize>,
    /// Conditioning point; the highest-density of 10⁴ draws when absent.
    pub point: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    pub restarts: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { restarts: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionLoss {
    #[default]
    Quadratic,
    Absolute,
}

/// Choose among point values for one parameter dimension.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecisionConfig {
    pub dimension: usize,
    pub actions: Vec<f64>,
    pub loss: DecisionLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CornerConfig {
    pub bins: usize,
}

impl Default for CornerConfig {
    fn default() -> Self {
        Self { bins: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub moments: bool,
    pub conditional: Option<ConditionalConfig>,
    pub map: Option<MapConfig>,
    pub decision: Option<DecisionConfig>,
    pub corner: Option<CornerConfig>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            moments: true,
            conditional: None,
            map: None,
            decision: None,
            corner: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub simulate: u64,
    pub sample: u64,
    pub diagnose: u64,
    pub analyze: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            simulate: 0,
            sample: 1,
            diagnose: 2,
            analyze: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("sbi-out"),
        }
    }
}

/// Everything a run needs. The training seed lives in `train.seed`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub simulator: SimulatorConfig,
    /// The simulator's built-in prior when absent.
    #[serde(default)]
    pub prior: Option<PriorSpec>,
    /// Observed outputs; several rows are i.i.d. trials (NLE and NRE only).
    pub observation: Vec<Vec<f64>>,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub paths: Paths,
}

impl RunConfig {
    /// A minimal config for the given simulator and observation.
    pub fn new(simulator: SimulatorConfig, observation: Vec<Vec<f64>>) -> Self {
        Self {
            simulator,
            prior: None,
            observation,
            method: Method::default(),
            estimator: EstimatorConfig::default(),
            classifier: ClassifierConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            simulation: SimulationConfig::default(),
            sampling: SamplingConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            analysis: AnalysisConfig::default(),
            seeds: Seeds::default(),
            paths: Paths::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_at(path))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, so flag overrides change it.
    /// Output paths are left out: moving a run does not change its content.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("paths");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    /// Set a dotted field path such as `train.batch_size` from a JSON
    /// literal; bare words are taken as strings. Unset optional sections are
    /// created with their defaults.
    pub fn set(&mut self, path: &str, value: &str) -> Result<(), PipelineError> {
        let parsed: Value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let keys: Vec<&str> = path.split('.').collect();
        let mut node = &mut root;
        for (i, key) in keys.iter().enumerate() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            }
            let obj = node
                .as_object_mut()
                .ok_or_else(|| PipelineError::Config(format!("{} is not a section", keys[..i].join("."))))?;
            if i + 1 == keys.len() {
                obj.insert((*key).to_string(), parsed);
                break;
            }
            node = obj.entry((*key).to_string()).or_insert(Value::Null);
        }
        *self = serde_json::from_value(root).map_err(|e| PipelineError::Config(format!("{path}: {e}")))?;
        Ok(())
    }

    pub fn prior(&self) -> Result<Prior, PipelineError> {
        match &self.prior {
            Some(spec) => Prior::from_spec(spec).map_err(|e| PipelineError::Config(format!("prior: {e}"))),
            None => Ok(self.simulator.default_prior()),
        }
    }

    pub fn observation_tensor(&self) -> Tensor<f64> {
        let cols = self.observation.first().map_or(0, Vec::len);
        Tensor::matrix(self.observation.len(), cols, self.observation.concat())
    }

    /// Checks everything that can be checked before any simulation runs.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let prior = self.prior()?;
        let sim = self
            .simulator
            .build()
            .map_err(|e| PipelineError::Config(format!("simulator: {e}")))?;
        let spec = sim.spec();
        if prior.dim() != spec.theta_dim {
            return bad(format!(
                "prior has {} dimensions, simulator takes {}",
                prior.dim(),
                spec.theta_dim
            ));
        }
        if self.observation.is_empty() {
            return bad("observation needs at least one row".into());
        }
        if let Some(r) = self
            .observation
            .iter()
            .find(|r| r.len() != spec.x_dim || r.iter().any(|v| !v.is_finite()))
        {
            return bad(format!("observation row {r:?} must hold {} finite values", spec.x_dim));
        }
        if self.method == Method::Npe && self.observation.len() != 1 {
            return bad("NPE conditions on a single observation row; use nle or nre for i.i.d. trials".into());
        }
        if self.method != Method::Nle && self.estimator.kind == EstimatorKind::Mixed {
            return bad("the mixed estimator models simulator outputs and needs method nle".into());
        }
        self.estimator.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.sampler.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.simulation.n < 10 || self.sampling.n == 0 {
            return bad("simulation.n must be ≥ 10 and sampling.n ≥ 1".into());
        }
        let d = &self.diagnostics;
        if let Some(c) = &d.sbc {
            if c.pairs < 50 || c.draws < 20 {
                return bad("sbc needs ≥ 50 pairs and ≥ 20 draws".into());
            }
        }
        for (name, c) in [("coverage", &d.coverage), ("tarp", &d.tarp)] {
            if let Some(c) = c {
                if c.pairs == 0 || c.draws == 0 || c.levels < 2 {
                    return bad(format!("{name} needs pairs, draws ≥ 1 and levels ≥ 2"));
                }
            }
        }
        if d.coverage.is_some() && self.method != Method::Npe {
            return bad("expected coverage needs a posterior density; use tarp with nle or nre".into());
        }
        if let Some(c) = &d.lc2st {
            if c.pairs < 20 || !(c.alpha > 0.0 && c.alpha < 1.0) {
                return bad("lc2st needs ≥ 20 pairs and alpha in (0, 1)".into());
            }
        }
        if let Some(c) = &d.ppc {
            if c.draws == 0 {
                return bad("ppc needs ≥ 1 draw".into());
            }
        }
        let a = &self.analysis;
        if (a.moments && self.sampling.n < 100) || a.corner.as_ref().is_some_and(|c| self.sampling.n < c.bins * c.bins) {
            return bad("sampling.n is too small for the requested analysis".into());
        }
        if let Some(c) = &a.conditional {
            if self.method != Method::Npe {
                return bad(
                    "conditional slices need a posterior density; condition MCMC posteriors by constrained sampling instead"
                        .into(),
                );
            }
            if c.dims.is_empty() || c.dims.len() > 2 || c.dims.iter().any(|&k| k >= spec.theta_dim) {
                return bad(format!(
                    "conditional.dims must name one or two of {} dimensions",
                    spec.theta_dim
                ));
            }
        }
        if a.map.is_some() && self.method != Method::Npe {
            return bad("MAP needs a differentiable posterior density (npe)".into());
        }
        if let Some(c) = &a.decision {
            if c.actions.is_empty() || c.dimension >= spec.theta_dim {
                return bad("decision needs actions and a valid dimension".into());
            }
        }
        Ok(())
    }

    /// Every config field as a dotted path with its value in a fully
    /// populated example.
    pub fn field_paths() -> Vec<(String, String)> {
        let mut example = RunConfig::new(SimulatorConfig::ball_throw(), vec![vec![13.0]]);
        example.prior = Some(PriorSpec::BoxUniform {
            lower: vec![0.0],
            upper: vec![90.0],
        });
        example.diagnostics = DiagnosticsConfig {
            ppc: Some(Default::default()),
            sbc: Some(Default::default()),
            coverage: Some(Default::default()),
            tarp: Some(Default::default()),
            lc2st: Some(Default::default()),
            misspec: Some(Default::default()),
        };
        example.analysis = AnalysisConfig {
            moments: true,
            conditional: Some(ConditionalConfig {
                dims: vec![0],
                nodes: Some(DEFAULT_NODES_1D),
                point: Some(vec![45.0]),
            }),
            map: Some(Default::default()),
            decision: Some(DecisionConfig {
                dimension: 0,
                actions: vec![30.0, 60.0],
                loss: DecisionLoss::Quadratic,
            }),
            corner: Some(Default::default()),
        };
        example.sampler.step_width = Some(vec![1.0]);
        example.simulation.workers = Some(1);
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(&example).expect("config serializes"), &mut out);
        out
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let p = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&p, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

const DIGEST_PREFIX: &str = "# config_digest ";

/// `path` with `suffix` appended to its file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Write a file whose first line records the config digest.
pub fn write_artifact(
    path: &Path,
    digest: &str,
    body: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>,
) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_at(path))?);
    writeln!(w, "{DIGEST_PREFIX}{digest}")
        .and_then(|_| body(&mut w))
        .and_then(|_| w.flush())
        .map_err(io_at(path))
}

/// Open an artifact positioned after its digest line, if any.
pub fn open_artifact(path: &Path) -> Result<(Option<String>, BufReader<File>), PipelineError> {
    let mut r = BufReader::new(File::open(path).map_err(io_at(path))?);
    let has_digest = r.fill_buf().map_err(io_at(path))?.starts_with(DIGEST_PREFIX.as_bytes());
    let mut digest = None;
    if has_digest {
        let mut line = String::new();
        r.read_line(&mut line).map_err(io_at(path))?;
        digest = Some(line[DIGEST_PREFIX.len()..].trim().to_string());
    }
    Ok((digest, r))
}

/// Delimited rows with a `prefix_0,prefix_1,…` header, 17 significant
/// digits per value.
pub fn write_rows(path: &Path, digest: &str, prefix: &str, rows: &Tensor<f64>) -> Result<(), PipelineError> {
    write_artifact(path, digest, |w| {
        writeln!(w, "# rows {}", rows.rows())?;
        let names: Vec<String> = (0..rows.cols()).map(|i| format!("{prefix}_{i}")).collect();
        writeln!(w, "{}", names.join(","))?;
        for r in rows.iter_rows() {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    })
}

/// Read delimited numeric rows, skipping `#` lines and a name header.
pub fn read_rows(path: &Path) -> Result<Tensor<f64>, PipelineError> {
    let (_, r) = open_artifact(path)?;
    let bad = |m: String| PipelineError::Format {
        path: path.to_path_buf(),
        message: m,
    };
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for line in r.lines() {
        let line = line.map_err(io_at(path))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with(|c: char| c.is_ascii_alphabetic() || c == '_') {
            continue;
        }
        let vals = t
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(e.to_string()))?;
        if *cols.get_or_insert(vals.len()) != vals.len() {
            return Err(bad("rows differ in width".into()));
        }
        data.extend(vals);
        rows += 1;
    }
    Ok(Tensor::matrix(rows, cols.unwrap_or(0), data))
}

pub fn save_posterior(path: &Path, digest: &str, posterior: &Posterior) -> Result<(), PipelineError> {
    write_artifact(path, digest, |w| posterior.save(w).map_err(io::Error::other))
}

pub fn load_posterior(path: &Path) -> Result<Posterior, PipelineError> {
    let (_, mut r) = open_artifact(path)?;
    Posterior::load(&mut r).map_err(|e| PipelineError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save_dataset(path: &Path, digest: &str, ds: &Dataset) -> Result<(), PipelineError> {
    write_artifact(path, digest, |w| ds.write(w).map_err(io::Error::other))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, PipelineError> {
    let (_, mut r) = open_artifact(path)?;
    Dataset::read(&mut r).map_err(|e| PipelineError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Simulate the training set.
pub fn simulate_stage(cfg: &RunConfig, out: &Path) -> Result<Dataset, PipelineError> {
    let prior = cfg.prior()?;
    let sim = cfg.simulator.build().map_err(stage("simulate"))?;
    let opts = GenerateOptions {
        workers: cfg.simulation.workers.unwrap_or_else(default_workers),
        ..Default::default()
    };
    let ds = generate_dataset(&prior, sim.as_ref(), cfg.simulation.n, cfg.seeds.simulate, &opts).map_err(stage("simulate"))?;
    save_dataset(out, &cfg.digest(), &ds)?;
    Ok(ds)
}

/// Train the configured method; writes the posterior and, beside it, the
/// per-epoch loss table.
pub fn train_stage(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<(Posterior, TrainReport), PipelineError> {
    let prior = cfg.prior()?;
    let err = stage("train");
    let (posterior, report) = match cfg.method {
        Method::Npe => npe_fit(ds, &prior, &cfg.estimator, &cfg.train).map_err(err)?,
        Method::Nle => {
            let (m, r) = nle_fit(ds, &cfg.estimator, &cfg.train).map_err(err)?;
            (nle_posterior(m, prior, cfg.sampler.clone()).map_err(stage("train"))?, r)
        }
        Method::Nre => {
            let (m, r) = nre_fit(ds, &cfg.classifier, &cfg.train).map_err(err)?;
            (nre_posterior(m, prior, cfg.sampler.clone()).map_err(stage("train"))?, r)
        }
    };
    let digest = cfg.digest();
    save_posterior(out, &digest, &posterior)?;
    write_artifact(&sidecar(out, ".report.txt"), &digest, |w| {
        w.write_all(report.to_table().as_bytes())
    })?;
    Ok((posterior, report))
}

/// Draw posterior samples at the observation; MCMC chain diagnostics go
/// beside the samples file.
pub fn sample_stage(cfg: &RunConfig, posterior: &Posterior, out: &Path) -> Result<Tensor<f64>, PipelineError> {
    let s = posterior
        .sample(&cfg.observation_tensor(), cfg.sampling.n, cfg.seeds.sample)
        .map_err(stage("sample"))?;
    let digest = cfg.digest();
    write_rows(out, &digest, "theta", &s.samples)?;
    if let Some(d) = &s.diagnostics {
        write_artifact(&sidecar(out, ".chains.txt"), &digest, |w| {
            w.write_all(d.to_table().as_bytes())
        })?;
    }
    Ok(s.samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Check {
    Ppc,
    Sbc,
    Coverage,
    Tarp,
    Lc2st,
    Misspec,
}

impl Check {
    pub const ALL: [Check; 6] = [
        Check::Ppc,
        Check::Sbc,
        Check::Coverage,
        Check::Tarp,
        Check::Lc2st,
        Check::Misspec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Ppc => "ppc",
            Check::Sbc => "sbc",
            Check::Coverage => "coverage",
            Check::Tarp => "tarp",
            Check::Lc2st => "lc2st",
            Check::Misspec => "misspec",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    fn enabled(self, d: &DiagnosticsConfig) -> bool {
        match self {
            Check::Ppc => d.ppc.is_some(),
            Check::Sbc => d.sbc.is_some(),
            Check::Coverage => d.coverage.is_some(),
            Check::Tarp => d.tarp.is_some(),
            Check::Lc2st => d.lc2st.is_some(),
            Check::Misspec => d.misspec.is_some(),
        }
    }

    /// Turn the check on with default settings if the config leaves it off.
    pub fn enable(self, d: &mut DiagnosticsConfig) {
        match self {
            Check::Ppc => drop(d.ppc.get_or_insert_with(Default::default)),
            Check::Sbc => drop(d.sbc.get_or_insert_with(Default::default)),
            Check::Coverage => drop(d.coverage.get_or_insert_with(Default::default)),
            Check::Tarp => drop(d.tarp.get_or_insert_with(Default::default)),
            Check::Lc2st => drop(d.lc2st.get_or_insert_with(Default::default)),
            Check::Misspec => drop(d.misspec.get_or_insert_with(Default::default)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub check: Check,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}",
            self.check.name(),
            if self.passed { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}

/// Inputs shared by the diagnostics of one run.
pub struct DiagnoseInputs<'a> {
    pub posterior: &'a Posterior,
    /// Posterior draws at the observation (for predictive checks).
    pub samples: Option<&'a Tensor<f64>>,
    /// Training set (for the misspecification check).
    pub dataset: Option<&'a Dataset>,
}

/// Run one check and write its result table to `out_dir/<check>.txt`.
pub fn diagnose_stage(
    cfg: &RunConfig,
    check: Check,
    inputs: &DiagnoseInputs,
    out_dir: &Path,
) -> Result<CheckOutcome, PipelineError> {
    let err = stage("diagnose");
    let prior = cfg.prior()?;
    let sim = cfg.simulator.build().map_err(stage("diagnose"))?;
    let seed = cfg.seeds.diagnose;
    let post = inputs.posterior;
    let x_o = cfg.observation_tensor();
    let d = &cfg.diagnostics;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1a6);
    let calibration = |pairs: usize, draws: usize| CalibrationSet::generate(&prior, sim.as_ref(), post, pairs, draws, seed);
    let mut table = String::new();
    let outcome = match check {
        Check::Ppc => {
            let c = d.ppc.clone().unwrap_or_default();
            let draws = match inputs.samples {
                Some(s) => s.select_rows(&(0..c.draws.min(s.rows())).collect::<Vec<_>>()),
                None => post.sample(&x_o, c.draws, seed).map_err(stage("diagnose"))?.samples,
            };
            let target = mean_row(&x_o);
            let post_pc = predictive_check(&draws, sim.as_ref(), &target, seed).map_err(err)?;
            let prior_pc = predictive_check(&prior_draws(&prior, c.draws, seed ^ 1), sim.as_ref(), &target, seed ^ 2)
                .map_err(stage("diagnose"))?;
            let (a, b) = (post_pc.median_distance(), prior_pc.median_distance());
            table.push_str("source\tmedian_distance\n");
            writeln!(table, "posterior\t{a:.8e}\nprior\t{b:.8e}").unwrap();
            table.push_str("# posterior predictive draws\n");
            for r in post_pc.x.iter_rows() {
                let cells: Vec<String> = r.iter().map(|v| format!("{v:.8e}")).collect();
                writeln!(table, "{}", cells.join(",")).unwrap();
            }
            CheckOutcome {
                check,
                passed: a < b,
                detail: format!("posterior median distance {a:.4} vs prior {b:.4}"),
            }
        }
        Check::Sbc => {
            let c = d.sbc.clone().unwrap_or_default();
            let cal = calibration(c.pairs, c.draws).map_err(err)?;
            let hist = sbc_ranks(&cal, &mut rng).map_err(stage("diagnose"))?;
            let u = uniformity_test(&hist).map_err(stage("diagnose"))?;
            table.push_str(&hist.to_table());
            table.push_str("# dimension\tks_statistic\tks_p\tchi2_statistic\tchi2_p\n");
            for k in 0..u.ks_p.len() {
                writeln!(
                    table,
                    "# {k}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                    u.ks_statistic[k], u.ks_p[k], u.chi2_statistic[k], u.chi2_p[k]
                )
                .unwrap();
            }
            let min_p = u.ks_p.iter().copied().fold(1.0, f64::min);
            CheckOutcome {
                check,
                passed: min_p > c.min_p,
                detail: format!("min KS p {min_p:.4} (threshold {})", c.min_p),
            }
        }
        Check::Coverage | Check::Tarp => {
            let c = if check == Check::Coverage {
                d.coverage.clone()
            } else {
                d.tarp.clone()
            }
            .unwrap_or_default();
            let cal = calibration(c.pairs, c.draws).map_err(err)?;
            let levels = level_grid(c.levels);
            let curve = if check == Check::Coverage {
                expected_coverage(&cal, post, &levels, &mut rng)
            } else {
                tarp(&cal, &prior, &levels, &mut rng)
            }
            .map_err(stage("diagnose"))?;
            table.push_str(&curve.to_table());
            let dev = curve.max_deviation_between(0.1, 0.9);
            CheckOutcome {
                check,
                passed: dev <= c.max_deviation,
                detail: format!("max deviation {dev:.4} (threshold {})", c.max_deviation),
            }
        }
        Check::Lc2st => {
            let c = d.lc2st.clone().unwrap_or_default();
            let cal = calibration(c.pairs, 1).map_err(err)?;
            let r = lc2st(&cal, post, x_o.row(0), &c.settings, seed).map_err(stage("diagnose"))?;
            writeln!(
                table,
                "# statistic {:.8e}\n# p_value {:.6}\nnull_statistic",
                r.statistic, r.p_value
            )
            .unwrap();
            for v in &r.null {
                writeln!(table, "{v:.8e}").unwrap();
            }
            CheckOutcome {
                check,
                passed: !r.rejects(c.alpha),
                detail: format!("p {:.4} (alpha {})", r.p_value, c.alpha),
            }
        }
        Check::Misspec => {
            let c = d.misspec.clone().unwrap_or_default();
            let ds = inputs
                .dataset
                .ok_or_else(|| PipelineError::Config("the misspecification check needs the training dataset".into()))?;
            table.push_str("row\tlog_density\trank\tn\tflagged\n");
            let mut flagged = 0;
            let detector = MisspecDetector::fit(&ds.x, &c).map_err(stage("diagnose"))?;
            for (i, row) in x_o.iter_rows().enumerate() {
                let r = detector.check(row).map_err(stage("diagnose"))?;
                writeln!(table, "{i}\t{:.8e}\t{}\t{}\t{}", r.log_density, r.rank, r.n, r.flagged).unwrap();
                flagged += r.flagged as usize;
            }
            CheckOutcome {
                check,
                passed: flagged == 0,
                detail: format!("{flagged} of {} observation rows flagged", x_o.rows()),
            }
        }
    };
    write_artifact(&out_dir.join(format!("{}.txt", check.name())), &cfg.digest(), |w| {
        writeln!(w, "# {}", outcome.line())?;
        w.write_all(table.as_bytes())
    })?;
    Ok(outcome)
}

fn mean_row(x: &Tensor<f64>) -> Vec<f64> {
    (0..x.cols())
        .map(|j| x.column(j).iter().sum::<f64>() / x.rows() as f64)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalysisKind {
    Moments,
    Conditional,
    Map,
    Decision,
    Corner,
}

impl AnalysisKind {
    pub const ALL: [AnalysisKind; 5] = [
        AnalysisKind::Moments,
        AnalysisKind::Conditional,
        AnalysisKind::Map,
        AnalysisKind::Decision,
        AnalysisKind::Corner,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnalysisKind::Moments => "moments",
            AnalysisKind::Conditional => "conditional",
            AnalysisKind::Map => "map",
            AnalysisKind::Decision => "decision",
            AnalysisKind::Corner => "corner",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    fn enabled(self, a: &AnalysisConfig) -> bool {
        match self {
            AnalysisKind::Moments => a.moments,
            AnalysisKind::Conditional => a.conditional.is_some(),
            AnalysisKind::Map => a.map.is_some(),
            AnalysisKind::Decision => a.decision.is_some(),
            AnalysisKind::Corner => a.corner.is_some(),
        }
    }
}

/// Run one analysis and write `out_dir/<analysis>.txt`.
pub fn analyze_stage(
    cfg: &RunConfig,
    what: AnalysisKind,
    posterior: &Posterior,
    samples: &Tensor<f64>,
    out_dir: &Path,
) -> Result<PathBuf, PipelineError> {
    let a = &cfg.analysis;
    let x_o = cfg.observation_tensor();
    let seed = cfg.seeds.analyze;
    let text = match what {
        AnalysisKind::Moments => marginal_moments(samples).map_err(stage("analyze"))?.to_table(),
        AnalysisKind::Conditional => {
            if posterior.kind() == PosteriorKind::Mcmc {
                return Err(PipelineError::Stage {
                    stage: "analyze",
                    message:
                        "conditional slices need a posterior density; condition MCMC posteriors by constrained sampling instead"
                            .into(),
                });
            }
            let c = a.conditional.clone().unwrap_or_else(|| ConditionalConfig {
                dims: vec![0],
                ..Default::default()
            });
            let nodes = c.nodes.unwrap_or(if c.dims.len() == 1 {
                DEFAULT_NODES_1D
            } else {
                DEFAULT_NODES_2D
            });
            let point = match c.point {
                Some(p) => p,
                None => default_conditioning_point(posterior, &x_o, 10_000, seed).map_err(stage("analyze"))?,
            };
            conditional_moments(posterior, &x_o, &c.dims, &point, nodes)
                .map_err(stage("analyze"))?
                .to_table()
        }
        AnalysisKind::Map => {
            let c = a.map.clone().unwrap_or_default();
            let m = posterior.map(&x_o, c.restarts, seed).map_err(stage("analyze"))?;
            let mut s = String::from("dimension\tmap\n");
            for (d, v) in m.theta.iter().enumerate() {
                writeln!(s, "{d}\t{v:.8e}").unwrap();
            }
            writeln!(s, "# log_density {:.8e}", m.log_density).unwrap();
            s
        }
        AnalysisKind::Decision => {
            let c = a
                .decision
                .clone()
                .ok_or_else(|| PipelineError::Config("analysis.decision is not configured".into()))?;
            let dim = c.dimension;
            let cost = move |t: &[f64], act: &f64| match c.loss {
                DecisionLoss::Quadratic => (t[dim] - act).powi(2),
                DecisionLoss::Absolute => (t[dim] - act).abs(),
            };
            let r = optimal_action(
                samples,
                &DecisionProblem {
                    actions: c.actions.clone(),
                    cost: &cost,
                },
            )
            .map_err(stage("analyze"))?;
            let mut s = String::from("action\texpected_cost\tmcse\ttied\n");
            for (k, act) in c.actions.iter().enumerate() {
                writeln!(
                    s,
                    "{act:.8e}\t{:.8e}\t{:.8e}\t{}",
                    r.expected_cost[k],
                    r.mcse[k],
                    r.tied.contains(&k)
                )
                .unwrap();
            }
            writeln!(s, "# best {:.8e}", c.actions[r.best]).unwrap();
            s
        }
        AnalysisKind::Corner => {
            let c = a.corner.clone().unwrap_or_default();
            let prior = cfg.prior()?;
            let bounds = prior.bounds();
            let ranges: Option<Vec<(f64, f64)>> = bounds
                .iter()
                .all(|(lo, hi)| lo.is_finite() && hi.is_finite())
                .then(|| bounds.clone());
            corner_export(samples, c.bins, ranges.as_deref())
                .map_err(stage("analyze"))?
                .to_text()
        }
    };
    let path = out_dir.join(format!("{}.txt", what.name()));
    write_artifact(&path, &cfg.digest(), |w| w.write_all(text.as_bytes()))?;
    Ok(path)
}

/// Artifact locations inside the output directory.
pub struct RunLayout {
    pub config: PathBuf,
    pub dataset: PathBuf,
    pub posterior: PathBuf,
    pub samples: PathBuf,
    pub diagnostics: PathBuf,
    pub analysis: PathBuf,
    pub summary: PathBuf,
}

impl RunLayout {
    pub fn new(out_dir: &Path) -> Self {
        Self {
            config: out_dir.join("config.json"),
            dataset: out_dir.join("dataset.csv"),
            posterior: out_dir.join("posterior.model"),
            samples: out_dir.join("samples.csv"),
            diagnostics: out_dir.join("diagnostics"),
            analysis: out_dir.join("analysis"),
            summary: out_dir.join("summary.txt"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub checks: Vec<CheckOutcome>,
    pub analyses: BTreeMap<&'static str, PathBuf>,
    pub out_dir: PathBuf,
}

impl PipelineOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Validate, then run every enabled stage in order. Artifacts written
/// before a failing stage stay on disk.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate()?;
    let digest = cfg.digest();
    let out_dir = cfg.paths.out_dir.clone();
    let layout = RunLayout::new(&out_dir);
    write_artifact(&layout.config, &digest, |w| writeln!(w, "{}", cfg.to_json()))?;

    let ds = simulate_stage(cfg, &layout.dataset)?;
    let (posterior, _) = train_stage(cfg, &ds, &layout.posterior)?;
    let samples = sample_stage(cfg, &posterior, &layout.samples)?;

    let inputs = DiagnoseInputs {
        posterior: &posterior,
        samples: Some(&samples),
        dataset: Some(&ds),
    };
    let mut checks = Vec::new();
    for check in Check::ALL.into_iter().filter(|c| c.enabled(&cfg.diagnostics)) {
        checks.push(diagnose_stage(cfg, check, &inputs, &layout.diagnostics)?);
    }
    let mut analyses = BTreeMap::new();
    for what in AnalysisKind::ALL.into_iter().filter(|a| a.enabled(&cfg.analysis)) {
        analyses.insert(what.name(), analyze_stage(cfg, what, &posterior, &samples, &layout.analysis)?);
    }
    write_artifact(&layout.summary, &digest, |w| {
        for c in &checks {
            writeln!(w, "{}", c.line())?;
        }
        writeln!(
            w,
            "overall\t{}",
            if checks.iter().all(|c| c.passed) { "PASS" } else { "FAIL" }
        )
    })?;
    Ok(PipelineOutcome {
        checks,
        analyses,
        out_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::new(SimulatorConfig::LinearGaussian { dim: 1, sigma: 0.5 }, vec![vec![0.4]]);
        cfg.simulation.n = 500;
        cfg.sampling.n = 400;
        cfg.train.max_epochs = 150;
        cfg.train.learning_rate = 5e-3;
        cfg.estimator.components = 2;
        cfg.estimator.hidden = vec![16];
        cfg.analysis.corner = Some(CornerConfig { bins: 10 });
        cfg.paths.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn config_round_trips() {
        let cfg = small_config(Path::new("out"));
        let back = RunConfig::parse(&cfg.to_json()).unwrap();
        assert_eq!(serde_json::to_value(&back).unwrap(), serde_json::to_value(&cfg).unwrap());
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(small_config(Path::new("o"))).unwrap();
        v["train"]["momentum"] = 0.9.into();
        assert!(RunConfig::parse(&v.to_string()).is_err());
        let mut v = serde_json::to_value(small_config(Path::new("o"))).unwrap();
        v["extra"] = 1.into();
        assert!(RunConfig::parse(&v.to_string()).is_err());
    }

    #[test]
    fn impossible_prior_fails_validation() {
        let mut cfg = small_config(Path::new("o"));
        cfg.prior = Some(PriorSpec::BoxUniform {
            lower: vec![1.0],
            upper: vec![0.0],
        });
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn overrides_by_path() {
        let mut cfg = small_config(Path::new("o"));
        let before = cfg.digest();
        cfg.set("train.batch_size", "64").unwrap();
        cfg.set("method", "nle").unwrap();
        cfg.set("diagnostics.sbc.min_p", "0.05").unwrap();
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.method, Method::Nle);
        assert_eq!(cfg.diagnostics.sbc.as_ref().unwrap().min_p, 0.05);
        assert_eq!(cfg.diagnostics.sbc.as_ref().unwrap().pairs, 200);
        assert_ne!(cfg.digest(), before);
        let d = cfg.digest();
        cfg.paths.out_dir = PathBuf::from("elsewhere");
        assert_eq!(cfg.digest(), d);
        assert!(cfg.set("train.bogus", "1").is_err());
        assert!(cfg.set("train.batch_size.x", "1").is_err());
    }

    #[test]
    fn field_paths_cover_sections() {
        let paths: Vec<String> = RunConfig::field_paths().into_iter().map(|p| p.0).collect();
        for p in [
            "train.learning_rate",
            "sampler.chains",
            "diagnostics.lc2st.settings.null_refits",
            "diagnostics.misspec.threshold",
            "analysis.decision.loss",
            "seeds.diagnose",
            "paths.out_dir",
            "simulator.name",
            "prior.kind",
        ] {
            assert!(paths.iter().any(|q| q == p), "{p}");
        }
    }

    #[test]
    fn rows_round_trip_with_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let t = Tensor::matrix(2, 2, vec![0.1, -1.0 / 3.0, 1e-300, 7.0]);
        write_rows(&p, "abc", "theta", &t).unwrap();
        assert_eq!(read_rows(&p).unwrap(), t);
        assert_eq!(open_artifact(&p).unwrap().0.as_deref(), Some("abc"));
    }

    #[test]
    fn small_pipeline_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.diagnostics.ppc = Some(PpcCheck { draws: 200 });
        let out = run_pipeline(&cfg).unwrap();
        assert!(out.passed(), "{:?}", out.checks);
        let layout = RunLayout::new(dir.path());
        for p in [
            &layout.config,
            &layout.dataset,
            &layout.posterior,
            &layout.samples,
            &layout.summary,
        ] {
            let (digest, _) = open_artifact(p).unwrap();
            assert_eq!(digest.as_deref(), Some(cfg.digest().as_str()), "{}", p.display());
        }
        assert!(layout.analysis.join("corner.txt").exists());
        let post = load_posterior(&layout.posterior).unwrap();
        assert_eq!(post.kind(), PosteriorKind::Direct);
        assert_eq!(load_dataset(&layout.dataset).unwrap().len(), 500);
        assert_eq!(read_rows(&layout.samples).unwrap().rows(), 400);
    }
}
