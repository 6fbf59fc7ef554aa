//! Simulation-based inference: simulate from a prior, train a neural
//! posterior, likelihood or ratio estimator, sample the posterior at an
//! observation, then check calibration and summarize.
//!
//! Numerical modules are generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the workflow runs in `f64` and the aliases below name those instances.

// Comparisons such as `!(x > 0.0)` also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod diagnostics;
pub mod distributions;
pub mod estimators;
pub mod inference;
pub mod ndiff;
pub mod pipeline;
pub mod samplers;
pub mod scalar;
pub mod simulators;
pub mod trainer;

use thiserror::Error;

pub use distributions::{ContinuousDistribution, Prior, PriorSpec};
pub use inference::{Posterior, PosteriorKind};
pub use pipeline::{run_pipeline, RunConfig};
pub use scalar::Scalar;
pub use simulators::{Dataset, Simulator, SimulatorConfig};

pub type Tensor = ndiff::Tensor<f64>;
pub type Estimator = estimators::Estimator<f64>;
pub type Classifier = estimators::Classifier<f64>;
pub type BoxUniform = distributions::BoxUniform<f64>;
pub type DiagGaussian = distributions::DiagGaussian<f64>;
pub type TruncatedNormal = distributions::TruncatedNormal<f64>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ndiff(#[from] ndiff::NdiffError),
    #[error(transparent)]
    Distribution(#[from] distributions::DistError),
    #[error(transparent)]
    Simulator(#[from] simulators::SimError),
    #[error(transparent)]
    Estimator(#[from] estimators::EstimatorError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Inference(#[from] inference::InferenceError),
    #[error(transparent)]
    Sampler(#[from] samplers::SamplerError),
    #[error(transparent)]
    Diagnostics(#[from] diagnostics::DiagnosticsError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
}

pub type Result<T> = std::result::Result<T, Error>;
