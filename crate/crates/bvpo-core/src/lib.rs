//! A desk-scale laboratory for bias-variance mixed preference-gradient
//! estimators on exactly enumerable trace policies.
//!
//! The crate builds tabular softmax policies that factor through an indexed
//! reasoning-trace space, so the trace-marginalized preference objective and
//! its gradient are computable exactly. On top of that oracle it provides:
//!
//! * the trace-based, empty-trace, and marginal DPO-style losses with
//!   analytic gradients ([`loss`]);
//! * a synthetic best/worst-of-n preference data pipeline ([`data`]);
//! * exact and Monte Carlo estimator moments, the MSE parabola in the mixing
//!   weight, and its closed-form minimizer ([`estimator`]);
//! * SGD with per-step exact bias/variance tracking and convergence-bound
//!   verification ([`sgd`]);
//! * thinking vs no-thinking stochasticity diagnostics ([`diagnostics`]).
//!
//! All sampling flows through named counter-based streams ([`rng`]), so every
//! artifact is a pure function of its configuration and seed.

pub mod check;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod loss;
pub mod policy;
pub mod rng;
pub mod sgd;

pub use data::{
    build_empty_dataset, build_paired_datasets, build_trace_dataset, PreferenceDataset,
    PreferenceSample, RewardTable, SampleKind,
};
pub use diagnostics::{stochasticity_report, StochasticityReport};
pub use error::{CoreError, Result};
pub use estimator::{
    combine, conditional_variance, exact_moments, mc_moments, mc_moments_with_errors, mse_at,
    mse_curve, EstimatorMoments, MseCurve, SamplingLaw,
};
pub use loss::{
    empty_loss, grad_empty, grad_marginal, grad_trace, marginal_loss, sigmoid_logloss, trace_loss,
    DpoConfig, EstimatorKind, GradientSample,
};
pub use policy::{PolicyFile, PolicyShape, TraceLength, TracePolicy, EMPTY_TRACE};
pub use sgd::{
    estimate_marginal_smoothness, estimate_smoothness, per_step_optimal_alpha, run_sgd,
    run_sgd_observed, verify_bound, BoundStatus, BoundVerdict, ConvergenceReport, EstimatorChoice,
    SgdConfig, SmoothnessProbe, StepRecord,
};
