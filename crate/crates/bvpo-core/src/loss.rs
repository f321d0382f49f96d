//! Preference losses and their analytic gradients.
//!
//! Three single-sample losses share one template `-log sigmoid(beta * margin)`
//! and differ only in which log-probability enters the margin:
//!
//! * trace loss: joint log-probabilities of the sampled (trace, answer) pairs;
//! * empty-trace loss: joint log-probabilities with the trace pinned to the
//!   empty trace, including the `pi(empty | x)` factor;
//! * marginal loss: trace-marginalized answer log-probabilities, the exact
//!   objective the other two approximate.
//!
//! The reference policy is frozen: no gradient ever touches its parameters.

use serde::{Deserialize, Serialize};

use crate::data::{PreferenceDataset, PreferenceSample, SampleKind};
use crate::error::{CoreError, Result};
use crate::policy::{TracePolicy, EMPTY_TRACE};

/// DPO temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
}

impl DpoConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if !beta.is_finite() || beta <= 0.0 {
            return Err(CoreError::contract("beta must be positive and finite"));
        }
        Ok(DpoConfig { beta })
    }
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig { beta: 0.01 }
    }
}

/// Which estimator produced a gradient sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Trace,
    Empty,
    Combined,
    Marginal,
}

/// The randomness that realized a stochastic gradient: which data sample was
/// drawn and, for trace estimators, which trace pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomnessRecord {
    pub sample_index: Option<usize>,
    pub trace_pair: Option<(usize, usize)>,
}

/// One realized gradient vector with its estimator tag and randomness record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSample {
    pub vector: Vec<f64>,
    pub estimator: EstimatorKind,
    pub randomness: RandomnessRecord,
}

/// `-log sigmoid(margin)`, computed as the numerically stable
/// `softplus(-margin)`.
pub fn sigmoid_logloss(margin: f64) -> f64 {
    softplus(-margin)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `sigma(z)` without overflow on either tail.
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn require_kind(sample: &PreferenceSample, kind: SampleKind) -> Result<()> {
    if sample.kind != kind {
        return Err(CoreError::contract(format!(
            "expected a {kind:?} sample, got {:?}",
            sample.kind
        )));
    }
    Ok(())
}

/// Reward-difference margin of the trace loss, before the sigmoid:
/// `beta * [(log pi(r+, y+|x) - log ref(r+, y+|x)) - (log pi(r-, y-|x) - log ref(r-, y-|x))]`.
pub fn trace_margin(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    sample: &PreferenceSample,
    cfg: &DpoConfig,
) -> Result<f64> {
    require_kind(sample, SampleKind::Trace)?;
    let (r_pos, r_neg) = sample.traces()?;
    let x = sample.prompt;
    let delta_pos = policy.joint_logprob(x, r_pos, sample.y_pos)?
        - ref_policy.joint_logprob(x, r_pos, sample.y_pos)?;
    let delta_neg = policy.joint_logprob(x, r_neg, sample.y_neg)?
        - ref_policy.joint_logprob(x, r_neg, sample.y_neg)?;
    Ok(cfg.beta * (delta_pos - delta_neg))
}

/// Margin of the empty-trace loss: as `trace_margin` with both traces pinned
/// to the empty trace, joint factor included.
pub fn empty_margin(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    sample: &PreferenceSample,
    cfg: &DpoConfig,
) -> Result<f64> {
    require_kind(sample, SampleKind::Empty)?;
    let x = sample.prompt;
    let delta_pos = policy.joint_logprob(x, EMPTY_TRACE, sample.y_pos)?
        - ref_policy.joint_logprob(x, EMPTY_TRACE, sample.y_pos)?;
    let delta_neg = policy.joint_logprob(x, EMPTY_TRACE, sample.y_neg)?
        - ref_policy.joint_logprob(x, EMPTY_TRACE, sample.y_neg)?;
    Ok(cfg.beta * (delta_pos - delta_neg))
}

/// Margin of the marginal loss for one sample; traces are ignored and only
/// the answers enter, through the exact trace-marginalized probabilities.
pub fn marginal_margin(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    sample: &PreferenceSample,
    cfg: &DpoConfig,
) -> Result<f64> {
    let x = sample.prompt;
    let delta_pos =
        policy.marginal_logprob(x, sample.y_pos)? - ref_policy.marginal_logprob(x, sample.y_pos)?;
    let delta_neg =
        policy.marginal_logprob(x, sample.y_neg)? - ref_policy.marginal_logprob(x, sample.y_neg)?;
    Ok(cfg.beta * (delta_pos - delta_neg))
}

/// Single-sample trace loss.
pub fn trace_loss(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    sample: &PreferenceSample,
    cfg: &DpoConfig,
) -> Result<f64> {
    Ok(sigmoid_logloss(trace_margin(
        policy, ref_policy, sample, cfg,
    )?))
}

/// Single-sample empty-trace loss.
pub fn empty_loss(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    sample: &PreferenceSample,
    cfg: &DpoConfig,
) -> Result<f64> {
    Ok(sigmoid_logloss(empty_margin(
        policy, ref_policy, sample, cfg,
    )?))
}

/// Exact marginal loss, averaged over the dataset.
pub fn marginal_loss(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    dataset: &PreferenceDataset,
    cfg: &DpoConfig,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(CoreError::contract("marginal loss over an empty dataset"));
    }
    let mut total = 0.0;
    for sample in &dataset.samples {
        total += sigmoid_logloss(marginal_margin(policy, ref_policy, sample, cfg)?);
    }
    Ok(total / dataset.len() as f64)
}

/// Accumulate the trace-loss gradient for explicit traces `(r_pos, r_neg)`
/// into `out`. This is the enumeration workhorse behind `grad_trace`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn add_grad_trace_with(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    x: usize,
    r_pos: usize,
    y_pos: usize,
    r_neg: usize,
    y_neg: usize,
    cfg: &DpoConfig,
    scale: f64,
    out: &mut [f64],
) -> Result<()> {
    let delta_pos =
        policy.joint_logprob(x, r_pos, y_pos)? - ref_policy.joint_logprob(x, r_pos, y_pos)?;
    let delta_neg =
        policy.joint_logprob(x, r_neg, y_neg)? - ref_policy.joint_logprob(x, r_neg, y_neg)?;
    let margin = cfg.beta * (delta_pos - delta_neg);
    let coeff = scale * (-sigmoid(-margin)) * cfg.beta;
    policy.add_scaled_grad_joint(x, r_pos, y_pos, coeff, out)?;
    policy.add_scaled_grad_joint(x, r_neg, y_neg, -coeff, out)?;
    Ok(())
}

/// Analytic gradient of the trace loss:
/// `-sigma(-m) * beta * [grad_joint(x, r+, y+) - grad_joint(x, r-, y-)]`.
pub fn grad_trace(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    sample: &PreferenceSample,
    cfg: &DpoConfig,
) -> Result<GradientSample> {
    require_kind(sample, SampleKind::Trace)?;
    let (r_pos, r_neg) = sample.traces()?;
    let mut vector = vec![0.0; policy.shape().param_dim()];
    add_grad_trace_with(
        policy,
        ref_policy,
        sample.prompt,
        r_pos,
        sample.y_pos,
        r_neg,
        sample.y_neg,
        cfg,
        1.0,
        &mut vector,
    )?;
    Ok(GradientSample {
        vector,
        estimator: EstimatorKind::Trace,
        randomness: RandomnessRecord {
            sample_index: None,
            trace_pair: Some((r_pos, r_neg)),
        },
    })
}

pub(crate) fn add_grad_empty(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    sample: &PreferenceSample,
    cfg: &DpoConfig,
    scale: f64,
    out: &mut [f64],
) -> Result<()> {
    require_kind(sample, SampleKind::Empty)?;
    add_grad_trace_with(
        policy,
        ref_policy,
        sample.prompt,
        EMPTY_TRACE,
        sample.y_pos,
        EMPTY_TRACE,
        sample.y_neg,
        cfg,
        scale,
        out,
    )
}

/// Analytic gradient of the empty-trace loss; deterministic given the sample,
/// with no trace randomness.
pub fn grad_empty(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    sample: &PreferenceSample,
    cfg: &DpoConfig,
) -> Result<GradientSample> {
    let mut vector = vec![0.0; policy.shape().param_dim()];
    add_grad_empty(policy, ref_policy, sample, cfg, 1.0, &mut vector)?;
    Ok(GradientSample {
        vector,
        estimator: EstimatorKind::Empty,
        randomness: RandomnessRecord::default(),
    })
}

pub(crate) fn add_grad_marginal_sample(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    sample: &PreferenceSample,
    cfg: &DpoConfig,
    scale: f64,
    out: &mut [f64],
) -> Result<()> {
    let margin = marginal_margin(policy, ref_policy, sample, cfg)?;
    let coeff = scale * (-sigmoid(-margin)) * cfg.beta;
    policy.add_scaled_grad_marginal(sample.prompt, sample.y_pos, coeff, out)?;
    policy.add_scaled_grad_marginal(sample.prompt, sample.y_neg, -coeff, out)?;
    Ok(())
}

/// Exact gradient of the marginal loss; this is the oracle the stochastic
/// estimators are judged against.
pub fn grad_marginal(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    dataset: &PreferenceDataset,
    cfg: &DpoConfig,
) -> Result<GradientSample> {
    if dataset.is_empty() {
        return Err(CoreError::contract(
            "marginal gradient over an empty dataset",
        ));
    }
    let mut vector = vec![0.0; policy.shape().param_dim()];
    let weight = 1.0 / dataset.len() as f64;
    for sample in &dataset.samples {
        add_grad_marginal_sample(policy, ref_policy, sample, cfg, weight, &mut vector)?;
    }
    Ok(GradientSample {
        vector,
        estimator: EstimatorKind::Marginal,
        randomness: RandomnessRecord::default(),
    })
}
