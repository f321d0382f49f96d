//! Tabular trace-factorized softmax policies.
//!
//! A policy over `(prompt, trace, answer)` factorizes as
//! `pi(r, y | x) = pi(r | x) * pi(y | x, r)`, with trace index 0 reserved for
//! the empty trace. Both factors are softmaxes over rows of a flat parameter
//! vector `theta`, laid out as `[trace-logit block | answer-logit block]`:
//!
//! * trace logit of `(x, r)` lives at `x * n_traces + r`;
//! * answer logit of `(x, r, y)` lives at
//!   `n_prompts * n_traces + (x * n_traces + r) * n_answers + y`.
//!
//! Because the trace set is finite and indexed, marginalizing answers over
//! traces is an exact log-sum-exp rather than an intractable sum, which is
//! what lets every estimator in this crate be checked against a brute-force
//! marginal oracle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng;

/// Index of the reserved empty trace.
pub const EMPTY_TRACE: usize = 0;

/// Dimensions of a trace policy. Trace index 0 is the reserved empty trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub n_prompts: usize,
    pub n_traces: usize,
    pub n_answers: usize,
}

impl PolicyShape {
    pub fn new(n_prompts: usize, n_traces: usize, n_answers: usize) -> Result<Self> {
        if n_prompts == 0 {
            return Err(CoreError::contract("n_prompts must be positive"));
        }
        if n_traces < 2 {
            return Err(CoreError::contract(
                "n_traces must be at least 2 (empty trace plus one nonempty trace)",
            ));
        }
        if n_answers < 2 {
            return Err(CoreError::contract("n_answers must be at least 2"));
        }
        Ok(PolicyShape {
            n_prompts,
            n_traces,
            n_answers,
        })
    }

    /// Flat parameter dimension: one trace-logit row per prompt plus one
    /// answer-logit row per (prompt, trace).
    pub fn param_dim(&self) -> usize {
        self.n_prompts * self.n_traces * (1 + self.n_answers)
    }

    /// Offset of the answer-logit block within `theta`.
    pub fn answer_block_offset(&self) -> usize {
        self.n_prompts * self.n_traces
    }

    pub fn trace_logit_index(&self, x: usize, r: usize) -> usize {
        x * self.n_traces + r
    }

    pub fn answer_logit_index(&self, x: usize, r: usize, y: usize) -> usize {
        self.answer_block_offset() + (x * self.n_traces + r) * self.n_answers + y
    }

    pub fn check_prompt(&self, x: usize) -> Result<()> {
        if x >= self.n_prompts {
            return Err(CoreError::IndexOutOfRange {
                what: "prompt",
                got: x,
                limit: self.n_prompts,
            });
        }
        Ok(())
    }

    pub fn check_trace(&self, r: usize) -> Result<()> {
        if r >= self.n_traces {
            return Err(CoreError::IndexOutOfRange {
                what: "trace",
                got: r,
                limit: self.n_traces,
            });
        }
        Ok(())
    }

    pub fn check_answer(&self, y: usize) -> Result<()> {
        if y >= self.n_answers {
            return Err(CoreError::IndexOutOfRange {
                what: "answer",
                got: y,
                limit: self.n_answers,
            });
        }
        Ok(())
    }
}

/// Max-shifted log-sum-exp.
fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// A tabular trace-factorized softmax policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePolicy {
    shape: PolicyShape,
    theta: Vec<f64>,
}

impl TracePolicy {
    pub fn new(shape: PolicyShape, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != shape.param_dim() {
            return Err(CoreError::DimensionMismatch(format!(
                "theta has length {}, shape needs {}",
                theta.len(),
                shape.param_dim()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("policy logits".into()));
        }
        Ok(TracePolicy { shape, theta })
    }

    /// All-zero logits: uniform over traces and answers.
    pub fn uniform(shape: PolicyShape) -> Self {
        TracePolicy {
            theta: vec![0.0; shape.param_dim()],
            shape,
        }
    }

    /// Gaussian logits `scale * N(0, 1)` drawn from `rng`.
    pub fn gaussian(shape: PolicyShape, scale: f64, rng: &mut impl Rng) -> Self {
        let theta = (0..shape.param_dim())
            .map(|_| scale * rng::standard_normal(rng))
            .collect();
        TracePolicy { shape, theta }
    }

    /// Gaussian logits with separate scales per block: the trace head, the
    /// empty-trace answer head, and the nonempty-trace answer heads. A small
    /// `trace_scale` keeps the trace head high-entropy while a large
    /// `answer_scale` makes trajectories trace-sensitive.
    pub fn gaussian_blocks(
        shape: PolicyShape,
        trace_scale: f64,
        empty_answer_scale: f64,
        answer_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut policy = TracePolicy::uniform(shape);
        for x in 0..shape.n_prompts {
            for r in 0..shape.n_traces {
                policy.theta[shape.trace_logit_index(x, r)] =
                    trace_scale * rng::standard_normal(rng);
                let scale = if r == EMPTY_TRACE {
                    empty_answer_scale
                } else {
                    answer_scale
                };
                for y in 0..shape.n_answers {
                    policy.theta[shape.answer_logit_index(x, r, y)] =
                        scale * rng::standard_normal(rng);
                }
            }
        }
        policy
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// Replace the parameter vector, keeping the shape.
    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.shape.param_dim() {
            return Err(CoreError::DimensionMismatch(format!(
                "theta has length {}, shape needs {}",
                theta.len(),
                self.shape.param_dim()
            )));
        }
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    fn trace_logits(&self, x: usize) -> &[f64] {
        let start = self.shape.trace_logit_index(x, 0);
        &self.theta[start..start + self.shape.n_traces]
    }

    fn answer_logits(&self, x: usize, r: usize) -> &[f64] {
        let start = self.shape.answer_logit_index(x, r, 0);
        &self.theta[start..start + self.shape.n_answers]
    }

    /// `log pi(r | x)` for all traces of a prompt.
    pub fn trace_logprobs(&self, x: usize) -> Result<Vec<f64>> {
        self.shape.check_prompt(x)?;
        let logits = self.trace_logits(x);
        let lse = log_sum_exp(logits);
        Ok(logits.iter().map(|v| v - lse).collect())
    }

    /// `log pi(y | x, r)` for all answers of a (prompt, trace).
    pub fn answer_logprobs(&self, x: usize, r: usize) -> Result<Vec<f64>> {
        self.shape.check_prompt(x)?;
        self.shape.check_trace(r)?;
        let logits = self.answer_logits(x, r);
        let lse = log_sum_exp(logits);
        Ok(logits.iter().map(|v| v - lse).collect())
    }

    /// `log pi(r, y | x) = log pi(r | x) + log pi(y | x, r)`.
    pub fn joint_logprob(&self, x: usize, r: usize, y: usize) -> Result<f64> {
        self.shape.check_prompt(x)?;
        self.shape.check_trace(r)?;
        self.shape.check_answer(y)?;
        let trace_lp = {
            let logits = self.trace_logits(x);
            logits[r] - log_sum_exp(logits)
        };
        let answer_lp = {
            let logits = self.answer_logits(x, r);
            logits[y] - log_sum_exp(logits)
        };
        Ok(trace_lp + answer_lp)
    }

    /// `log pi(y | x) = log sum_r exp(log pi(r, y | x))`, max-shifted.
    pub fn marginal_logprob(&self, x: usize, y: usize) -> Result<f64> {
        self.shape.check_prompt(x)?;
        self.shape.check_answer(y)?;
        let joints: Vec<f64> = (0..self.shape.n_traces)
            .map(|r| self.joint_logprob(x, r, y))
            .collect::<Result<_>>()?;
        Ok(log_sum_exp(&joints))
    }

    /// Trace posterior `p(r | x, y) = pi(r, y | x) / pi(y | x)` by exact
    /// enumeration; returned as probabilities summing to one.
    pub fn trace_posterior(&self, x: usize, y: usize) -> Result<Vec<f64>> {
        self.shape.check_prompt(x)?;
        self.shape.check_answer(y)?;
        let joints: Vec<f64> = (0..self.shape.n_traces)
            .map(|r| self.joint_logprob(x, r, y))
            .collect::<Result<_>>()?;
        let lse = log_sum_exp(&joints);
        Ok(joints.iter().map(|lp| (lp - lse).exp()).collect())
    }

    /// Adds `scale * grad_theta log pi(r, y | x)` into `out`.
    ///
    /// The gradient is nonzero only in prompt `x`'s trace-logit row
    /// (`1{j=r} - pi(j|x)`) and the `(x, r)` answer-logit row
    /// (`1{j=y} - pi(j|x,r)`).
    pub(crate) fn add_scaled_grad_joint(
        &self,
        x: usize,
        r: usize,
        y: usize,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.shape.check_prompt(x)?;
        self.shape.check_trace(r)?;
        self.shape.check_answer(y)?;
        if out.len() != self.shape.param_dim() {
            return Err(CoreError::DimensionMismatch(
                "gradient buffer length".into(),
            ));
        }
        let trace_lp = self.trace_logprobs(x)?;
        let base = self.shape.trace_logit_index(x, 0);
        for (j, lp) in trace_lp.iter().enumerate() {
            let indicator = if j == r { 1.0 } else { 0.0 };
            out[base + j] += scale * (indicator - lp.exp());
        }
        let answer_lp = self.answer_logprobs(x, r)?;
        let base = self.shape.answer_logit_index(x, r, 0);
        for (j, lp) in answer_lp.iter().enumerate() {
            let indicator = if j == y { 1.0 } else { 0.0 };
            out[base + j] += scale * (indicator - lp.exp());
        }
        Ok(())
    }

    /// Exact gradient of `joint_logprob` with respect to `theta`.
    pub fn grad_joint_logprob(&self, x: usize, r: usize, y: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.shape.param_dim()];
        self.add_scaled_grad_joint(x, r, y, 1.0, &mut out)?;
        Ok(out)
    }

    /// Adds `scale * grad_theta log pi(y | x)` into `out`, as the
    /// posterior-weighted mixture of joint gradients.
    pub(crate) fn add_scaled_grad_marginal(
        &self,
        x: usize,
        y: usize,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let weights = self.trace_posterior(x, y)?;
        for (r, w) in weights.iter().enumerate() {
            self.add_scaled_grad_joint(x, r, y, scale * w, out)?;
        }
        Ok(())
    }

    /// Exact gradient of `marginal_logprob`: `sum_r w_r * grad_joint(x, r, y)`
    /// with posterior weights `w_r = pi(r, y | x) / pi(y | x)`.
    pub fn grad_marginal_logprob(&self, x: usize, y: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.shape.param_dim()];
        self.add_scaled_grad_marginal(x, y, 1.0, &mut out)?;
        Ok(out)
    }

    /// Draw `r ~ pi(.|x)` then `y ~ pi(.|x,r)` from the given stream.
    pub fn sample_trajectory(&self, x: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
        self.shape.check_prompt(x)?;
        let trace_probs: Vec<f64> = self.trace_logprobs(x)?.iter().map(|lp| lp.exp()).collect();
        let r = rng::categorical(&trace_probs, rng::uniform(rng));
        let y = self.sample_answer(x, r, rng)?;
        Ok((r, y))
    }

    /// Draw `y ~ pi(.|x,r)` from the given stream.
    pub fn sample_answer(&self, x: usize, r: usize, rng: &mut impl Rng) -> Result<usize> {
        self.shape.check_prompt(x)?;
        self.shape.check_trace(r)?;
        let probs: Vec<f64> = self
            .answer_logprobs(x, r)?
            .iter()
            .map(|lp| lp.exp())
            .collect();
        Ok(rng::categorical(&probs, rng::uniform(rng)))
    }

    /// Draw a trace from the exact posterior `p(r | x, y)`.
    pub fn sample_trace_posterior(&self, x: usize, y: usize, rng: &mut impl Rng) -> Result<usize> {
        let weights = self.trace_posterior(x, y)?;
        Ok(rng::categorical(&weights, rng::uniform(rng)))
    }
}

/// Token counts per trace; the empty trace has length zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLength {
    lengths: Vec<u64>,
}

impl TraceLength {
    pub fn new(lengths: Vec<u64>) -> Result<Self> {
        if lengths.is_empty() || lengths[EMPTY_TRACE] != 0 {
            return Err(CoreError::contract("empty trace must have length 0"));
        }
        if lengths.iter().skip(1).any(|&l| l == 0) {
            return Err(CoreError::contract(
                "nonempty traces must have length at least 1",
            ));
        }
        Ok(TraceLength { lengths })
    }

    /// All-zero empty trace plus unit lengths; a neutral default.
    pub fn unit(n_traces: usize) -> Self {
        let mut lengths = vec![1; n_traces];
        lengths[EMPTY_TRACE] = 0;
        TraceLength { lengths }
    }

    pub fn get(&self, r: usize) -> u64 {
        self.lengths[r]
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.lengths
    }
}

/// On-disk policy bundle: shape, flat logits in block order, trace lengths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyFile {
    pub shape: PolicyShape,
    pub theta: Vec<f64>,
    pub trace_lengths: Vec<u64>,
}

impl PolicyFile {
    pub fn from_parts(policy: &TracePolicy, lengths: &TraceLength) -> Self {
        PolicyFile {
            shape: policy.shape(),
            theta: policy.theta().to_vec(),
            trace_lengths: lengths.as_slice().to_vec(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| CoreError::Serialization(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CoreError::Serialization(e.to_string()))
    }

    pub fn into_parts(self) -> Result<(TracePolicy, TraceLength)> {
        let shape = PolicyShape::new(
            self.shape.n_prompts,
            self.shape.n_traces,
            self.shape.n_answers,
        )?;
        if self.trace_lengths.len() != shape.n_traces {
            return Err(CoreError::DimensionMismatch(
                "trace_lengths length does not match n_traces".into(),
            ));
        }
        Ok((
            TracePolicy::new(shape, self.theta)?,
            TraceLength::new(self.trace_lengths)?,
        ))
    }
}
