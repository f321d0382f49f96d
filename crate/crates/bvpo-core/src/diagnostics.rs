//! Thinking vs no-thinking stochasticity diagnostics.
//!
//! For each prompt, `n` trajectories are sampled twice: once with free trace
//! generation (thinking) and once with the trace forced empty (no-thinking).
//! Both modes share the answer-draw uniform per (prompt, sample), so a policy
//! whose trace mass sits entirely on the empty trace produces literally
//! identical draws and ratios of exactly one.
//!
//! Variances are sample variances (`n - 1` normalization) per prompt,
//! averaged over prompts before the thinking / no-thinking ratio is taken.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::policy::{TraceLength, TracePolicy, EMPTY_TRACE};
use crate::rng::{self, StreamOp};

/// Dispersion and predictability statistics comparing the two modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticityReport {
    /// Mean per-prompt variance of the joint log-probability, thinking over
    /// no-thinking.
    pub var_ratio_logp: f64,
    /// Same ratio for total sequence length.
    pub var_ratio_length: f64,
    /// Mean total length, thinking over no-thinking.
    pub mean_length_ratio: f64,
    /// Negative log-likelihood per token (nats/token) in each mode.
    pub nll_think: f64,
    pub nll_no: f64,
    pub nll_delta: f64,
    pub nll_pct_increase: f64,
    /// Share of thinking tokens spent on the trace segment.
    pub trace_token_share: f64,
    /// Per-token NLL of the trace and answer segments within thinking mode.
    pub nll_trace: f64,
    pub nll_answer: f64,
    pub per_question_sample_count: usize,
    /// Set when no-thinking dispersion vanished across all prompts and the
    /// ratios were reported as infinity sentinels.
    #[serde(default)]
    pub zero_nothinking_variance: bool,
}

fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

fn ratio_with_sentinel(numerator: f64, denominator: f64, flag: &mut bool) -> f64 {
    if denominator == 0.0 {
        if numerator == 0.0 {
            // Identical degenerate dispersion in both modes.
            1.0
        } else {
            *flag = true;
            f64::INFINITY
        }
    } else {
        numerator / denominator
    }
}

/// Sample `n_per_question` responses per prompt in both modes and aggregate
/// the dispersion statistics. Deterministic given `(policy, lengths, seed)`.
pub fn stochasticity_report(
    policy: &TracePolicy,
    lengths: &TraceLength,
    answer_lengths: &[u64],
    n_per_question: usize,
    seed: u64,
) -> Result<StochasticityReport> {
    if n_per_question < 2 {
        return Err(CoreError::contract("n_per_question must be at least 2"));
    }
    let shape = policy.shape();
    if lengths.as_slice().len() != shape.n_traces {
        return Err(CoreError::DimensionMismatch(
            "trace lengths do not match n_traces".into(),
        ));
    }
    if answer_lengths.len() != shape.n_answers {
        return Err(CoreError::DimensionMismatch(
            "answer lengths do not match n_answers".into(),
        ));
    }

    let mut var_logp_think = 0.0;
    let mut var_logp_no = 0.0;
    let mut var_len_think = 0.0;
    let mut var_len_no = 0.0;
    let mut sum_len_think = 0.0;
    let mut sum_len_no = 0.0;
    let mut sum_nll_think = 0.0;
    let mut sum_nll_no = 0.0;
    let mut trace_tokens = 0.0;
    let mut answer_tokens = 0.0;
    let mut trace_nats = 0.0;
    let mut answer_nats = 0.0;

    for x in 0..shape.n_prompts {
        let mut logp_think = Vec::with_capacity(n_per_question);
        let mut logp_no = Vec::with_capacity(n_per_question);
        let mut len_think = Vec::with_capacity(n_per_question);
        let mut len_no = Vec::with_capacity(n_per_question);
        for j in 0..n_per_question {
            let mut stream = rng::stream(seed, StreamOp::Diagnostics, x as u64, j as u64);
            let u_trace = rng::uniform(&mut stream);
            let u_answer = rng::uniform(&mut stream);

            let trace_probs: Vec<f64> = policy
                .trace_logprobs(x)?
                .iter()
                .map(|lp| lp.exp())
                .collect();
            let r = rng::categorical(&trace_probs, u_trace);
            let answer_probs: Vec<f64> = policy
                .answer_logprobs(x, r)?
                .iter()
                .map(|lp| lp.exp())
                .collect();
            let y = rng::categorical(&answer_probs, u_answer);
            let logp = policy.joint_logprob(x, r, y)?;
            let length = (lengths.get(r) + answer_lengths[y]) as f64;
            logp_think.push(logp);
            len_think.push(length);
            sum_nll_think += -logp / length;

            trace_tokens += lengths.get(r) as f64;
            answer_tokens += answer_lengths[y] as f64;
            trace_nats += -policy.trace_logprobs(x)?[r];
            answer_nats += -policy.answer_logprobs(x, r)?[y];

            // No-thinking: forced empty trace, same answer uniform.
            let empty_probs: Vec<f64> = policy
                .answer_logprobs(x, EMPTY_TRACE)?
                .iter()
                .map(|lp| lp.exp())
                .collect();
            let y_no = rng::categorical(&empty_probs, u_answer);
            let logp_empty = policy.joint_logprob(x, EMPTY_TRACE, y_no)?;
            let length_empty = (lengths.get(EMPTY_TRACE) + answer_lengths[y_no]) as f64;
            logp_no.push(logp_empty);
            len_no.push(length_empty);
            sum_nll_no += -logp_empty / length_empty;
        }
        var_logp_think += sample_variance(&logp_think);
        var_logp_no += sample_variance(&logp_no);
        var_len_think += sample_variance(&len_think);
        var_len_no += sample_variance(&len_no);
        sum_len_think += len_think.iter().sum::<f64>();
        sum_len_no += len_no.iter().sum::<f64>();
    }

    let prompts = shape.n_prompts as f64;
    let draws = (shape.n_prompts * n_per_question) as f64;
    let mut zero_flag = false;
    let var_ratio_logp = ratio_with_sentinel(
        var_logp_think / prompts,
        var_logp_no / prompts,
        &mut zero_flag,
    );
    let var_ratio_length = ratio_with_sentinel(
        var_len_think / prompts,
        var_len_no / prompts,
        &mut zero_flag,
    );
    let mean_length_ratio = (sum_len_think / draws) / (sum_len_no / draws);
    let nll_think = sum_nll_think / draws;
    let nll_no = sum_nll_no / draws;
    let nll_delta = nll_think - nll_no;
    let nll_pct_increase = if nll_no == 0.0 {
        0.0
    } else {
        100.0 * nll_delta / nll_no
    };
    let total_tokens = trace_tokens + answer_tokens;
    let trace_token_share = if total_tokens == 0.0 {
        0.0
    } else {
        trace_tokens / total_tokens
    };
    let nll_trace = if trace_tokens == 0.0 {
        0.0
    } else {
        trace_nats / trace_tokens
    };
    let nll_answer = if answer_tokens == 0.0 {
        0.0
    } else {
        answer_nats / answer_tokens
    };

    Ok(StochasticityReport {
        var_ratio_logp,
        var_ratio_length,
        mean_length_ratio,
        nll_think,
        nll_no,
        nll_delta,
        nll_pct_increase,
        trace_token_share,
        nll_trace,
        nll_answer,
        per_question_sample_count: n_per_question,
        zero_nothinking_variance: zero_flag,
    })
}
