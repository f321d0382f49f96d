//! Synthetic preference data pipeline.
//!
//! Per prompt, `n` trajectories are sampled from a frozen reference policy,
//! final answers are scored by a reward table, and the best/worst pair is
//! kept as the preferred/dispreferred sample. The thinking variant samples
//! traces freely; the no-thinking variant forces the empty trace.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::policy::{TracePolicy, EMPTY_TRACE};
use crate::rng::{self, StreamOp};

/// Reward looked up on `(prompt, answer)`; scores ignore traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardTable {
    n_prompts: usize,
    n_answers: usize,
    reward: Vec<f64>,
}

impl RewardTable {
    pub fn new(n_prompts: usize, n_answers: usize, reward: Vec<f64>) -> Result<Self> {
        if reward.len() != n_prompts * n_answers {
            return Err(CoreError::DimensionMismatch(format!(
                "reward table needs {} entries, got {}",
                n_prompts * n_answers,
                reward.len()
            )));
        }
        if reward.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("reward table".into()));
        }
        for x in 0..n_prompts {
            let row = &reward[x * n_answers..(x + 1) * n_answers];
            if row.iter().all(|&v| v == row[0]) {
                return Err(CoreError::contract(format!(
                    "prompt {x} has a single reward value; no strict preference exists"
                )));
            }
        }
        Ok(RewardTable {
            n_prompts,
            n_answers,
            reward,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.reward[x * self.n_answers + y]
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn n_answers(&self) -> usize {
        self.n_answers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Trace,
    Empty,
}

/// One preference comparison. Trace samples carry the sampled traces of the
/// winning and losing trajectories; empty samples are interpreted as having
/// the empty trace on both sides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub prompt: usize,
    pub kind: SampleKind,
    pub y_pos: usize,
    pub y_neg: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r_pos: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r_neg: Option<usize>,
    /// Set when preferred and dispreferred rewards tie and the pair was kept
    /// through a trace-level tie-break.
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub tie_break: bool,
}

impl PreferenceSample {
    pub fn trace(prompt: usize, r_pos: usize, y_pos: usize, r_neg: usize, y_neg: usize) -> Self {
        PreferenceSample {
            prompt,
            kind: SampleKind::Trace,
            y_pos,
            y_neg,
            r_pos: Some(r_pos),
            r_neg: Some(r_neg),
            tie_break: false,
        }
    }

    pub fn empty(prompt: usize, y_pos: usize, y_neg: usize) -> Self {
        PreferenceSample {
            prompt,
            kind: SampleKind::Empty,
            y_pos,
            y_neg,
            r_pos: None,
            r_neg: None,
            tie_break: false,
        }
    }

    /// Traces as used by the trace loss; errors if the sample is not a trace
    /// sample.
    pub fn traces(&self) -> Result<(usize, usize)> {
        match (self.kind, self.r_pos, self.r_neg) {
            (SampleKind::Trace, Some(p), Some(n)) => Ok((p, n)),
            _ => Err(CoreError::contract(
                "trace fields requested on a non-trace sample",
            )),
        }
    }
}

/// An ordered preference dataset of one kind, with the prompts that had to be
/// skipped because all trajectories were identical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub kind: SampleKind,
    pub samples: Vec<PreferenceSample>,
    pub skipped_prompts: Vec<usize>,
}

impl PreferenceDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn skip_count(&self) -> usize {
        self.skipped_prompts.len()
    }

    /// True when `self` and `other` cover the same prompts in the same order,
    /// the precondition for coupling trace and empty estimators by sample
    /// index.
    pub fn is_paired_with(&self, other: &PreferenceDataset) -> bool {
        self.len() == other.len()
            && self
                .samples
                .iter()
                .zip(&other.samples)
                .all(|(a, b)| a.prompt == b.prompt)
    }

    /// JSON lines, one sample per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for sample in &self.samples {
            let line = serde_json::to_string(sample)
                .map_err(|e| CoreError::Serialization(e.to_string()))?;
            out.push_str(&line);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(kind: SampleKind, text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let sample: PreferenceSample =
                serde_json::from_str(line).map_err(|e| CoreError::Serialization(e.to_string()))?;
            if sample.kind != kind {
                return Err(CoreError::contract("mixed sample kinds in dataset"));
            }
            samples.push(sample);
        }
        Ok(PreferenceDataset {
            kind,
            samples,
            skipped_prompts: Vec::new(),
        })
    }
}

/// One sampled `(trace, answer)` trajectory.
type Draw = (usize, usize);

/// Best/worst-of-n selection over scored draws. Ties on reward go to the
/// earliest draw; when every draw is identical there is no pair to emit.
fn select_pair(draws: &[Draw], reward_row: impl Fn(usize) -> f64) -> Option<(Draw, Draw, bool)> {
    let mut best = 0usize;
    let mut worst = 0usize;
    for (i, &(_, y)) in draws.iter().enumerate().skip(1) {
        if reward_row(y) > reward_row(draws[best].1) {
            best = i;
        }
        if reward_row(y) < reward_row(draws[worst].1) {
            worst = i;
        }
    }
    if best == worst {
        // All rewards tied; fall back to the earliest draw that differs in
        // (trace, answer) so equal-reward pairs are still usable, flagged.
        worst = draws.iter().position(|d| *d != draws[best])?;
    }
    let tie = reward_row(draws[best].1) == reward_row(draws[worst].1);
    Some((draws[best], draws[worst], tie))
}

fn build_dataset(
    ref_policy: &TracePolicy,
    reward: &RewardTable,
    n_per_prompt: usize,
    seed: u64,
    kind: SampleKind,
) -> Result<PreferenceDataset> {
    if n_per_prompt < 2 {
        return Err(CoreError::contract("n_per_prompt must be at least 2"));
    }
    let shape = ref_policy.shape();
    if reward.n_prompts() != shape.n_prompts || reward.n_answers() != shape.n_answers {
        return Err(CoreError::DimensionMismatch(
            "reward table does not match policy shape".into(),
        ));
    }
    let op = match kind {
        SampleKind::Trace => StreamOp::DatasetTrace,
        SampleKind::Empty => StreamOp::DatasetEmpty,
    };
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for x in 0..shape.n_prompts {
        let mut draws = Vec::with_capacity(n_per_prompt);
        for j in 0..n_per_prompt {
            let mut stream = rng::stream(seed, op, x as u64, j as u64);
            let draw = match kind {
                SampleKind::Trace => ref_policy.sample_trajectory(x, &mut stream)?,
                SampleKind::Empty => (
                    EMPTY_TRACE,
                    ref_policy.sample_answer(x, EMPTY_TRACE, &mut stream)?,
                ),
            };
            draws.push(draw);
        }
        match select_pair(&draws, |y| reward.get(x, y)) {
            Some(((r_pos, y_pos), (r_neg, y_neg), tie)) => {
                let mut sample = match kind {
                    SampleKind::Trace => PreferenceSample::trace(x, r_pos, y_pos, r_neg, y_neg),
                    SampleKind::Empty => PreferenceSample::empty(x, y_pos, y_neg),
                };
                sample.tie_break = tie;
                samples.push(sample);
            }
            None => skipped.push(x),
        }
    }
    Ok(PreferenceDataset {
        kind,
        samples,
        skipped_prompts: skipped,
    })
}

/// Sample `n_per_prompt` full trajectories per prompt from the reference
/// policy and keep the best/worst pair by reward.
pub fn build_trace_dataset(
    ref_policy: &TracePolicy,
    reward: &RewardTable,
    n_per_prompt: usize,
    seed: u64,
) -> Result<PreferenceDataset> {
    build_dataset(ref_policy, reward, n_per_prompt, seed, SampleKind::Trace)
}

/// Same pipeline with trace generation disabled: every trajectory is forced
/// through the empty trace.
pub fn build_empty_dataset(
    ref_policy: &TracePolicy,
    reward: &RewardTable,
    n_per_prompt: usize,
    seed: u64,
) -> Result<PreferenceDataset> {
    build_dataset(ref_policy, reward, n_per_prompt, seed, SampleKind::Empty)
}

/// Build both datasets from one seed and restrict them to the prompts that
/// survived in both, so the i-th samples share a prompt.
pub fn build_paired_datasets(
    ref_policy: &TracePolicy,
    reward: &RewardTable,
    n_per_prompt: usize,
    seed: u64,
) -> Result<(PreferenceDataset, PreferenceDataset)> {
    let mut d_t = build_trace_dataset(ref_policy, reward, n_per_prompt, seed)?;
    let mut d_e = build_empty_dataset(ref_policy, reward, n_per_prompt, seed)?;
    let keep: Vec<usize> = d_t
        .samples
        .iter()
        .map(|s| s.prompt)
        .filter(|p| d_e.samples.iter().any(|s| s.prompt == *p))
        .collect();
    d_t.samples.retain(|s| keep.contains(&s.prompt));
    d_e.samples.retain(|s| keep.contains(&s.prompt));
    debug_assert!(d_t.is_paired_with(&d_e));
    Ok((d_t, d_e))
}
