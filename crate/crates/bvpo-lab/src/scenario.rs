//! Materialize a [`ScenarioConfig`] into policies, reward table, lengths,
//! and the paired preference datasets.

use bvpo_core::data::{build_paired_datasets, PreferenceDataset, RewardTable};
use bvpo_core::loss::DpoConfig;
use bvpo_core::policy::{PolicyShape, TraceLength, TracePolicy, EMPTY_TRACE};
use bvpo_core::rng::{self, StreamOp};

use crate::config::{ScenarioConfig, ThetaInit};
use crate::error::{CliError, Result};

/// Everything a command needs, derived deterministically from the config.
pub struct Scenario {
    pub config: ScenarioConfig,
    pub policy: TracePolicy,
    pub ref_policy: TracePolicy,
    pub reward: RewardTable,
    pub lengths: TraceLength,
    pub answer_lengths: Vec<u64>,
    pub d_t: PreferenceDataset,
    pub d_e: PreferenceDataset,
    pub dpo: DpoConfig,
}

fn uniform_length(stream: &mut rng::Stream, min: u64, max: u64) -> u64 {
    (min + (rng::uniform(stream) * (max - min + 1) as f64) as u64).min(max)
}

pub fn materialize(config: &ScenarioConfig) -> Result<Scenario> {
    let shape = PolicyShape::new(
        config.shape.n_prompts,
        config.shape.n_traces,
        config.shape.n_answers,
    )?;

    let policy = match &config.theta_init {
        ThetaInit::Seed(seed) => {
            let mut stream = rng::stream(*seed, StreamOp::ThetaInit, 0, 0);
            TracePolicy::gaussian(shape, config.theta_scale, &mut stream)
        }
        ThetaInit::Explicit(theta) => TracePolicy::new(shape, theta.clone())?,
    };

    // The sampling temperature is folded into the reference logits: the same
    // tempered policy both generates the data and serves as the DPO anchor.
    let ref_policy = {
        let mut stream = rng::stream(config.ref_seed, StreamOp::RefInit, 0, 0);
        let scale = config.ref_scale / config.sampling_temperature;
        TracePolicy::gaussian(shape, scale, &mut stream)
    };

    let reward = {
        let mut stream = rng::stream(config.reward_seed, StreamOp::RewardInit, 0, 0);
        let entries: Vec<f64> = (0..shape.n_prompts * shape.n_answers)
            .map(|_| rng::standard_normal(&mut stream))
            .collect();
        RewardTable::new(shape.n_prompts, shape.n_answers, entries)?
    };

    let (lengths, answer_lengths) = {
        let cfg = &config.lengths;
        let mut stream = rng::stream(cfg.seed, StreamOp::LengthInit, 0, 0);
        let mut trace_lengths = vec![0u64; shape.n_traces];
        for length in trace_lengths.iter_mut().skip(EMPTY_TRACE + 1) {
            *length = uniform_length(&mut stream, cfg.trace_min, cfg.trace_max);
        }
        let answer_lengths: Vec<u64> = (0..shape.n_answers)
            .map(|_| uniform_length(&mut stream, cfg.answer_min, cfg.answer_max))
            .collect();
        (TraceLength::new(trace_lengths)?, answer_lengths)
    };

    let (d_t, d_e) = build_paired_datasets(&ref_policy, &reward, config.n_per_prompt, config.seed)?;
    if d_t.is_empty() {
        return Err(CliError::config(
            "scenario produced an empty dataset: every prompt was skipped",
        ));
    }

    Ok(Scenario {
        config: config.clone(),
        policy,
        ref_policy,
        reward,
        lengths,
        answer_lengths,
        d_t,
        d_e,
        dpo: DpoConfig::new(config.beta)?,
    })
}
