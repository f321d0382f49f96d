//! Scenario configuration: the single JSON document every command consumes.
//!
//! A config file holds either one scenario object or an array of them. Every
//! output artifact embeds the FNV-1a hash of the effective (post-override)
//! scenario so results can be traced back to the exact inputs.

use std::path::{Path, PathBuf};

use bvpo_core::estimator::SamplingLaw;
use bvpo_core::sgd::EstimatorChoice;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaInit {
    Seed(u64),
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeConfig {
    pub n_prompts: usize,
    pub n_traces: usize,
    pub n_answers: usize,
}

/// Token-length generation for traces and answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LengthConfig {
    pub seed: u64,
    pub trace_min: u64,
    pub trace_max: u64,
    pub answer_min: u64,
    pub answer_max: u64,
}

impl Default for LengthConfig {
    fn default() -> Self {
        LengthConfig {
            seed: 0,
            trace_min: 20,
            trace_max: 60,
            answer_min: 5,
            answer_max: 15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaRule {
    /// `eta = 1 / (2 L)`: the descent regime.
    HalfInverseL,
    /// `eta = 1 / L`: the regime where the per-step error matches the MSE.
    InverseL,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdSection {
    /// Explicit step size; when absent it is derived from the smoothness
    /// estimate via `eta_rule`.
    pub eta: Option<f64>,
    pub eta_rule: EtaRule,
    pub steps: usize,
    pub estimator: EstimatorChoice,
    pub batch: usize,
    pub seed: u64,
    pub probe_count: usize,
    pub probe_radius: f64,
    pub probe_seed: u64,
}

impl Default for SgdSection {
    fn default() -> Self {
        SgdSection {
            eta: None,
            eta_rule: EtaRule::HalfInverseL,
            steps: 200,
            estimator: EstimatorChoice::FixedAlpha(0.5),
            batch: 1,
            seed: 0,
            probe_count: 200,
            probe_radius: 1.0,
            probe_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsSection {
    pub n_per_question: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection { n_per_question: 5 }
    }
}

fn default_theta_scale() -> f64 {
    1.0
}

fn default_temperature() -> f64 {
    0.8
}

fn default_beta() -> f64 {
    0.01
}

fn default_n_per_prompt() -> usize {
    5
}

fn default_law() -> SamplingLaw {
    SamplingLaw::Posterior
}

fn default_alpha_grid() -> usize {
    101
}

/// One experiment scenario. Policies, reward table, lengths, and datasets
/// are all pure functions of the seeds recorded here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub shape: ShapeConfig,
    pub theta_init: ThetaInit,
    #[serde(default = "default_theta_scale")]
    pub theta_scale: f64,
    pub ref_seed: u64,
    #[serde(default = "default_theta_scale")]
    pub ref_scale: f64,
    /// Sampling temperature folded into the reference policy's logits.
    #[serde(default = "default_temperature")]
    pub sampling_temperature: f64,
    pub reward_seed: u64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_n_per_prompt")]
    pub n_per_prompt: usize,
    #[serde(default = "default_law")]
    pub law: SamplingLaw,
    /// Run seed: dataset construction, Monte Carlo, SGD draws, diagnostics.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: usize,
    #[serde(default)]
    pub lengths: LengthConfig,
    #[serde(default)]
    pub sgd: SgdSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shape.n_prompts == 0 || self.shape.n_traces < 2 || self.shape.n_answers < 2 {
            return Err(CliError::config("invalid policy shape"));
        }
        if let ThetaInit::Explicit(theta) = &self.theta_init {
            let dim = self.shape.n_prompts * self.shape.n_traces * (1 + self.shape.n_answers);
            if theta.len() != dim {
                return Err(CliError::config(format!(
                    "explicit theta has length {}, shape needs {dim}",
                    theta.len()
                )));
            }
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(CliError::config("beta must be positive"));
        }
        if self.n_per_prompt < 2 {
            return Err(CliError::config("n_per_prompt must be at least 2"));
        }
        if self.alpha_grid < 2 {
            return Err(CliError::config("alpha_grid needs at least 2 points"));
        }
        if self.lengths.trace_min == 0 || self.lengths.trace_min > self.lengths.trace_max {
            return Err(CliError::config("invalid trace length range"));
        }
        if self.lengths.answer_min == 0 || self.lengths.answer_min > self.lengths.answer_max {
            return Err(CliError::config("invalid answer length range"));
        }
        if self.sgd.steps == 0 || self.sgd.batch == 0 {
            return Err(CliError::config("sgd steps and batch must be positive"));
        }
        if self.diagnostics.n_per_question < 2 {
            return Err(CliError::config("n_per_question must be at least 2"));
        }
        Ok(())
    }

    /// Apply command-line overrides; the result is the effective scenario
    /// that gets hashed into every artifact.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<&Path>, in_array: bool) -> Self {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(out) = out {
            self.output_dir = if in_array {
                out.join(&self.output_dir)
            } else {
                out.to_path_buf()
            };
        }
        self
    }

    /// FNV-1a hash of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(canonical.as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Load one or many scenarios from a config file.
pub fn load_scenarios(path: &Path) -> Result<Vec<ScenarioConfig>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("cannot parse {}: {e}", path.display())))?;
    let configs: Vec<ScenarioConfig> = if value.is_array() {
        serde_json::from_value(value)
            .map_err(|e| CliError::config(format!("invalid scenario array: {e}")))?
    } else {
        vec![serde_json::from_value(value)
            .map_err(|e| CliError::config(format!("invalid scenario: {e}")))?]
    };
    if configs.is_empty() {
        return Err(CliError::config("config file holds no scenarios"));
    }
    for config in &configs {
        config.validate()?;
    }
    let mut dirs: Vec<&PathBuf> = configs.iter().map(|c| &c.output_dir).collect();
    dirs.sort();
    dirs.dedup();
    if dirs.len() != configs.len() {
        return Err(CliError::config("scenarios must use distinct output dirs"));
    }
    Ok(configs)
}
