//! The four experiment commands. Each is a pure function of the effective
//! scenario config: identical configs and seeds produce byte-identical
//! artifacts.

use std::fs;

use bvpo_core::check::{dot, norm_sq};
use bvpo_core::estimator::{self, EstimatorMoments, MseCurve, SamplingLaw};
use bvpo_core::policy::PolicyFile;
use bvpo_core::sgd::{self, AbortRecord, BoundStatus, EstimatorChoice, SgdConfig, SmoothnessProbe};
use serde::Serialize;

use crate::config::{EtaRule, ScenarioConfig};
use crate::error::{CliError, Result};
use crate::output::{fmt_f64, write_commented, write_json, CsvWriter, TOOL_VERSION};
use crate::scenario::{materialize, Scenario};

const CONDITIONAL_ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn prepare(config: &ScenarioConfig) -> Result<(Scenario, String)> {
    let scenario = materialize(config)?;
    let hash = config.config_hash();
    fs::create_dir_all(&config.output_dir)?;
    Ok((scenario, hash))
}

#[derive(Serialize)]
struct ScenarioArtifact<'a> {
    config_hash: &'a str,
    tool_version: &'a str,
    scenario: &'a ScenarioConfig,
}

#[derive(Serialize)]
struct PolicyArtifact<'a> {
    config_hash: &'a str,
    tool_version: &'a str,
    #[serde(flatten)]
    policy: &'a PolicyFile,
}

/// Write the materialized scenario: effective config, both policies, and the
/// paired datasets.
pub fn cmd_gen_scenario(config: &ScenarioConfig) -> Result<()> {
    let (scenario, hash) = prepare(config)?;
    let dir = &config.output_dir;
    write_json(
        dir,
        "scenario.json",
        &ScenarioArtifact {
            config_hash: &hash,
            tool_version: TOOL_VERSION,
            scenario: config,
        },
    )?;
    for (name, policy) in [
        ("policy.json", &scenario.policy),
        ("ref_policy.json", &scenario.ref_policy),
    ] {
        let file = PolicyFile::from_parts(policy, &scenario.lengths);
        write_json(
            dir,
            name,
            &PolicyArtifact {
                config_hash: &hash,
                tool_version: TOOL_VERSION,
                policy: &file,
            },
        )?;
    }
    write_commented(dir, "dataset_t.jsonl", &hash, &scenario.d_t.to_jsonl()?)?;
    write_commented(dir, "dataset_e.jsonl", &hash, &scenario.d_e.to_jsonl()?)?;
    Ok(())
}

#[derive(Serialize)]
struct MomentsArtifact<'a> {
    config_hash: &'a str,
    tool_version: &'a str,
    law: SamplingLaw,
    moments: &'a EstimatorMoments,
    curve: &'a MseCurve,
}

fn bias_sq_at(moments: &EstimatorMoments, alpha: f64) -> f64 {
    let bt_sq = norm_sq(&moments.bias_t);
    let be_sq = norm_sq(&moments.bias_e);
    let cross = dot(&moments.bias_t, &moments.bias_e);
    alpha * alpha * bt_sq
        + (1.0 - alpha) * (1.0 - alpha) * be_sq
        + 2.0 * alpha * (1.0 - alpha) * cross
}

fn variance_at(moments: &EstimatorMoments, alpha: f64) -> f64 {
    alpha * alpha * moments.var_t
        + (1.0 - alpha) * (1.0 - alpha) * moments.var_e
        + 2.0 * alpha * (1.0 - alpha) * moments.cov_te
}

/// Exact moments, the MSE parabola, and the per-sample conditional variance
/// table across the alpha grid.
pub fn cmd_variance_sweep(config: &ScenarioConfig) -> Result<()> {
    let law = config.law;
    if law == SamplingLaw::Stored {
        return Err(CliError::config(
            "conditional variance is undefined under the stored law; use posterior or prior",
        ));
    }
    let (scenario, hash) = prepare(config)?;
    let dir = &config.output_dir;
    let moments = estimator::exact_moments(
        &scenario.policy,
        &scenario.ref_policy,
        &scenario.d_t,
        &scenario.d_e,
        &scenario.dpo,
        law,
    )?;
    let curve = estimator::mse_curve(&moments);
    write_json(
        dir,
        "moments.json",
        &MomentsArtifact {
            config_hash: &hash,
            tool_version: TOOL_VERSION,
            law,
            moments: &moments,
            curve: &curve,
        },
    )?;

    let mut csv = CsvWriter::new(
        dir,
        "mse_curve.csv",
        &hash,
        "alpha,mse_exact,mse_quadratic,bias_sq,variance",
    );
    let grid = config.alpha_grid;
    for i in 0..grid {
        let alpha = i as f64 / (grid - 1) as f64;
        let exact = estimator::mse_at(
            &scenario.policy,
            &scenario.ref_policy,
            &scenario.d_t,
            &scenario.d_e,
            &scenario.dpo,
            law,
            alpha,
        )?;
        csv.row(&[
            fmt_f64(alpha),
            fmt_f64(exact),
            fmt_f64(curve.mse(alpha)),
            fmt_f64(bias_sq_at(&moments, alpha)),
            fmt_f64(variance_at(&moments, alpha)),
        ]);
    }
    csv.finish()?;

    let mut csv = CsvWriter::new(
        dir,
        "conditional_variance.csv",
        &hash,
        "sample,alpha,var_gt,var_gc",
    );
    for (i, (sample_t, sample_e)) in scenario
        .d_t
        .samples
        .iter()
        .zip(&scenario.d_e.samples)
        .enumerate()
    {
        for alpha in CONDITIONAL_ALPHAS {
            let (var_gc, var_gt) = estimator::conditional_variance(
                &scenario.policy,
                &scenario.ref_policy,
                sample_t,
                sample_e,
                &scenario.dpo,
                law,
                alpha,
            )?;
            csv.row(&[
                i.to_string(),
                fmt_f64(alpha),
                fmt_f64(var_gt),
                fmt_f64(var_gc),
            ]);
        }
    }
    csv.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct SgdSummary<'a> {
    config_hash: &'a str,
    tool_version: &'a str,
    estimator: EstimatorChoice,
    law: SamplingLaw,
    steps: usize,
    batch: usize,
    eta: f64,
    l_estimate: f64,
    verdict: &'a str,
    margin_exact: f64,
    margin_uniform: f64,
    lhs: f64,
    rhs_exact: f64,
    rhs_uniform: f64,
    loss_start: f64,
    loss_end: f64,
    loss_min_observed: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    abort: Option<&'a AbortRecord>,
}

/// SGD trajectory, bound verdict, and (for the adaptive estimator) the
/// per-step optimal-alpha trace.
pub fn cmd_sgd_run(config: &ScenarioConfig) -> Result<()> {
    let (scenario, hash) = prepare(config)?;
    let dir = &config.output_dir;
    let section = &config.sgd;

    let probe = SmoothnessProbe {
        probe_count: section.probe_count,
        radius: section.probe_radius,
        seed: section.probe_seed,
    };
    let l_estimate = sgd::estimate_marginal_smoothness(
        &scenario.policy,
        &scenario.ref_policy,
        &scenario.d_t,
        &scenario.dpo,
        &probe,
    )?;
    let eta = match section.eta {
        Some(eta) => eta,
        None => match section.eta_rule {
            EtaRule::HalfInverseL => 0.5 / l_estimate,
            EtaRule::InverseL => 1.0 / l_estimate,
        },
    };
    let sgd_config = SgdConfig {
        eta,
        steps: section.steps,
        estimator: section.estimator,
        law: config.law,
        batch: section.batch,
        seed: section.seed,
    };

    // For the adaptive estimator, replay per-step moments through the public
    // API to trace both optimizer targets.
    let trace_alphas = section.estimator == EstimatorChoice::OptimalAlpha;
    let mut alpha_rows: Vec<(usize, f64, f64)> = Vec::new();
    let report = sgd::run_sgd_observed(
        &scenario.policy,
        &scenario.ref_policy,
        &scenario.d_t,
        &scenario.d_e,
        &sgd_config,
        &scenario.dpo,
        l_estimate,
        |k, policy| {
            if !trace_alphas {
                return;
            }
            if let Ok(moments) = estimator::exact_moments(
                policy,
                &scenario.ref_policy,
                &scenario.d_t,
                &scenario.d_e,
                &scenario.dpo,
                config.law,
            ) {
                let mse_star = estimator::mse_curve(&moments).alpha_star;
                let e_star = sgd::per_step_optimal_alpha(&moments, eta, l_estimate).alpha_star;
                alpha_rows.push((k, mse_star, e_star));
            }
        },
    )?;

    let mut csv = CsvWriter::new(
        dir,
        "trajectory.csv",
        &hash,
        "k,loss_m,true_grad_norm_sq,bias_norm_sq,variance,mse,alpha_used",
    );
    for r in &report.records {
        csv.row(&[
            r.k.to_string(),
            fmt_f64(r.loss_m),
            fmt_f64(r.true_grad_norm_sq),
            fmt_f64(r.bias_norm_sq),
            fmt_f64(r.variance),
            fmt_f64(r.mse),
            fmt_f64(r.alpha_used),
        ]);
    }
    csv.finish()?;

    if trace_alphas {
        let mut csv = CsvWriter::new(
            dir,
            "alpha_trace.csv",
            &hash,
            "k,alpha_mse_star,alpha_e_star",
        );
        for (k, mse_star, e_star) in &alpha_rows {
            csv.row(&[k.to_string(), fmt_f64(*mse_star), fmt_f64(*e_star)]);
        }
        csv.finish()?;
    }

    let verdict = sgd::verify_bound(&report, eta, l_estimate);
    let verdict_str = if report.abort.is_some() {
        "aborted"
    } else {
        match verdict.status {
            BoundStatus::Pass => "pass",
            BoundStatus::Fail => "fail",
            BoundStatus::BoundNotApplicable => "bound-not-applicable",
        }
    };
    write_json(
        dir,
        "summary.json",
        &SgdSummary {
            config_hash: &hash,
            tool_version: TOOL_VERSION,
            estimator: section.estimator,
            law: config.law,
            steps: section.steps,
            batch: section.batch,
            eta,
            l_estimate,
            verdict: verdict_str,
            margin_exact: verdict.margin_exact,
            margin_uniform: verdict.margin_uniform,
            lhs: report.lhs,
            rhs_exact: report.rhs_exact,
            rhs_uniform: report.rhs_uniform,
            loss_start: report.loss_start,
            loss_end: report.loss_end,
            loss_min_observed: report.loss_min_observed,
            abort: report.abort.as_ref(),
        },
    )?;

    if let Some(abort) = &report.abort {
        return Err(CliError::NumericalAbort(format!(
            "sgd aborted at step {}: {}",
            abort.step, abort.reason
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct DiagnosticsArtifact<'a> {
    config_hash: &'a str,
    tool_version: &'a str,
    report: &'a bvpo_core::StochasticityReport,
}

/// Thinking vs no-thinking dispersion statistics.
pub fn cmd_diagnostics(config: &ScenarioConfig) -> Result<()> {
    let (scenario, hash) = prepare(config)?;
    let dir = &config.output_dir;
    let report = bvpo_core::stochasticity_report(
        &scenario.policy,
        &scenario.lengths,
        &scenario.answer_lengths,
        config.diagnostics.n_per_question,
        config.seed,
    )?;
    write_json(
        dir,
        "stochasticity.json",
        &DiagnosticsArtifact {
            config_hash: &hash,
            tool_version: TOOL_VERSION,
            report: &report,
        },
    )?;

    let mut csv = CsvWriter::new(
        dir,
        "stochasticity.csv",
        &hash,
        "var_ratio_logp,var_ratio_length,mean_length_ratio,nll_think,nll_no,nll_delta,\
         nll_pct_increase,trace_token_share,nll_trace,nll_answer,per_question_sample_count",
    );
    csv.row(&[
        fmt_f64(report.var_ratio_logp),
        fmt_f64(report.var_ratio_length),
        fmt_f64(report.mean_length_ratio),
        fmt_f64(report.nll_think),
        fmt_f64(report.nll_no),
        fmt_f64(report.nll_delta),
        fmt_f64(report.nll_pct_increase),
        fmt_f64(report.trace_token_share),
        fmt_f64(report.nll_trace),
        fmt_f64(report.nll_answer),
        report.per_question_sample_count.to_string(),
    ]);
    csv.finish()?;

    let scenario_tag = &hash[..8];
    let table = format!(
        "Dispersion of sampled responses, thinking vs no-thinking\n\
         \n\
         Scenario    Variance ratio (log p)    Variance ratio (length)\n\
         {scenario_tag}    {:<22.4}    {:<.4}\n\
         \n\
         Scenario    Mean length ratio    NLL_think    NLL_no    dNLL    % increase\n\
         {scenario_tag}    {:<17.4}    {:<9.4}    {:<6.4}    {:<6.4}    {:.1}%\n",
        report.var_ratio_logp,
        report.var_ratio_length,
        report.mean_length_ratio,
        report.nll_think,
        report.nll_no,
        report.nll_delta,
        report.nll_pct_increase,
    );
    write_commented(dir, "stochasticity.txt", &hash, &table)?;
    Ok(())
}

/// Command selector shared by the binary and the test harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenScenario,
    VarianceSweep,
    SgdRun,
    Diagnostics,
}

pub fn run_command(command: Command, config: &ScenarioConfig) -> Result<()> {
    match command {
        Command::GenScenario => cmd_gen_scenario(config),
        Command::VarianceSweep => cmd_variance_sweep(config),
        Command::SgdRun => cmd_sgd_run(config),
        Command::Diagnostics => cmd_diagnostics(config),
    }
}

/// Run every scenario, optionally across worker threads; scenarios never
/// share output directories so parallel runs cannot interleave artifacts.
pub fn run_scenarios(command: Command, configs: &[ScenarioConfig], jobs: usize) -> Result<()> {
    if configs.len() == 1 || jobs <= 1 {
        for config in configs {
            run_command(command, config)?;
        }
        return Ok(());
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<()>>>> = configs
        .iter()
        .map(|_| std::sync::Mutex::new(None))
        .collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(configs.len()) {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if index >= configs.len() {
                    break;
                }
                let outcome = run_command(command, &configs[index]);
                *results[index].lock().unwrap() = Some(outcome);
            });
        }
    });
    for slot in results {
        match slot.into_inner().unwrap() {
            Some(Err(err)) => return Err(err),
            Some(Ok(())) => {}
            None => return Err(CliError::config("scenario was not executed")),
        }
    }
    Ok(())
}
