//! Estimator moments, MSE geometry, and the optimal mixing coefficient.
//!
//! The joint randomness of the two stochastic estimators is coupled through
//! one uniform sample index over prompt-paired datasets: drawing index `i`
//! fixes both the trace sample `D_t[i]` and the empty sample `D_e[i]`. The
//! trace estimator additionally draws a trace pair `(r+, r-)` according to a
//! [`SamplingLaw`]; the empty estimator is deterministic given `i`. Because
//! everything is enumerable, means, scalar variances (traces of covariances),
//! the cross-covariance trace, and `E[|g_t - g_e|^2]` are all computed
//! exactly, and a seeded Monte Carlo path estimates the same quantities for
//! cross-checking.
//!
//! Trace pairs always follow the *reference* policy's law: the datasets are
//! sampled from the reference policy, so its posterior (or prior) is the
//! data-generating distribution of traces.

use serde::{Deserialize, Serialize};

use crate::check::{dot, norm_sq};
use crate::data::{PreferenceDataset, SampleKind};
use crate::error::{CoreError, Result};
use crate::loss::{self, DpoConfig, EstimatorKind, GradientSample, RandomnessRecord};
use crate::policy::TracePolicy;
use crate::rng::{self, StreamOp};

/// Cell-count guard for exact enumeration.
pub const ENUMERATION_GUARD: usize = 1_000_000;

/// Threshold below which the MSE parabola is treated as degenerate.
pub const DEGENERATE_CURVATURE: f64 = 1e-12;

/// How the trace pair `(r+, r-)` of the trace estimator is drawn for a fixed
/// data sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingLaw {
    /// `r ~ p(r | x, y)` under the reference policy, independently for the
    /// preferred and dispreferred answer. The default.
    Posterior,
    /// `r ~ pi_ref(r | x)`, ignoring answer consistency.
    Prior,
    /// The traces stored in the dataset; no trace randomness remains.
    Stored,
}

/// First and second moments of the two estimators against the exact marginal
/// gradient. Scalar variances are traces of the covariance matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMoments {
    pub mu: Vec<f64>,
    pub mean_t: Vec<f64>,
    pub mean_e: Vec<f64>,
    pub bias_t: Vec<f64>,
    pub bias_e: Vec<f64>,
    pub var_t: f64,
    pub var_e: f64,
    pub cov_te: f64,
    pub expected_sq_diff: f64,
    pub method: MomentMethod,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_draws: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentMethod {
    Exact,
    MonteCarlo,
}

impl EstimatorMoments {
    /// `MSE(g_t) = |b_t|^2 + var_t`.
    pub fn mse_trace(&self) -> f64 {
        norm_sq(&self.bias_t) + self.var_t
    }

    /// `MSE(g_e) = |b_e|^2 + var_e`.
    pub fn mse_empty(&self) -> f64 {
        norm_sq(&self.bias_e) + self.var_e
    }
}

/// The quadratic `MSE(alpha) = A alpha^2 - 2 B alpha + C` with its clipped
/// minimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseCurve {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha_unconstrained: Option<f64>,
    pub alpha_star: f64,
}

impl MseCurve {
    pub fn mse(&self, alpha: f64) -> f64 {
        self.a * alpha * alpha - 2.0 * self.b * alpha + self.c
    }
}

/// Elementwise convex combination `alpha * g_t + (1 - alpha) * g_e`.
pub fn combine(gt: &GradientSample, ge: &GradientSample, alpha: f64) -> Result<GradientSample> {
    if gt.vector.len() != ge.vector.len() {
        return Err(CoreError::DimensionMismatch(
            "combined estimators have different dimensions".into(),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::contract(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let vector = gt
        .vector
        .iter()
        .zip(&ge.vector)
        .map(|(t, e)| alpha * t + (1.0 - alpha) * e)
        .collect();
    Ok(GradientSample {
        vector,
        estimator: EstimatorKind::Combined,
        randomness: RandomnessRecord {
            sample_index: gt.randomness.sample_index.or(ge.randomness.sample_index),
            trace_pair: gt.randomness.trace_pair,
        },
    })
}

/// Per-sample trace-pair weights: one weight vector over traces for each side
/// of the pair. Stored traces become one-hot vectors.
pub(crate) type PairWeights = (Vec<f64>, Vec<f64>);

pub(crate) fn law_weights(
    ref_policy: &TracePolicy,
    d_t: &PreferenceDataset,
    law: SamplingLaw,
) -> Result<Vec<PairWeights>> {
    let n_traces = ref_policy.shape().n_traces;
    let mut all = Vec::with_capacity(d_t.len());
    for sample in &d_t.samples {
        let x = sample.prompt;
        let pair = match law {
            SamplingLaw::Posterior => (
                ref_policy.trace_posterior(x, sample.y_pos)?,
                ref_policy.trace_posterior(x, sample.y_neg)?,
            ),
            SamplingLaw::Prior => {
                let prior: Vec<f64> = ref_policy
                    .trace_logprobs(x)?
                    .iter()
                    .map(|lp| lp.exp())
                    .collect();
                (prior.clone(), prior)
            }
            SamplingLaw::Stored => {
                let (r_pos, r_neg) = sample.traces().map_err(|_| {
                    CoreError::contract("stored sampling law requires trace samples")
                })?;
                let mut pos = vec![0.0; n_traces];
                let mut neg = vec![0.0; n_traces];
                pos[r_pos] = 1.0;
                neg[r_neg] = 1.0;
                (pos, neg)
            }
        };
        all.push(pair);
    }
    Ok(all)
}

fn validate_paired(d_t: &PreferenceDataset, d_e: &PreferenceDataset) -> Result<()> {
    if d_t.kind != SampleKind::Trace || d_e.kind != SampleKind::Empty {
        return Err(CoreError::contract(
            "expected a trace dataset and an empty dataset",
        ));
    }
    if d_t.is_empty() {
        return Err(CoreError::contract(
            "moment enumeration over empty datasets",
        ));
    }
    if !d_t.is_paired_with(d_e) {
        return Err(CoreError::UnpairedDatasets);
    }
    Ok(())
}

fn check_guard(n_samples: usize, n_traces: usize) -> Result<()> {
    let cells = n_samples * n_traces * n_traces;
    if cells > ENUMERATION_GUARD {
        return Err(CoreError::EnumerationTooLarge {
            cells,
            limit: ENUMERATION_GUARD,
        });
    }
    Ok(())
}

/// Visits every enumeration cell `(sample, r+, r-)` with positive weight,
/// passing the cell weight (conditional on the sample) and the realized
/// trace gradient.
pub(crate) fn for_each_cell<F>(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    d_t: &PreferenceDataset,
    cfg: &DpoConfig,
    weights: &[PairWeights],
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, f64, &[f64]) -> Result<()>,
{
    let d = policy.shape().param_dim();
    let mut scratch = vec![0.0; d];
    for (i, sample) in d_t.samples.iter().enumerate() {
        let (w_pos, w_neg) = &weights[i];
        for (r_pos, &wp) in w_pos.iter().enumerate() {
            if wp == 0.0 {
                continue;
            }
            for (r_neg, &wn) in w_neg.iter().enumerate() {
                if wn == 0.0 {
                    continue;
                }
                scratch.iter_mut().for_each(|v| *v = 0.0);
                loss::add_grad_trace_with(
                    policy,
                    ref_policy,
                    sample.prompt,
                    r_pos,
                    sample.y_pos,
                    r_neg,
                    sample.y_neg,
                    cfg,
                    1.0,
                    &mut scratch,
                )?;
                visit(i, wp * wn, &scratch)?;
            }
        }
    }
    Ok(())
}

/// Exact per-step moment tables: per-sample empty gradients plus the
/// aggregated scalars. `var_t = between_t + within_t` splits the trace
/// estimator's variance into its across-sample and trace-conditional parts.
#[derive(Debug, Clone)]
pub(crate) struct StepMoments {
    pub n: usize,
    pub mu: Vec<f64>,
    pub mean_t: Vec<f64>,
    pub mean_e: Vec<f64>,
    pub grad_e: Vec<Vec<f64>>,
    pub var_t: f64,
    pub var_e: f64,
    pub cov_te: f64,
    pub expected_sq_diff: f64,
    pub between_t: f64,
    pub within_t: f64,
}

impl StepMoments {
    pub fn bias_t(&self) -> Vec<f64> {
        self.mean_t
            .iter()
            .zip(&self.mu)
            .map(|(m, u)| m - u)
            .collect()
    }

    pub fn bias_e(&self) -> Vec<f64> {
        self.mean_e
            .iter()
            .zip(&self.mu)
            .map(|(m, u)| m - u)
            .collect()
    }

    /// Population variance of a single draw of the combined estimator.
    pub fn combined_variance(&self, alpha: f64) -> f64 {
        alpha * alpha * self.var_t
            + (1.0 - alpha) * (1.0 - alpha) * self.var_e
            + 2.0 * alpha * (1.0 - alpha) * self.cov_te
    }

    /// Across-sample variance of the conditional mean of the combined
    /// estimator (the component a full-dataset batch removes).
    pub fn combined_between_variance(&self, alpha: f64) -> f64 {
        alpha * alpha * self.between_t
            + (1.0 - alpha) * (1.0 - alpha) * self.var_e
            + 2.0 * alpha * (1.0 - alpha) * self.cov_te
    }

    /// Mean trace-conditional variance of the combined estimator.
    pub fn combined_within_variance(&self, alpha: f64) -> f64 {
        alpha * alpha * self.within_t
    }

    pub fn bias_vector(&self, alpha: f64) -> Vec<f64> {
        let bt = self.bias_t();
        let be = self.bias_e();
        bt.iter()
            .zip(&be)
            .map(|(t, e)| alpha * t + (1.0 - alpha) * e)
            .collect()
    }

    pub fn to_exact_moments(&self) -> EstimatorMoments {
        EstimatorMoments {
            mu: self.mu.clone(),
            mean_t: self.mean_t.clone(),
            mean_e: self.mean_e.clone(),
            bias_t: self.bias_t(),
            bias_e: self.bias_e(),
            var_t: self.var_t,
            var_e: self.var_e,
            cov_te: self.cov_te,
            expected_sq_diff: self.expected_sq_diff,
            method: MomentMethod::Exact,
            n_draws: None,
        }
    }
}

pub(crate) fn step_moments(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    d_t: &PreferenceDataset,
    d_e: &PreferenceDataset,
    cfg: &DpoConfig,
    weights: &[PairWeights],
) -> Result<StepMoments> {
    validate_paired(d_t, d_e)?;
    check_guard(d_t.len(), policy.shape().n_traces)?;
    let n = d_t.len();
    let d = policy.shape().param_dim();
    let inv_n = 1.0 / n as f64;

    let mu = loss::grad_marginal(policy, ref_policy, d_t, cfg)?.vector;

    let mut grad_e = Vec::with_capacity(n);
    for sample in &d_e.samples {
        let mut g = vec![0.0; d];
        loss::add_grad_empty(policy, ref_policy, sample, cfg, 1.0, &mut g)?;
        grad_e.push(g);
    }

    // First pass: conditional means of the trace estimator.
    let mut cond_mean_t = vec![vec![0.0; d]; n];
    for_each_cell(policy, ref_policy, d_t, cfg, weights, |i, w, gt| {
        for (acc, v) in cond_mean_t[i].iter_mut().zip(gt) {
            *acc += w * v;
        }
        Ok(())
    })?;

    let mut mean_t = vec![0.0; d];
    let mut mean_e = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean_t[j] += inv_n * cond_mean_t[i][j];
            mean_e[j] += inv_n * grad_e[i][j];
        }
    }

    // Second pass: central second moments around the exact means.
    let mut within_t = 0.0;
    let mut expected_sq_diff = 0.0;
    for_each_cell(policy, ref_policy, d_t, cfg, weights, |i, w, gt| {
        let mut dev = 0.0;
        let mut diff = 0.0;
        for j in 0..d {
            let dm = gt[j] - cond_mean_t[i][j];
            dev += dm * dm;
            let de = gt[j] - grad_e[i][j];
            diff += de * de;
        }
        within_t += inv_n * w * dev;
        expected_sq_diff += inv_n * w * diff;
        Ok(())
    })?;

    let mut between_t = 0.0;
    let mut var_e = 0.0;
    let mut cov_te = 0.0;
    for i in 0..n {
        let mut bt = 0.0;
        let mut ve = 0.0;
        let mut ct = 0.0;
        for j in 0..d {
            let dt = cond_mean_t[i][j] - mean_t[j];
            let de = grad_e[i][j] - mean_e[j];
            bt += dt * dt;
            ve += de * de;
            ct += dt * de;
        }
        between_t += inv_n * bt;
        var_e += inv_n * ve;
        cov_te += inv_n * ct;
    }

    Ok(StepMoments {
        n,
        mu,
        mean_t,
        mean_e,
        grad_e,
        var_t: between_t + within_t,
        var_e,
        cov_te,
        expected_sq_diff,
        between_t,
        within_t,
    })
}

/// Exact moments of `(g_t, g_e)` under the coupled enumeration.
pub fn exact_moments(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    d_t: &PreferenceDataset,
    d_e: &PreferenceDataset,
    cfg: &DpoConfig,
    law: SamplingLaw,
) -> Result<EstimatorMoments> {
    let weights = law_weights(ref_policy, d_t, law)?;
    Ok(step_moments(policy, ref_policy, d_t, d_e, cfg, &weights)?.to_exact_moments())
}

/// Enumerated `E[|g_c(alpha) - mu|^2]` over precomputed tables; shared by
/// `mse_at` and the per-step SGD records.
#[allow(clippy::too_many_arguments)]
pub(crate) fn enumerate_mse(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    d_t: &PreferenceDataset,
    cfg: &DpoConfig,
    weights: &[PairWeights],
    grad_e: &[Vec<f64>],
    mu: &[f64],
    alpha: f64,
) -> Result<f64> {
    let d = policy.shape().param_dim();
    let inv_n = 1.0 / d_t.len() as f64;
    let mut mse = 0.0;
    for_each_cell(policy, ref_policy, d_t, cfg, weights, |i, w, gt| {
        let mut dev = 0.0;
        for j in 0..d {
            let gc = alpha * gt[j] + (1.0 - alpha) * grad_e[i][j];
            let dm = gc - mu[j];
            dev += dm * dm;
        }
        mse += inv_n * w * dev;
        Ok(())
    })?;
    Ok(mse)
}

/// Exact `MSE(g_c(alpha)) = E[|g_c(alpha) - mu|^2]` by direct enumeration.
pub fn mse_at(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    d_t: &PreferenceDataset,
    d_e: &PreferenceDataset,
    cfg: &DpoConfig,
    law: SamplingLaw,
    alpha: f64,
) -> Result<f64> {
    validate_paired(d_t, d_e)?;
    check_guard(d_t.len(), policy.shape().n_traces)?;
    let weights = law_weights(ref_policy, d_t, law)?;
    let mu = loss::grad_marginal(policy, ref_policy, d_t, cfg)?.vector;
    let d = policy.shape().param_dim();
    let mut grad_e = Vec::with_capacity(d_t.len());
    for sample in &d_e.samples {
        let mut g = vec![0.0; d];
        loss::add_grad_empty(policy, ref_policy, sample, cfg, 1.0, &mut g)?;
        grad_e.push(g);
    }
    enumerate_mse(policy, ref_policy, d_t, cfg, &weights, &grad_e, &mu, alpha)
}

/// Standard errors of the Monte Carlo scalar moments, for parity testing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McStandardErrors {
    pub var_t: f64,
    pub var_e: f64,
    pub cov_te: f64,
    pub expected_sq_diff: f64,
}

/// Monte Carlo estimate of the same moments: sample means, central moments
/// with `1/(n-1)` normalization, deterministic per seed.
#[allow(clippy::too_many_arguments)]
pub fn mc_moments(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    d_t: &PreferenceDataset,
    d_e: &PreferenceDataset,
    cfg: &DpoConfig,
    law: SamplingLaw,
    n_draws: u64,
    seed: u64,
) -> Result<EstimatorMoments> {
    mc_moments_with_errors(policy, ref_policy, d_t, d_e, cfg, law, n_draws, seed)
        .map(|(moments, _)| moments)
}

/// As [`mc_moments`], additionally returning standard errors of the scalar
/// fields estimated from the same draws.
#[allow(clippy::too_many_arguments)]
pub fn mc_moments_with_errors(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    d_t: &PreferenceDataset,
    d_e: &PreferenceDataset,
    cfg: &DpoConfig,
    law: SamplingLaw,
    n_draws: u64,
    seed: u64,
) -> Result<(EstimatorMoments, McStandardErrors)> {
    validate_paired(d_t, d_e)?;
    if n_draws < 2 {
        return Err(CoreError::contract("mc_moments needs at least 2 draws"));
    }
    let weights = law_weights(ref_policy, d_t, law)?;
    let n = d_t.len();
    let d = policy.shape().param_dim();

    let mut grad_e = Vec::with_capacity(n);
    for sample in &d_e.samples {
        let mut g = vec![0.0; d];
        loss::add_grad_empty(policy, ref_policy, sample, cfg, 1.0, &mut g)?;
        grad_e.push(g);
    }

    // Realize every draw once; streams are keyed by draw index.
    let mut draws = Vec::with_capacity(n_draws as usize);
    for j in 0..n_draws {
        let mut stream = rng::stream(seed, StreamOp::McMoments, j, 0);
        let i = ((rng::uniform(&mut stream) * n as f64) as usize).min(n - 1);
        let (r_pos, r_neg) = match law {
            SamplingLaw::Stored => d_t.samples[i].traces()?,
            _ => {
                let (w_pos, w_neg) = &weights[i];
                let rp = rng::categorical(w_pos, rng::uniform(&mut stream));
                let rn = rng::categorical(w_neg, rng::uniform(&mut stream));
                (rp, rn)
            }
        };
        draws.push((i, r_pos, r_neg));
    }

    let gt_of = |draw: &(usize, usize, usize)| -> Result<Vec<f64>> {
        let sample = &d_t.samples[draw.0];
        let mut g = vec![0.0; d];
        loss::add_grad_trace_with(
            policy,
            ref_policy,
            sample.prompt,
            draw.1,
            sample.y_pos,
            draw.2,
            sample.y_neg,
            cfg,
            1.0,
            &mut g,
        )?;
        Ok(g)
    };

    let inv = 1.0 / n_draws as f64;
    let mut mean_t = vec![0.0; d];
    let mut mean_e = vec![0.0; d];
    for draw in &draws {
        let gt = gt_of(draw)?;
        for j in 0..d {
            mean_t[j] += inv * gt[j];
            mean_e[j] += inv * grad_e[draw.0][j];
        }
    }

    // Central moments around the sample means with 1/(n-1); the per-draw
    // scalars also feed the standard errors.
    let bessel = 1.0 / (n_draws as f64 - 1.0);
    let mut acc = [0.0f64; 4];
    let mut acc_sq = [0.0f64; 4];
    for draw in &draws {
        let gt = gt_of(draw)?;
        let ge = &grad_e[draw.0];
        let mut s = [0.0f64; 4];
        for j in 0..d {
            let dt = gt[j] - mean_t[j];
            let de = ge[j] - mean_e[j];
            let df = gt[j] - ge[j];
            s[0] += dt * dt;
            s[1] += de * de;
            s[2] += dt * de;
            s[3] += df * df;
        }
        for f in 0..4 {
            acc[f] += s[f];
            acc_sq[f] += s[f] * s[f];
        }
    }
    let var_t = bessel * acc[0];
    let var_e = bessel * acc[1];
    let cov_te = bessel * acc[2];
    let expected_sq_diff = inv * acc[3];

    let se_of = |f: usize| -> f64 {
        let mean = inv * acc[f];
        let var = (inv * acc_sq[f] - mean * mean).max(0.0);
        (var / n_draws as f64).sqrt()
    };
    let errors = McStandardErrors {
        var_t: se_of(0),
        var_e: se_of(1),
        cov_te: se_of(2),
        expected_sq_diff: se_of(3),
    };

    let mu = loss::grad_marginal(policy, ref_policy, d_t, cfg)?.vector;
    let bias_t = mean_t.iter().zip(&mu).map(|(m, u)| m - u).collect();
    let bias_e = mean_e.iter().zip(&mu).map(|(m, u)| m - u).collect();
    Ok((
        EstimatorMoments {
            mu,
            mean_t,
            mean_e,
            bias_t,
            bias_e,
            var_t,
            var_e,
            cov_te,
            expected_sq_diff,
            method: MomentMethod::MonteCarlo,
            n_draws: Some(n_draws),
        },
        errors,
    ))
}

/// Closed-form MSE parabola and its clipped minimizer.
///
/// `A = E[|g_t - g_e|^2]`, `B = (var_e - cov_te) + |b_e|^2 - b_t.b_e`,
/// `C = |b_e|^2 + var_e`. A degenerate parabola (`A <= 1e-12`) means the two
/// estimators coincide almost surely and every alpha is optimal; 0.5 is
/// returned by convention.
pub fn mse_curve(m: &EstimatorMoments) -> MseCurve {
    let be_sq = norm_sq(&m.bias_e);
    let bt_dot_be = dot(&m.bias_t, &m.bias_e);
    let a = m.expected_sq_diff;
    let b = (m.var_e - m.cov_te) + be_sq - bt_dot_be;
    let c = be_sq + m.var_e;
    if a <= DEGENERATE_CURVATURE {
        MseCurve {
            a,
            b,
            c,
            alpha_unconstrained: None,
            alpha_star: 0.5,
        }
    } else {
        let unc = b / a;
        MseCurve {
            a,
            b,
            c,
            alpha_unconstrained: Some(unc),
            alpha_star: unc.clamp(0.0, 1.0),
        }
    }
}

/// Conditional variances over the trace-pair law with the data sample held
/// fixed: returns `(var_gc, var_gt)`, both enumerated independently.
pub fn conditional_variance(
    policy: &TracePolicy,
    ref_policy: &TracePolicy,
    sample_t: &crate::data::PreferenceSample,
    sample_e: &crate::data::PreferenceSample,
    cfg: &DpoConfig,
    law: SamplingLaw,
    alpha: f64,
) -> Result<(f64, f64)> {
    if law == SamplingLaw::Stored {
        return Err(CoreError::contract(
            "stored sampling law has no conditional trace randomness",
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::contract(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let d_t = PreferenceDataset {
        kind: SampleKind::Trace,
        samples: vec![sample_t.clone()],
        skipped_prompts: vec![],
    };
    let weights = law_weights(ref_policy, &d_t, law)?;
    check_guard(1, policy.shape().n_traces)?;
    let d = policy.shape().param_dim();
    let mut ge = vec![0.0; d];
    loss::add_grad_empty(policy, ref_policy, sample_e, cfg, 1.0, &mut ge)?;

    // Pass 1: conditional means of g_t and g_c.
    let mut mean_t = vec![0.0; d];
    let mut mean_c = vec![0.0; d];
    for_each_cell(policy, ref_policy, &d_t, cfg, &weights, |_, w, gt| {
        for j in 0..d {
            mean_t[j] += w * gt[j];
            mean_c[j] += w * (alpha * gt[j] + (1.0 - alpha) * ge[j]);
        }
        Ok(())
    })?;

    // Pass 2: the two conditional variances, each from its own deviations.
    let mut var_gt = 0.0;
    let mut var_gc = 0.0;
    for_each_cell(policy, ref_policy, &d_t, cfg, &weights, |_, w, gt| {
        let mut dt = 0.0;
        let mut dc = 0.0;
        for j in 0..d {
            let a_t = gt[j] - mean_t[j];
            dt += a_t * a_t;
            let a_c = alpha * gt[j] + (1.0 - alpha) * ge[j] - mean_c[j];
            dc += a_c * a_c;
        }
        var_gt += w * dt;
        var_gc += w * dc;
        Ok(())
    })?;
    Ok((var_gc, var_gt))
}
