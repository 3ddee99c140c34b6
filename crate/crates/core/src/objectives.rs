//! Training objectives and their analytic gradients.
//!
//! Every preference loss is a function of per-response log ratios
//! `rho(y) = log pi(y|x) - log pi_ref(y|x)`. Group losses score each side by
//! the arithmetic mean of its log ratios (the geometric-mean group
//! likelihood), so mDPO/mIPO collapse to DPO/IPO bit-for-bit at group size 1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    IntervalPrompt, ModelError, Policy, PolicySnapshot, PreferenceRecord, Response, SampleGroup,
};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dataset must be non-empty")]
    EmptyDataset,
    #[error(
        "single-sample loss requires group size 1 (chosen {chosen}, rejected {rejected}); \
         use the multi-sample variant for larger groups"
    )]
    GroupSizeNotOne { chosen: usize, rejected: usize },
    #[error("diffusion loss requires non-empty stub groups")]
    EmptyDiffusionGroup,
    #[error("diffusion stubs disagree on shared constants (beta, T, omega)")]
    MismatchedDiffusionConstants,
    #[error("invalid diffusion stub: {0}")]
    InvalidDiffusionStub(String),
    #[error("invalid objective config: {0}")]
    InvalidConfig(String),
    #[error("gradient buffer length {got} does not match parameter count {expected}")]
    GradientShape { expected: usize, got: usize },
}

/// Which preference loss a composite objective wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PreferenceMethod {
    Dpo,
    Ipo,
    Mdpo,
    Mipo,
}

impl PreferenceMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PreferenceMethod::Dpo => "dpo",
            PreferenceMethod::Ipo => "ipo",
            PreferenceMethod::Mdpo => "mdpo",
            PreferenceMethod::Mipo => "mipo",
        }
    }

    /// True for the single-sample variants that require group size 1.
    pub fn is_single_sample(&self) -> bool {
        matches!(self, PreferenceMethod::Dpo | PreferenceMethod::Ipo)
    }
}

impl std::str::FromStr for PreferenceMethod {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dpo" => Ok(PreferenceMethod::Dpo),
            "ipo" => Ok(PreferenceMethod::Ipo),
            "mdpo" => Ok(PreferenceMethod::Mdpo),
            "mipo" => Ok(PreferenceMethod::Mipo),
            other => Err(ObjectiveError::InvalidConfig(format!(
                "unknown preference method {other:?}"
            ))),
        }
    }
}

/// Loss hyperparameters: `beta` scales implicit rewards, `tau` sets the IPO
/// regression target `1/(2 tau)`, `nll_coeff` weights the NLL anchor on
/// chosen responses, and `variance_correction` toggles the unbiased mIPO
/// correction term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub beta: f64,
    pub tau: f64,
    pub nll_coeff: f64,
    pub variance_correction: bool,
}

impl ObjectiveConfig {
    /// Defaults for each method: beta 0.01 for the DPO family, tau 0.1 for
    /// the IPO family, NLL coefficient 0.001 (mDPO) / 0.1 (mIPO), variance
    /// correction on for mIPO only.
    pub fn default_for(method: PreferenceMethod) -> Self {
        match method {
            PreferenceMethod::Dpo | PreferenceMethod::Mdpo => Self {
                beta: 0.01,
                tau: 0.1,
                nll_coeff: 0.001,
                variance_correction: false,
            },
            PreferenceMethod::Ipo | PreferenceMethod::Mipo => Self {
                beta: 0.01,
                tau: 0.1,
                nll_coeff: 0.1,
                variance_correction: matches!(method, PreferenceMethod::Mipo),
            },
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.beta > 0.0) {
            return Err(ObjectiveError::InvalidConfig("beta must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(ObjectiveError::InvalidConfig("tau must be positive".into()));
        }
        if !(self.nll_coeff >= 0.0) {
            return Err(ObjectiveError::InvalidConfig(
                "nll_coeff must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Scalar loss plus its gradient with respect to the policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// Per-item denoising summaries for the diffusion-form mDPO loss. Each stub
/// carries the four squared reconstruction errors of one matched (chosen,
/// rejected) pair plus the shared constants of the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionBatchStub {
    pub sq_err_policy_w: f64,
    pub sq_err_ref_w: f64,
    pub sq_err_policy_l: f64,
    pub sq_err_ref_l: f64,
    pub t_steps: u32,
    pub omega_lambda_t: f64,
    pub beta: f64,
}

impl DiffusionBatchStub {
    fn validate(&self) -> Result<(), ObjectiveError> {
        let errs = [
            self.sq_err_policy_w,
            self.sq_err_ref_w,
            self.sq_err_policy_l,
            self.sq_err_ref_l,
        ];
        if errs.iter().any(|e| !(*e >= 0.0)) {
            return Err(ObjectiveError::InvalidDiffusionStub(
                "squared errors must be non-negative".into(),
            ));
        }
        if self.t_steps == 0 {
            return Err(ObjectiveError::InvalidDiffusionStub(
                "T must be positive".into(),
            ));
        }
        if !(self.omega_lambda_t > 0.0) || !(self.beta > 0.0) {
            return Err(ObjectiveError::InvalidDiffusionStub(
                "omega and beta must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean negative log-likelihood over a supervised dataset.
pub fn sft_nll(
    policy: &Policy,
    dataset: &[(IntervalPrompt, Response)],
) -> Result<ObjectiveValue, ObjectiveError> {
    if dataset.is_empty() {
        return Err(ObjectiveError::EmptyDataset);
    }
    let mut gradient = vec![0.0; policy.param_count()];
    let weight = 1.0 / dataset.len() as f64;
    let mut loss = 0.0;
    for (prompt, response) in dataset {
        loss += weight * accumulate_sft_example(policy, prompt, response, weight, &mut gradient)?;
    }
    Ok(ObjectiveValue { loss, gradient })
}

/// Add `weight * grad(-log pi(y|x))` into `grad` and return the example's NLL.
pub fn accumulate_sft_example(
    policy: &Policy,
    prompt: &IntervalPrompt,
    response: &Response,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64, ObjectiveError> {
    let dist = policy.prompt_distribution(prompt)?;
    let log_prob = dist.response_log_prob(response)?;
    policy.add_scaled_grad_log_prob(&dist, prompt, response, -weight, grad)?;
    Ok(-log_prob)
}

/// Implicit reward `beta * (log pi(y|x) - log pi_ref(y|x))`; the prompt-only
/// constant is dropped since every margin cancels it.
pub fn implicit_reward(
    policy: &Policy,
    reference: &PolicySnapshot,
    prompt: &IntervalPrompt,
    response: &Response,
    beta: f64,
) -> Result<f64, ObjectiveError> {
    let lp = policy.log_prob(prompt, response)?;
    let lr = reference.log_prob(prompt, response)?;
    Ok(beta * (lp - lr))
}

/// Arithmetic mean of per-response log ratios over a group — the log of the
/// geometric-mean group likelihood ratio.
pub fn group_log_ratio(
    policy: &Policy,
    reference: &PolicySnapshot,
    prompt: &IntervalPrompt,
    group: &SampleGroup,
) -> Result<f64, ObjectiveError> {
    let dist_p = policy.prompt_distribution(prompt)?;
    let dist_r = reference.prompt_distribution(prompt)?;
    let mut sum = 0.0;
    for response in group.responses() {
        sum += dist_p.response_log_prob(response)? - dist_r.response_log_prob(response)?;
    }
    Ok(sum / group.len() as f64)
}

/// DPO loss for a size-1 record: `-log sigmoid(beta * margin)`.
pub fn dpo_loss(
    policy: &Policy,
    reference: &PolicySnapshot,
    record: &PreferenceRecord,
    config: &ObjectiveConfig,
) -> Result<ObjectiveValue, ObjectiveError> {
    require_singletons(record)?;
    mdpo_loss(policy, reference, record, config)
}

/// IPO loss for a size-1 record: squared deviation of the log-ratio margin
/// from `1/(2 tau)`.
pub fn ipo_loss(
    policy: &Policy,
    reference: &PolicySnapshot,
    record: &PreferenceRecord,
    config: &ObjectiveConfig,
) -> Result<ObjectiveValue, ObjectiveError> {
    require_singletons(record)?;
    mipo_loss(policy, reference, record, config)
}

/// Multi-sample DPO loss: `-log sigmoid(beta * (mean_w - mean_l))` over the
/// group-mean log ratios. Biased as an estimate of the expectation form, but
/// exact for the groups given.
pub fn mdpo_loss(
    policy: &Policy,
    reference: &PolicySnapshot,
    record: &PreferenceRecord,
    config: &ObjectiveConfig,
) -> Result<ObjectiveValue, ObjectiveError> {
    objective_value(policy, reference, record, PreferenceMethod::Mdpo, config, false)
}

/// Multi-sample IPO loss with the variance correction of the unbiased
/// estimator: `(mean_w - mean_l - 1/(2 tau))^2 - svar_w/n - svar_l/m` when
/// `variance_correction` is set (sides of size 1 contribute no correction).
/// The corrected loss may be negative; callers must not clamp it.
pub fn mipo_loss(
    policy: &Policy,
    reference: &PolicySnapshot,
    record: &PreferenceRecord,
    config: &ObjectiveConfig,
) -> Result<ObjectiveValue, ObjectiveError> {
    objective_value(policy, reference, record, PreferenceMethod::Mipo, config, false)
}

/// Preference loss plus `nll_coeff` times the mean NLL of the chosen group
/// (the Lagrangian view of anchoring chosen-response likelihood).
pub fn composite_objective(
    policy: &Policy,
    reference: &PolicySnapshot,
    record: &PreferenceRecord,
    method: PreferenceMethod,
    config: &ObjectiveConfig,
) -> Result<ObjectiveValue, ObjectiveError> {
    if method.is_single_sample() {
        require_singletons(record)?;
    }
    objective_value(policy, reference, record, method, config, true)
}

fn objective_value(
    policy: &Policy,
    reference: &PolicySnapshot,
    record: &PreferenceRecord,
    method: PreferenceMethod,
    config: &ObjectiveConfig,
    with_anchor: bool,
) -> Result<ObjectiveValue, ObjectiveError> {
    let mut gradient = vec![0.0; policy.param_count()];
    let loss = accumulate_record(
        policy,
        reference,
        record,
        method,
        config,
        with_anchor,
        1.0,
        &mut gradient,
    )?;
    Ok(ObjectiveValue { loss, gradient })
}

/// Add `weight` times the gradient of the composite objective on one record
/// into `grad`, returning the record's (unweighted) loss. This is the path
/// the trainer uses to average a batch without allocating per record.
pub fn accumulate_composite(
    policy: &Policy,
    reference: &PolicySnapshot,
    record: &PreferenceRecord,
    method: PreferenceMethod,
    config: &ObjectiveConfig,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64, ObjectiveError> {
    if method.is_single_sample() {
        require_singletons(record)?;
    }
    accumulate_record(policy, reference, record, method, config, true, weight, grad)
}

fn require_singletons(record: &PreferenceRecord) -> Result<(), ObjectiveError> {
    if record.chosen.len() != 1 || record.rejected.len() != 1 {
        return Err(ObjectiveError::GroupSizeNotOne {
            chosen: record.chosen.len(),
            rejected: record.rejected.len(),
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn accumulate_record(
    policy: &Policy,
    reference: &PolicySnapshot,
    record: &PreferenceRecord,
    method: PreferenceMethod,
    config: &ObjectiveConfig,
    with_anchor: bool,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64, ObjectiveError> {
    config.validate()?;
    if grad.len() != policy.param_count() {
        return Err(ObjectiveError::GradientShape {
            expected: policy.param_count(),
            got: grad.len(),
        });
    }
    let prompt = &record.prompt;
    let dist_p = policy.prompt_distribution(prompt)?;
    let dist_r = reference.prompt_distribution(prompt)?;

    let ratios_of = |group: &SampleGroup| -> Result<Vec<f64>, ObjectiveError> {
        group
            .responses()
            .iter()
            .map(|r| Ok(dist_p.response_log_prob(r)? - dist_r.response_log_prob(r)?))
            .collect()
    };
    let ratios_w = ratios_of(&record.chosen)?;
    let ratios_l = ratios_of(&record.rejected)?;
    let n = ratios_w.len() as f64;
    let m = ratios_l.len() as f64;
    let mean_w = ratios_w.iter().sum::<f64>() / n;
    let mean_l = ratios_l.iter().sum::<f64>() / m;
    let margin = mean_w - mean_l;

    // Per-response coefficients dL/d rho_i; the chain rule then routes each
    // one through grad log pi(y_i).
    let mut coeff_w = vec![0.0; ratios_w.len()];
    let mut coeff_l = vec![0.0; ratios_l.len()];

    let loss = match method {
        PreferenceMethod::Dpo | PreferenceMethod::Mdpo => {
            let z = config.beta * margin;
            let loss = softplus(-z);
            let dmargin = -config.beta * sigmoid(-z);
            for c in &mut coeff_w {
                *c = dmargin / n;
            }
            for c in &mut coeff_l {
                *c = -dmargin / m;
            }
            loss
        }
        PreferenceMethod::Ipo | PreferenceMethod::Mipo => {
            let target = 1.0 / (2.0 * config.tau);
            let deviation = margin - target;
            let mut loss = deviation * deviation;
            for c in &mut coeff_w {
                *c = 2.0 * deviation / n;
            }
            for c in &mut coeff_l {
                *c = -2.0 * deviation / m;
            }
            if config.variance_correction {
                // Unbiased sample variance per side, zero at size 1. Its
                // gradient uses d svar/d rho_i = 2 (rho_i - mean) / (k - 1);
                // the mean's own gradient cancels against the centered sum.
                if ratios_w.len() >= 2 {
                    let svar: f64 = ratios_w.iter().map(|r| (r - mean_w) * (r - mean_w)).sum::<f64>()
                        / (n - 1.0);
                    loss -= svar / n;
                    for (c, r) in coeff_w.iter_mut().zip(&ratios_w) {
                        *c -= 2.0 * (r - mean_w) / ((n - 1.0) * n);
                    }
                }
                if ratios_l.len() >= 2 {
                    let svar: f64 = ratios_l.iter().map(|r| (r - mean_l) * (r - mean_l)).sum::<f64>()
                        / (m - 1.0);
                    loss -= svar / m;
                    for (c, r) in coeff_l.iter_mut().zip(&ratios_l) {
                        *c -= 2.0 * (r - mean_l) / ((m - 1.0) * m);
                    }
                }
            }
            loss
        }
    };

    for (response, c) in record.chosen.responses().iter().zip(&coeff_w) {
        policy.add_scaled_grad_log_prob(&dist_p, prompt, response, weight * c, grad)?;
    }
    for (response, c) in record.rejected.responses().iter().zip(&coeff_l) {
        policy.add_scaled_grad_log_prob(&dist_p, prompt, response, weight * c, grad)?;
    }

    let mut total = loss;
    if with_anchor && config.nll_coeff > 0.0 {
        let lambda = config.nll_coeff;
        let per = lambda / n;
        let mut nll = 0.0;
        for response in record.chosen.responses() {
            nll -= dist_p.response_log_prob(response)?;
            policy.add_scaled_grad_log_prob(&dist_p, prompt, response, -weight * per, grad)?;
        }
        total += lambda * nll / n;
    }
    Ok(total)
}

/// Diffusion-form mDPO loss on squared-error summaries:
/// `-log sigmoid(-beta T omega (mean_w r - mean_l r))` where
/// `r = policy sq-err - ref sq-err` is a cost, not a reward. Chosen stubs
/// contribute their `_w` fields, rejected stubs their `_l` fields, so a
/// paired batch can be passed as both groups.
pub fn mdpo_diffusion_loss(
    chosen: &[DiffusionBatchStub],
    rejected: &[DiffusionBatchStub],
) -> Result<f64, ObjectiveError> {
    if chosen.is_empty() || rejected.is_empty() {
        return Err(ObjectiveError::EmptyDiffusionGroup);
    }
    for stub in chosen.iter().chain(rejected) {
        stub.validate()?;
    }
    let first = &chosen[0];
    let consistent = |s: &DiffusionBatchStub| {
        s.t_steps == first.t_steps
            && s.omega_lambda_t == first.omega_lambda_t
            && s.beta == first.beta
    };
    if !chosen.iter().chain(rejected).all(consistent) {
        return Err(ObjectiveError::MismatchedDiffusionConstants);
    }
    let mean_w = chosen
        .iter()
        .map(|s| s.sq_err_policy_w - s.sq_err_ref_w)
        .sum::<f64>()
        / chosen.len() as f64;
    let mean_l = rejected
        .iter()
        .map(|s| s.sq_err_policy_l - s.sq_err_ref_l)
        .sum::<f64>()
        / rejected.len() as f64;
    let scale = first.beta * f64::from(first.t_steps) * first.omega_lambda_t;
    Ok(softplus(scale * (mean_w - mean_l)))
}
