//! Experiment drivers: the RNG-task reproduction, estimator and label
//! studies, noise robustness, and iterative rounds.

pub mod iterative;
pub mod noise;
pub mod rng;
pub mod studies;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use mspo_core::metrics::{
    entropy, kl_to_uniform, out_of_interval_mass, restricted_distribution, MetricsError,
};
use mspo_core::model::{
    IntervalPrompt, ModelError, Policy, PolicySnapshot, Response,
};
use mspo_core::seeding::derive_seed;
use mspo_core::trainer::{
    train, ObjectiveKind, Optimizer, TrainConfig, TrainError, TrainHistory, TrainingSet,
};

use crate::dataset::DatasetError;
use crate::report::{write_csv, ExperimentReport, ReportError};

pub(crate) const SFT_TAG: u64 = 0x53_46_54_31; // "SFT1"
pub(crate) const SFT_DATA_TAG: u64 = 0x53_46_54_32; // "SFT2"
pub(crate) const PREF_TAG: u64 = 0x50_52_46_31; // "PRF1"

/// Seed for the SFT warm start of a run with base seed `base`; exposed so a
/// standalone `train --method sft` matches the full pipeline's warm start.
pub fn sft_seed(base: u64) -> u64 {
    derive_seed(base, &[SFT_TAG])
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Compare(#[from] mspo_core::compare::CompareError),
    #[error(transparent)]
    Estimator(#[from] mspo_core::estimator::EstimatorError),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Which policy family an experiment trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    Tabular,
    Linear,
}

impl std::str::FromStr for PolicyKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tabular" => Ok(PolicyKind::Tabular),
            "linear" => Ok(PolicyKind::Linear),
            other => Err(ExperimentError::InvalidConfig(format!(
                "unknown policy kind {other:?}"
            ))),
        }
    }
}

pub fn fresh_policy(
    kind: PolicyKind,
    vocab_size: usize,
    prompts: &[IntervalPrompt],
) -> Result<Policy, ExperimentError> {
    Ok(match kind {
        PolicyKind::Tabular => {
            let ids: Vec<usize> = prompts.iter().map(|p| p.id()).collect();
            Policy::tabular(vocab_size, &ids)?
        }
        PolicyKind::Linear => Policy::linear(vocab_size),
    })
}

/// Configuration of the biased supervised warm start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    /// Probability mass the sampling rule puts on the echo token; the rest
    /// spreads uniformly over the remaining interval tokens.
    pub skew: f64,
    pub samples_per_prompt: usize,
    /// Passes over the sampled dataset; steps = ceil(pairs * epochs / batch).
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Explicit step count, overriding the epoch-derived one.
    pub steps_override: Option<usize>,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            skew: 0.6,
            samples_per_prompt: 16,
            epochs: 5,
            batch_size: 64,
            learning_rate: 0.1,
            steps_override: None,
        }
    }
}

impl SftConfig {
    pub fn steps_for(&self, pair_count: usize) -> usize {
        self.steps_override
            .unwrap_or_else(|| (pair_count * self.epochs).div_ceil(self.batch_size).max(1))
    }
}

/// Supervised-train a fresh policy on samples skewed toward `rule`'s token
/// and freeze it: the biased starting point that doubles as `pi_ref`.
pub fn make_biased_sft_policy(
    prompts: &[IntervalPrompt],
    vocab_size: usize,
    kind: PolicyKind,
    rule: impl Fn(&IntervalPrompt) -> usize,
    config: &SftConfig,
    seed: u64,
) -> Result<(PolicySnapshot, TrainHistory), ExperimentError> {
    if prompts.is_empty() {
        return Err(ExperimentError::InvalidConfig(
            "sft needs at least one prompt".into(),
        ));
    }
    if !(0.0..=1.0).contains(&config.skew) {
        return Err(ExperimentError::InvalidConfig(format!(
            "sft skew {} must lie in [0, 1]",
            config.skew
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SFT_DATA_TAG]));
    let mut pairs = Vec::with_capacity(prompts.len() * config.samples_per_prompt);
    for prompt in prompts {
        let echo = rule(prompt);
        if !prompt.contains(echo) {
            return Err(ExperimentError::InvalidConfig(format!(
                "bias token {echo} outside interval [{}, {}]",
                prompt.lo(),
                prompt.hi()
            )));
        }
        for _ in 0..config.samples_per_prompt {
            let token = if prompt.width() == 1 || rng.gen::<f64>() < config.skew {
                echo
            } else {
                // Uniform over the interval minus the echo token.
                let mut t = rng.gen_range(prompt.lo()..prompt.hi());
                if t >= echo {
                    t += 1;
                }
                t
            };
            pairs.push((*prompt, Response::single(token)));
        }
    }
    let steps = config.steps_for(pairs.len());
    let train_config = TrainConfig {
        optimizer: Optimizer::Adam,
        batch_size: config.batch_size,
        ..TrainConfig::new(
            ObjectiveKind::Sft,
            config.learning_rate,
            steps,
            derive_seed(seed, &[SFT_TAG]),
        )
    };
    let mut policy = fresh_policy(kind, vocab_size, prompts)?;
    let history = train(&mut policy, None, &TrainingSet::Supervised(pairs), &train_config)?;
    Ok((policy.snapshot(), history))
}

/// Per-prompt calibration readings, interval-restricted where it matters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PromptEval {
    pub prompt_id: usize,
    /// KL of the restricted, renormalized predictive distribution to the
    /// uniform distribution over the interval.
    pub kl: f64,
    /// Entropy of the restricted distribution.
    pub entropy: f64,
    /// Full-vocab probability mass outside the interval.
    pub out_mass: f64,
}

pub fn eval_policy(
    policy: &Policy,
    prompts: &[IntervalPrompt],
) -> Result<Vec<PromptEval>, ExperimentError> {
    prompts
        .iter()
        .map(|prompt| {
            let restricted = restricted_distribution(policy, prompt)?;
            Ok(PromptEval {
                prompt_id: prompt.id(),
                kl: kl_to_uniform(&restricted, restricted.len())?,
                entropy: entropy(&restricted)?,
                out_mass: out_of_interval_mass(policy, prompt)?,
            })
        })
        .collect()
}

pub fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        sum += v;
        count += 1;
    }
    sum / count.max(1) as f64
}

/// Write a (step, loss, grad_norm) history CSV.
pub fn write_history_csv(path: &Path, history: &TrainHistory) -> Result<(), ExperimentError> {
    let rows: Vec<Vec<String>> = history
        .steps
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                crate::report::fmt_f64(r.loss),
                crate::report::fmt_f64(r.grad_norm),
            ]
        })
        .collect();
    write_csv(path, &["step", "loss", "grad_norm"], &rows)?;
    Ok(())
}

/// Compare two policies prompt-by-prompt and summarize into `report`.
pub fn compare_policies(
    report: &mut ExperimentReport,
    label: &str,
    policy_a: &Policy,
    policy_b: &Policy,
    prompts: &[IntervalPrompt],
) -> Result<(), ExperimentError> {
    let rate = mspo_core::metrics::entropy_win_rate(
        policy_a,
        policy_b,
        prompts,
        mspo_core::metrics::SupportMode::IntervalRestricted,
    )?;
    report.push_metric(format!("win_rate_{label}"), rate.win_rate())?;
    report.push_metric(format!("ties_{label}"), rate.ties as f64)?;
    Ok(())
}
