//! The random-number-generation reproduction: biased SFT warm start, one
//! preference method on top of it, calibration evaluation against the SFT
//! baseline.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mspo_core::model::{IntervalPrompt, Policy, PolicySnapshot, PreferenceRecord};
use mspo_core::objectives::ObjectiveConfig;
use mspo_core::seeding::derive_seed;
use mspo_core::trainer::{
    train, ObjectiveKind, Optimizer, TrainConfig, TrainHistory, TrainingSet,
};

use super::{
    compare_policies, eval_policy, io_err, make_biased_sft_policy, mean_of, write_history_csv,
    ExperimentError, PolicyKind, PromptEval, SftConfig, PREF_TAG, SFT_TAG,
};
use crate::dataset::bias_token;
use crate::report::{fmt_f64, write_csv, ExperimentReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngExperimentConfig {
    pub method: ObjectiveKind,
    pub policy_kind: PolicyKind,
    pub vocab_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub objective: ObjectiveConfig,
    pub sft: SftConfig,
    pub seed: u64,
}

impl RngExperimentConfig {
    pub fn new(method: ObjectiveKind, seed: u64) -> Result<Self, ExperimentError> {
        let preference = method.preference_method().ok_or_else(|| {
            ExperimentError::InvalidConfig(
                "the rng experiment trains a preference method on top of sft".into(),
            )
        })?;
        Ok(Self {
            method,
            policy_kind: PolicyKind::Tabular,
            vocab_size: mspo_core::model::DEFAULT_VOCAB_SIZE,
            learning_rate: 0.1,
            steps: 500,
            batch_size: 16,
            objective: ObjectiveConfig::default_for(preference),
            sft: SftConfig::default(),
            seed,
        })
    }
}

/// Everything a run produces, with the report pointing at the written files.
pub struct RngRunOutput {
    pub report: ExperimentReport,
    pub sft: PolicySnapshot,
    pub trained: Policy,
    pub history: TrainHistory,
    pub evals_sft: Vec<PromptEval>,
    pub evals_trained: Vec<PromptEval>,
}

pub(crate) fn write_policy_json(path: &Path, policy: &Policy) -> Result<(), ExperimentError> {
    fs::write(path, policy.to_json_string() + "\n").map_err(|e| io_err(path, e))
}

/// Per-prompt metrics for a (baseline, trained) pair. Column names carry no
/// method label so matched-seed runs of collapsing methods emit identical
/// bytes.
pub(crate) fn write_metrics_csv(
    path: &Path,
    base: &[PromptEval],
    trained: &[PromptEval],
) -> Result<(), ExperimentError> {
    let rows: Vec<Vec<String>> = base
        .iter()
        .zip(trained)
        .map(|(b, t)| {
            vec![
                b.prompt_id.to_string(),
                fmt_f64(b.kl),
                fmt_f64(t.kl),
                fmt_f64(b.entropy),
                fmt_f64(t.entropy),
                fmt_f64(b.out_mass),
                fmt_f64(t.out_mass),
            ]
        })
        .collect();
    write_csv(
        path,
        &[
            "prompt_id",
            "kl_sft",
            "kl_trained",
            "entropy_sft",
            "entropy_trained",
            "out_mass_sft",
            "out_mass_trained",
        ],
        &rows,
    )?;
    Ok(())
}

/// The full pipeline: SFT warm start, snapshot as reference, preference
/// training, evaluation, files.
pub fn run_rng_experiment(
    records: &[PreferenceRecord],
    config: &RngExperimentConfig,
    out_dir: &Path,
) -> Result<RngRunOutput, ExperimentError> {
    if records.is_empty() {
        return Err(ExperimentError::InvalidConfig("no records".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let prompts: Vec<IntervalPrompt> = records.iter().map(|r| r.prompt).collect();
    let method = config.method.name();

    let (sft, _sft_history) = make_biased_sft_policy(
        &prompts,
        config.vocab_size,
        config.policy_kind,
        bias_token,
        &config.sft,
        derive_seed(config.seed, &[SFT_TAG]),
    )?;

    let mut policy = sft.to_policy();
    let train_config = TrainConfig {
        optimizer: Optimizer::Adam,
        batch_size: config.batch_size,
        objective_config: config.objective,
        ..TrainConfig::new(
            config.method,
            config.learning_rate,
            config.steps,
            derive_seed(config.seed, &[PREF_TAG]),
        )
    };
    let history = train(
        &mut policy,
        Some(&sft),
        &TrainingSet::Preference(records.to_vec()),
        &train_config,
    )?;

    let evals_sft = eval_policy(sft.policy(), &prompts)?;
    let evals_trained = eval_policy(&policy, &prompts)?;

    let echo = serde_json::to_string(config).expect("config serializes");
    let mut report = ExperimentReport::new(format!("rng-{method}"), echo);
    compare_policies(&mut report, "trained_vs_sft", &policy, sft.policy(), &prompts)?;
    report.push_metric("mean_kl_sft", mean_of(evals_sft.iter().map(|e| e.kl)))?;
    report.push_metric(
        "mean_kl_trained",
        mean_of(evals_trained.iter().map(|e| e.kl)),
    )?;
    report.push_metric(
        "mean_entropy_sft",
        mean_of(evals_sft.iter().map(|e| e.entropy)),
    )?;
    report.push_metric(
        "mean_entropy_trained",
        mean_of(evals_trained.iter().map(|e| e.entropy)),
    )?;
    report.push_metric(
        "mean_out_mass_sft",
        mean_of(evals_sft.iter().map(|e| e.out_mass)),
    )?;
    report.push_metric(
        "mean_out_mass_trained",
        mean_of(evals_trained.iter().map(|e| e.out_mass)),
    )?;
    report.push_metric("final_loss", history.steps.last().expect("steps >= 1").loss)?;

    let history_path = out_dir.join(format!("{method}_history.csv"));
    write_history_csv(&history_path, &history)?;
    report.push_file(history_path);

    let sft_path = out_dir.join("sft_policy.json");
    write_policy_json(&sft_path, sft.policy())?;
    report.push_file(sft_path);

    let policy_path = out_dir.join(format!("{method}_policy.json"));
    write_policy_json(&policy_path, &policy)?;
    report.push_file(policy_path);

    let metrics_path = out_dir.join(format!("{method}_metrics.csv"));
    write_metrics_csv(&metrics_path, &evals_sft, &evals_trained)?;
    report.push_file(metrics_path);

    report.write_summary(&out_dir.join(format!("{method}_summary.csv")))?;
    report.write_config_echo(&out_dir.join(format!("{method}_config.json")))?;

    Ok(RngRunOutput {
        report,
        sft,
        trained: policy,
        history,
        evals_sft,
        evals_trained,
    })
}

/// Entropy win rate and calibration table for two saved policies.
pub struct EvalOutput {
    pub report: ExperimentReport,
}

pub fn run_eval(
    policy_a: &Policy,
    policy_b: &Policy,
    prompts: &[IntervalPrompt],
    out_dir: &Path,
) -> Result<EvalOutput, ExperimentError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let evals_a = eval_policy(policy_a, prompts)?;
    let evals_b = eval_policy(policy_b, prompts)?;
    let mut report = ExperimentReport::new("eval", "{}");
    compare_policies(&mut report, "a_vs_b", policy_a, policy_b, prompts)?;
    report.push_metric("mean_kl_a", mean_of(evals_a.iter().map(|e| e.kl)))?;
    report.push_metric("mean_kl_b", mean_of(evals_b.iter().map(|e| e.kl)))?;

    let rows: Vec<Vec<String>> = evals_a
        .iter()
        .zip(&evals_b)
        .map(|(a, b)| {
            vec![
                a.prompt_id.to_string(),
                fmt_f64(a.entropy),
                fmt_f64(b.entropy),
                fmt_f64(a.kl),
                fmt_f64(b.kl),
                fmt_f64(a.out_mass),
                fmt_f64(b.out_mass),
            ]
        })
        .collect();
    let table = out_dir.join("eval_metrics.csv");
    write_csv(
        &table,
        &[
            "prompt_id",
            "entropy_a",
            "entropy_b",
            "kl_a",
            "kl_b",
            "out_mass_a",
            "out_mass_b",
        ],
        &rows,
    )?;
    report.push_file(table);
    report.write_summary(&out_dir.join("eval_summary.csv"))?;
    Ok(EvalOutput { report })
}
