//! Iterative rounds: each round contrasts fresh uniform-construction groups
//! (strong side) against groups sampled from the previous round's policy
//! (weak side), re-snapshotting the reference between rounds.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use mspo_core::model::{IntervalPrompt, Policy, PreferenceRecord, Response, SampleGroup};
use mspo_core::seeding::derive_seed;
use mspo_core::trainer::{train, Optimizer, TrainConfig, TrainHistory, TrainingSet};

use super::rng::{run_rng_experiment, write_policy_json, RngExperimentConfig};
use super::{eval_policy, io_err, mean_of, ExperimentError, PREF_TAG};
use crate::report::{fmt_f64, write_csv, ExperimentReport};

const ITER_DATA_TAG: u64 = 0x49_54_52_31; // "ITR1"

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundSummary {
    pub round: usize,
    pub mean_kl: f64,
    pub mean_entropy: f64,
    pub mean_out_mass: f64,
}

pub struct IterativeOutput {
    pub report: ExperimentReport,
    pub rounds: Vec<RoundSummary>,
    pub final_policy: Policy,
}

/// Rebuild the preference records for round `t`: chosen groups are fresh
/// uniform draws, rejected groups are sampled from the current policy.
fn round_records(
    base: &[PreferenceRecord],
    policy: &Policy,
    group_size: usize,
    seed: u64,
    round: usize,
) -> Result<Vec<PreferenceRecord>, ExperimentError> {
    base.iter()
        .map(|record| {
            let prompt = record.prompt;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &[ITER_DATA_TAG, round as u64, prompt.id() as u64],
            ));
            let chosen = SampleGroup::new(
                (0..group_size)
                    .map(|_| Response::single(rng.gen_range(prompt.lo()..=prompt.hi())))
                    .collect(),
            )
            .expect("group_size >= 1");
            let rejected = policy.sample(&prompt, &mut rng, group_size)?;
            Ok(PreferenceRecord::new(prompt, chosen, rejected))
        })
        .collect()
}

/// Run `rounds` rounds of preference training. Round 1 is exactly the plain
/// experiment under the same seed; later rounds regenerate the weak side
/// from the trained policy and refresh the reference snapshot.
pub fn run_iterative_experiment(
    records: &[PreferenceRecord],
    config: &RngExperimentConfig,
    rounds: usize,
    out_dir: &Path,
) -> Result<IterativeOutput, ExperimentError> {
    if rounds < 2 {
        return Err(ExperimentError::InvalidConfig(
            "iterative experiment needs at least 2 rounds".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let prompts: Vec<IntervalPrompt> = records.iter().map(|r| r.prompt).collect();
    let group_size = records
        .iter()
        .map(|r| r.chosen.len())
        .max()
        .expect("records non-empty");

    // Round 1: the plain pipeline, byte-for-byte.
    let first = run_rng_experiment(records, config, out_dir)?;
    let mut policy = first.trained;
    let mut histories: Vec<(usize, TrainHistory)> = vec![(1, first.history)];
    let mut rounds_summary = vec![RoundSummary {
        round: 1,
        mean_kl: mean_of(first.evals_trained.iter().map(|e| e.kl)),
        mean_entropy: mean_of(first.evals_trained.iter().map(|e| e.entropy)),
        mean_out_mass: mean_of(first.evals_trained.iter().map(|e| e.out_mass)),
    }];

    for round in 2..=rounds {
        let reference = policy.snapshot();
        let round_data = round_records(records, &policy, group_size, config.seed, round)?;
        let train_config = TrainConfig {
            optimizer: Optimizer::Adam,
            batch_size: config.batch_size,
            objective_config: config.objective,
            ..TrainConfig::new(
                config.method,
                config.learning_rate,
                config.steps,
                derive_seed(config.seed, &[PREF_TAG, round as u64]),
            )
        };
        let history = train(
            &mut policy,
            Some(&reference),
            &TrainingSet::Preference(round_data),
            &train_config,
        )?;
        let evals = eval_policy(&policy, &prompts)?;
        rounds_summary.push(RoundSummary {
            round,
            mean_kl: mean_of(evals.iter().map(|e| e.kl)),
            mean_entropy: mean_of(evals.iter().map(|e| e.entropy)),
            mean_out_mass: mean_of(evals.iter().map(|e| e.out_mass)),
        });
        histories.push((round, history));
    }

    let echo = serde_json::to_string(config).expect("config serializes");
    let mut report = ExperimentReport::new("iterate", echo);
    for summary in &rounds_summary {
        report.push_metric(format!("round{}_mean_kl", summary.round), summary.mean_kl)?;
    }

    let history_rows: Vec<Vec<String>> = histories
        .iter()
        .flat_map(|(round, history)| {
            history.steps.iter().map(move |r| {
                vec![
                    round.to_string(),
                    r.step.to_string(),
                    fmt_f64(r.loss),
                    fmt_f64(r.grad_norm),
                ]
            })
        })
        .collect();
    let history_path = out_dir.join("iterate_history.csv");
    write_csv(
        &history_path,
        &["round", "step", "loss", "grad_norm"],
        &history_rows,
    )?;
    report.push_file(history_path);

    let round_rows: Vec<Vec<String>> = rounds_summary
        .iter()
        .map(|s| {
            vec![
                s.round.to_string(),
                fmt_f64(s.mean_kl),
                fmt_f64(s.mean_entropy),
                fmt_f64(s.mean_out_mass),
            ]
        })
        .collect();
    let rounds_path = out_dir.join("iterate_rounds.csv");
    write_csv(
        &rounds_path,
        &["round", "mean_kl", "mean_entropy", "mean_out_mass"],
        &round_rows,
    )?;
    report.push_file(rounds_path);

    let final_path = out_dir.join("iterate_final_policy.json");
    write_policy_json(&final_path, &policy)?;
    report.push_file(final_path);

    report.write_summary(&out_dir.join("iterate_summary.csv"))?;
    report.write_config_echo(&out_dir.join("iterate_config.json"))?;

    Ok(IterativeOutput {
        report,
        rounds: rounds_summary,
        final_policy: policy,
    })
}
