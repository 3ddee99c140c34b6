//! Label-noise robustness: the same candidate pool trained with single- and
//! multi-sample methods under a synthetic labeler.
//!
//! Per prompt the pool holds one group from a uniform sampler (the truly
//! better arm) and one from a biased sampler that sometimes leaks out of the
//! interval. A quality labeler assigns chosen/rejected: group scores are the
//! negative KL of the group's token histogram to the interval uniform (any
//! leaked token scores negative infinity); singleton scores are the negative
//! squared distance of the one-hot to the interval uniform. Singleton labels
//! flip often, group labels rarely, which is the regime the comparison is
//! about.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mspo_core::compare::label_by_group_sum;
use mspo_core::metrics::{entropy_win_rate, SupportMode};
use mspo_core::model::{
    IntervalPrompt, Policy, PreferenceRecord, Response, SampleGroup, DEFAULT_VOCAB_SIZE,
};
use mspo_core::objectives::ObjectiveConfig;
use mspo_core::seeding::derive_seed;
use mspo_core::trainer::{
    train, ObjectiveKind, Optimizer, TrainConfig, TrainingSet,
};

use super::{
    eval_policy, io_err, make_biased_sft_policy, mean_of, ExperimentError, PolicyKind, SftConfig,
    PREF_TAG, SFT_TAG,
};
use crate::dataset::{bias_token, IntervalSampling};
use crate::report::{fmt_f64, write_csv, ExperimentReport};

const NOISE_TAG: u64 = 0x4E_4F_49_31; // "NOI1"
const POOL_TAG: u64 = 0x4E_4F_49_32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseExperimentConfig {
    pub base_seed: u64,
    /// Independent seed replicas (the paired-seed comparison set).
    pub replicas: usize,
    pub records: usize,
    pub group_size: usize,
    pub a_max: usize,
    pub sampling: IntervalSampling,
    pub vocab_size: usize,
    /// Bad-sampler mixture: echo token, else uniform in range, else a leak
    /// uniformly outside the interval.
    pub bad_point_weight: f64,
    pub bad_uniform_weight: f64,
    /// When set, labels come from the samplers' true expected quality
    /// instead of the noisy comparison (the noise-free control arm).
    pub noise_free: bool,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub sft: SftConfig,
}

impl NoiseExperimentConfig {
    pub fn new(base_seed: u64) -> Self {
        Self {
            base_seed,
            replicas: 5,
            records: 3000,
            group_size: 5,
            a_max: 1000,
            sampling: IntervalSampling::BoundedGap {
                gap_lo: 5,
                gap_hi: 10,
            },
            vocab_size: DEFAULT_VOCAB_SIZE,
            bad_point_weight: 0.7,
            bad_uniform_weight: 0.2,
            noise_free: false,
            learning_rate: 0.1,
            steps: 500,
            batch_size: 16,
            sft: SftConfig::default(),
        }
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        if self.replicas == 0 || self.records == 0 || self.group_size == 0 {
            return Err(ExperimentError::InvalidConfig(
                "replicas, records, group_size must be at least 1".into(),
            ));
        }
        if self.bad_point_weight < 0.0
            || self.bad_uniform_weight < 0.0
            || self.bad_point_weight + self.bad_uniform_weight > 1.0
        {
            return Err(ExperimentError::InvalidConfig(
                "bad-sampler weights must be non-negative and sum to at most 1".into(),
            ));
        }
        Ok(())
    }
}

/// One prompt's candidate pair before labeling.
struct PoolEntry {
    prompt: IntervalPrompt,
    uniform_group: SampleGroup,
    biased_group: SampleGroup,
    /// Which candidate the labeler sees as "first" — randomized so that
    /// tie-breaking is not systematically wrong.
    uniform_first: bool,
}

/// Negative KL of the group's empirical token histogram to the interval
/// uniform; a leaked token sends the score to negative infinity.
fn group_quality(group: &SampleGroup, prompt: &IntervalPrompt) -> f64 {
    let width = prompt.width();
    let mut counts = vec![0usize; width];
    for response in group.responses() {
        let token = response.tokens()[0];
        if !prompt.contains(token) {
            return f64::NEG_INFINITY;
        }
        counts[token - prompt.lo()] += 1;
    }
    let k = group.len() as f64;
    let mut kl = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / k;
            kl += p * (p * width as f64).ln();
        }
    }
    -kl
}

/// Negative squared Euclidean distance of the one-hot response to the
/// interval uniform (full-vocab view): in-interval tokens all score
/// `-(1 - 1/width)`, leaked tokens `-(1 + 1/width)`.
fn singleton_quality(response: &Response, prompt: &IntervalPrompt) -> f64 {
    let width = prompt.width() as f64;
    if prompt.contains(response.tokens()[0]) {
        -(1.0 - 1.0 / width)
    } else {
        -(1.0 + 1.0 / width)
    }
}

fn build_pool(config: &NoiseExperimentConfig, seed: u64) -> Result<Vec<PoolEntry>, ExperimentError> {
    let mut pool = Vec::with_capacity(config.records);
    for id in 0..config.records {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[POOL_TAG, id as u64]));
        let (lo, hi) = match config.sampling {
            IntervalSampling::BoundedGap { gap_lo, gap_hi } => {
                let a = rng.gen_range(0..=config.a_max);
                (a, a + rng.gen_range(gap_lo..=gap_hi))
            }
            IntervalSampling::Unconstrained => {
                let a = rng.gen_range(0..config.a_max);
                (a, rng.gen_range(a + 1..=config.a_max))
            }
        };
        let prompt = IntervalPrompt::new(id, lo, hi)?;
        if prompt.hi() >= config.vocab_size {
            return Err(ExperimentError::InvalidConfig(format!(
                "interval [{lo}, {hi}] does not fit vocab {}",
                config.vocab_size
            )));
        }
        let echo = bias_token(&prompt);
        let uniform_group = SampleGroup::new(
            (0..config.group_size)
                .map(|_| Response::single(rng.gen_range(prompt.lo()..=prompt.hi())))
                .collect(),
        )
        .expect("group_size >= 1");
        let biased_group = SampleGroup::new(
            (0..config.group_size)
                .map(|_| {
                    let u: f64 = rng.gen();
                    let token = if u < config.bad_point_weight {
                        echo
                    } else if u < config.bad_point_weight + config.bad_uniform_weight {
                        rng.gen_range(prompt.lo()..=prompt.hi())
                    } else {
                        // Leak: uniform over the out-of-interval tokens.
                        let outside = config.vocab_size - prompt.width();
                        let mut t = rng.gen_range(0..outside);
                        if t >= prompt.lo() {
                            t += prompt.width();
                        }
                        t
                    };
                    Response::single(token)
                })
                .collect(),
        )
        .expect("group_size >= 1");
        let uniform_first = rng.gen::<bool>();
        pool.push(PoolEntry {
            prompt,
            uniform_group,
            biased_group,
            uniform_first,
        });
    }
    Ok(pool)
}

struct LabeledDatasets {
    group_records: Vec<PreferenceRecord>,
    slice_records: Vec<PreferenceRecord>,
    /// Fraction of group labels matching the ground truth.
    accuracy_group: f64,
    /// Fraction of singleton labels matching the ground truth.
    accuracy_single: f64,
}

fn label_pool(
    pool: &[PoolEntry],
    noise_free: bool,
) -> Result<LabeledDatasets, ExperimentError> {
    let mut group_records = Vec::with_capacity(pool.len());
    let mut slice_records = Vec::with_capacity(pool.len());
    let mut group_hits = 0usize;
    let mut single_hits = 0usize;
    for entry in pool {
        // Candidate order as the labeler sees it.
        let (first, second) = if entry.uniform_first {
            (&entry.uniform_group, &entry.biased_group)
        } else {
            (&entry.biased_group, &entry.uniform_group)
        };

        let group_first_wins = if noise_free {
            entry.uniform_first
        } else {
            let qa = group_quality(first, &entry.prompt);
            let qb = group_quality(second, &entry.prompt);
            label_by_group_sum(&[qa], &[qb])?
        };
        let group_picked_uniform = group_first_wins == entry.uniform_first;
        if group_picked_uniform {
            group_hits += 1;
        }
        let (chosen, rejected) = if group_picked_uniform {
            (entry.uniform_group.clone(), entry.biased_group.clone())
        } else {
            (entry.biased_group.clone(), entry.uniform_group.clone())
        };
        group_records.push(PreferenceRecord::new(entry.prompt, chosen, rejected));

        // Single-sample slice: the first response of each candidate.
        let first_single = &first.responses()[0];
        let second_single = &second.responses()[0];
        let single_first_wins = if noise_free {
            entry.uniform_first
        } else {
            let qa = singleton_quality(first_single, &entry.prompt);
            let qb = singleton_quality(second_single, &entry.prompt);
            label_by_group_sum(&[qa], &[qb])?
        };
        let single_picked_uniform = single_first_wins == entry.uniform_first;
        if single_picked_uniform {
            single_hits += 1;
        }
        let (chosen_single, rejected_single) = if single_picked_uniform {
            (
                entry.uniform_group.responses()[0].clone(),
                entry.biased_group.responses()[0].clone(),
            )
        } else {
            (
                entry.biased_group.responses()[0].clone(),
                entry.uniform_group.responses()[0].clone(),
            )
        };
        slice_records.push(PreferenceRecord::new(
            entry.prompt,
            SampleGroup::singleton(chosen_single),
            SampleGroup::singleton(rejected_single),
        ));
    }
    let n = pool.len() as f64;
    Ok(LabeledDatasets {
        group_records,
        slice_records,
        accuracy_group: group_hits as f64 / n,
        accuracy_single: single_hits as f64 / n,
    })
}

/// One seed replica's outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseArm {
    pub seed: u64,
    pub kl_sft: f64,
    pub kl_dpo: f64,
    pub kl_ipo: f64,
    pub kl_mdpo: f64,
    pub kl_mipo: f64,
    pub accuracy_k1: f64,
    pub accuracy_k_group: f64,
    pub win_mdpo_vs_dpo: f64,
    pub win_mipo_vs_ipo: f64,
}

pub struct NoiseOutput {
    pub report: ExperimentReport,
    pub arms: Vec<NoiseArm>,
}

fn train_method(
    method: ObjectiveKind,
    sft: &mspo_core::model::PolicySnapshot,
    records: &[PreferenceRecord],
    config: &NoiseExperimentConfig,
    seed: u64,
) -> Result<Policy, ExperimentError> {
    let preference = method.preference_method().expect("preference method");
    let mut policy = sft.to_policy();
    let train_config = TrainConfig {
        optimizer: Optimizer::Adam,
        batch_size: config.batch_size,
        objective_config: ObjectiveConfig::default_for(preference),
        ..TrainConfig::new(
            method,
            config.learning_rate,
            config.steps,
            derive_seed(seed, &[PREF_TAG]),
        )
    };
    train(
        &mut policy,
        Some(sft),
        &TrainingSet::Preference(records.to_vec()),
        &train_config,
    )?;
    Ok(policy)
}

/// Run all seed replicas: per seed, one shared SFT start, then DPO/IPO on
/// k = 1 slices and mDPO/mIPO on the full groups, labeled from the same pool.
pub fn run_noise_robustness_experiment(
    config: &NoiseExperimentConfig,
    out_dir: &Path,
) -> Result<NoiseOutput, ExperimentError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut arms = Vec::with_capacity(config.replicas);

    for replica in 0..config.replicas {
        let seed = derive_seed(config.base_seed, &[NOISE_TAG, replica as u64]);
        let pool = build_pool(config, seed)?;
        let labeled = label_pool(&pool, config.noise_free)?;
        let prompts: Vec<IntervalPrompt> = pool.iter().map(|e| e.prompt).collect();

        let (sft, _) = make_biased_sft_policy(
            &prompts,
            config.vocab_size,
            PolicyKind::Tabular,
            bias_token,
            &config.sft,
            derive_seed(seed, &[SFT_TAG]),
        )?;

        let dpo = train_method(ObjectiveKind::Dpo, &sft, &labeled.slice_records, config, seed)?;
        let ipo = train_method(ObjectiveKind::Ipo, &sft, &labeled.slice_records, config, seed)?;
        let mdpo =
            train_method(ObjectiveKind::Mdpo, &sft, &labeled.group_records, config, seed)?;
        let mipo =
            train_method(ObjectiveKind::Mipo, &sft, &labeled.group_records, config, seed)?;

        let mean_kl = |policy: &Policy| -> Result<f64, ExperimentError> {
            Ok(mean_of(eval_policy(policy, &prompts)?.iter().map(|e| e.kl)))
        };
        let arm = NoiseArm {
            seed,
            kl_sft: mean_kl(sft.policy())?,
            kl_dpo: mean_kl(&dpo)?,
            kl_ipo: mean_kl(&ipo)?,
            kl_mdpo: mean_kl(&mdpo)?,
            kl_mipo: mean_kl(&mipo)?,
            accuracy_k1: labeled.accuracy_single,
            accuracy_k_group: labeled.accuracy_group,
            win_mdpo_vs_dpo: entropy_win_rate(
                &mdpo,
                &dpo,
                &prompts,
                SupportMode::IntervalRestricted,
            )?
            .win_rate(),
            win_mipo_vs_ipo: entropy_win_rate(
                &mipo,
                &ipo,
                &prompts,
                SupportMode::IntervalRestricted,
            )?
            .win_rate(),
        };
        arms.push(arm);
    }

    let echo = serde_json::to_string(config).expect("config serializes");
    let label = if config.noise_free {
        "sim-noise-free"
    } else {
        "sim-noise"
    };
    let mut report = ExperimentReport::new(label, echo);

    let rows: Vec<Vec<String>> = arms
        .iter()
        .map(|a| {
            vec![
                a.seed.to_string(),
                fmt_f64(a.kl_sft),
                fmt_f64(a.kl_dpo),
                fmt_f64(a.kl_ipo),
                fmt_f64(a.kl_mdpo),
                fmt_f64(a.kl_mipo),
                fmt_f64(a.accuracy_k1),
                fmt_f64(a.accuracy_k_group),
                fmt_f64(a.win_mdpo_vs_dpo),
                fmt_f64(a.win_mipo_vs_ipo),
            ]
        })
        .collect();
    let arms_path = out_dir.join(format!("{label}_arms.csv"));
    write_csv(
        &arms_path,
        &[
            "seed",
            "kl_sft",
            "kl_dpo",
            "kl_ipo",
            "kl_mdpo",
            "kl_mipo",
            "accuracy_k1",
            "accuracy_k_group",
            "win_mdpo_vs_dpo",
            "win_mipo_vs_ipo",
        ],
        &rows,
    )?;
    report.push_file(arms_path);

    report.push_metric("mean_kl_sft", mean_of(arms.iter().map(|a| a.kl_sft)))?;
    report.push_metric("mean_kl_dpo", mean_of(arms.iter().map(|a| a.kl_dpo)))?;
    report.push_metric("mean_kl_ipo", mean_of(arms.iter().map(|a| a.kl_ipo)))?;
    report.push_metric("mean_kl_mdpo", mean_of(arms.iter().map(|a| a.kl_mdpo)))?;
    report.push_metric("mean_kl_mipo", mean_of(arms.iter().map(|a| a.kl_mipo)))?;
    report.push_metric(
        "mean_accuracy_k1",
        mean_of(arms.iter().map(|a| a.accuracy_k1)),
    )?;
    report.push_metric(
        "mean_accuracy_k_group",
        mean_of(arms.iter().map(|a| a.accuracy_k_group)),
    )?;
    let mdpo_wins = arms.iter().filter(|a| a.kl_mdpo <= a.kl_dpo).count();
    report.push_metric("seeds_with_mdpo_kl_le_dpo", mdpo_wins as f64)?;
    report.push_metric("replicas", arms.len() as f64)?;

    report.write_summary(&out_dir.join(format!("{label}_summary.csv")))?;
    report.write_config_echo(&out_dir.join(format!("{label}_config.json")))?;
    Ok(NoiseOutput { report, arms })
}
