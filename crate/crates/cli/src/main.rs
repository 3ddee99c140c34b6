use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mspo_cli::dataset::{
    build_rng_dataset, read_records_jsonl, write_records_jsonl, IntervalSampling,
    RejectedFamily, RngDatasetConfig,
};
use mspo_cli::experiments::iterative::run_iterative_experiment;
use mspo_cli::experiments::noise::{run_noise_robustness_experiment, NoiseExperimentConfig};
use mspo_cli::experiments::rng::{run_eval, run_rng_experiment, RngExperimentConfig};
use mspo_cli::experiments::studies::{
    run_compare_experiment, run_estimator_experiment, CompareExperimentConfig,
    EstimatorExperimentConfig,
};
use mspo_cli::experiments::{make_biased_sft_policy, PolicyKind, SftConfig};
use mspo_cli::report::ExperimentReport;
use mspo_core::model::Policy;
use mspo_core::seeding::derive_seed;
use mspo_core::trainer::{ObjectiveKind, TrainError};

#[derive(Parser)]
#[command(
    name = "mspo",
    about = "Multi-sample preference optimization experiments on toy policies",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainFlags {
    /// Preference method: dpo | ipo | mdpo | mipo (train also accepts sft).
    #[arg(long, default_value = "mdpo")]
    method: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Learning rate for the preference phase.
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// KL coefficient; defaults to the method's standard value.
    #[arg(long)]
    beta: Option<f64>,
    /// IPO regularizer; defaults to the method's standard value.
    #[arg(long)]
    tau: Option<f64>,
    /// NLL anchor weight; defaults to the method's standard value.
    #[arg(long)]
    nll_coeff: Option<f64>,
    /// Policy family: tabular | linear.
    #[arg(long, default_value = "tabular")]
    policy: String,
    /// SFT warm-start passes over its sampled dataset.
    #[arg(long, default_value_t = 5)]
    sft_epochs: usize,
    /// Skew of the biased SFT sampling rule.
    #[arg(long, default_value_t = 0.6)]
    sft_skew: f64,
}

impl TrainFlags {
    fn experiment_config(&self, method: ObjectiveKind) -> Result<RngExperimentConfig> {
        let mut config = RngExperimentConfig::new(method, self.seed)?;
        config.learning_rate = self.lr;
        config.steps = self.steps;
        config.batch_size = self.batch_size;
        config.policy_kind = PolicyKind::from_str(&self.policy)?;
        config.sft.epochs = self.sft_epochs;
        config.sft.skew = self.sft_skew;
        if let Some(beta) = self.beta {
            config.objective.beta = beta;
        }
        if let Some(tau) = self.tau {
            config.objective.tau = tau;
        }
        if let Some(nll) = self.nll_coeff {
            config.objective.nll_coeff = nll;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the train/test preference datasets as JSONL.
    Dataset {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3000)]
        records: usize,
        #[arg(long, default_value_t = 100)]
        test_records: usize,
        /// Group size k.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Rejected family: point-mass | geometric-tilt | mixture.
        #[arg(long, default_value = "point-mass")]
        rejected_family: String,
    },
    /// SFT warm start plus preference training on a JSONL dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Compare two saved policies on a dataset's prompts.
    Eval {
        #[arg(long)]
        policy_a: PathBuf,
        #[arg(long)]
        policy_b: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Estimator bias and variance-scaling studies.
    SimEstimator {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
    },
    /// Group-label accuracy against the Hoeffding bound.
    SimCompare {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        /// Mean shift of X over Y.
        #[arg(long, default_value_t = 0.2)]
        shift: f64,
    },
    /// Label-noise robustness: DPO/IPO on k = 1 slices vs mDPO/mIPO on
    /// groups from the same pool.
    SimNoise {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        replicas: usize,
        #[arg(long, default_value_t = 3000)]
        records: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        /// Label from true expected quality instead of the noisy scorer.
        #[arg(long, default_value_t = false)]
        noise_free: bool,
    },
    /// Iterative rounds of mDPO against the previous round's policy.
    Iterate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        rounds: usize,
        #[command(flatten)]
        flags: TrainFlags,
    },
}

fn print_report(report: &ExperimentReport) {
    println!("experiment: {}", report.name);
    for (name, value) in report.metrics() {
        println!("  {name} = {value}");
    }
    for file in report.files() {
        println!("  wrote {}", file.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset {
            out_dir,
            seed,
            records,
            test_records,
            k,
            rejected_family,
        } => {
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let family = RejectedFamily::from_str(&rejected_family)?;
            let train_config = RngDatasetConfig {
                records,
                group_size: k,
                rejected_family: family,
                ..RngDatasetConfig::train_default(seed)
            };
            let train_records = build_rng_dataset(&train_config)?;
            let train_path = out_dir.join("train.jsonl");
            write_records_jsonl(&train_path, &train_records)?;
            println!("wrote {} ({} records)", train_path.display(), train_records.len());

            let test_config = RngDatasetConfig {
                records: test_records,
                group_size: k,
                rejected_family: family,
                sampling: IntervalSampling::Unconstrained,
                ..RngDatasetConfig::test_default(derive_seed(seed, &[1]))
            };
            let test_recs = build_rng_dataset(&test_config)?;
            let test_path = out_dir.join("test.jsonl");
            write_records_jsonl(&test_path, &test_recs)?;
            println!("wrote {} ({} records)", test_path.display(), test_recs.len());
            Ok(())
        }
        Command::Train {
            dataset,
            out_dir,
            flags,
        } => {
            let records = read_records_jsonl(&dataset)?;
            if flags.method == "sft" {
                std::fs::create_dir_all(&out_dir)
                    .with_context(|| format!("creating {}", out_dir.display()))?;
                let prompts: Vec<_> = records.iter().map(|r| r.prompt).collect();
                let sft = SftConfig {
                    epochs: flags.sft_epochs,
                    skew: flags.sft_skew,
                    ..SftConfig::default()
                };
                let (snapshot, history) = make_biased_sft_policy(
                    &prompts,
                    mspo_core::model::DEFAULT_VOCAB_SIZE,
                    PolicyKind::from_str(&flags.policy)?,
                    mspo_cli::dataset::bias_token,
                    &sft,
                    mspo_cli::experiments::sft_seed(flags.seed),
                )?;
                let path = out_dir.join("sft_policy.json");
                std::fs::write(&path, snapshot.policy().to_json_string() + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
                println!(
                    "wrote {} (final loss {})",
                    path.display(),
                    history.steps.last().map(|r| r.loss).unwrap_or(f64::NAN)
                );
                return Ok(());
            }
            let method = ObjectiveKind::from_str(&flags.method)?;
            let config = flags.experiment_config(method)?;
            let output = run_rng_experiment(&records, &config, &out_dir)?;
            print_report(&output.report);
            Ok(())
        }
        Command::Eval {
            policy_a,
            policy_b,
            dataset,
            out_dir,
        } => {
            let a = Policy::from_json_str(
                &std::fs::read_to_string(&policy_a)
                    .with_context(|| format!("reading {}", policy_a.display()))?,
            )?;
            let b = Policy::from_json_str(
                &std::fs::read_to_string(&policy_b)
                    .with_context(|| format!("reading {}", policy_b.display()))?,
            )?;
            let records = read_records_jsonl(&dataset)?;
            let prompts: Vec<_> = records.iter().map(|r| r.prompt).collect();
            let output = run_eval(&a, &b, &prompts, &out_dir)?;
            print_report(&output.report);
            Ok(())
        }
        Command::SimEstimator {
            out_dir,
            seed,
            trials,
        } => {
            let config = EstimatorExperimentConfig {
                trials,
                ..EstimatorExperimentConfig::new(seed)
            };
            let report = run_estimator_experiment(&config, &out_dir)?;
            print_report(&report);
            Ok(())
        }
        Command::SimCompare {
            out_dir,
            seed,
            trials,
            shift,
        } => {
            let config = CompareExperimentConfig {
                trials,
                shift,
                ..CompareExperimentConfig::new(seed)
            };
            let report = run_compare_experiment(&config, &out_dir)?;
            print_report(&report);
            Ok(())
        }
        Command::SimNoise {
            out_dir,
            seed,
            replicas,
            records,
            k,
            steps,
            lr,
            noise_free,
        } => {
            let config = NoiseExperimentConfig {
                replicas,
                records,
                group_size: k,
                steps,
                learning_rate: lr,
                noise_free,
                ..NoiseExperimentConfig::new(seed)
            };
            let output = run_noise_robustness_experiment(&config, &out_dir)?;
            print_report(&output.report);
            Ok(())
        }
        Command::Iterate {
            dataset,
            out_dir,
            rounds,
            flags,
        } => {
            let records = read_records_jsonl(&dataset)?;
            let method = ObjectiveKind::from_str(&flags.method)?;
            let config = flags.experiment_config(method)?;
            let output = run_iterative_experiment(&records, &config, rounds, &out_dir)?;
            print_report(&output.report);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numeric_abort = err.chain().any(|cause| {
                matches!(
                    cause.downcast_ref::<TrainError>(),
                    Some(TrainError::NonFinite { .. })
                )
            });
            ExitCode::from(if numeric_abort { 2 } else { 1 })
        }
    }
}
