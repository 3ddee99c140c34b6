//! Simulation wrappers: the estimator bias/variance studies and the
//! label-accuracy study with its Hoeffding overlay.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mspo_core::compare::{empirical_correct_label_rate, QualityDistribution};
use mspo_core::estimator::{bias_study, variance_scaling_study, StudyConfig};

use super::{io_err, ExperimentError};
use crate::report::{fmt_f64, write_csv, ExperimentReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub bias_sample_sizes: Vec<usize>,
    pub variance_sample_sizes: Vec<usize>,
}

impl EstimatorExperimentConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            trials: 100_000,
            bias_sample_sizes: vec![2, 4, 8, 16, 32, 64],
            variance_sample_sizes: vec![8, 16, 32, 64, 128, 256, 512],
        }
    }
}

/// Run both Monte Carlo studies on the default squared-uniform setup and
/// emit their tables.
pub fn run_estimator_experiment(
    config: &EstimatorExperimentConfig,
    out_dir: &Path,
) -> Result<ExperimentReport, ExperimentError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let bias_cfg = StudyConfig {
        trials: config.trials,
        sample_sizes: config.bias_sample_sizes.clone(),
        ..StudyConfig::bias_default(config.seed)
    };
    let variance_cfg = StudyConfig {
        trials: config.trials,
        sample_sizes: config.variance_sample_sizes.clone(),
        ..StudyConfig::variance_default(config.seed)
    };

    let echo = serde_json::to_string(config).expect("config serializes");
    let mut report = ExperimentReport::new("sim-estimator", echo);

    let bias = bias_study(&bias_cfg)?;
    let rows: Vec<Vec<String>> = bias
        .rows
        .iter()
        .map(|r| {
            vec![
                r.k.to_string(),
                fmt_f64(r.rmse_naive),
                fmt_f64(r.rmse_unbiased),
                fmt_f64(r.mean_naive),
                fmt_f64(r.mean_unbiased),
            ]
        })
        .collect();
    let bias_path = out_dir.join("bias_study.csv");
    write_csv(
        &bias_path,
        &["k", "rmse_naive", "rmse_unbiased", "mean_naive", "mean_unbiased"],
        &rows,
    )?;
    report.push_file(bias_path);
    report.push_metric("true_value", bias.true_value)?;

    let scaling = variance_scaling_study(&variance_cfg)?;
    let rows: Vec<Vec<String>> = scaling
        .rows
        .iter()
        .map(|r| {
            vec![
                r.k.to_string(),
                fmt_f64(r.empirical_var),
                fmt_f64(r.predicted_leading_term),
            ]
        })
        .collect();
    let scaling_path = out_dir.join("variance_scaling.csv");
    write_csv(
        &scaling_path,
        &["k", "empirical_var", "predicted_leading_term"],
        &rows,
    )?;
    report.push_file(scaling_path);

    let slope_path = out_dir.join("variance_slope.csv");
    let slope_row = vec![vec![scaling
        .slope
        .map(fmt_f64)
        .unwrap_or_else(|| "undefined".to_string())]];
    write_csv(&slope_path, &["slope"], &slope_row)?;
    report.push_file(slope_path);
    if let Some(slope) = scaling.slope {
        report.push_metric("variance_slope", slope)?;
    }

    report.write_summary(&out_dir.join("estimator_summary.csv"))?;
    report.write_config_echo(&out_dir.join("estimator_config.json"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub group_sizes: Vec<usize>,
    /// X = Uniform[shift, 1 + shift] against Y = Uniform[0, 1].
    pub shift: f64,
}

impl CompareExperimentConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            trials: 100_000,
            group_sizes: vec![1, 2, 4, 8, 16, 32],
            shift: 0.2,
        }
    }
}

/// Empirical group-label accuracy across group sizes with the Hoeffding
/// lower bound alongside.
pub fn run_compare_experiment(
    config: &CompareExperimentConfig,
    out_dir: &Path,
) -> Result<ExperimentReport, ExperimentError> {
    if !(config.shift > 0.0) {
        return Err(ExperimentError::InvalidConfig(
            "shift must be positive so E[X] > E[Y]".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let x = QualityDistribution::uniform(config.shift, 1.0 + config.shift)?;
    let y = QualityDistribution::uniform(0.0, 1.0)?;

    let echo = serde_json::to_string(config).expect("config serializes");
    let mut report = ExperimentReport::new("sim-compare", echo);

    let mut rows = Vec::with_capacity(config.group_sizes.len());
    for &k in &config.group_sizes {
        let result = empirical_correct_label_rate(&x, &y, k, config.trials, config.seed)?;
        rows.push(vec![
            result.k.to_string(),
            fmt_f64(result.empirical_accuracy),
            fmt_f64(result.hoeffding_bound),
            result.trials.to_string(),
            config.seed.to_string(),
        ]);
        report.push_metric(format!("accuracy_k{k}"), result.empirical_accuracy)?;
        report.push_metric(format!("hoeffding_k{k}"), result.hoeffding_bound)?;
    }
    let table = out_dir.join("compare.csv");
    write_csv(
        &table,
        &["k", "empirical_accuracy", "hoeffding_bound", "trials", "seed"],
        &rows,
    )?;
    report.push_file(table);
    report.write_summary(&out_dir.join("compare_summary.csv"))?;
    report.write_config_echo(&out_dir.join("compare_config.json"))?;
    Ok(report)
}
