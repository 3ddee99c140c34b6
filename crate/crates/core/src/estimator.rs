//! The variance-corrected squared-difference estimator and its Monte Carlo
//! studies.
//!
//! For `ell = (E_p f - E_q f - c)^2` the plug-in estimator of the squared
//! mean difference is biased upward by the variance of the sample means; the
//! corrected estimator subtracts unbiased sample-variance terms and has mean
//! exactly `ell`.

use rand::distributions::{Distribution, Uniform as UniformDist};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::derive_seed;

const BIAS_STUDY_TAG: u64 = 0x45_53_54_31; // "EST1"
const VARIANCE_STUDY_TAG: u64 = 0x45_53_54_32; // "EST2"

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("sample list must be non-empty")]
    EmptySamples,
    #[error("invalid distribution family: {0}")]
    InvalidFamily(String),
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("study requires trials >= 1 and every sample size >= 1")]
    InvalidStudyConfig,
}

/// The corrected statistic together with the moments it was built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimatorResult {
    /// `(mean_p - mean_q - c)^2 - svar_p/n - svar_q/m`.
    pub value: f64,
    pub mean_p: f64,
    pub mean_q: f64,
    /// Unbiased sample variances (divide by count - 1); zero at count 1.
    pub svar_p: f64,
    pub svar_q: f64,
    pub n: usize,
    pub m: usize,
}

fn mean_and_svar(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Unbiased estimator of `(E_p f - E_q f - c)^2` from transformed samples.
pub fn squared_diff_unbiased(
    samples_p: &[f64],
    samples_q: &[f64],
    c: f64,
) -> Result<EstimatorResult, EstimatorError> {
    if samples_p.is_empty() || samples_q.is_empty() {
        return Err(EstimatorError::EmptySamples);
    }
    let (mean_p, svar_p) = mean_and_svar(samples_p);
    let (mean_q, svar_q) = mean_and_svar(samples_q);
    let n = samples_p.len();
    let m = samples_q.len();
    let diff = mean_p - mean_q - c;
    let value = diff * diff - svar_p / n as f64 - svar_q / m as f64;
    Ok(EstimatorResult {
        value,
        mean_p,
        mean_q,
        svar_p,
        svar_q,
        n,
        m,
    })
}

/// The biased plug-in estimator: squared mean difference, no correction.
pub fn squared_diff_naive(
    samples_p: &[f64],
    samples_q: &[f64],
    c: f64,
) -> Result<f64, EstimatorError> {
    if samples_p.is_empty() || samples_q.is_empty() {
        return Err(EstimatorError::EmptySamples);
    }
    let (mean_p, _) = mean_and_svar(samples_p);
    let (mean_q, _) = mean_and_svar(samples_q);
    let diff = mean_p - mean_q - c;
    Ok(diff * diff)
}

/// Sampling distribution for one side of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SampleFamily {
    /// Continuous uniform on `[lo, hi]`; `lo == hi` is the point mass at `lo`.
    Uniform { lo: f64, hi: f64 },
    /// Finite support with `(value, probability)` atoms.
    Discrete { atoms: Vec<(f64, f64)> },
}

impl SampleFamily {
    pub fn point_mass(value: f64) -> Self {
        SampleFamily::Uniform { lo: value, hi: value }
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        match self {
            SampleFamily::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo > hi {
                    return Err(EstimatorError::InvalidFamily(format!(
                        "uniform bounds [{lo}, {hi}]"
                    )));
                }
            }
            SampleFamily::Discrete { atoms } => {
                if atoms.is_empty() {
                    return Err(EstimatorError::InvalidFamily("no atoms".into()));
                }
                let total: f64 = atoms.iter().map(|(_, p)| p).sum();
                if atoms.iter().any(|(v, p)| !v.is_finite() || *p < 0.0)
                    || (total - 1.0).abs() > 1e-9
                {
                    return Err(EstimatorError::InvalidFamily(
                        "atom probabilities must be non-negative and sum to 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `E[f(X)]` by closed form.
    pub fn transformed_mean(&self, f: &Transform) -> Result<f64, EstimatorError> {
        self.transformed_raw_moments(f).map(|(m1, _)| m1)
    }

    /// `Var[f(X)]` by closed form.
    pub fn transformed_var(&self, f: &Transform) -> Result<f64, EstimatorError> {
        self.transformed_raw_moments(f)
            .map(|(m1, m2)| (m2 - m1 * m1).max(0.0))
    }

    /// First two raw moments of `f(X)`.
    fn transformed_raw_moments(&self, f: &Transform) -> Result<(f64, f64), EstimatorError> {
        match (self, f) {
            (SampleFamily::Uniform { lo, hi }, Transform::Identity) => {
                if lo == hi {
                    return Ok((*lo, lo * lo));
                }
                let m1 = 0.5 * (lo + hi);
                let m2 = (hi.powi(3) - lo.powi(3)) / (3.0 * (hi - lo));
                Ok((m1, m2))
            }
            (SampleFamily::Uniform { lo, hi }, Transform::Square) => {
                if lo == hi {
                    let v = lo * lo;
                    return Ok((v, v * v));
                }
                let m1 = (hi.powi(3) - lo.powi(3)) / (3.0 * (hi - lo));
                let m2 = (hi.powi(5) - lo.powi(5)) / (5.0 * (hi - lo));
                Ok((m1, m2))
            }
            (SampleFamily::Uniform { .. }, Transform::Table(_)) => {
                Err(EstimatorError::InvalidTransform(
                    "table transform requires a discrete family".into(),
                ))
            }
            (SampleFamily::Discrete { atoms }, f) => {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for (idx, (value, prob)) in atoms.iter().enumerate() {
                    let y = f.apply_atom(*value, idx, atoms.len())?;
                    m1 += prob * y;
                    m2 += prob * y * y;
                }
                Ok((m1, m2))
            }
        }
    }

    /// Draw one transformed sample.
    fn sample_transformed<R: Rng + ?Sized>(
        &self,
        f: &Transform,
        rng: &mut R,
    ) -> Result<f64, EstimatorError> {
        match self {
            SampleFamily::Uniform { lo, hi } => {
                let x = if lo == hi {
                    *lo
                } else {
                    UniformDist::new_inclusive(*lo, *hi).sample(rng)
                };
                f.apply_atom(x, usize::MAX, 0)
            }
            SampleFamily::Discrete { atoms } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut idx = atoms.len() - 1;
                for (i, (_, p)) in atoms.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        idx = i;
                        break;
                    }
                }
                f.apply_atom(atoms[idx].0, idx, atoms.len())
            }
        }
    }
}

/// The function applied to raw draws before estimating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    Square,
    /// Lookup by atom index; only valid with a [`SampleFamily::Discrete`]
    /// whose atom count matches the table length.
    Table(Vec<f64>),
}

impl Transform {
    fn apply_atom(&self, x: f64, atom_idx: usize, atom_count: usize) -> Result<f64, EstimatorError> {
        match self {
            Transform::Identity => Ok(x),
            Transform::Square => Ok(x * x),
            Transform::Table(table) => {
                if table.len() != atom_count {
                    return Err(EstimatorError::InvalidTransform(format!(
                        "table length {} does not match atom count {atom_count}",
                        table.len()
                    )));
                }
                Ok(table[atom_idx])
            }
        }
    }
}

/// Monte Carlo study configuration. Trials are seeded per `(seed, k, trial)`,
/// so every table row is reproducible independently of the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub p: SampleFamily,
    pub q: SampleFamily,
    pub transform: Transform,
    pub c: f64,
    pub sample_sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl StudyConfig {
    /// The default bias-study setup: p = Uniform[0, 2], q = Uniform[-1, 1],
    /// f(x) = x^2, c = 0, so the true value is exactly 1 with a nondegenerate
    /// plug-in bias.
    pub fn bias_default(seed: u64) -> Self {
        Self {
            p: SampleFamily::Uniform { lo: 0.0, hi: 2.0 },
            q: SampleFamily::Uniform { lo: -1.0, hi: 1.0 },
            transform: Transform::Square,
            c: 0.0,
            sample_sizes: vec![2, 4, 8, 16, 32, 64],
            trials: 100_000,
            seed,
        }
    }

    /// Same distributions over the wider size grid used for variance scaling.
    pub fn variance_default(seed: u64) -> Self {
        Self {
            sample_sizes: vec![8, 16, 32, 64, 128, 256, 512],
            ..Self::bias_default(seed)
        }
    }

    fn validate(&self) -> Result<(), EstimatorError> {
        self.p.validate()?;
        self.q.validate()?;
        if self.trials == 0 || self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return Err(EstimatorError::InvalidStudyConfig);
        }
        // Surface transform/family mismatches before running trials.
        self.p.transformed_mean(&self.transform)?;
        self.q.transformed_mean(&self.transform)?;
        Ok(())
    }

    /// True `ell` from closed-form moments.
    pub fn true_value(&self) -> Result<f64, EstimatorError> {
        let diff =
            self.p.transformed_mean(&self.transform)? - self.q.transformed_mean(&self.transform)? - self.c;
        Ok(diff * diff)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasStudyRow {
    pub k: usize,
    pub rmse_naive: f64,
    pub rmse_unbiased: f64,
    pub mean_naive: f64,
    pub mean_unbiased: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasStudy {
    pub true_value: f64,
    pub rows: Vec<BiasStudyRow>,
}

fn draw_pair(
    config: &StudyConfig,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>), EstimatorError> {
    let mut xs = Vec::with_capacity(k);
    let mut ys = Vec::with_capacity(k);
    for _ in 0..k {
        xs.push(config.p.sample_transformed(&config.transform, rng)?);
    }
    for _ in 0..k {
        ys.push(config.q.sample_transformed(&config.transform, rng)?);
    }
    Ok((xs, ys))
}

/// RMSE and mean of both estimators against the closed-form `ell`, per
/// sample size, at `n = m = k`.
pub fn bias_study(config: &StudyConfig) -> Result<BiasStudy, EstimatorError> {
    config.validate()?;
    let true_value = config.true_value()?;
    let mut rows = Vec::with_capacity(config.sample_sizes.len());
    for &k in &config.sample_sizes {
        let mut values = vec![(0.0f64, 0.0f64); config.trials];
        values
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(trial, slot)| -> Result<(), EstimatorError> {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    config.seed,
                    &[BIAS_STUDY_TAG, k as u64, trial as u64],
                ));
                let (xs, ys) = draw_pair(config, k, &mut rng)?;
                let naive = squared_diff_naive(&xs, &ys, config.c)?;
                let unbiased = squared_diff_unbiased(&xs, &ys, config.c)?.value;
                *slot = (naive, unbiased);
                Ok(())
            })?;
        let t = config.trials as f64;
        let mut sum_n = 0.0;
        let mut sum_u = 0.0;
        let mut sq_n = 0.0;
        let mut sq_u = 0.0;
        for &(naive, unbiased) in &values {
            sum_n += naive;
            sum_u += unbiased;
            sq_n += (naive - true_value) * (naive - true_value);
            sq_u += (unbiased - true_value) * (unbiased - true_value);
        }
        rows.push(BiasStudyRow {
            k,
            rmse_naive: (sq_n / t).sqrt(),
            rmse_unbiased: (sq_u / t).sqrt(),
            mean_naive: sum_n / t,
            mean_unbiased: sum_u / t,
        });
    }
    Ok(BiasStudy { true_value, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceScalingRow {
    pub k: usize,
    pub empirical_var: f64,
    /// Leading-order prediction `4 (sigma_p^2/k + sigma_q^2/k) delta^2`.
    pub predicted_leading_term: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceScalingStudy {
    pub rows: Vec<VarianceScalingRow>,
    /// Least-squares slope of log empirical variance against log k; `None`
    /// when a variance is not positive (degenerate distributions).
    pub slope: Option<f64>,
}

/// Empirical variance of the corrected estimator across trials at each
/// `k = n = m`, with the leading-order prediction and a log-log slope fit.
pub fn variance_scaling_study(
    config: &StudyConfig,
) -> Result<VarianceScalingStudy, EstimatorError> {
    config.validate()?;
    let var_p = config.p.transformed_var(&config.transform)?;
    let var_q = config.q.transformed_var(&config.transform)?;
    let delta = config.p.transformed_mean(&config.transform)?
        - config.q.transformed_mean(&config.transform)?
        - config.c;
    let mut rows = Vec::with_capacity(config.sample_sizes.len());
    for &k in &config.sample_sizes {
        let mut values = vec![0.0f64; config.trials];
        values
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(trial, slot)| -> Result<(), EstimatorError> {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    config.seed,
                    &[VARIANCE_STUDY_TAG, k as u64, trial as u64],
                ));
                let (xs, ys) = draw_pair(config, k, &mut rng)?;
                *slot = squared_diff_unbiased(&xs, &ys, config.c)?.value;
                Ok(())
            })?;
        let t = config.trials as f64;
        let mean = values.iter().sum::<f64>() / t;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t;
        let s = var_p / k as f64 + var_q / k as f64;
        rows.push(VarianceScalingRow {
            k,
            empirical_var: var,
            predicted_leading_term: 4.0 * s * delta * delta,
        });
    }
    let slope = fit_log_log_slope(&rows);
    Ok(VarianceScalingStudy { rows, slope })
}

fn fit_log_log_slope(rows: &[VarianceScalingRow]) -> Option<f64> {
    if rows.len() < 2 || rows.iter().any(|r| r.empirical_var <= 0.0) {
        return None;
    }
    let points: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.k as f64).ln(), r.empirical_var.ln()))
        .collect();
    let n = points.len() as f64;
    let mean_x = points.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|(x, _)| (x - mean_x) * (x - mean_x)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points
        .iter()
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    Some(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_masses_give_exact_value() {
        let r = squared_diff_unbiased(&[1.0], &[0.0], 0.0).unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r.svar_p, 0.0);
        assert_eq!(r.svar_q, 0.0);
        assert_eq!(squared_diff_naive(&[1.0], &[0.0], 0.0).unwrap(), 1.0);
    }

    #[test]
    fn identical_multisets_expose_negative_correction() {
        let xs = [0.5, 1.5, -0.25, 2.0];
        let r = squared_diff_unbiased(&xs, &xs, 0.0).unwrap();
        let expected = -r.svar_p * (1.0 / 4.0 + 1.0 / 4.0);
        assert!((r.value - expected).abs() < 1e-15);
        assert!(r.value <= 0.0);
        assert_eq!(squared_diff_naive(&xs, &xs, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn enumeration_oracle_over_four_outcomes() {
        // p uniform on {0, 2} with two draws, q the point mass at 0.
        let outcomes = [[0.0, 0.0], [0.0, 2.0], [2.0, 0.0], [2.0, 2.0]];
        let per_pair: Vec<f64> = outcomes
            .iter()
            .map(|xs| squared_diff_unbiased(xs, &[0.0, 0.0], 0.0).unwrap().value)
            .collect();
        assert_eq!(per_pair, vec![0.0, 0.0, 0.0, 4.0]);
        let average = per_pair.iter().sum::<f64>() / 4.0;
        assert_eq!(average, 1.0);

        let naive: Vec<f64> = outcomes
            .iter()
            .map(|xs| squared_diff_naive(xs, &[0.0, 0.0], 0.0).unwrap())
            .collect();
        assert_eq!(naive, vec![0.0, 1.0, 1.0, 4.0]);
        let naive_avg = naive.iter().sum::<f64>() / 4.0;
        assert_eq!(naive_avg, 1.5);
        // Bias is sigma_p^2 / n = 1/2 above the true value 1.
        assert_eq!(naive_avg - average, 0.5);
    }

    #[test]
    fn empty_samples_error() {
        assert!(matches!(
            squared_diff_unbiased(&[], &[1.0], 0.0),
            Err(EstimatorError::EmptySamples)
        ));
        assert!(matches!(
            squared_diff_naive(&[1.0], &[], 0.0),
            Err(EstimatorError::EmptySamples)
        ));
    }

    #[test]
    fn closed_form_moments_for_default_setup() {
        let cfg = StudyConfig::bias_default(0);
        assert!((cfg.p.transformed_mean(&cfg.transform).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert!((cfg.q.transformed_mean(&cfg.transform).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((cfg.p.transformed_var(&cfg.transform).unwrap() - 64.0 / 45.0).abs() < 1e-14);
        assert!((cfg.q.transformed_var(&cfg.transform).unwrap() - 4.0 / 45.0).abs() < 1e-15);
        assert!((cfg.true_value().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn discrete_family_moments_and_table_transform() {
        let family = SampleFamily::Discrete {
            atoms: vec![(0.0, 0.5), (2.0, 0.5)],
        };
        assert_eq!(family.transformed_mean(&Transform::Identity).unwrap(), 1.0);
        assert_eq!(family.transformed_var(&Transform::Identity).unwrap(), 1.0);
        let table = Transform::Table(vec![3.0, 7.0]);
        assert_eq!(family.transformed_mean(&table).unwrap(), 5.0);
        assert!(SampleFamily::Uniform { lo: 0.0, hi: 1.0 }
            .transformed_mean(&table)
            .is_err());
        let short = Transform::Table(vec![1.0]);
        assert!(family.transformed_mean(&short).is_err());
    }

    #[test]
    fn zero_variance_families_have_zero_rmse_and_variance() {
        let cfg = StudyConfig {
            p: SampleFamily::point_mass(2.0),
            q: SampleFamily::point_mass(0.5),
            transform: Transform::Identity,
            c: 0.0,
            sample_sizes: vec![1, 2, 4],
            trials: 50,
            seed: 3,
        };
        let study = bias_study(&cfg).unwrap();
        for row in &study.rows {
            assert_eq!(row.rmse_naive, 0.0);
            assert_eq!(row.rmse_unbiased, 0.0);
        }
        let scaling = variance_scaling_study(&cfg).unwrap();
        for row in &scaling.rows {
            assert_eq!(row.empirical_var, 0.0);
        }
        assert!(scaling.slope.is_none());
    }

    #[test]
    fn studies_are_deterministic_per_seed() {
        let cfg = StudyConfig {
            trials: 200,
            sample_sizes: vec![2, 8],
            ..StudyConfig::bias_default(9)
        };
        assert_eq!(bias_study(&cfg).unwrap(), bias_study(&cfg).unwrap());
        assert_eq!(
            variance_scaling_study(&cfg).unwrap(),
            variance_scaling_study(&cfg).unwrap()
        );
    }

    #[test]
    fn invalid_study_configs_error() {
        let mut cfg = StudyConfig::bias_default(0);
        cfg.trials = 0;
        assert!(bias_study(&cfg).is_err());
        let mut cfg = StudyConfig::bias_default(0);
        cfg.sample_sizes = vec![0];
        assert!(bias_study(&cfg).is_err());
        let cfg = StudyConfig {
            p: SampleFamily::Discrete { atoms: vec![] },
            ..StudyConfig::bias_default(0)
        };
        assert!(bias_study(&cfg).is_err());
    }
}
