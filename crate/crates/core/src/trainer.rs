//! Deterministic first-order training against any objective.
//!
//! A batch element is one whole record: every group member contributes to a
//! single loss term, which is what the within-group variance correction
//! needs. Batches are drawn without replacement per epoch from a seeded
//! shuffle, so identical inputs always reproduce the same history.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{IntervalPrompt, Policy, PolicySnapshot, PreferenceRecord, Response};
use crate::objectives::{
    accumulate_composite, accumulate_sft_example, ObjectiveConfig, ObjectiveError,
    PreferenceMethod,
};
use crate::seeding::derive_seed;

const SHUFFLE_TAG: u64 = 0x54_52_4E_31; // "TRN1"

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("dataset must be non-empty")]
    EmptyDataset,
    #[error("objective {objective} is incompatible with this dataset: {reason}")]
    IncompatibleObjective {
        objective: &'static str,
        reason: String,
    },
    #[error("preference objectives require a reference snapshot")]
    MissingReference,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss or gradient at step {step} (loss {loss}, grad norm {grad_norm})")]
    NonFinite { step: usize, loss: f64, grad_norm: f64 },
    #[error("parameter/gradient shape mismatch: {params} vs {grads}")]
    ShapeMismatch { params: usize, grads: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(TrainError::InvalidConfig(format!(
                "unknown optimizer {other:?}"
            ))),
        }
    }
}

/// Adam hyperparameters with the usual defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment state for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    learning_rate: f64,
    hp: &AdamParams,
) -> Result<(), TrainError> {
    if params.len() != grad.len() || params.len() != state.m.len() {
        return Err(TrainError::ShapeMismatch {
            params: params.len(),
            grads: grad.len(),
        });
    }
    state.step += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= learning_rate * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
    Ok(())
}

/// Which loss the training loop optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    Sft,
    Dpo,
    Ipo,
    Mdpo,
    Mipo,
}

impl ObjectiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Sft => "sft",
            ObjectiveKind::Dpo => "dpo",
            ObjectiveKind::Ipo => "ipo",
            ObjectiveKind::Mdpo => "mdpo",
            ObjectiveKind::Mipo => "mipo",
        }
    }

    pub fn preference_method(&self) -> Option<PreferenceMethod> {
        match self {
            ObjectiveKind::Sft => None,
            ObjectiveKind::Dpo => Some(PreferenceMethod::Dpo),
            ObjectiveKind::Ipo => Some(PreferenceMethod::Ipo),
            ObjectiveKind::Mdpo => Some(PreferenceMethod::Mdpo),
            ObjectiveKind::Mipo => Some(PreferenceMethod::Mipo),
        }
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sft" => Ok(ObjectiveKind::Sft),
            "dpo" => Ok(ObjectiveKind::Dpo),
            "ipo" => Ok(ObjectiveKind::Ipo),
            "mdpo" => Ok(ObjectiveKind::Mdpo),
            "mipo" => Ok(ObjectiveKind::Mipo),
            other => Err(TrainError::InvalidConfig(format!(
                "unknown objective {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub adam: AdamParams,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub objective: ObjectiveKind,
    pub objective_config: ObjectiveConfig,
}

impl TrainConfig {
    /// Adam at the given rate, preference defaults for the objective.
    pub fn new(objective: ObjectiveKind, learning_rate: f64, steps: usize, seed: u64) -> Self {
        let method = objective
            .preference_method()
            .unwrap_or(PreferenceMethod::Mdpo);
        Self {
            optimizer: Optimizer::Adam,
            learning_rate,
            adam: AdamParams::default(),
            steps,
            batch_size: 16,
            seed,
            objective,
            objective_config: ObjectiveConfig::default_for(method),
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        // Zero is allowed: it runs the loop as an identity update, which is
        // a useful smoke contract (final parameters equal initial ones).
        if !(self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be non-negative".into(),
            ));
        }
        if self.steps == 0 {
            return Err(TrainError::InvalidConfig("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Either shape of training data the loop accepts.
#[derive(Debug, Clone)]
pub enum TrainingSet {
    Supervised(Vec<(IntervalPrompt, Response)>),
    Preference(Vec<PreferenceRecord>),
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        match self {
            TrainingSet::Supervised(v) => v.len(),
            TrainingSet::Preference(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Per-step log plus the final frozen policy.
#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub final_snapshot: PolicySnapshot,
}

fn check_compatibility(
    data: &TrainingSet,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    match (config.objective, data) {
        (ObjectiveKind::Sft, TrainingSet::Supervised(_)) => Ok(()),
        (ObjectiveKind::Sft, TrainingSet::Preference(_)) => {
            Err(TrainError::IncompatibleObjective {
                objective: "sft",
                reason: "expects (prompt, response) pairs, got preference records".into(),
            })
        }
        (kind, TrainingSet::Supervised(_)) => Err(TrainError::IncompatibleObjective {
            objective: kind.name(),
            reason: "expects preference records, got (prompt, response) pairs".into(),
        }),
        (kind, TrainingSet::Preference(records)) => {
            let method = kind.preference_method().expect("preference kind");
            if method.is_single_sample() {
                if let Some(bad) = records
                    .iter()
                    .find(|r| r.chosen.len() != 1 || r.rejected.len() != 1)
                {
                    return Err(TrainError::IncompatibleObjective {
                        objective: kind.name(),
                        reason: format!(
                            "requires k = 1 records, found groups of size ({}, {}) at prompt {}",
                            bad.chosen.len(),
                            bad.rejected.len(),
                            bad.prompt.id()
                        ),
                    });
                }
            }
            Ok(())
        }
    }
}

/// Run the training loop, mutating `policy` in place and returning the
/// per-step history with a final snapshot.
pub fn train(
    policy: &mut Policy,
    reference: Option<&PolicySnapshot>,
    data: &TrainingSet,
    config: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_compatibility(data, config)?;
    let method = config.objective.preference_method();
    if method.is_some() && reference.is_none() {
        return Err(TrainError::MissingReference);
    }

    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[SHUFFLE_TAG]));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // forces a shuffle before the first batch
    let mut grad = vec![0.0; policy.param_count()];
    let mut adam_state = AdamState::new(policy.param_count());
    let mut history = Vec::with_capacity(config.steps);

    for step in 1..=config.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let batch_len = config.batch_size.min(n).max(1);
        let weight = 1.0 / batch_len as f64;
        let mut loss_sum = 0.0;
        for _ in 0..batch_len {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            loss_sum += match (data, method) {
                (TrainingSet::Supervised(pairs), _) => {
                    let (prompt, response) = &pairs[idx];
                    accumulate_sft_example(policy, prompt, response, weight, &mut grad)?
                }
                (TrainingSet::Preference(records), Some(method)) => accumulate_composite(
                    policy,
                    reference.expect("checked above"),
                    &records[idx],
                    method,
                    &config.objective_config,
                    weight,
                    &mut grad,
                )?,
                (TrainingSet::Preference(_), None) => unreachable!("compatibility checked"),
            };
        }
        let loss = loss_sum * weight;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                loss,
                grad_norm,
            });
        }
        match config.optimizer {
            Optimizer::Sgd => {
                for (p, g) in policy.params_mut().iter_mut().zip(&grad) {
                    *p -= config.learning_rate * g;
                }
            }
            Optimizer::Adam => {
                adam_step(
                    policy.params_mut(),
                    &grad,
                    &mut adam_state,
                    config.learning_rate,
                    &config.adam,
                )?;
            }
        }
        history.push(StepRecord {
            step,
            loss,
            grad_norm,
        });
    }

    Ok(TrainHistory {
        steps: history,
        final_snapshot: policy.snapshot(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SampleGroup;

    fn prompt(id: usize, lo: usize, hi: usize) -> IntervalPrompt {
        IntervalPrompt::new(id, lo, hi).unwrap()
    }

    fn sft_config(lr: f64, steps: usize) -> TrainConfig {
        TrainConfig {
            optimizer: Optimizer::Sgd,
            ..TrainConfig::new(ObjectiveKind::Sft, lr, steps, 0)
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut params = vec![1.0, -2.0, 0.5];
        let grad = vec![0.0; 3];
        let mut state = AdamState::new(3);
        adam_step(&mut params, &grad, &mut state, 0.1, &AdamParams::default()).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = vec![0.0, 0.0];
        let grad = vec![3.0, -0.25];
        let mut state = AdamState::new(2);
        let lr = 0.05;
        adam_step(&mut params, &grad, &mut state, lr, &AdamParams::default()).unwrap();
        // Bias-corrected ratio is 1 at step 1, so each coordinate moves by
        // about lr against the gradient sign.
        assert!((params[0] + lr).abs() < 1e-8);
        assert!((params[1] - lr).abs() < 1e-7);
    }

    #[test]
    fn adam_two_steps_match_hand_rolled_reference() {
        let hp = AdamParams::default();
        let lr = 0.01;
        let mut params = vec![0.3];
        let mut state = AdamState::new(1);
        adam_step(&mut params, &[1.0], &mut state, lr, &hp).unwrap();
        adam_step(&mut params, &[1.0], &mut state, lr, &hp).unwrap();

        // Scalar reference computation.
        let mut p = 0.3;
        let mut m = 0.0;
        let mut v = 0.0;
        for step in 1..=2 {
            m = hp.beta1 * m + (1.0 - hp.beta1) * 1.0;
            v = hp.beta2 * v + (1.0 - hp.beta2) * 1.0;
            let m_hat = m / (1.0 - hp.beta1.powi(step));
            let v_hat = v / (1.0 - hp.beta2.powi(step));
            p -= lr * m_hat / (v_hat.sqrt() + hp.epsilon);
        }
        assert!((params[0] - p).abs() < 1e-12);
    }

    #[test]
    fn adam_shape_mismatch_errors() {
        let mut params = vec![0.0; 2];
        let mut state = AdamState::new(2);
        assert!(matches!(
            adam_step(&mut params, &[1.0], &mut state, 0.1, &AdamParams::default()),
            Err(TrainError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sgd_drives_single_pair_probability_toward_one() {
        let mut policy = Policy::tabular(10, &[0]).unwrap();
        let p = prompt(0, 0, 9);
        let data = TrainingSet::Supervised(vec![(p, Response::single(4))]);
        let config = TrainConfig {
            batch_size: 1,
            ..sft_config(0.5, 200)
        };
        let mut last = 0.0;
        let history = train(&mut policy, None, &data, &config).unwrap();
        let mut prev_prob = 0.1;
        for (i, record) in history.steps.iter().enumerate() {
            if i > 0 {
                assert!(record.loss <= history.steps[i - 1].loss + 1e-12);
            }
            last = record.loss;
        }
        let dist = policy.predictive_distribution(&p).unwrap();
        assert!(dist[4] > 0.9, "p = {}", dist[4]);
        assert!(last < 0.2);
        // Monotone probability growth on the trained token.
        let mut replay = Policy::tabular(10, &[0]).unwrap();
        for _ in 0..50 {
            let h = train(&mut replay, None, &data, &TrainConfig {
                batch_size: 1,
                ..sft_config(0.5, 1)
            })
            .unwrap();
            let prob = replay.predictive_distribution(&p).unwrap()[4];
            assert!(prob >= prev_prob);
            prev_prob = prob;
            let _ = h;
        }
    }

    #[test]
    fn zero_learning_rate_is_the_identity() {
        let mut policy = Policy::tabular(4, &[0]).unwrap();
        if let Policy::Tabular(t) = &mut policy {
            t.set_row(0, &[0.4, -0.2, 0.9, 0.0]).unwrap();
        }
        let before = policy.params().to_vec();
        let data = TrainingSet::Supervised(vec![(prompt(0, 0, 3), Response::single(1))]);
        train(&mut policy, None, &data, &sft_config(0.0, 5)).unwrap();
        assert_eq!(policy.params(), before.as_slice());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut policy = Policy::tabular(4, &[0]).unwrap();
        let data = TrainingSet::Supervised(vec![(prompt(0, 0, 3), Response::single(1))]);
        assert!(train(&mut policy, None, &data, &sft_config(-0.1, 5)).is_err());
        assert!(train(&mut policy, None, &data, &sft_config(0.1, 0)).is_err());
        let empty = TrainingSet::Supervised(vec![]);
        assert!(matches!(
            train(&mut policy, None, &empty, &sft_config(0.1, 5)),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let prompts: Vec<IntervalPrompt> = (0..6).map(|i| prompt(i, 0, 9)).collect();
        let data = TrainingSet::Supervised(
            prompts
                .iter()
                .enumerate()
                .map(|(i, p)| (*p, Response::single(i % 10)))
                .collect(),
        );
        let config = TrainConfig {
            batch_size: 4,
            ..TrainConfig::new(ObjectiveKind::Sft, 0.1, 25, 42)
        };
        let mut a = Policy::tabular(10, &(0..6).collect::<Vec<_>>()).unwrap();
        let mut b = Policy::tabular(10, &(0..6).collect::<Vec<_>>()).unwrap();
        let ha = train(&mut a, None, &data, &config).unwrap();
        let hb = train(&mut b, None, &data, &config).unwrap();
        assert_eq!(a, b);
        for (ra, rb) in ha.steps.iter().zip(&hb.steps) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.grad_norm.to_bits(), rb.grad_norm.to_bits());
        }
    }

    #[test]
    fn incompatible_objective_and_dataset_error() {
        let mut policy = Policy::tabular(10, &[0]).unwrap();
        let reference = policy.snapshot();
        let p = prompt(0, 0, 9);
        let pairs = TrainingSet::Supervised(vec![(p, Response::single(1))]);
        let cfg = TrainConfig::new(ObjectiveKind::Mdpo, 0.1, 1, 0);
        assert!(matches!(
            train(&mut policy, Some(&reference), &pairs, &cfg),
            Err(TrainError::IncompatibleObjective { .. })
        ));

        let group = SampleGroup::new(vec![Response::single(1), Response::single(2)]).unwrap();
        let records = TrainingSet::Preference(vec![PreferenceRecord::new(
            p,
            group.clone(),
            group,
        )]);
        let cfg = TrainConfig::new(ObjectiveKind::Dpo, 0.1, 1, 0);
        assert!(matches!(
            train(&mut policy, Some(&reference), &records, &cfg),
            Err(TrainError::IncompatibleObjective { .. })
        ));

        let cfg = TrainConfig::new(ObjectiveKind::Sft, 0.1, 1, 0);
        assert!(matches!(
            train(&mut policy, None, &records, &cfg),
            Err(TrainError::IncompatibleObjective { .. })
        ));

        let cfg = TrainConfig::new(ObjectiveKind::Mdpo, 0.1, 1, 0);
        assert!(matches!(
            train(&mut policy, None, &records, &cfg),
            Err(TrainError::MissingReference)
        ));
    }

    #[test]
    fn mdpo_descends_on_a_spread_vs_point_record() {
        let mut policy = Policy::tabular(20, &[0]).unwrap();
        // A mildly trained starting point so the margin is not exactly zero.
        let reference = policy.snapshot();
        let p = prompt(0, 4, 9);
        let chosen = SampleGroup::new(
            (4..=9).map(Response::single).collect::<Vec<_>>(),
        )
        .unwrap();
        let rejected = SampleGroup::new(vec![Response::single(7); 6]).unwrap();
        let records = TrainingSet::Preference(vec![PreferenceRecord::new(p, chosen, rejected)]);
        let config = TrainConfig {
            optimizer: Optimizer::Sgd,
            batch_size: 1,
            objective_config: ObjectiveConfig {
                beta: 1.0,
                tau: 0.1,
                nll_coeff: 0.0,
                variance_correction: false,
            },
            ..TrainConfig::new(ObjectiveKind::Mdpo, 0.1, 50, 1)
        };
        let history = train(&mut policy, Some(&reference), &records, &config).unwrap();
        for pair in history.steps.windows(2) {
            assert!(pair[1].loss < pair[0].loss, "loss must strictly decrease");
        }
    }

    #[test]
    fn history_length_matches_steps_and_losses_finite() {
        let mut policy = Policy::tabular(10, &[0, 1]).unwrap();
        let reference = policy.snapshot();
        let p0 = prompt(0, 0, 9);
        let p1 = prompt(1, 0, 9);
        let records = TrainingSet::Preference(vec![
            PreferenceRecord::new(
                p0,
                SampleGroup::new(vec![Response::single(0), Response::single(3)]).unwrap(),
                SampleGroup::new(vec![Response::single(7), Response::single(7)]).unwrap(),
            ),
            PreferenceRecord::new(
                p1,
                SampleGroup::new(vec![Response::single(2), Response::single(8)]).unwrap(),
                SampleGroup::new(vec![Response::single(5), Response::single(5)]).unwrap(),
            ),
        ]);
        let config = TrainConfig {
            batch_size: 2,
            ..TrainConfig::new(ObjectiveKind::Mipo, 0.05, 12, 9)
        };
        let history = train(&mut policy, Some(&reference), &records, &config).unwrap();
        assert_eq!(history.steps.len(), 12);
        assert!(history.steps.iter().all(|r| r.loss.is_finite()));
        // Snapshot equals the trained policy.
        assert_eq!(history.final_snapshot.policy(), &policy);
    }
}
