//! Shared oracles for integration tests. These stay independent of the
//! library's gradient path: they only call loss evaluations.

use mspo_core::model::{IntervalPrompt, Policy, PreferenceRecord, Response, SampleGroup};
use rand::Rng;

/// Central finite differences of `f` at `policy`'s parameters.
pub fn central_difference<F>(policy: &Policy, step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&Policy) -> f64,
{
    let mut grad = vec![0.0; policy.param_count()];
    for (i, slot) in grad.iter_mut().enumerate() {
        let mut plus = policy.clone();
        plus.params_mut()[i] += step;
        let mut minus = policy.clone();
        minus.params_mut()[i] -= step;
        *slot = (f(&plus) - f(&minus)) / (2.0 * step);
    }
    grad
}

/// Euclidean relative error between an analytic gradient and its oracle.
/// Locally flat objectives (both norms at noise level) compare equal: there
/// the finite-difference signal is pure rounding noise.
pub fn relative_error(analytic: &[f64], oracle: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(oracle)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = oracle.iter().map(|b| b * b).sum::<f64>().sqrt();
    let analytic_scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    if scale < 1e-6 && analytic_scale < 1e-6 {
        return 0.0;
    }
    diff / scale.max(1e-12)
}

/// Random small policy (tabular or linear) with perturbed parameters.
pub fn random_policy<R: Rng>(rng: &mut R, vocab: usize, prompt_count: usize) -> Policy {
    let tabular = rng.gen_bool(0.5);
    random_policy_of(rng, vocab, prompt_count, tabular)
}

fn random_policy_of<R: Rng>(
    rng: &mut R,
    vocab: usize,
    prompt_count: usize,
    tabular: bool,
) -> Policy {
    let mut policy = if tabular {
        Policy::tabular(vocab, &(0..prompt_count).collect::<Vec<_>>()).unwrap()
    } else {
        Policy::linear(vocab)
    };
    for p in policy.params_mut() {
        *p = rng.gen_range(-1.5..1.5);
    }
    policy
}

/// A (policy, reference) pair of the same family over the same prompts.
pub fn random_policy_pair<R: Rng>(
    rng: &mut R,
    vocab: usize,
    prompt_count: usize,
) -> (Policy, Policy) {
    let tabular = rng.gen_bool(0.5);
    (
        random_policy_of(rng, vocab, prompt_count, tabular),
        random_policy_of(rng, vocab, prompt_count, tabular),
    )
}

pub fn random_prompt<R: Rng>(rng: &mut R, vocab: usize, prompt_count: usize) -> IntervalPrompt {
    let id = rng.gen_range(0..prompt_count);
    let lo = rng.gen_range(0..vocab - 1);
    let hi = rng.gen_range(lo..vocab);
    IntervalPrompt::new(id, lo, hi).unwrap()
}

pub fn random_group<R: Rng>(rng: &mut R, vocab: usize, size: usize) -> SampleGroup {
    let responses = (0..size)
        .map(|_| Response::single(rng.gen_range(0..vocab)))
        .collect();
    SampleGroup::new(responses).unwrap()
}

pub fn random_record<R: Rng>(
    rng: &mut R,
    vocab: usize,
    prompt_count: usize,
    chosen_size: usize,
    rejected_size: usize,
) -> PreferenceRecord {
    let prompt = random_prompt(rng, vocab, prompt_count);
    PreferenceRecord::new(
        prompt,
        random_group(rng, vocab, chosen_size),
        random_group(rng, vocab, rejected_size),
    )
}
