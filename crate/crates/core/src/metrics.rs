//! Calibration and diversity metrics: entropy, KL to uniform, entropy win
//! rates, Simpson diversity index, distinct-n.

use std::collections::HashSet;
use std::hash::Hash;

use serde::Serialize;
use thiserror::Error;

use crate::model::{IntervalPrompt, ModelError, Policy};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("distribution entries must be non-negative (entry {index} = {value})")]
    NegativeEntry { index: usize, value: f64 },
    #[error("distribution must sum to 1 within 1e-9 (got {sum})")]
    NotNormalized { sum: f64 },
    #[error("support size {support} is smaller than the distribution length {len}")]
    SupportTooSmall { support: usize, len: usize },
    #[error("counts must total at least 1")]
    EmptyCounts,
    #[error("n must be at least 1")]
    ZeroNgramOrder,
    #[error("no n-grams of order {n} available")]
    NoNgrams { n: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check_distribution(dist: &[f64]) -> Result<(), MetricsError> {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for (index, &value) in dist.iter().enumerate() {
        if value < 0.0 {
            return Err(MetricsError::NegativeEntry { index, value });
        }
        // Kahan summation keeps the normalization check sharp on long vectors.
        let y = value - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(MetricsError::NotNormalized { sum });
    }
    Ok(())
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> Result<f64, MetricsError> {
    check_distribution(dist)?;
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &p in dist {
        if p > 0.0 {
            let term = -p * p.ln();
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
    }
    Ok(sum)
}

/// `KL(p || U) = ln(support_size) - H(p)`, the calibration distance used to
/// score predictive distributions against the uniform target. Entries beyond
/// `dist.len()` are treated as zero.
pub fn kl_to_uniform(dist: &[f64], support_size: usize) -> Result<f64, MetricsError> {
    if support_size < dist.len() {
        return Err(MetricsError::SupportTooSmall {
            support: support_size,
            len: dist.len(),
        });
    }
    Ok((support_size as f64).ln() - entropy(dist)?)
}

/// Category counts for the Simpson index; the total must be at least 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CategoryCounts {
    counts: Vec<u64>,
}

impl CategoryCounts {
    pub fn new(counts: Vec<u64>) -> Result<Self, MetricsError> {
        if counts.iter().sum::<u64>() == 0 {
            return Err(MetricsError::EmptyCounts);
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Simpson diversity index `D = 1 - sum_i (n_i / N)^2`.
pub fn simpson_index(counts: &CategoryCounts) -> f64 {
    let total = counts.total() as f64;
    let concentration: f64 = counts
        .counts()
        .iter()
        .map(|&n| {
            let share = n as f64 / total;
            share * share
        })
        .sum();
    1.0 - concentration
}

/// Distinct n-gram count over total n-gram count, pooled across all texts.
pub fn distinct_n<T: Eq + Hash>(texts: &[Vec<T>], n: usize) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::ZeroNgramOrder);
    }
    let mut total = 0usize;
    let mut seen: HashSet<&[T]> = HashSet::new();
    for text in texts {
        if text.len() >= n {
            for window in text.windows(n) {
                seen.insert(window);
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(MetricsError::NoNgrams { n });
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Which part of the vocabulary an entropy comparison looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SupportMode {
    /// The whole vocabulary.
    FullVocab,
    /// The prompt's interval, renormalized — the view the task cares about.
    IntervalRestricted,
}

/// Outcome counts of a per-prompt comparison. Ties stay in the denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WinRateReport {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

impl WinRateReport {
    pub fn total(&self) -> usize {
        self.wins + self.losses + self.ties
    }

    pub fn win_rate(&self) -> f64 {
        self.wins as f64 / self.total() as f64
    }
}

/// Predictive distribution restricted to the prompt's interval and
/// renormalized. Softmax probabilities are never exactly zero, so the
/// restriction always has positive mass.
pub fn restricted_distribution(
    policy: &Policy,
    prompt: &IntervalPrompt,
) -> Result<Vec<f64>, MetricsError> {
    let full = policy.predictive_distribution(prompt)?;
    let mut slice = full[prompt.lo()..=prompt.hi()].to_vec();
    let mass: f64 = slice.iter().sum();
    for p in &mut slice {
        *p /= mass;
    }
    Ok(slice)
}

/// Probability mass the policy places outside the prompt's interval.
pub fn out_of_interval_mass(
    policy: &Policy,
    prompt: &IntervalPrompt,
) -> Result<f64, MetricsError> {
    let full = policy.predictive_distribution(prompt)?;
    let inside: f64 = full[prompt.lo()..=prompt.hi()].iter().sum();
    Ok((1.0 - inside).max(0.0))
}

fn support_entropy(
    policy: &Policy,
    prompt: &IntervalPrompt,
    support: SupportMode,
) -> Result<f64, MetricsError> {
    match support {
        SupportMode::FullVocab => entropy(&policy.predictive_distribution(prompt)?),
        SupportMode::IntervalRestricted => entropy(&restricted_distribution(policy, prompt)?),
    }
}

/// Per-prompt entropy comparison of two policies: strictly greater entropy
/// for `policy_a` counts as a win, exact equality as a tie.
pub fn entropy_win_rate(
    policy_a: &Policy,
    policy_b: &Policy,
    prompts: &[IntervalPrompt],
    support: SupportMode,
) -> Result<WinRateReport, MetricsError> {
    let mut report = WinRateReport {
        wins: 0,
        losses: 0,
        ties: 0,
    };
    for prompt in prompts {
        let ha = support_entropy(policy_a, prompt, support)?;
        let hb = support_entropy(policy_b, prompt, support)?;
        if ha > hb {
            report.wins += 1;
        } else if ha < hb {
            report.losses += 1;
        } else {
            report.ties += 1;
        }
    }
    Ok(report)
}
