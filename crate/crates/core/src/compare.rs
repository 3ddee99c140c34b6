//! Group preference probabilities, group-sum labeling, and the Hoeffding
//! argument for multi-sample label accuracy.

use rand::distributions::{Distribution, Uniform as UniformDist};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectives::sigmoid;
use crate::seeding::derive_seed;

const LABEL_STUDY_TAG: u64 = 0x43_4D_50_31; // "CMP1"

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("unknown link function {0:?}")]
    UnknownLink(String),
    #[error("score lists must have equal length (got {xs} and {ys})")]
    LengthMismatch { xs: usize, ys: usize },
    #[error("score lists must be non-empty")]
    EmptyScores,
    #[error("delta and range width must be positive (delta {delta}, width {width})")]
    InvalidBoundArgs { delta: f64, width: f64 },
    #[error("k must be at least 1")]
    ZeroGroupSize,
    #[error("invalid quality distribution: {0}")]
    InvalidDistribution(String),
    #[error("remark precondition violated: E[X] = {mean_x} must exceed E[Y] = {mean_y}")]
    RemarkPrecondition { mean_x: f64, mean_y: f64 },
    #[error("trials must be at least 1")]
    ZeroTrials,
}

/// Link function mapping a reward margin to a preference probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PreferenceLink {
    Sigmoid,
}

impl std::str::FromStr for PreferenceLink {
    type Err = CompareError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigmoid" => Ok(PreferenceLink::Sigmoid),
            other => Err(CompareError::UnknownLink(other.to_string())),
        }
    }
}

/// `p(G_w >= G_l | x) = Phi(margin)` with the Bradley-Terry sigmoid link.
pub fn group_pref_prob(margin: f64, link: PreferenceLink) -> f64 {
    match link {
        PreferenceLink::Sigmoid => sigmoid(margin),
    }
}

/// True iff the group sums satisfy `sum(xs) > sum(ys)` strictly; ties label
/// false, matching the event `{sum Z_i > 0}` exactly.
pub fn label_by_group_sum(xs: &[f64], ys: &[f64]) -> Result<bool, CompareError> {
    if xs.len() != ys.len() {
        return Err(CompareError::LengthMismatch {
            xs: xs.len(),
            ys: ys.len(),
        });
    }
    if xs.is_empty() {
        return Err(CompareError::EmptyScores);
    }
    Ok(xs.iter().sum::<f64>() > ys.iter().sum::<f64>())
}

/// `max(0, 1 - exp(-2 k delta^2 / width^2))`, the lower bound on the
/// probability that k-sample group sums order two bounded variables whose
/// means differ by `delta` and whose difference has range `width`.
pub fn hoeffding_lower_bound(
    delta: f64,
    range_width: f64,
    k: usize,
) -> Result<f64, CompareError> {
    if !(delta > 0.0) || !(range_width > 0.0) {
        return Err(CompareError::InvalidBoundArgs {
            delta,
            width: range_width,
        });
    }
    if k == 0 {
        return Err(CompareError::ZeroGroupSize);
    }
    let exponent = -2.0 * k as f64 * delta * delta / (range_width * range_width);
    Ok((1.0 - exponent.exp()).max(0.0))
}

/// Bounded quality-score distribution for one synthetic labeler arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QualityFamily {
    /// Continuous uniform on `[lo, hi]`; `lo == hi` is the point mass at `lo`.
    Uniform { lo: f64, hi: f64 },
    /// Takes value `scale` with probability `p`, else 0.
    BernoulliScaled { p: f64, scale: f64 },
    /// Finite support with `(value, probability)` atoms.
    Discrete { atoms: Vec<(f64, f64)> },
}

/// A validated quality distribution with its support bounds materialized —
/// the `[a, b]` that the Hoeffding argument needs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityDistribution {
    family: QualityFamily,
    lo: f64,
    hi: f64,
}

impl QualityDistribution {
    pub fn new(family: QualityFamily) -> Result<Self, CompareError> {
        let (lo, hi) = match &family {
            QualityFamily::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo > hi {
                    return Err(CompareError::InvalidDistribution(format!(
                        "uniform bounds [{lo}, {hi}]"
                    )));
                }
                (*lo, *hi)
            }
            QualityFamily::BernoulliScaled { p, scale } => {
                if !(0.0..=1.0).contains(p) || !scale.is_finite() {
                    return Err(CompareError::InvalidDistribution(format!(
                        "bernoulli p {p}, scale {scale}"
                    )));
                }
                (scale.min(0.0), scale.max(0.0))
            }
            QualityFamily::Discrete { atoms } => {
                if atoms.is_empty() {
                    return Err(CompareError::InvalidDistribution("no atoms".into()));
                }
                let total: f64 = atoms.iter().map(|(_, p)| p).sum();
                if atoms.iter().any(|(v, p)| !v.is_finite() || *p < 0.0)
                    || (total - 1.0).abs() > 1e-9
                {
                    return Err(CompareError::InvalidDistribution(
                        "atom probabilities must be non-negative and sum to 1".into(),
                    ));
                }
                let lo = atoms.iter().map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
                let hi = atoms
                    .iter()
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
        };
        Ok(Self { family, lo, hi })
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self, CompareError> {
        Self::new(QualityFamily::Uniform { lo, hi })
    }

    pub fn point_mass(value: f64) -> Result<Self, CompareError> {
        Self::new(QualityFamily::Uniform { lo: value, hi: value })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    /// Closed-form mean.
    pub fn mean(&self) -> f64 {
        match &self.family {
            QualityFamily::Uniform { lo, hi } => 0.5 * (lo + hi),
            QualityFamily::BernoulliScaled { p, scale } => p * scale,
            QualityFamily::Discrete { atoms } => atoms.iter().map(|(v, p)| v * p).sum(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.family {
            QualityFamily::Uniform { lo, hi } => {
                if lo == hi {
                    *lo
                } else {
                    UniformDist::new_inclusive(*lo, *hi).sample(rng)
                }
            }
            QualityFamily::BernoulliScaled { p, scale } => {
                if rng.gen::<f64>() < *p {
                    *scale
                } else {
                    0.0
                }
            }
            QualityFamily::Discrete { atoms } => {
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
                atoms[idx].0
            }
        }
    }
}

/// One row of the label-accuracy study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelStudyResult {
    pub k: usize,
    pub empirical_accuracy: f64,
    pub hoeffding_bound: f64,
    pub trials: usize,
}

/// Fraction of trials in which the k-sample group sum correctly orders X
/// above Y, alongside the Hoeffding lower bound at the same k.
///
/// Requires `E[X] > E[Y]` (validated from closed-form means). For a
/// degenerate difference range (two point masses) the bound collapses to its
/// limit value 1.
pub fn empirical_correct_label_rate(
    x: &QualityDistribution,
    y: &QualityDistribution,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<LabelStudyResult, CompareError> {
    if k == 0 {
        return Err(CompareError::ZeroGroupSize);
    }
    if trials == 0 {
        return Err(CompareError::ZeroTrials);
    }
    let delta = x.mean() - y.mean();
    if !(delta > 0.0) {
        return Err(CompareError::RemarkPrecondition {
            mean_x: x.mean(),
            mean_y: y.mean(),
        });
    }
    // Width of Z = X - Y: (hi_X - lo_Y) - (lo_X - hi_Y).
    let width = (x.hi() - y.lo()) - (x.lo() - y.hi());
    let hoeffding_bound = if width > 0.0 {
        hoeffding_lower_bound(delta, width, k)?
    } else {
        1.0
    };
    let mut correct = vec![false; trials];
    correct
        .par_iter_mut()
        .enumerate()
        .for_each(|(trial, slot)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &[LABEL_STUDY_TAG, k as u64, trial as u64],
            ));
            let xs: Vec<f64> = (0..k).map(|_| x.sample(&mut rng)).collect();
            let ys: Vec<f64> = (0..k).map(|_| y.sample(&mut rng)).collect();
            *slot = label_by_group_sum(&xs, &ys).expect("equal lengths by construction");
        });
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(LabelStudyResult {
        k,
        empirical_accuracy: hits as f64 / trials as f64,
        hoeffding_bound,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::str::FromStr;

    #[test]
    fn pref_prob_examples() {
        assert_eq!(group_pref_prob(0.0, PreferenceLink::Sigmoid), 0.5);
        assert!(group_pref_prob(1e3, PreferenceLink::Sigmoid) >= 1.0 - 1e-300);
        let p = group_pref_prob(3.0f64.ln(), PreferenceLink::Sigmoid);
        assert!((p - 0.75).abs() < 1e-12);
    }

    #[test]
    fn pref_prob_complement_identity() {
        for m in [-4.0, -0.5, 0.0, 0.3, 2.7] {
            let a = group_pref_prob(m, PreferenceLink::Sigmoid);
            let b = group_pref_prob(-m, PreferenceLink::Sigmoid);
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_link_errors() {
        assert!(PreferenceLink::from_str("sigmoid").is_ok());
        assert!(matches!(
            PreferenceLink::from_str("probit"),
            Err(CompareError::UnknownLink(_))
        ));
    }

    #[test]
    fn group_sum_label_examples() {
        assert!(!label_by_group_sum(&[0.3, 0.7], &[0.3, 0.7]).unwrap());
        assert!(label_by_group_sum(&[1.0, 1.0], &[0.0, 0.0]).unwrap());
        assert!(!label_by_group_sum(&[0.4, 0.4], &[0.9, 0.0]).unwrap());
        assert!(matches!(
            label_by_group_sum(&[1.0], &[1.0, 2.0]),
            Err(CompareError::LengthMismatch { .. })
        ));
        assert!(matches!(
            label_by_group_sum(&[], &[]),
            Err(CompareError::EmptyScores)
        ));
    }

    #[test]
    fn group_sum_label_is_antisymmetric_except_ties() {
        let xs = [0.2, 0.9, 0.1];
        let ys = [0.5, 0.3, 0.2];
        let fwd = label_by_group_sum(&xs, &ys).unwrap();
        let rev = label_by_group_sum(&ys, &xs).unwrap();
        assert_ne!(fwd, rev);
    }

    #[test]
    fn hoeffding_bound_examples() {
        let b = hoeffding_lower_bound(0.5, 1.0, 8).unwrap();
        assert!((b - (1.0 - (-4.0f64).exp())).abs() < 1e-15);
        assert!((b - 0.981684).abs() < 1e-6);

        let tiny = hoeffding_lower_bound(1e-12, 1.0, 1).unwrap();
        assert!(tiny >= 0.0 && tiny < 1e-9);

        assert!(hoeffding_lower_bound(0.0, 1.0, 1).is_err());
        assert!(hoeffding_lower_bound(0.5, 0.0, 1).is_err());
        assert!(hoeffding_lower_bound(0.5, 1.0, 0).is_err());
    }

    #[test]
    fn hoeffding_bound_nondecreasing_in_k() {
        for &(delta, width) in &[(0.1, 1.0), (0.5, 2.0), (0.02, 0.5)] {
            let mut prev = 0.0;
            for k in 1..=10_000 {
                let b = hoeffding_lower_bound(delta, width, k).unwrap();
                assert!(b >= prev);
                prev = b;
            }
        }
    }

    #[test]
    fn point_mass_pair_is_always_correct() {
        let x = QualityDistribution::point_mass(1.0).unwrap();
        let y = QualityDistribution::point_mass(0.0).unwrap();
        for k in [1, 2, 7] {
            let r = empirical_correct_label_rate(&x, &y, k, 500, 5).unwrap();
            assert_eq!(r.empirical_accuracy, 1.0);
            assert_eq!(r.hoeffding_bound, 1.0);
        }
    }

    #[test]
    fn remark_precondition_is_enforced() {
        let x = QualityDistribution::uniform(0.0, 1.0).unwrap();
        let y = QualityDistribution::uniform(0.0, 1.0).unwrap();
        assert!(matches!(
            empirical_correct_label_rate(&x, &y, 2, 10, 0),
            Err(CompareError::RemarkPrecondition { .. })
        ));
    }

    #[test]
    fn shifted_uniform_accuracy_grows_with_k() {
        let x = QualityDistribution::uniform(0.2, 1.2).unwrap();
        let y = QualityDistribution::uniform(0.0, 1.0).unwrap();
        let r1 = empirical_correct_label_rate(&x, &y, 1, 20_000, 7).unwrap();
        let r16 = empirical_correct_label_rate(&x, &y, 16, 20_000, 7).unwrap();
        assert!(r16.empirical_accuracy > r1.empirical_accuracy + 0.05);
        // CLT cross-check: accuracy(k) ~ Phi(0.2 sqrt(k) / sqrt(1/6)).
        assert!((r1.empirical_accuracy - 0.69).abs() < 0.02);
        assert!((r16.empirical_accuracy - 0.975).abs() < 0.01);
        // Bound holds below the empirical rate (plus MC slack).
        for r in [&r1, &r16] {
            let se = (r.empirical_accuracy * (1.0 - r.empirical_accuracy)
                / r.trials as f64)
                .sqrt();
            assert!(r.hoeffding_bound <= r.empirical_accuracy + 3.0 * se);
        }
    }

    #[test]
    fn bernoulli_and_discrete_families() {
        let b = QualityDistribution::new(QualityFamily::BernoulliScaled { p: 0.25, scale: 2.0 })
            .unwrap();
        assert_eq!(b.mean(), 0.5);
        assert_eq!((b.lo(), b.hi()), (0.0, 2.0));

        let d = QualityDistribution::new(QualityFamily::Discrete {
            atoms: vec![(1.0, 0.5), (3.0, 0.25), (-1.0, 0.25)],
        })
        .unwrap();
        assert_eq!(d.mean(), 1.0);
        assert_eq!((d.lo(), d.hi()), (-1.0, 3.0));

        assert!(QualityDistribution::new(QualityFamily::BernoulliScaled {
            p: 1.5,
            scale: 1.0
        })
        .is_err());
        assert!(
            QualityDistribution::new(QualityFamily::Discrete { atoms: vec![(0.0, 0.4)] }).is_err()
        );
    }

    #[test]
    fn study_is_deterministic_per_seed() {
        let x = QualityDistribution::uniform(0.3, 1.0).unwrap();
        let y = QualityDistribution::uniform(0.0, 1.0).unwrap();
        let a = empirical_correct_label_rate(&x, &y, 4, 2000, 11).unwrap();
        let b = empirical_correct_label_rate(&x, &y, 4, 2000, 11).unwrap();
        assert_eq!(a, b);
    }
}
