//! Random-interval preference dataset construction and JSONL persistence.
//!
//! Chosen groups are uniform draws from the prompt interval; rejected groups
//! come from a configurable non-uniform family over the same interval. One
//! JSONL line per record:
//! `{"prompt":{"id":..,"lo":..,"hi":..},"chosen":[[..],..],"rejected":[[..],..]}`

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use mspo_core::model::{
    IntervalPrompt, ModelError, PreferenceRecord, Response, SampleGroup, DEFAULT_VOCAB_SIZE,
};
use mspo_core::seeding::derive_seed;

const DATASET_TAG: u64 = 0x44_41_54_31; // "DAT1"

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// How rejected groups are distributed over the prompt interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RejectedFamily {
    /// Every rejected response is the interval's echo token.
    PointMass,
    /// Geometric tilt with the given ratio per offset from `lo`.
    GeometricTilt { ratio: f64 },
    /// Echo token with probability `point_weight`, else uniform in range.
    Mixture { point_weight: f64 },
}

impl std::str::FromStr for RejectedFamily {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "point-mass" => Ok(RejectedFamily::PointMass),
            "geometric-tilt" => Ok(RejectedFamily::GeometricTilt { ratio: 0.5 }),
            "mixture" => Ok(RejectedFamily::Mixture { point_weight: 0.6 }),
            other => Err(DatasetError::InvalidConfig(format!(
                "unknown rejected family {other:?}"
            ))),
        }
    }
}

/// Interval construction: bounded gaps for training, free `a < b` for the
/// generalization split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum IntervalSampling {
    BoundedGap { gap_lo: usize, gap_hi: usize },
    Unconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngDatasetConfig {
    pub records: usize,
    /// Responses per group (k).
    pub group_size: usize,
    /// Interval start `a` is drawn uniformly from `0..=a_max`.
    pub a_max: usize,
    pub sampling: IntervalSampling,
    pub rejected_family: RejectedFamily,
    pub vocab_size: usize,
    pub seed: u64,
}

impl RngDatasetConfig {
    /// Training construction: 3000 records, k = 5, gaps in [5, 10].
    pub fn train_default(seed: u64) -> Self {
        Self {
            records: 3000,
            group_size: 5,
            a_max: 1000,
            sampling: IntervalSampling::BoundedGap {
                gap_lo: 5,
                gap_hi: 10,
            },
            rejected_family: RejectedFamily::PointMass,
            vocab_size: DEFAULT_VOCAB_SIZE,
            seed,
        }
    }

    /// Held-out construction: 100 records with unconstrained gaps.
    pub fn test_default(seed: u64) -> Self {
        Self {
            records: 100,
            sampling: IntervalSampling::Unconstrained,
            ..Self::train_default(seed)
        }
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.records == 0 || self.group_size == 0 {
            return Err(DatasetError::InvalidConfig(
                "records and group_size must be at least 1".into(),
            ));
        }
        let max_hi = match self.sampling {
            IntervalSampling::BoundedGap { gap_lo, gap_hi } => {
                if gap_lo > gap_hi || gap_lo == 0 {
                    return Err(DatasetError::InvalidConfig(format!(
                        "gap range [{gap_lo}, {gap_hi}] is invalid"
                    )));
                }
                self.a_max + gap_hi
            }
            IntervalSampling::Unconstrained => {
                if self.a_max == 0 {
                    return Err(DatasetError::InvalidConfig(
                        "a_max must allow a < b".into(),
                    ));
                }
                self.a_max
            }
        };
        if max_hi >= self.vocab_size {
            return Err(DatasetError::InvalidConfig(format!(
                "intervals up to {max_hi} do not fit vocab size {}",
                self.vocab_size
            )));
        }
        if let RejectedFamily::GeometricTilt { ratio } = self.rejected_family {
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(DatasetError::InvalidConfig(format!(
                    "geometric tilt ratio {ratio} must lie in (0, 1]"
                )));
            }
        }
        if let RejectedFamily::Mixture { point_weight } = self.rejected_family {
            if !(0.0..=1.0).contains(&point_weight) {
                return Err(DatasetError::InvalidConfig(format!(
                    "mixture point weight {point_weight} must lie in [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// The deterministic per-interval echo token `lo + (7 mod width)`, standing
/// in for the "favors 7" failure mode the task is built around.
pub fn bias_token(prompt: &IntervalPrompt) -> usize {
    prompt.lo() + (7 % prompt.width())
}

fn sample_interval<R: Rng>(
    rng: &mut R,
    config: &RngDatasetConfig,
    id: usize,
) -> Result<IntervalPrompt, DatasetError> {
    let (lo, hi) = match config.sampling {
        IntervalSampling::BoundedGap { gap_lo, gap_hi } => {
            let a = rng.gen_range(0..=config.a_max);
            let gap = rng.gen_range(gap_lo..=gap_hi);
            (a, a + gap)
        }
        IntervalSampling::Unconstrained => {
            let a = rng.gen_range(0..config.a_max);
            let b = rng.gen_range(a + 1..=config.a_max);
            (a, b)
        }
    };
    Ok(IntervalPrompt::new(id, lo, hi)?)
}

fn sample_rejected<R: Rng>(
    rng: &mut R,
    prompt: &IntervalPrompt,
    family: RejectedFamily,
    count: usize,
) -> SampleGroup {
    let echo = bias_token(prompt);
    let responses = (0..count)
        .map(|_| {
            let token = match family {
                RejectedFamily::PointMass => echo,
                RejectedFamily::GeometricTilt { ratio } => {
                    // Inverse-CDF draw over weights ratio^offset.
                    let width = prompt.width();
                    let total: f64 = (0..width).map(|o| ratio.powi(o as i32)).sum();
                    let u: f64 = rng.gen::<f64>() * total;
                    let mut acc = 0.0;
                    let mut offset = width - 1;
                    for o in 0..width {
                        acc += ratio.powi(o as i32);
                        if u < acc {
                            offset = o;
                            break;
                        }
                    }
                    prompt.lo() + offset
                }
                RejectedFamily::Mixture { point_weight } => {
                    if rng.gen::<f64>() < point_weight {
                        echo
                    } else {
                        rng.gen_range(prompt.lo()..=prompt.hi())
                    }
                }
            };
            Response::single(token)
        })
        .collect();
    SampleGroup::new(responses).expect("count >= 1")
}

/// Build the preference dataset. Record `i` draws from an RNG derived from
/// `(seed, i)`, so records are reproducible independently of each other.
pub fn build_rng_dataset(config: &RngDatasetConfig) -> Result<Vec<PreferenceRecord>, DatasetError> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.records);
    for id in 0..config.records {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[DATASET_TAG, id as u64]));
        let prompt = sample_interval(&mut rng, config, id)?;
        let chosen = SampleGroup::new(
            (0..config.group_size)
                .map(|_| Response::single(rng.gen_range(prompt.lo()..=prompt.hi())))
                .collect(),
        )
        .expect("group_size >= 1");
        let rejected = sample_rejected(&mut rng, &prompt, config.rejected_family, config.group_size);
        records.push(PreferenceRecord::new(prompt, chosen, rejected));
    }
    Ok(records)
}

#[derive(Serialize, Deserialize)]
struct PromptDoc {
    id: usize,
    lo: usize,
    hi: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordDoc {
    prompt: PromptDoc,
    chosen: Vec<Vec<usize>>,
    rejected: Vec<Vec<usize>>,
}

fn to_doc(record: &PreferenceRecord) -> RecordDoc {
    let tokens = |group: &SampleGroup| {
        group
            .responses()
            .iter()
            .map(|r| r.tokens().to_vec())
            .collect()
    };
    RecordDoc {
        prompt: PromptDoc {
            id: record.prompt.id(),
            lo: record.prompt.lo(),
            hi: record.prompt.hi(),
        },
        chosen: tokens(&record.chosen),
        rejected: tokens(&record.rejected),
    }
}

fn from_doc(doc: RecordDoc, line: usize) -> Result<PreferenceRecord, DatasetError> {
    let bad = |reason: String| DatasetError::MalformedRecord { line, reason };
    let prompt = IntervalPrompt::new(doc.prompt.id, doc.prompt.lo, doc.prompt.hi)
        .map_err(|e| bad(e.to_string()))?;
    let group = |token_lists: Vec<Vec<usize>>| -> Result<SampleGroup, DatasetError> {
        let responses = token_lists
            .into_iter()
            .map(|tokens| Response::new(tokens).map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        SampleGroup::new(responses).map_err(|e| bad(e.to_string()))
    };
    Ok(PreferenceRecord::new(
        prompt,
        group(doc.chosen)?,
        group(doc.rejected)?,
    ))
}

/// Write one record per line, UTF-8, LF terminators.
pub fn write_records_jsonl(path: &Path, records: &[PreferenceRecord]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let doc = to_doc(record);
        serde_json::to_writer(&mut writer, &doc).map_err(|e| DatasetError::MalformedRecord {
            line: 0,
            reason: e.to_string(),
        })?;
        writer.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    writer.flush().map_err(|e| io_err(path, e))
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<PreferenceRecord>, DatasetError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: RecordDoc =
            serde_json::from_str(&line).map_err(|e| DatasetError::MalformedRecord {
                line: idx + 1,
                reason: e.to_string(),
            })?;
        records.push(from_doc(doc, idx + 1)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chosen_tokens_stay_inside_interval() {
        let config = RngDatasetConfig {
            records: 200,
            ..RngDatasetConfig::train_default(3)
        };
        let records = build_rng_dataset(&config).unwrap();
        assert_eq!(records.len(), 200);
        for record in &records {
            for r in record.chosen.responses() {
                assert!(record.prompt.contains(r.tokens()[0]));
            }
            for r in record.rejected.responses() {
                assert!(record.prompt.contains(r.tokens()[0]));
            }
        }
    }

    #[test]
    fn point_mass_rejected_groups_repeat_the_echo_token() {
        let config = RngDatasetConfig {
            records: 50,
            ..RngDatasetConfig::train_default(7)
        };
        for record in build_rng_dataset(&config).unwrap() {
            let echo = bias_token(&record.prompt);
            assert!(record
                .rejected
                .responses()
                .iter()
                .all(|r| r.tokens()[0] == echo));
        }
    }

    #[test]
    fn k1_records_work_for_single_sample_methods() {
        let config = RngDatasetConfig {
            records: 10,
            group_size: 1,
            ..RngDatasetConfig::train_default(0)
        };
        for record in build_rng_dataset(&config).unwrap() {
            assert_eq!(record.chosen.len(), 1);
            assert_eq!(record.rejected.len(), 1);
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let config = RngDatasetConfig::train_default(11);
        let a = build_rng_dataset(&RngDatasetConfig {
            records: 40,
            ..config.clone()
        })
        .unwrap();
        let b = build_rng_dataset(&RngDatasetConfig {
            records: 40,
            ..config
        })
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn test_split_has_unconstrained_gaps() {
        let config = RngDatasetConfig {
            records: 300,
            ..RngDatasetConfig::test_default(9)
        };
        let records = build_rng_dataset(&config).unwrap();
        let max_gap = records
            .iter()
            .map(|r| r.prompt.hi() - r.prompt.lo())
            .max()
            .unwrap();
        assert!(max_gap > 10, "test intervals should exceed training gaps");
        assert!(records.iter().all(|r| r.prompt.hi() <= 1000));
    }

    #[test]
    fn jsonl_round_trip_is_field_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let config = RngDatasetConfig {
            records: 25,
            rejected_family: RejectedFamily::Mixture { point_weight: 0.6 },
            ..RngDatasetConfig::train_default(13)
        };
        let records = build_rng_dataset(&config).unwrap();
        write_records_jsonl(&path, &records).unwrap();
        let back = read_records_jsonl(&path).unwrap();
        assert_eq!(records, back);

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        assert!(!text.contains('\r'));
        let first = text.lines().next().unwrap();
        assert!(first.starts_with(r#"{"prompt":{"id":0,"lo":"#));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = RngDatasetConfig::train_default(0);
        config.records = 0;
        assert!(build_rng_dataset(&config).is_err());

        let mut config = RngDatasetConfig::train_default(0);
        config.sampling = IntervalSampling::BoundedGap {
            gap_lo: 10,
            gap_hi: 5,
        };
        assert!(build_rng_dataset(&config).is_err());

        let mut config = RngDatasetConfig::train_default(0);
        config.vocab_size = 900; // a_max + gap_hi = 1010 does not fit
        assert!(build_rng_dataset(&config).is_err());
    }

    #[test]
    fn malformed_jsonl_lines_error_with_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"prompt\":{\"id\":0,\"lo\":5,\"hi\":3},\"chosen\":[[4]],\"rejected\":[[4]]}\n",
        )
        .unwrap();
        match read_records_jsonl(&path) {
            Err(DatasetError::MalformedRecord { line: 1, .. }) => {}
            other => panic!("expected malformed record error, got {other:?}"),
        }
    }
}
