//! Domain types for the random-interval task and two exactly differentiable
//! policy families.
//!
//! Policies are single-step categorical distributions over an integer
//! vocabulary. A [`Response`] is nonetheless a token sequence whose log
//! probability is summed over steps, so multi-token extensions need no
//! interface change.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default vocabulary: the integers `0..=1015`. Every interval produced by
/// the dataset builders (`a <= 1000`, `b <= 1010`, test intervals up to 1000)
/// fits with headroom.
pub const DEFAULT_VOCAB_SIZE: usize = 1016;

/// Length of the linear policy's feature vector.
pub const FEATURE_DIM: usize = 5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown prompt {0}")]
    UnknownPrompt(usize),
    #[error("token {token} out of range for vocab size {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },
    #[error("interval [{lo}, {hi}] has lo > hi")]
    InvalidInterval { lo: usize, hi: usize },
    #[error("interval [{lo}, {hi}] does not fit vocab size {vocab}")]
    IntervalOutsideVocab { lo: usize, hi: usize, vocab: usize },
    #[error("response must contain at least one token")]
    EmptyResponse,
    #[error("sample group must contain at least one response")]
    EmptyGroup,
    #[error("sample count must be at least 1")]
    ZeroSampleCount,
    #[error("duplicate prompt id {0}")]
    DuplicatePromptId(usize),
    #[error("mismatched parameter shape: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("malformed policy document: {0}")]
    MalformedPolicy(String),
}

/// A prompt asking for a random integer in the inclusive interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct IntervalPrompt {
    id: usize,
    lo: usize,
    hi: usize,
}

impl IntervalPrompt {
    pub fn new(id: usize, lo: usize, hi: usize) -> Result<Self, ModelError> {
        if lo > hi {
            return Err(ModelError::InvalidInterval { lo, hi });
        }
        Ok(Self { id, lo, hi })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn lo(&self) -> usize {
        self.lo
    }

    pub fn hi(&self) -> usize {
        self.hi
    }

    /// Number of tokens in the interval (at least 1).
    pub fn width(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn contains(&self, token: usize) -> bool {
        token >= self.lo && token <= self.hi
    }

    fn check_vocab(&self, vocab: usize) -> Result<(), ModelError> {
        if self.hi >= vocab {
            return Err(ModelError::IntervalOutsideVocab {
                lo: self.lo,
                hi: self.hi,
                vocab,
            });
        }
        Ok(())
    }
}

/// A non-empty token sequence. For the random-integer task every response has
/// length one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Response {
    tokens: Vec<usize>,
}

impl Response {
    pub fn new(tokens: Vec<usize>) -> Result<Self, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyResponse);
        }
        Ok(Self { tokens })
    }

    pub fn single(token: usize) -> Self {
        Self {
            tokens: vec![token],
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A non-empty group of responses to the same prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SampleGroup {
    responses: Vec<Response>,
}

impl SampleGroup {
    pub fn new(responses: Vec<Response>) -> Result<Self, ModelError> {
        if responses.is_empty() {
            return Err(ModelError::EmptyGroup);
        }
        Ok(Self { responses })
    }

    pub fn singleton(response: Response) -> Self {
        Self {
            responses: vec![response],
        }
    }

    pub fn responses(&self) -> &[Response] {
        &self.responses
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One unit of preference data: a prompt, a chosen group, and a rejected
/// group. Group sizes may differ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreferenceRecord {
    pub prompt: IntervalPrompt,
    pub chosen: SampleGroup,
    pub rejected: SampleGroup,
}

impl PreferenceRecord {
    pub fn new(prompt: IntervalPrompt, chosen: SampleGroup, rejected: SampleGroup) -> Self {
        Self {
            prompt,
            chosen,
            rejected,
        }
    }
}

/// Conditional categorical distribution with one logit row per known prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab_size: usize,
    prompt_ids: Vec<usize>,
    row_of: BTreeMap<usize, usize>,
    logits: Vec<f64>,
}

impl TabularPolicy {
    /// Fresh policy with zero logits (uniform predictive distribution) for
    /// the given prompt ids.
    pub fn new(vocab_size: usize, prompt_ids: &[usize]) -> Result<Self, ModelError> {
        let mut row_of = BTreeMap::new();
        for (row, &id) in prompt_ids.iter().enumerate() {
            if row_of.insert(id, row).is_some() {
                return Err(ModelError::DuplicatePromptId(id));
            }
        }
        Ok(Self {
            vocab_size,
            prompt_ids: prompt_ids.to_vec(),
            row_of,
            logits: vec![0.0; prompt_ids.len() * vocab_size],
        })
    }

    pub fn prompt_ids(&self) -> &[usize] {
        &self.prompt_ids
    }

    fn row(&self, prompt_id: usize) -> Result<usize, ModelError> {
        self.row_of
            .get(&prompt_id)
            .copied()
            .ok_or(ModelError::UnknownPrompt(prompt_id))
    }

    pub fn row_logits(&self, prompt_id: usize) -> Result<&[f64], ModelError> {
        let row = self.row(prompt_id)?;
        Ok(&self.logits[row * self.vocab_size..(row + 1) * self.vocab_size])
    }

    pub fn set_row(&mut self, prompt_id: usize, logits: &[f64]) -> Result<(), ModelError> {
        if logits.len() != self.vocab_size {
            return Err(ModelError::ShapeMismatch {
                expected: self.vocab_size,
                got: logits.len(),
            });
        }
        let row = self.row(prompt_id)?;
        self.logits[row * self.vocab_size..(row + 1) * self.vocab_size].copy_from_slice(logits);
        Ok(())
    }
}

/// Five-feature linear-softmax policy. One weight vector scores every
/// (prompt, token) pair, so a trained policy generalizes to unseen intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmaxPolicy {
    vocab_size: usize,
    weights: Vec<f64>,
}

impl LinearSoftmaxPolicy {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            weights: vec![0.0; FEATURE_DIM],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Feature map of the linear policy: interval membership indicators plus the
/// normalized in-interval offset and its square.
pub fn features(prompt: &IntervalPrompt, token: usize) -> [f64; FEATURE_DIM] {
    let inside = prompt.contains(token);
    let offset = if inside && prompt.hi() > prompt.lo() {
        (token - prompt.lo()) as f64 / (prompt.hi() - prompt.lo()) as f64
    } else {
        0.0
    };
    [
        if inside { 1.0 } else { 0.0 },
        if token < prompt.lo() { 1.0 } else { 0.0 },
        if token > prompt.hi() { 1.0 } else { 0.0 },
        offset,
        offset * offset,
    ]
}

/// The predictive distribution of one policy at one prompt, with both log
/// probabilities and probabilities materialized. Computing this once per
/// record avoids re-running the softmax for every group member.
#[derive(Debug, Clone)]
pub struct PromptDistribution {
    log_probs: Vec<f64>,
    probs: Vec<f64>,
}

impl PromptDistribution {
    fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        let log_sum = sum.ln();
        let log_probs = logits.iter().map(|&z| z - max - log_sum).collect();
        for p in &mut probs {
            *p /= sum;
        }
        Self { log_probs, probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    /// Sum of per-token log probabilities.
    pub fn response_log_prob(&self, response: &Response) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for &token in response.tokens() {
            let lp = self
                .log_probs
                .get(token)
                .ok_or(ModelError::TokenOutOfVocab {
                    token,
                    vocab: self.log_probs.len(),
                })?;
            total += lp;
        }
        Ok(total)
    }
}

/// Either policy family behind one interface. Parameters are exposed as one
/// flat slice (row-major logits for tabular, the weight vector for linear),
/// which is the layout every gradient in this crate uses.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Tabular(TabularPolicy),
    Linear(LinearSoftmaxPolicy),
}

impl Policy {
    pub fn tabular(vocab_size: usize, prompt_ids: &[usize]) -> Result<Self, ModelError> {
        Ok(Policy::Tabular(TabularPolicy::new(vocab_size, prompt_ids)?))
    }

    pub fn linear(vocab_size: usize) -> Self {
        Policy::Linear(LinearSoftmaxPolicy::new(vocab_size))
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Policy::Tabular(p) => p.vocab_size,
            Policy::Linear(p) => p.vocab_size,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Policy::Tabular(p) => p.logits.len(),
            Policy::Linear(p) => p.weights.len(),
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Policy::Tabular(p) => &p.logits,
            Policy::Linear(p) => &p.weights,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Policy::Tabular(p) => &mut p.logits,
            Policy::Linear(p) => &mut p.weights,
        }
    }

    /// Softmax distribution over the vocabulary for one prompt.
    pub fn prompt_distribution(
        &self,
        prompt: &IntervalPrompt,
    ) -> Result<PromptDistribution, ModelError> {
        prompt.check_vocab(self.vocab_size())?;
        match self {
            Policy::Tabular(p) => {
                let row = p.row(prompt.id())?;
                let logits = &p.logits[row * p.vocab_size..(row + 1) * p.vocab_size];
                Ok(PromptDistribution::from_logits(logits))
            }
            Policy::Linear(p) => {
                let logits: Vec<f64> = (0..p.vocab_size)
                    .map(|t| {
                        let phi = features(prompt, t);
                        phi.iter()
                            .zip(&p.weights)
                            .map(|(f, w)| f * w)
                            .sum::<f64>()
                    })
                    .collect();
                Ok(PromptDistribution::from_logits(&logits))
            }
        }
    }

    /// Log probability of a response: the per-token log softmax probabilities
    /// summed over steps. Always finite at finite logits.
    pub fn log_prob(
        &self,
        prompt: &IntervalPrompt,
        response: &Response,
    ) -> Result<f64, ModelError> {
        self.prompt_distribution(prompt)?.response_log_prob(response)
    }

    /// Exact gradient of [`Policy::log_prob`] with respect to the flattened
    /// parameters.
    pub fn grad_log_prob(
        &self,
        prompt: &IntervalPrompt,
        response: &Response,
    ) -> Result<Vec<f64>, ModelError> {
        let dist = self.prompt_distribution(prompt)?;
        let mut grad = vec![0.0; self.param_count()];
        self.add_scaled_grad_log_prob(&dist, prompt, response, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Add `scale * grad log_prob(prompt, response)` into `out`, reusing a
    /// precomputed [`PromptDistribution`] for this (policy, prompt) pair.
    pub fn add_scaled_grad_log_prob(
        &self,
        dist: &PromptDistribution,
        prompt: &IntervalPrompt,
        response: &Response,
        scale: f64,
        out: &mut [f64],
    ) -> Result<(), ModelError> {
        if out.len() != self.param_count() {
            return Err(ModelError::ShapeMismatch {
                expected: self.param_count(),
                got: out.len(),
            });
        }
        let vocab = self.vocab_size();
        for &token in response.tokens() {
            if token >= vocab {
                return Err(ModelError::TokenOutOfVocab { token, vocab });
            }
        }
        match self {
            Policy::Tabular(p) => {
                let row = p.row(prompt.id())?;
                let base = row * vocab;
                // d log pi(y) / d z_t = 1{t = y} - softmax_t, summed over steps.
                for &token in response.tokens() {
                    out[base + token] += scale;
                }
                let steps = response.len() as f64;
                for (t, &prob) in dist.probs.iter().enumerate() {
                    out[base + t] -= scale * steps * prob;
                }
            }
            Policy::Linear(_) => {
                let mut mean_phi = [0.0; FEATURE_DIM];
                for (t, &prob) in dist.probs.iter().enumerate() {
                    let phi = features(prompt, t);
                    for (acc, f) in mean_phi.iter_mut().zip(phi) {
                        *acc += prob * f;
                    }
                }
                for &token in response.tokens() {
                    let phi = features(prompt, token);
                    for ((o, f), m) in out.iter_mut().zip(phi).zip(mean_phi) {
                        *o += scale * (f - m);
                    }
                }
            }
        }
        Ok(())
    }

    /// Probability vector over the vocabulary; non-negative, sums to one.
    pub fn predictive_distribution(
        &self,
        prompt: &IntervalPrompt,
    ) -> Result<Vec<f64>, ModelError> {
        Ok(self.prompt_distribution(prompt)?.probs)
    }

    /// Draw `count` i.i.d. single-token responses from the predictive
    /// distribution. Deterministic given the generator state.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        prompt: &IntervalPrompt,
        rng: &mut R,
        count: usize,
    ) -> Result<SampleGroup, ModelError> {
        if count == 0 {
            return Err(ModelError::ZeroSampleCount);
        }
        let dist = self.prompt_distribution(prompt)?;
        let mut responses = Vec::with_capacity(count);
        for _ in 0..count {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut drawn = dist.probs.len() - 1;
            for (t, &p) in dist.probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    drawn = t;
                    break;
                }
            }
            responses.push(Response::single(drawn));
        }
        SampleGroup::new(responses)
    }

    /// Frozen copy of this policy.
    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            policy: self.clone(),
        }
    }

    /// Serialize to the interchange JSON document.
    pub fn to_json_string(&self) -> String {
        let doc = match self {
            Policy::Tabular(p) => PolicyDocument {
                kind: "tabular".to_string(),
                vocab_size: p.vocab_size,
                prompt_ids: p.prompt_ids.clone(),
                params: p.logits.clone(),
            },
            Policy::Linear(p) => PolicyDocument {
                kind: "linear".to_string(),
                vocab_size: p.vocab_size,
                prompt_ids: Vec::new(),
                params: p.weights.clone(),
            },
        };
        serde_json::to_string(&doc).expect("policy document serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self, ModelError> {
        let doc: PolicyDocument =
            serde_json::from_str(text).map_err(|e| ModelError::MalformedPolicy(e.to_string()))?;
        match doc.kind.as_str() {
            "tabular" => {
                let expected = doc.prompt_ids.len() * doc.vocab_size;
                if doc.params.len() != expected {
                    return Err(ModelError::MalformedPolicy(format!(
                        "tabular params length {} != prompts x vocab = {}",
                        doc.params.len(),
                        expected
                    )));
                }
                let mut policy = TabularPolicy::new(doc.vocab_size, &doc.prompt_ids)?;
                policy.logits = doc.params;
                Ok(Policy::Tabular(policy))
            }
            "linear" => {
                if doc.params.len() != FEATURE_DIM {
                    return Err(ModelError::MalformedPolicy(format!(
                        "linear params length {} != {FEATURE_DIM}",
                        doc.params.len()
                    )));
                }
                Ok(Policy::Linear(LinearSoftmaxPolicy {
                    vocab_size: doc.vocab_size,
                    weights: doc.params,
                }))
            }
            other => Err(ModelError::MalformedPolicy(format!(
                "unknown policy kind {other:?}"
            ))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyDocument {
    kind: String,
    vocab_size: usize,
    prompt_ids: Vec<usize>,
    params: Vec<f64>,
}

/// Immutable frozen copy of a policy, used as the reference distribution.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    policy: Policy,
}

impl PolicySnapshot {
    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn vocab_size(&self) -> usize {
        self.policy.vocab_size()
    }

    pub fn log_prob(
        &self,
        prompt: &IntervalPrompt,
        response: &Response,
    ) -> Result<f64, ModelError> {
        self.policy.log_prob(prompt, response)
    }

    pub fn prompt_distribution(
        &self,
        prompt: &IntervalPrompt,
    ) -> Result<PromptDistribution, ModelError> {
        self.policy.prompt_distribution(prompt)
    }

    pub fn predictive_distribution(
        &self,
        prompt: &IntervalPrompt,
    ) -> Result<Vec<f64>, ModelError> {
        self.policy.predictive_distribution(prompt)
    }

    /// Thaw into a trainable policy (the snapshot itself stays frozen).
    pub fn to_policy(&self) -> Policy {
        self.policy.clone()
    }
}
