//! Multi-sample preference optimization on exactly differentiable toy policies.
//!
//! The crate provides:
//!
//! - [`model`]: prompts, responses, sample groups, preference records, and two
//!   policy families (tabular and linear-softmax) with exact log-probabilities
//!   and analytic parameter gradients.
//! - [`objectives`]: SFT NLL, DPO, IPO, and their multi-sample extensions
//!   mDPO and mIPO (with the variance-corrected estimator), the composite
//!   objective with an NLL anchor, and the diffusion-form mDPO loss.
//! - [`estimator`]: the generic unbiased squared-difference estimator, its
//!   naive counterpart, and Monte Carlo bias/variance studies.
//! - [`compare`]: group preference probabilities, group-sum labeling, the
//!   Hoeffding lower bound, and the label-accuracy study.
//! - [`metrics`]: entropy, KL to uniform, entropy win rates, Simpson
//!   diversity index, distinct-n.
//! - [`trainer`]: deterministic SGD/Adam training against any objective.

pub mod compare;
pub mod estimator;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod seeding;
pub mod trainer;
