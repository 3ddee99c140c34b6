//! Experiment drivers for the multi-sample preference optimization library:
//! dataset construction, the random-number-generation reproduction, the
//! estimator and label-accuracy simulations, the label-noise robustness
//! comparison, and iterative training rounds. The `mspo` binary is a thin
//! clap front end over these.

pub mod dataset;
pub mod experiments;
pub mod report;
