//! Active learning-to-rank with a dropout-regularized Siamese scorer.
//!
//! A feedforward network is trained on pairwise relative labels with the
//! RankNet cross-entropy plus L2 weight decay. Monte Carlo dropout gives
//! each sample a rank score (mean of stochastic passes) and an uncertainty
//! (their variance); the most uncertain samples are paired and sent for
//! annotation each round.
//!
//! Modules:
//! - [`nn`]: scorer, dropout masks, backpropagation, Adam
//! - [`ranker`]: pair labels, losses and the training round
//! - [`bayes`]: Monte Carlo posteriors and acquisition ranking
//! - [`active`]: the loop, samplers and pairing
//! - [`data`]: datasets, synthetic data, splits and simulated annotators
//! - [`metrics`]: evaluation
//! - [`run`]: run directory formats

pub mod active;
pub mod bayes;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod ranker;
pub mod run;
pub mod seed;

pub use active::{run_loop, LoopConfig, LoopDriver, LoopState, NetConfig, Progress, Sampler, Settings, SplitIds};
pub use bayes::ScorePosterior;
pub use data::{Annotator, Dataset, SampleId, SimulatedOracle, Source, SynthConfig};
pub use error::{Error, Result};
pub use nn::NetworkParams;
pub use ranker::{LabeledPair, LabeledPairSet, RelativeLabel, RelativePair, TrainConfig};
pub use run::{RunConfig, RunDir};
