//! Policy-blended reinforcement learning for extractive multi-document
//! summarization.
//!
//! Two sentence-extraction policies are trained independently with
//! actor-critic, one rewarded for importance and one for redundancy, and
//! blended at decode time with a maximal-marginal-relevance combination
//! `λ·P_imp − (1−λ)·P_red`. The blending weight is either fixed or derived
//! per step from the two critics' advantage estimates.
//!
//! Module map:
//!
//! - [`corpus`]: tokenization, JSONL ingestion, extraction pool state, oracle labels
//! - [`rouge`]: ROUGE-N / ROUGE-L / ROUGE-SU4 and the n-gram decoupling checker
//! - [`mmr`]: the classical greedy MMR baseline
//! - [`autodiff`]: a small reverse-mode tape, parameters, Adam, gradient checking
//! - [`extractor`]: the hierarchical pointer-network sentence extractor
//! - [`rl`]: warm start, rollouts, advantages, actor-critic, tabular verification
//! - [`pobrl`]: distribution blending and the blended extraction loop
//! - [`cli`]: command implementations behind the `pobrl` binary

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod extractor;
pub mod mmr;
pub mod pobrl;
pub mod rl;
pub mod rouge;
pub mod seed;

pub use error::{Error, Result};
