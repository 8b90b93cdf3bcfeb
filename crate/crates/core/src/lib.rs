//! Desk-scale testbed for studying how rewritten item descriptions shift
//! rankings in text-aware recommenders.
//!
//! The library is organized as a pipeline:
//!
//! * [`corpus`] builds or ingests a rating dataset whose item descriptions
//!   carry a real (and, for synthetic data, known) text-to-rating signal.
//! * [`textenc`] holds a small trainable causal language model that both
//!   generates text and produces description embeddings.
//! * [`recommender`] trains conventional (rating) and sequential (implicit)
//!   recommenders that consume those embeddings, and ranks items.
//! * [`attack`] fine-tunes the language model in two phases so that the
//!   descriptions it rewrites push chosen target items up the rankings.
//! * [`blackbox`] replays the same attack without model access, using fake
//!   query profiles and a distilled surrogate recommender.
//! * [`icl`] builds few-shot prompts from harvested rewrites so a generator
//!   can imitate the attack without any fine-tuning.
//! * [`eval`] measures rank movement, exposure, semantic drift, and accuracy
//!   stability, and assembles multi-seed reports.
//! * [`pipeline`] wires the stages together behind one experiment config.
//!
//! Everything is `f64`, single-threaded, and driven by explicit seeds; a rerun
//! of the same config produces byte-identical artifacts.

pub mod attack;
pub mod blackbox;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod icl;
pub mod mathutil;
pub mod pipeline;
pub mod recommender;
pub mod textenc;

pub use error::{Error, Result};

/// Dense user index, `0..num_users`.
pub type UserId = usize;
/// Dense item index, `0..num_items`.
pub type ItemId = usize;
/// Index into a [`textenc::Vocabulary`].
pub type TokenId = usize;
