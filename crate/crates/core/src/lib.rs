//! Forward-only training-data valuation.
//!
//! Scores how much each training sample raises the likelihood of a valuation
//! sample using only quantities from a single forward pass: the hidden state
//! that predicts each target token and the next-token distribution at that
//! position. For a valuation record `v` and training record `i` the score is
//!
//! ```text
//! S(v, i) = sum_k sum_k' <e_{y_v,k} - pi_v,k , e_{y_i,k'} - pi_i,k'> * <h_v,k , h_i,k'>
//! ```
//!
//! which factors into a Frobenius inner product of per-sample sketches
//! `M = sum_k (e_{y_k} - pi_k) h_k^T` restricted to the tokens that actually
//! occur as targets.
//!
//! Modules:
//! - [`record`]: samples, vocabularies, sketches, score tables.
//! - [`ingest`]: the on-disk activation dump format.
//! - [`sketch`]: prediction-error rows and sketch construction.
//! - [`valuation`]: pairwise and sketch scoring, batched runs, ranking.
//! - [`metrics`]: AUC / recall evaluation against class pseudo-labels.
//! - [`toy`]: an unconstrained-features model with exact gradients, used to
//!   check the engine against true gradient dynamics.
//! - [`verify`]: the property suite behind `forvalue toy-verify`.
//! - [`synth`]: seeded generators for synthetic records and toy datasets.

pub mod error;
pub mod ingest;
mod kernel;
pub mod metrics;
pub mod record;
pub mod sketch;
pub mod synth;
pub mod toy;
pub mod valuation;
pub mod verify;

pub use error::{Error, Result};
pub use record::{ProbRow, RestrictedVocab, Role, SampleRecord, ScoreTable, Sketch, TokenId};
