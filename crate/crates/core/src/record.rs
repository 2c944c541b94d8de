//! In-memory data model shared by the engine.
//!
//! A [`SampleRecord`] holds everything the scorer needs about one
//! (input, target-sequence) pair: the hidden state that predicts each target
//! token and the next-token distribution at that position, stored densely
//! over the dataset vocabulary `V_D` (the record's *domain*).
//!
//! Row `k` of `hidden` and `probs` is the state *before* consuming target
//! `k`, i.e. the one that predicts `targets[k]`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed absolute drift of `sum(probs) + residual_mass` away from 1.
pub const PROB_SUM_TOLERANCE: f64 = 1e-4;

/// Index into the global model vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

/// Ordered set of tokens with a dense local index.
///
/// Tokens are always kept in ascending order; the local index of a token is
/// its position in that order.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RestrictedVocab {
    tokens: Vec<TokenId>,
}

impl RestrictedVocab {
    /// Builds a vocabulary from any token collection, sorting and
    /// de-duplicating it.
    pub fn from_tokens<I: IntoIterator<Item = TokenId>>(tokens: I) -> Self {
        let mut tokens: Vec<TokenId> = tokens.into_iter().collect();
        tokens.sort_unstable();
        tokens.dedup();
        RestrictedVocab { tokens }
    }

    /// Builds a vocabulary from a list that must already be strictly
    /// ascending (the on-disk form).
    pub fn from_sorted(tokens: Vec<TokenId>) -> Result<Self> {
        if let Some(w) = tokens.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "vocabulary not strictly ascending at {} -> {}",
                w[0], w[1]
            )));
        }
        Ok(RestrictedVocab { tokens })
    }

    /// The full vocabulary `0..size`.
    pub fn full(size: usize) -> Self {
        RestrictedVocab {
            tokens: (0..size as u32).map(TokenId).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn token(&self, local: usize) -> TokenId {
        self.tokens[local]
    }

    /// Local index of `token`, if present.
    #[inline]
    pub fn local(&self, token: TokenId) -> Option<usize> {
        self.tokens.binary_search(&token).ok()
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.local(token).is_some()
    }

    /// True when every token of `self` is in `other`.
    pub fn is_subset_of(&self, other: &RestrictedVocab) -> bool {
        self.tokens.iter().all(|&t| other.contains(t))
    }

    pub fn union(&self, other: &RestrictedVocab) -> RestrictedVocab {
        RestrictedVocab::from_tokens(self.tokens.iter().chain(other.tokens.iter()).copied())
    }

    /// For each token of `self`, its local index in `domain`.
    pub fn project_onto(&self, domain: &RestrictedVocab) -> Result<Vec<usize>> {
        self.tokens
            .iter()
            .map(|&t| domain.local(t).ok_or(Error::MissingToken(t.0)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Training,
    Valuation,
}

/// Next-token distribution at one position, dense over the record's domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbRow {
    /// `values[j]` is the probability of `domain.token(j)`.
    pub values: Vec<f64>,
    /// Probability mass on tokens outside the domain.
    pub residual_mass: f64,
}

impl ProbRow {
    pub fn total(&self) -> f64 {
        self.values.iter().sum::<f64>() + self.residual_mass
    }
}

/// One (input, target-sequence) pair as seen by the engine.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub role: Role,
    pub class_label: Option<String>,
    pub clean: Option<bool>,
    pub targets: Vec<TokenId>,
    /// `targets.len() × dim` row-major hidden states.
    pub hidden: Vec<f64>,
    pub dim: usize,
    pub probs: Vec<ProbRow>,
    /// Vocabulary the probability rows are dense over (`V_D`).
    pub domain: Arc<RestrictedVocab>,
}

impl SampleRecord {
    /// Number of target positions.
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Hidden state that predicts target `k`.
    #[inline]
    pub fn hidden_row(&self, k: usize) -> &[f64] {
        &self.hidden[k * self.dim..(k + 1) * self.dim]
    }

    /// Probability assigned to the target token at position `k`.
    pub fn target_prob(&self, k: usize) -> Option<f64> {
        let j = self.domain.local(self.targets[k])?;
        self.probs[k].values.get(j).copied()
    }

    /// Set of target tokens.
    pub fn target_vocab(&self) -> RestrictedVocab {
        RestrictedVocab::from_tokens(self.targets.iter().copied())
    }
}

/// One broken invariant found by [`validate_record`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    EmptySequence,
    HiddenShape { expected: usize, found: usize },
    ProbRowCount { expected: usize, found: usize },
    ProbRowWidth { row: usize, expected: usize, found: usize },
    DomainMismatch,
    OutOfVocabTarget { position: usize, token: TokenId },
    NonFiniteHidden { row: usize, col: usize },
    ProbabilityOutOfRange { row: usize, value: f64 },
    ProbabilitySumDrift { row: usize, sum: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptySequence => write!(f, "empty target sequence"),
            Violation::HiddenShape { expected, found } => {
                write!(f, "dimension mismatch: hidden has {found} values, expected {expected}")
            }
            Violation::ProbRowCount { expected, found } => {
                write!(f, "dimension mismatch: {found} probability rows, expected {expected}")
            }
            Violation::ProbRowWidth { row, expected, found } => write!(
                f,
                "dimension mismatch: probability row {row} has {found} entries, expected {expected}"
            ),
            Violation::DomainMismatch => write!(f, "probability domain differs from vocabulary"),
            Violation::OutOfVocabTarget { position, token } => {
                write!(f, "out-of-vocab target {token} at position {position}")
            }
            Violation::NonFiniteHidden { row, col } => {
                write!(f, "non-finite hidden entry at ({row}, {col})")
            }
            Violation::ProbabilityOutOfRange { row, value } => {
                write!(f, "probability {value} outside [0, 1], row {row}")
            }
            Violation::ProbabilitySumDrift { row, sum } => {
                write!(f, "probability-sum drift, row {row} (sum {sum})")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, v) in self.violations.iter().enumerate() {
            if n > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks every record invariant against the dataset vocabulary. Never
/// fails; an empty report means the record is valid.
pub fn validate_record(rec: &SampleRecord, vocab: &RestrictedVocab) -> ValidationReport {
    let mut out = Vec::new();
    let t = rec.targets.len();
    if t == 0 {
        out.push(Violation::EmptySequence);
    }
    if rec.hidden.len() != t * rec.dim {
        out.push(Violation::HiddenShape {
            expected: t * rec.dim,
            found: rec.hidden.len(),
        });
    }
    if rec.probs.len() != t {
        out.push(Violation::ProbRowCount {
            expected: t,
            found: rec.probs.len(),
        });
    }
    if rec.domain.as_ref() != vocab {
        out.push(Violation::DomainMismatch);
    }
    for (position, &token) in rec.targets.iter().enumerate() {
        if !vocab.contains(token) {
            out.push(Violation::OutOfVocabTarget { position, token });
        }
    }
    if rec.dim > 0 {
        if let Some(pos) = rec.hidden.iter().position(|x| !x.is_finite()) {
            out.push(Violation::NonFiniteHidden {
                row: pos / rec.dim,
                col: pos % rec.dim,
            });
        }
    }
    for (row, p) in rec.probs.iter().enumerate() {
        if p.values.len() != vocab.len() {
            out.push(Violation::ProbRowWidth {
                row,
                expected: vocab.len(),
                found: p.values.len(),
            });
        }
        let in_range = |x: f64| (0.0..=1.0).contains(&x);
        if let Some(&bad) = p
            .values
            .iter()
            .chain(std::iter::once(&p.residual_mass))
            .find(|&&x| !in_range(x))
        {
            out.push(Violation::ProbabilityOutOfRange { row, value: bad });
            continue;
        }
        let sum = p.total();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            out.push(Violation::ProbabilitySumDrift { row, sum });
        }
    }
    ValidationReport { violations: out }
}

/// Per-sample sketch `M = sum_k (e_{y_k} - pi_k) h_k^T` over `vocab`,
/// stored `|vocab| × dim` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sketch {
    pub vocab: Arc<RestrictedVocab>,
    pub dim: usize,
    pub m: Vec<f64>,
}

impl Sketch {
    #[inline]
    pub fn row(&self, local: usize) -> &[f64] {
        &self.m[local * self.dim..(local + 1) * self.dim]
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.m.iter().map(|x| x * x).sum()
    }
}

/// Scores `S[v, i]`, rows in valuation order, columns in training order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub valuation_ids: Vec<String>,
    pub training_ids: Vec<String>,
    /// `valuation_ids.len() × training_ids.len()` row-major.
    pub scores: Vec<f64>,
}

impl ScoreTable {
    pub fn new(valuation_ids: Vec<String>, training_ids: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != valuation_ids.len() * training_ids.len() {
            return Err(Error::LengthMismatch {
                what: "score matrix",
                expected: valuation_ids.len() * training_ids.len(),
                found: scores.len(),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("score table".into()));
        }
        Ok(ScoreTable {
            valuation_ids,
            training_ids,
            scores,
        })
    }

    pub fn n_valuation(&self) -> usize {
        self.valuation_ids.len()
    }

    pub fn n_training(&self) -> usize {
        self.training_ids.len()
    }

    pub fn get(&self, v: usize, i: usize) -> f64 {
        self.scores[v * self.training_ids.len() + i]
    }

    pub fn row(&self, v: usize) -> &[f64] {
        let n = self.training_ids.len();
        &self.scores[v * n..(v + 1) * n]
    }

    pub fn valuation_index(&self, id: &str) -> Result<usize> {
        self.valuation_ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }
}
