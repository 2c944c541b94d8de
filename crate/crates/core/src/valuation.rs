//! Valuation scores between valuation and training records.
//!
//! Two routes compute the same number:
//!
//! - [`score_pairwise`] evaluates the double sum over position pairs,
//!   `sum_{k,k'} alpha_{k,k'} <h_v,k, h_i,k'>` with
//!   `alpha_{k,k'} = <err_v,k, err_i,k'>`;
//! - [`score_sketch`] takes the Frobenius inner product of the two sketches.
//!
//! [`run_valuation`] streams the training set in batches, restricts each
//! pair to the batch vocabulary and fills a [`ScoreTable`].

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::dot;
use crate::record::{RestrictedVocab, SampleRecord, ScoreTable, Sketch};
use crate::sketch::{build_sketch, error_matrix, target_union};

fn check_dims(v: &SampleRecord, i: &SampleRecord) -> Result<()> {
    if v.dim != i.dim {
        return Err(Error::DimensionMismatch {
            left: v.dim,
            right: i.dim,
        });
    }
    Ok(())
}

/// Double-sum score of training record `i` for valuation record `v`, with
/// error rows restricted to `vocab`. Cost `O(T_v T_i (|vocab| + d))`.
pub fn score_pairwise(v: &SampleRecord, i: &SampleRecord, vocab: &RestrictedVocab) -> Result<f64> {
    check_dims(v, i)?;
    let n = vocab.len();
    let ev = error_matrix(v, vocab, &vocab.project_onto(&v.domain)?);
    let ei = error_matrix(i, vocab, &vocab.project_onto(&i.domain)?);
    Ok(pairwise_from_errors(v, &ev, i, &ei, n))
}

fn pairwise_from_errors(v: &SampleRecord, ev: &[f64], i: &SampleRecord, ei: &[f64], n: usize) -> f64 {
    let mut acc = 0.0;
    for k in 0..v.len() {
        let erow = &ev[k * n..(k + 1) * n];
        let hrow = v.hidden_row(k);
        for kp in 0..i.len() {
            let alpha = dot(erow, &ei[kp * n..(kp + 1) * n]);
            acc += alpha * dot(hrow, i.hidden_row(kp));
        }
    }
    acc
}

/// Frobenius inner product of two sketches over the same vocabulary.
/// Cost `O(|vocab| d)`.
pub fn score_sketch(mv: &Sketch, mi: &Sketch) -> Result<f64> {
    if mv.dim != mi.dim {
        return Err(Error::DimensionMismatch {
            left: mv.dim,
            right: mi.dim,
        });
    }
    if !Arc::ptr_eq(&mv.vocab, &mi.vocab) && mv.vocab != mi.vocab {
        return Err(Error::VocabMismatch(format!(
            "sketch vocabularies differ ({} vs {} tokens)",
            mv.vocab.len(),
            mi.vocab.len()
        )));
    }
    let rows: Vec<(usize, usize)> = (0..mv.vocab.len()).map(|z| (z, z)).collect();
    Ok(sketch_dot_rows(mv, mi, &rows))
}

/// Sum over `(a, b)` of `<mv.row(a), mi.row(b)>`, in list order.
fn sketch_dot_rows(mv: &Sketch, mi: &Sketch, rows: &[(usize, usize)]) -> f64 {
    let mut acc = 0.0;
    for &(a, b) in rows {
        acc += dot(mv.row(a), mi.row(b));
    }
    acc
}

/// Upper bound on `|score(vocab) - score(full vocabulary)|`.
///
/// Tokens outside `vocab` add `sum_z pi_v(z) pi_i(z)` to each `alpha`,
/// which lies in `[0, r_v r_i]` where `r` is the probability mass outside
/// `vocab` (including the record's stored residual mass). The bound is
/// `sum_{k,k'} |<h_v,k, h_i,k'>| r_v,k r_i,k'`. Both records' targets must
/// lie in `vocab`.
pub fn restriction_bound(v: &SampleRecord, i: &SampleRecord, vocab: &RestrictedVocab) -> Result<f64> {
    check_dims(v, i)?;
    let rv = outside_mass(v, vocab)?;
    let ri = outside_mass(i, vocab)?;
    let mut acc = 0.0;
    for (k, &a) in rv.iter().enumerate() {
        for (kp, &b) in ri.iter().enumerate() {
            acc += dot(v.hidden_row(k), i.hidden_row(kp)).abs() * a * b;
        }
    }
    Ok(acc)
}

/// Per-position probability mass outside `vocab`.
pub fn outside_mass(rec: &SampleRecord, vocab: &RestrictedVocab) -> Result<Vec<f64>> {
    if let Some(t) = rec.targets.iter().find(|&&t| !vocab.contains(t)) {
        return Err(Error::InvalidArgument(format!(
            "target {t} of {} is outside the restricted vocabulary",
            rec.id
        )));
    }
    let excluded: Vec<usize> = rec
        .domain
        .tokens()
        .iter()
        .enumerate()
        .filter(|(_, &t)| !vocab.contains(t))
        .map(|(j, _)| j)
        .collect();
    Ok(rec
        .probs
        .iter()
        .map(|row| row.residual_mass + excluded.iter().map(|&j| row.values[j]).sum::<f64>())
        .collect())
}

/// Which vocabulary error rows are restricted to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum VocabMode {
    /// Per batch and valuation record: targets of the batch plus targets of
    /// the valuation record.
    #[default]
    BatchUnion,
    /// The dataset vocabulary `V_D`.
    Dataset,
    /// The full model vocabulary when the dump covers all of it, otherwise
    /// the dataset vocabulary.
    FullIfAvailable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScorePath {
    /// Pick per batch by estimated cost.
    #[default]
    Auto,
    Pairwise,
    Sketch,
}

#[derive(Clone, Debug)]
pub struct ValuationConfig {
    pub batch_size: usize,
    pub vocab_mode: VocabMode,
    pub path: ScorePath,
    /// Worker threads; `None` uses rayon's default.
    pub threads: Option<usize>,
    /// Divide each score by `T_v * T_i`. Off by default.
    pub normalize_length: bool,
    /// Size of the model vocabulary, when known.
    pub global_vocab_size: Option<usize>,
}

impl Default for ValuationConfig {
    fn default() -> Self {
        ValuationConfig {
            batch_size: 64,
            vocab_mode: VocabMode::BatchUnion,
            path: ScorePath::Auto,
            threads: None,
            normalize_length: false,
            global_vocab_size: None,
        }
    }
}

/// Training records scored together share one sketch tile.
const TILE: usize = 8;

/// Decides the scoring route for one batch from operation counts.
fn choose_path(path: ScorePath, val_len: usize, train_len: usize, n_pairs: usize, vocab: usize, d: usize) -> ScorePath {
    match path {
        ScorePath::Auto => {
            let pairwise = val_len as f64 * train_len as f64 * (vocab + d) as f64;
            let sketch = (train_len as f64 + n_pairs as f64) * (vocab * d) as f64;
            if sketch <= pairwise {
                ScorePath::Sketch
            } else {
                ScorePath::Pairwise
            }
        }
        p => p,
    }
}

fn check_compatible(rec: &SampleRecord, domain: &Arc<RestrictedVocab>, dim: usize) -> Result<()> {
    if rec.dim != dim {
        return Err(Error::DimensionMismatch {
            left: dim,
            right: rec.dim,
        });
    }
    if !Arc::ptr_eq(&rec.domain, domain) && rec.domain != *domain {
        return Err(Error::VocabMismatch(format!(
            "record {} uses a different dataset vocabulary",
            rec.id
        )));
    }
    Ok(())
}

/// Scores every training record against every valuation record.
///
/// Training records are consumed from `training` in batches of
/// `config.batch_size`; only one batch is held in memory at a time. Table
/// rows follow `valuation` order and columns follow training order. Each
/// score is computed by one worker in a fixed order, so the table does not
/// depend on the thread count.
pub fn run_valuation<I>(training: I, valuation: &[SampleRecord], config: &ValuationConfig) -> Result<ScoreTable>
where
    I: IntoIterator<Item = Result<SampleRecord>>,
{
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let first = valuation.first().ok_or(Error::Empty("valuation set"))?;
    let domain = first.domain.clone();
    let dim = first.dim;
    for v in valuation {
        check_compatible(v, &domain, dim)?;
    }
    let mode = match config.vocab_mode {
        VocabMode::FullIfAvailable if config.global_vocab_size == Some(domain.len()) => VocabMode::Dataset,
        VocabMode::FullIfAvailable => {
            log::warn!(
                "full vocabulary not available in dump ({} of {:?} tokens); using the dataset vocabulary",
                domain.len(),
                config.global_vocab_size
            );
            VocabMode::Dataset
        }
        m => m,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    // Training records may be read from a non-Send source, so only the
    // per-batch parallel sections run inside the pool.
    (|| {
        let val_targets: Vec<RestrictedVocab> = valuation.iter().map(|v| v.target_vocab()).collect();
        let val_union = val_targets
            .iter()
            .fold(RestrictedVocab::default(), |acc, t| acc.union(t));
        let val_len_total: usize = valuation.iter().map(|v| v.len()).sum();
        let mut val_sketches: Option<Vec<Sketch>> = None;

        let mut training_ids = Vec::new();
        // Column-major: training record -> scores against each valuation record.
        let mut columns: Vec<Vec<f64>> = Vec::new();
        let mut iter = training.into_iter();
        loop {
            let mut batch = Vec::with_capacity(config.batch_size);
            for rec in iter.by_ref().take(config.batch_size) {
                let rec = rec?;
                check_compatible(&rec, &domain, dim)?;
                batch.push(rec);
            }
            if batch.is_empty() {
                break;
            }

            let batch_targets = target_union(&batch);
            let union = match mode {
                VocabMode::BatchUnion => Arc::new(batch_targets.union(&val_union)),
                _ => domain.clone(),
            };
            let train_len: usize = batch.iter().map(|r| r.len()).sum();
            let route = choose_path(
                config.path,
                val_len_total,
                train_len,
                batch.len() * valuation.len(),
                union.len(),
                dim,
            );
            let hats: Vec<Arc<RestrictedVocab>> = valuation
                .iter()
                .zip(&val_targets)
                .map(|(_, vt)| match mode {
                    VocabMode::BatchUnion => Arc::new(batch_targets.union(vt)),
                    _ => domain.clone(),
                })
                .collect();

            let block = match route {
                ScorePath::Sketch => {
                    if val_sketches.is_none() {
                        val_sketches = Some(pool.install(|| {
                            valuation
                                .par_iter()
                                .map(|v| build_sketch(v, &domain))
                                .collect::<Result<Vec<_>>>()
                        })?);
                    }
                    let val_sketches = val_sketches.as_deref().expect("built above");
                    pool.install(|| score_batch_sketch(&batch, &union, &domain, &hats, val_sketches))?
                }
                _ => pool.install(|| score_batch_pairwise(&batch, valuation, &hats))?,
            };

            for (rec, mut col) in batch.iter().zip(block) {
                if config.normalize_length {
                    for (s, v) in col.iter_mut().zip(valuation) {
                        *s /= (v.len() * rec.len()) as f64;
                    }
                }
                training_ids.push(rec.id.clone());
                columns.push(col);
            }
        }
        if columns.is_empty() {
            return Err(Error::Empty("training set"));
        }

        let n_train = columns.len();
        let mut scores = vec![0.0; valuation.len() * n_train];
        for (i, col) in columns.iter().enumerate() {
            for (v, &s) in col.iter().enumerate() {
                scores[v * n_train + i] = s;
            }
        }
        ScoreTable::new(
            valuation.iter().map(|v| v.id.clone()).collect(),
            training_ids,
            scores,
        )
    })()
}

/// Sketch route for one batch. Training sketches are built over `union`;
/// valuation sketches are over `domain`; each pair sums the rows of its own
/// restricted vocabulary.
fn score_batch_sketch(
    batch: &[SampleRecord],
    union: &Arc<RestrictedVocab>,
    domain: &RestrictedVocab,
    hats: &[Arc<RestrictedVocab>],
    val_sketches: &[Sketch],
) -> Result<Vec<Vec<f64>>> {
    let train_sketches = batch
        .par_iter()
        .map(|r| build_sketch(r, union))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<(usize, usize)>> = hats
        .iter()
        .map(|hat| {
            hat.tokens()
                .iter()
                .map(|&z| {
                    let v_row = domain.local(z).expect("batch vocabulary is within the domain");
                    let t_row = union.local(z).expect("valuation vocabulary is within the batch union");
                    (v_row, t_row)
                })
                .collect()
        })
        .collect();

    let tiles: Vec<Vec<Vec<f64>>> = train_sketches
        .par_chunks(TILE)
        .map(|tile| {
            let mut out = vec![vec![0.0; val_sketches.len()]; tile.len()];
            let mut acc = [0.0f64; TILE];
            for (v, (mv, rows)) in val_sketches.iter().zip(&rows).enumerate() {
                // Row-outer order keeps the valuation row hot; each pair still
                // sums its row dots in list order, as `sketch_dot_rows` does.
                acc.iter_mut().for_each(|a| *a = 0.0);
                for &(a, b) in rows {
                    let row = mv.row(a);
                    for (s, mi) in acc.iter_mut().zip(tile) {
                        *s += dot(row, mi.row(b));
                    }
                }
                for (col, &s) in out.iter_mut().zip(&acc) {
                    col[v] = s;
                }
            }
            out
        })
        .collect();
    Ok(tiles.into_iter().flatten().collect())
}

fn score_batch_pairwise(
    batch: &[SampleRecord],
    valuation: &[SampleRecord],
    hats: &[Arc<RestrictedVocab>],
) -> Result<Vec<Vec<f64>>> {
    let val_errors = valuation
        .iter()
        .zip(hats)
        .map(|(v, hat)| Ok(error_matrix(v, hat, &hat.project_onto(&v.domain)?)))
        .collect::<Result<Vec<_>>>()?;
    batch
        .par_iter()
        .map(|rec| {
            valuation
                .iter()
                .zip(hats)
                .zip(&val_errors)
                .map(|((v, hat), ev)| {
                    let ei = error_matrix(rec, hat, &hat.project_onto(&rec.domain)?);
                    Ok(pairwise_from_errors(v, ev, rec, &ei, hat.len()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Mean of the selected valuation rows, per training record.
pub fn group_value(table: &ScoreTable, valuation_ids: &[&str]) -> Result<Vec<f64>> {
    if valuation_ids.is_empty() {
        return Err(Error::Empty("valuation id subset"));
    }
    let rows = valuation_ids
        .iter()
        .map(|id| table.valuation_index(id))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![0.0; table.n_training()];
    for &r in &rows {
        for (o, s) in out.iter_mut().zip(table.row(r)) {
            *o += s;
        }
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Orders ids by descending score, ties by ascending id.
pub fn rank_scores<'a>(ids: &'a [String], scores: &[f64]) -> Vec<(&'a str, f64)> {
    let mut out: Vec<(&str, f64)> = ids.iter().map(String::as_str).zip(scores.iter().copied()).collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(b.0)));
    out
}

/// Training records ranked for one valuation record.
pub fn rank(table: &ScoreTable, valuation_id: &str) -> Result<Vec<(String, f64)>> {
    let v = table.valuation_index(valuation_id)?;
    Ok(rank_scores(&table.training_ids, table.row(v))
        .into_iter()
        .map(|(id, s)| (id.to_string(), s))
        .collect())
}

/// Shortest decimal string that parses back to the same `f64`.
pub fn format_score(x: f64) -> String {
    format!("{x:?}")
}

/// Writes `valuation_id,training_id,score` rows, sorted by valuation id and
/// then by rank.
pub fn write_scores_csv<W: Write>(table: &ScoreTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::ScoreTable(e.to_string());
    w.write_record(["valuation_id", "training_id", "score"]).map_err(csv_err)?;
    let mut order: Vec<usize> = (0..table.n_valuation()).collect();
    order.sort_by(|&a, &b| table.valuation_ids[a].cmp(&table.valuation_ids[b]));
    for v in order {
        let vid = &table.valuation_ids[v];
        for (tid, s) in rank_scores(&table.training_ids, table.row(v)) {
            w.write_record([vid.as_str(), tid, &format_score(s)]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::ScoreTable(e.to_string()))?;
    Ok(())
}

/// Parses the CSV written by [`write_scores_csv`]. Ids are ordered by first
/// appearance; every (valuation, training) pair must occur exactly once.
pub fn read_scores_csv<R: Read>(input: R) -> Result<ScoreTable> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| Error::ScoreTable(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["valuation_id", "training_id", "score"] {
        return Err(Error::ScoreTable(format!("unexpected header {headers:?}")));
    }
    let mut val_index: HashMap<String, usize> = HashMap::new();
    let mut train_index: HashMap<String, usize> = HashMap::new();
    let mut val_ids = Vec::new();
    let mut train_ids = Vec::new();
    let mut entries = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::ScoreTable(e.to_string()))?;
        let (vid, tid, s) = (&rec[0], &rec[1], &rec[2]);
        let score: f64 = s
            .parse()
            .map_err(|_| Error::ScoreTable(format!("row {}: bad score {s:?}", line + 2)))?;
        let v = *val_index.entry(vid.to_string()).or_insert_with(|| {
            val_ids.push(vid.to_string());
            val_ids.len() - 1
        });
        let i = *train_index.entry(tid.to_string()).or_insert_with(|| {
            train_ids.push(tid.to_string());
            train_ids.len() - 1
        });
        entries.push((v, i, score));
    }
    let n = train_ids.len();
    let mut scores = vec![f64::NAN; val_ids.len() * n];
    for (v, i, s) in entries {
        let slot = &mut scores[v * n + i];
        if !slot.is_nan() {
            return Err(Error::ScoreTable(format!(
                "duplicate pair ({}, {})",
                val_ids[v], train_ids[i]
            )));
        }
        *slot = s;
    }
    if let Some(pos) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::ScoreTable(format!(
            "missing pair ({}, {})",
            val_ids[pos / n],
            train_ids[pos % n]
        )));
    }
    ScoreTable::new(val_ids, train_ids, scores)
}
