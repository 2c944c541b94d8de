//! Prediction-error rows and per-sample sketches.
//!
//! The error row at position `k` over a vocabulary `U` is
//! `e_{y_k} - pi(. | x, y_<k)` restricted to `U`. A record's sketch is
//! `M = sum_k err_k ⊗ h_k`, a `|U| × d` matrix. Row `z` of `M` depends only
//! on token `z`, so the sketch over a sub-vocabulary is a row subset of the
//! sketch over any superset.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernel;
use crate::record::{RestrictedVocab, SampleRecord, Sketch};

/// Union of the target tokens of a batch and a valuation record.
pub fn batch_vocab<'a, I>(batch: I, valuation: &'a SampleRecord) -> RestrictedVocab
where
    I: IntoIterator<Item = &'a SampleRecord>,
{
    target_union(batch.into_iter().chain(std::iter::once(valuation)))
}

/// Union of the target tokens of `records`.
pub fn target_union<'a, I>(records: I) -> RestrictedVocab
where
    I: IntoIterator<Item = &'a SampleRecord>,
{
    RestrictedVocab::from_tokens(records.into_iter().flat_map(|r| r.targets.iter().copied()))
}

/// `e_{y_k} - pi_k` restricted to a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRow {
    pub vocab: Arc<RestrictedVocab>,
    pub values: Vec<f64>,
}

/// Error row of `rec` at position `k` over `vocab`.
pub fn error_row(rec: &SampleRecord, k: usize, vocab: &Arc<RestrictedVocab>) -> Result<ErrorRow> {
    if k >= rec.len() {
        return Err(Error::InvalidArgument(format!(
            "position {k} out of range for {} ({} positions)",
            rec.id,
            rec.len()
        )));
    }
    let proj = vocab.project_onto(&rec.domain)?;
    let mut values = vec![0.0; vocab.len()];
    fill_error_row(rec, k, vocab, &proj, &mut values);
    Ok(ErrorRow {
        vocab: vocab.clone(),
        values,
    })
}

/// Writes the error row at `k` into `out`; `proj` maps local indices of
/// `vocab` onto the record's domain.
#[inline]
pub(crate) fn fill_error_row(rec: &SampleRecord, k: usize, vocab: &RestrictedVocab, proj: &[usize], out: &mut [f64]) {
    let probs = &rec.probs[k].values;
    for (o, &j) in out.iter_mut().zip(proj) {
        *o = -probs[j];
    }
    if let Some(t) = vocab.local(rec.targets[k]) {
        out[t] += 1.0;
    }
}

/// All error rows of `rec` over `vocab`, `T × |vocab|` row-major.
pub(crate) fn error_matrix(rec: &SampleRecord, vocab: &RestrictedVocab, proj: &[usize]) -> Vec<f64> {
    let n = vocab.len();
    let mut out = vec![0.0; rec.len() * n];
    for (k, chunk) in out.chunks_exact_mut(n.max(1)).enumerate().take(rec.len()) {
        fill_error_row(rec, k, vocab, proj, chunk);
    }
    out
}

/// Sketch of `rec` over `vocab`: `sum_k err_k ⊗ h_k`, summed in ascending
/// position order.
pub fn build_sketch(rec: &SampleRecord, vocab: &Arc<RestrictedVocab>) -> Result<Sketch> {
    let proj = vocab.project_onto(&rec.domain)?;
    let d = rec.dim;
    let t = rec.len();
    let target_local: Vec<Option<usize>> = rec.targets.iter().map(|&y| vocab.local(y)).collect();
    let mut m = vec![0.0f64; vocab.len() * d];
    for (z, row) in m.chunks_exact_mut(d.max(1)).enumerate().take(vocab.len()) {
        let j = proj[z];
        for k in 0..t {
            let mut e = -rec.probs[k].values[j];
            if target_local[k] == Some(z) {
                e += 1.0;
            }
            kernel::axpy(e, rec.hidden_row(k), row);
        }
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("sketch of {}", rec.id)));
    }
    Ok(Sketch {
        vocab: vocab.clone(),
        dim: d,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{ProbRow, Role, TokenId};
    use crate::synth;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab(ids: &[u32]) -> Arc<RestrictedVocab> {
        Arc::new(RestrictedVocab::from_tokens(ids.iter().map(|&t| TokenId(t))))
    }

    fn record(id: &str, domain: &Arc<RestrictedVocab>, targets: &[u32], probs: &[&[f64]], hidden: &[f64]) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            role: Role::Training,
            class_label: None,
            clean: None,
            targets: targets.iter().map(|&t| TokenId(t)).collect(),
            dim: hidden.len() / targets.len(),
            hidden: hidden.to_vec(),
            probs: probs
                .iter()
                .map(|p| ProbRow {
                    values: p.to_vec(),
                    residual_mass: 1.0 - p.iter().sum::<f64>(),
                })
                .collect(),
            domain: domain.clone(),
        }
    }

    fn uniform(n: usize, t: usize) -> Vec<f64> {
        vec![1.0 / n as f64; t]
    }

    #[test]
    fn batch_vocab_is_sorted_union() {
        let dom = vocab(&[3, 5, 9, 12]);
        let u = uniform(4, 4);
        let a = record("a", &dom, &[3, 5], &[&u, &u], &[0.0; 2]);
        let b = record("b", &dom, &[5, 9], &[&u, &u], &[0.0; 2]);
        let v = record("v", &dom, &[9, 12], &[&u, &u], &[0.0; 2]);
        let got = batch_vocab([&a, &b], &v);
        assert_eq!(got.tokens(), &[3, 5, 9, 12].map(TokenId));
        assert_eq!(batch_vocab([&v], &v), v.target_vocab());
        let r = record("r", &dom, &[9, 9, 9], &[&u, &u, &u], &[0.0; 3]);
        assert_eq!(target_union([&r]).tokens(), &[TokenId(9)]);
    }

    #[test]
    fn error_row_examples() {
        let dom = vocab(&[0, 1, 2]);
        let rec = record("a", &dom, &[0], &[&[0.2, 0.3, 0.5]], &[1.0, 2.0]);
        let row = error_row(&rec, 0, &dom).unwrap();
        let want = [0.8, -0.3, -0.5];
        for (a, b) in row.values.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }

        let conf = record("c", &dom, &[1], &[&[0.0, 1.0, 0.0]], &[1.0]);
        assert!(error_row(&conf, 0, &dom).unwrap().values.iter().all(|&x| x == 0.0));

        let dom4 = vocab(&[0, 1, 2, 3]);
        let uni = record("u", &dom4, &[2], &[&[0.25; 4]], &[1.0]);
        assert_eq!(error_row(&uni, 0, &dom4).unwrap().values, vec![-0.25, -0.25, 0.75, -0.25]);
    }

    #[test]
    fn error_row_rejects_foreign_tokens() {
        let dom = vocab(&[0, 1, 2]);
        let rec = record("a", &dom, &[0], &[&[0.2, 0.3, 0.5]], &[1.0]);
        let wider = vocab(&[0, 1, 7]);
        assert!(matches!(error_row(&rec, 0, &wider), Err(Error::MissingToken(7))));
        assert!(error_row(&rec, 1, &dom).is_err());
    }

    #[test]
    fn single_outer_product() {
        let dom = vocab(&[0, 1, 2]);
        let rec = record("a", &dom, &[0], &[&[0.2, 0.3, 0.5]], &[1.0, 2.0]);
        let s = build_sketch(&rec, &dom).unwrap();
        let want = [0.8, 1.6, -0.3, -0.6, -0.5, -1.0];
        for (a, b) in s.m.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{:?}", s.m);
        }
    }

    #[test]
    fn confident_record_has_zero_sketch() {
        let dom = vocab(&[0, 1, 2]);
        let rec = record(
            "a",
            &dom,
            &[2, 0],
            &[&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]],
            &[1.0, -2.0, 0.5, 3.0],
        );
        assert!(build_sketch(&rec, &dom).unwrap().m.iter().all(|&x| x == 0.0));
    }

    /// Straightforward reference: materialize each outer product and add.
    fn naive_sketch(rec: &SampleRecord, vocab: &RestrictedVocab) -> Vec<f64> {
        let d = rec.dim;
        let mut m = vec![0.0; vocab.len() * d];
        for k in 0..rec.len() {
            let mut err = vec![0.0; vocab.len()];
            for (z, &tok) in vocab.tokens().iter().enumerate() {
                let ind = if tok == rec.targets[k] { 1.0 } else { 0.0 };
                err[z] = ind - rec.probs[k].values[rec.domain.local(tok).unwrap()];
            }
            for z in 0..vocab.len() {
                for c in 0..d {
                    m[z * d + c] += err[z] * rec.hidden[k * d + c];
                }
            }
        }
        m
    }

    #[test]
    fn matches_naive_reference_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dom = vocab(&[2, 3, 5, 8, 13, 21]);
        let rec = synth::random_record(&mut rng, "r", 2, 3, &dom, 0.05);
        let sub = Arc::new(synth::covering_subvocab(&mut rng, &rec, &dom, 4));
        assert_eq!(sub.len(), 4);
        let s = build_sketch(&rec, &sub).unwrap();
        let want = naive_sketch(&rec, &sub);
        for (a, b) in s.m.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn sketch_is_linear_in_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dom = vocab(&[1, 2, 3, 4, 5, 6, 7]);
        let rec = synth::random_record(&mut rng, "r", 5, 4, &dom, 0.1);
        let whole = build_sketch(&rec, &dom).unwrap();
        let mut sum = vec![0.0; whole.m.len()];
        for k in 0..rec.len() {
            let slice = synth::slice_positions(&rec, k..k + 1);
            for (acc, x) in sum.iter_mut().zip(build_sketch(&slice, &dom).unwrap().m) {
                *acc += x;
            }
        }
        for (a, b) in whole.m.iter().zip(&sum) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn error_row_sum_is_one_minus_in_vocab_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dom = vocab(&[0, 4, 8, 12, 16]);
        let rec = synth::random_record(&mut rng, "r", 4, 2, &dom, 0.2);
        let sub = Arc::new(synth::covering_subvocab(&mut rng, &rec, &dom, rec.target_vocab().len() + 1));
        let proj = sub.project_onto(&dom).unwrap();
        for k in 0..rec.len() {
            let row = error_row(&rec, k, &sub).unwrap();
            let mass: f64 = proj.iter().map(|&j| rec.probs[k].values[j]).sum();
            let sum: f64 = row.values.iter().sum();
            assert!((sum - (1.0 - mass)).abs() < 1e-12);
        }
    }
}
