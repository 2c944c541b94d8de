//! Unconstrained-features language model with exact gradients.
//!
//! Every context (an input together with a target prefix) owns a free
//! embedding `h ∈ R^d`; a shared unembedding `W ∈ R^{|V|×d}` turns it into
//! next-token logits. The parameters are `W` and the context embeddings, so
//! the gradient of a sample's log-likelihood is available in closed form:
//!
//! ```text
//! d/dW ln pi(y|x)   = sum_k (e_{y_k} - pi_k) h_k^T
//! d/dh_c ln pi(y|x) = sum_{k : ctx(k) = c} W^T (e_{y_k} - pi_k)
//! ```
//!
//! The gradient dot product between two samples splits into an embedding
//! part over `W` ([`term_i`], the valuation score on the full vocabulary) and
//! an unembedding part that is non-zero only where the samples share a
//! context ([`term_ii`]). This module is the reference the engine is checked
//! against; it favors clarity over speed.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernel::{axpy, dot};
use crate::record::{ProbRow, RestrictedVocab, Role, SampleRecord, TokenId};

/// Index of a context embedding.
pub type ContextId = usize;

/// Names a context by the sample that introduced it and the position.
pub type ContextKey = (String, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub vocab_size: usize,
    pub dim: usize,
    /// `vocab_size × dim` row-major; row `z` is the unembedding of token `z`.
    pub w: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
    keys: BTreeMap<ContextKey, ContextId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub id: String,
    pub targets: Vec<TokenId>,
    /// Context that predicts each target.
    pub contexts: Vec<ContextId>,
    pub class_label: Option<String>,
    pub clean: Option<bool>,
}

impl ToySample {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

impl ToyModel {
    pub fn new(vocab_size: usize, dim: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != vocab_size * dim {
            return Err(Error::LengthMismatch {
                what: "unembedding matrix",
                expected: vocab_size * dim,
                found: w.len(),
            });
        }
        Ok(ToyModel {
            vocab_size,
            dim,
            w,
            embeddings: Vec::new(),
            keys: BTreeMap::new(),
        })
    }

    /// Unembedding entries drawn from `N(0, 1/d)`.
    pub fn random<R: Rng + ?Sized>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let w = gaussian_vec(rng, vocab_size * dim, 1.0 / (dim as f64).sqrt());
        ToyModel::new(vocab_size, dim, w).expect("shape is consistent")
    }

    pub fn add_context(&mut self, key: ContextKey, embedding: Vec<f64>) -> Result<ContextId> {
        if embedding.len() != self.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: embedding.len(),
            });
        }
        if self.keys.contains_key(&key) {
            return Err(Error::DuplicateId(format!("context {}:{}", key.0, key.1)));
        }
        let id = self.embeddings.len();
        self.embeddings.push(embedding);
        self.keys.insert(key, id);
        Ok(id)
    }

    /// Makes `key` resolve to an existing embedding.
    pub fn alias(&mut self, key: ContextKey, target: ContextId) -> Result<()> {
        if target >= self.embeddings.len() {
            return Err(Error::UnknownId(format!("context {target}")));
        }
        if self.keys.contains_key(&key) {
            return Err(Error::DuplicateId(format!("context {}:{}", key.0, key.1)));
        }
        self.keys.insert(key, target);
        Ok(())
    }

    pub fn context(&self, key: &ContextKey) -> Option<ContextId> {
        self.keys.get(key).copied()
    }

    /// Adds a sample whose positions get fresh contexts with the given
    /// embeddings.
    pub fn add_sample(&mut self, id: &str, targets: Vec<TokenId>, embeddings: Vec<Vec<f64>>) -> Result<ToySample> {
        if embeddings.len() != targets.len() {
            return Err(Error::LengthMismatch {
                what: "embeddings",
                expected: targets.len(),
                found: embeddings.len(),
            });
        }
        let contexts = embeddings
            .into_iter()
            .enumerate()
            .map(|(k, h)| self.add_context((id.to_string(), k), h))
            .collect::<Result<Vec<_>>>()?;
        Ok(ToySample {
            id: id.to_string(),
            targets,
            contexts,
            class_label: None,
            clean: None,
        })
    }

    fn unembedding(&self, z: usize) -> &[f64] {
        &self.w[z * self.dim..(z + 1) * self.dim]
    }

    pub fn logits(&self, ctx: ContextId) -> Vec<f64> {
        let h = &self.embeddings[ctx];
        (0..self.vocab_size).map(|z| dot(self.unembedding(z), h)).collect()
    }

    /// Next-token distribution at a context.
    pub fn probs(&self, ctx: ContextId) -> Vec<f64> {
        let logits = self.logits(ctx);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / total).collect()
    }

    /// `W^T (e_y - pi)`: gradient of `ln pi(y | ctx)` with respect to the
    /// context embedding.
    fn embedding_grad(&self, y: TokenId, probs: &[f64]) -> Vec<f64> {
        let mut g = self.unembedding(y.index()).to_vec();
        for (z, &p) in probs.iter().enumerate() {
            axpy(-p, self.unembedding(z), &mut g);
        }
        g
    }

    fn check_params(&self) -> bool {
        self.w.iter().chain(self.embeddings.iter().flatten()).all(|x| x.is_finite())
    }
}

pub(crate) fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn log_softmax_at(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[y] - lse
}

/// `sum_k ln softmax(W h_k)[y_k]`.
pub fn log_likelihood(model: &ToyModel, s: &ToySample) -> f64 {
    s.targets
        .iter()
        .zip(&s.contexts)
        .map(|(&y, &c)| log_softmax_at(&model.logits(c), y.index()))
        .sum()
}

/// A vector in parameter space: one block for `W`, one per context.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyGradient {
    pub w: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
}

impl ToyGradient {
    pub fn zeros(model: &ToyModel) -> Self {
        ToyGradient {
            w: vec![0.0; model.w.len()],
            embeddings: vec![vec![0.0; model.dim]; model.embeddings.len()],
        }
    }

    pub fn dot(&self, other: &ToyGradient) -> f64 {
        dot(&self.w, &other.w) + self.dot_embeddings(other)
    }

    pub fn dot_w(&self, other: &ToyGradient) -> f64 {
        dot(&self.w, &other.w)
    }

    pub fn dot_embeddings(&self, other: &ToyGradient) -> f64 {
        self.embeddings
            .iter()
            .zip(&other.embeddings)
            .map(|(a, b)| dot(a, b))
            .sum()
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &ToyGradient) {
        axpy(alpha, &other.w, &mut self.w);
        for (a, b) in self.embeddings.iter_mut().zip(&other.embeddings) {
            axpy(alpha, b, a);
        }
    }

    /// All coordinates, `W` first.
    pub fn flatten(&self) -> Vec<f64> {
        self.w.iter().chain(self.embeddings.iter().flatten()).copied().collect()
    }
}

/// Gradient of `ln pi(y_s | x_s)` over all parameters.
pub fn log_likelihood_gradient(model: &ToyModel, s: &ToySample) -> ToyGradient {
    let mut g = ToyGradient::zeros(model);
    let d = model.dim;
    for (&y, &c) in s.targets.iter().zip(&s.contexts) {
        let probs = model.probs(c);
        let h = &model.embeddings[c];
        for (z, &p) in probs.iter().enumerate() {
            let e = if z == y.index() { 1.0 - p } else { -p };
            axpy(e, h, &mut g.w[z * d..(z + 1) * d]);
        }
        let gh = model.embedding_grad(y, &probs);
        axpy(1.0, &gh, &mut g.embeddings[c]);
    }
    g
}

/// Gradient of the teacher-forcing loss `-(1/n) sum_i ln pi(y_i | x_i)`.
pub fn sft_gradient(model: &ToyModel, samples: &[ToySample]) -> ToyGradient {
    let mut g = ToyGradient::zeros(model);
    let scale = -1.0 / samples.len().max(1) as f64;
    for s in samples {
        g.add_scaled(scale, &log_likelihood_gradient(model, s));
    }
    g
}

/// Mean teacher-forcing loss.
pub fn sft_loss(model: &ToyModel, samples: &[ToySample]) -> f64 {
    -samples.iter().map(|s| log_likelihood(model, s)).sum::<f64>() / samples.len().max(1) as f64
}

/// One explicit gradient-descent step on the teacher-forcing loss.
pub fn gradient_step(model: &ToyModel, samples: &[ToySample], lr: f64) -> Result<ToyModel> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    let g = sft_gradient(model, samples);
    let mut next = model.clone();
    axpy(-lr, &g.w, &mut next.w);
    for (h, gh) in next.embeddings.iter_mut().zip(&g.embeddings) {
        axpy(-lr, gh, h);
    }
    if !next.check_params() {
        return Err(Error::NonFinite("toy model parameters after gradient step".into()));
    }
    Ok(next)
}

/// Full-vocabulary error vectors `e_{y_k} - pi_k`, one per position.
fn error_rows(model: &ToyModel, s: &ToySample) -> Vec<Vec<f64>> {
    s.targets
        .iter()
        .zip(&s.contexts)
        .map(|(&y, &c)| {
            let mut e: Vec<f64> = model.probs(c).into_iter().map(|p| -p).collect();
            e[y.index()] += 1.0;
            e
        })
        .collect()
}

/// Embedding/error alignment between two samples over the full vocabulary:
/// `sum_{k,k'} <err_v,k, err_i,k'> <h_v,k, h_i,k'>`.
pub fn term_i(model: &ToyModel, v: &ToySample, i: &ToySample) -> f64 {
    let ev = error_rows(model, v);
    let ei = error_rows(model, i);
    let mut acc = 0.0;
    for (a, &cv) in ev.iter().zip(&v.contexts) {
        for (b, &ci) in ei.iter().zip(&i.contexts) {
            acc += dot(a, b) * dot(&model.embeddings[cv], &model.embeddings[ci]);
        }
    }
    acc
}

/// Unembedding interaction: for every valuation position `k`, the inner
/// product of `W^T (e_{y_v,k} - pi_k)` with the sum of the same quantity
/// over all training positions that share `v`'s context at `k`. Both
/// factors use the distribution at that shared context.
pub fn term_ii(model: &ToyModel, v: &ToySample, train: &[ToySample]) -> f64 {
    let mut acc = 0.0;
    for (&y, &c) in v.targets.iter().zip(&v.contexts) {
        let probs = model.probs(c);
        let mut shared = vec![0.0; model.dim];
        let mut any = false;
        for s in train {
            for (&yi, &ci) in s.targets.iter().zip(&s.contexts) {
                if ci == c {
                    axpy(1.0, &model.embedding_grad(yi, &probs), &mut shared);
                    any = true;
                }
            }
        }
        if any {
            acc += dot(&model.embedding_grad(y, &probs), &shared);
        }
    }
    acc
}

/// Gradient dot product `<grad ln pi_v, grad ln pi_i>` over all parameters.
pub fn hessian_free_score(model: &ToyModel, v: &ToySample, i: &ToySample) -> f64 {
    log_likelihood_gradient(model, v).dot(&log_likelihood_gradient(model, i))
}

/// Score with every error-similarity weight set to one:
/// `<sum_k h_v,k, sum_k' h_i,k'>`.
pub fn emb_score(v: &SampleRecord, i: &SampleRecord) -> Result<f64> {
    if v.dim != i.dim {
        return Err(Error::DimensionMismatch {
            left: v.dim,
            right: i.dim,
        });
    }
    let sum = |r: &SampleRecord| {
        let mut s = vec![0.0; r.dim];
        for k in 0..r.len() {
            axpy(1.0, r.hidden_row(k), &mut s);
        }
        s
    };
    Ok(dot(&sum(v), &sum(i)))
}

/// Converts toy samples into engine records: hidden rows are the context
/// embeddings and probability rows the exact softmax restricted to `vocab`
/// (the full vocabulary when `None`), with the excluded mass as residual.
pub fn export_records(
    model: &ToyModel,
    samples: &[ToySample],
    role: Role,
    vocab: Option<&Arc<RestrictedVocab>>,
) -> Result<Vec<SampleRecord>> {
    let domain = match vocab {
        Some(v) => v.clone(),
        None => Arc::new(RestrictedVocab::full(model.vocab_size)),
    };
    if let Some(t) = domain.tokens().last() {
        if t.index() >= model.vocab_size {
            return Err(Error::MissingToken(t.0));
        }
    }
    let excluded: Vec<usize> = (0..model.vocab_size)
        .filter(|&z| !domain.contains(TokenId(z as u32)))
        .collect();
    samples
        .iter()
        .map(|s| {
            if let Some(t) = s.targets.iter().find(|&&t| !domain.contains(t)) {
                return Err(Error::InvalidArgument(format!(
                    "target {t} of {} is outside the export vocabulary",
                    s.id
                )));
            }
            let mut hidden = Vec::with_capacity(s.len() * model.dim);
            let mut probs = Vec::with_capacity(s.len());
            for &c in &s.contexts {
                hidden.extend_from_slice(&model.embeddings[c]);
                let p = model.probs(c);
                probs.push(ProbRow {
                    values: domain.tokens().iter().map(|t| p[t.index()]).collect(),
                    residual_mass: excluded.iter().map(|&z| p[z]).sum(),
                });
            }
            Ok(SampleRecord {
                id: s.id.clone(),
                role,
                class_label: s.class_label.clone(),
                clean: s.clean,
                targets: s.targets.clone(),
                hidden,
                dim: model.dim,
                probs,
                domain: domain.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, ToySizes};
    use crate::valuation::score_pairwise;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    /// Two-token model where `W = [[1], [-1]]`, so logits are `(h, -h)`.
    fn two_token_model() -> ToyModel {
        ToyModel::new(2, 1, vec![1.0, -1.0]).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_half() {
        let mut m = two_token_model();
        let s = m.add_sample("s", vec![TokenId(0), TokenId(1)], vec![vec![0.0], vec![0.0]]).unwrap();
        assert!((log_likelihood(&m, &s) - 2.0 * 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_approach_zero() {
        let mut m = two_token_model();
        // logit gap 2h = 20 toward the target
        let s = m.add_sample("s", vec![TokenId(0)], vec![vec![10.0]]).unwrap();
        let ll = log_likelihood(&m, &s);
        assert!(ll < 0.0 && ll > -1e-3, "{ll}");
    }

    #[test]
    fn log_likelihood_matches_direct_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = synth::toy_instance(&mut rng, &ToySizes::default(), true);
        for s in inst.train.iter().chain(&inst.valid) {
            let mut direct = 0.0;
            for (&y, &c) in s.targets.iter().zip(&s.contexts) {
                let h = &inst.model.embeddings[c];
                let logits: Vec<f64> = (0..inst.model.vocab_size)
                    .map(|z| (0..inst.model.dim).map(|j| inst.model.w[z * inst.model.dim + j] * h[j]).sum())
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                direct += (logits[y.index()].exp() / z).ln();
            }
            assert!(rel(log_likelihood(&inst.model, s), direct) < 1e-12);
        }
    }

    #[test]
    fn confident_model_has_zero_gradient() {
        let mut m = ToyModel::new(2, 1, vec![1.0, -1.0]).unwrap();
        let s = m.add_sample("s", vec![TokenId(0)], vec![vec![400.0]]).unwrap();
        let g = sft_gradient(&m, &[s]);
        assert!(g.flatten().iter().all(|&x| x.abs() < 1e-300));
    }

    #[test]
    fn aliased_context_gradient_is_a_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = ToyModel::random(6, 3, &mut rng);
        let a = m
            .add_sample("a", vec![TokenId(1)], vec![gaussian_vec(&mut rng, 3, 0.5)])
            .unwrap();
        m.alias(("b".into(), 0), a.contexts[0]).unwrap();
        let b = ToySample {
            id: "b".into(),
            targets: vec![TokenId(4)],
            contexts: vec![m.context(&("b".into(), 0)).unwrap()],
            class_label: None,
            clean: None,
        };
        let both = sft_gradient(&m, &[a.clone(), b.clone()]);
        let ga = log_likelihood_gradient(&m, &a);
        let gb = log_likelihood_gradient(&m, &b);
        let c = a.contexts[0];
        for j in 0..3 {
            let want = -(ga.embeddings[c][j] + gb.embeddings[c][j]) / 2.0;
            assert!((both.embeddings[c][j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = synth::toy_instance(&mut rng, &ToySizes::default(), true);
        let (max_err, _) = synth::finite_difference_check(&inst.model, &inst.train, 1e-5);
        assert!(max_err < 1e-6, "{max_err}");
    }

    #[test]
    fn term_i_equals_w_gradient_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inst = synth::toy_instance(&mut rng, &ToySizes::default(), true);
        for v in &inst.valid {
            let gv = log_likelihood_gradient(&inst.model, v);
            for i in &inst.train {
                let gi = log_likelihood_gradient(&inst.model, i);
                assert!(rel(term_i(&inst.model, v, i), gv.dot_w(&gi)) < 1e-9);
            }
        }
    }

    #[test]
    fn term_i_vanishes_for_zero_errors() {
        let mut m = two_token_model();
        let v = m.add_sample("v", vec![TokenId(0)], vec![vec![400.0]]).unwrap();
        let i = m.add_sample("i", vec![TokenId(1)], vec![vec![0.3]]).unwrap();
        assert_eq!(term_i(&m, &v, &i), 0.0);
    }

    #[test]
    fn term_ii_without_sharing_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = synth::toy_instance(&mut rng, &ToySizes::default(), false);
        for v in &inst.valid {
            assert_eq!(term_ii(&inst.model, v, &inst.train), 0.0);
            for i in &inst.train {
                let hf = hessian_free_score(&inst.model, v, i);
                assert!(rel(hf, term_i(&inst.model, v, i)) < 1e-9);
            }
        }
    }

    /// `W = [[1], [-1]]`, shared context with `h = 0` so `pi = (1/2, 1/2)`.
    /// `W^T(e_0 - pi) = 1 - 0 = 1`, `W^T(e_1 - pi) = -1 - 0 = -1`, so the
    /// unembedding term is `1 * -1 = -1`.
    #[test]
    fn term_ii_hand_instance() {
        let mut m = two_token_model();
        let v = m.add_sample("v", vec![TokenId(0)], vec![vec![0.0]]).unwrap();
        m.alias(("i".into(), 0), v.contexts[0]).unwrap();
        let i = ToySample {
            id: "i".into(),
            targets: vec![TokenId(1)],
            contexts: vec![v.contexts[0]],
            class_label: None,
            clean: None,
        };
        assert_eq!(term_ii(&m, &v, std::slice::from_ref(&i)), -1.0);
        // h = 0, so the embedding part is zero and the gradient dot product
        // is the unembedding interaction alone.
        assert_eq!(term_i(&m, &v, &i), 0.0);
        assert_eq!(hessian_free_score(&m, &v, &i), -1.0);
    }

    #[test]
    fn decomposition_is_exact_with_sharing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inst = synth::toy_instance(&mut rng, &ToySizes::default(), true);
        let mut saw_sharing = false;
        for v in &inst.valid {
            let t1: f64 = inst.train.iter().map(|i| term_i(&inst.model, v, i)).sum();
            let t2 = term_ii(&inst.model, v, &inst.train);
            saw_sharing |= t2 != 0.0;
            let full: f64 = inst.train.iter().map(|i| hessian_free_score(&inst.model, v, i)).sum();
            assert!(rel(t1 + t2, full) < 1e-9, "{} vs {full}", t1 + t2);
        }
        assert!(saw_sharing);
    }

    #[test]
    fn hessian_free_self_score_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inst = synth::toy_instance(&mut rng, &ToySizes::default(), true);
        for v in &inst.valid {
            let g = log_likelihood_gradient(&inst.model, v);
            assert!(rel(hessian_free_score(&inst.model, v, v), g.dot(&g)) < 1e-12);
            assert!(hessian_free_score(&inst.model, v, v) >= 0.0);
        }
    }

    #[test]
    fn gradient_step_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inst = synth::toy_instance(&mut rng, &ToySizes::default(), false);
        assert_eq!(gradient_step(&inst.model, &inst.train, 0.0).unwrap(), inst.model);
        let s = &inst.train[0];
        let next = gradient_step(&inst.model, std::slice::from_ref(s), 1e-3).unwrap();
        assert!(log_likelihood(&next, s) > log_likelihood(&inst.model, s));
        assert!(gradient_step(&inst.model, &inst.train, -1.0).is_err());
    }

    #[test]
    fn one_step_likelihood_change_is_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inst = synth::toy_instance(&mut rng, &ToySizes::default(), true);
        let res = synth::taylor_residuals(&inst.model, &inst.train, &inst.valid[0], &[1e-3, 5e-4, 2.5e-4]).unwrap();
        for w in res.windows(2) {
            let ratio = w[0].residual / w[1].residual;
            assert!((3.5..=4.5).contains(&ratio), "{ratio}");
            // relative error halves with eta
            let rel_ratio = w[0].relative() / w[1].relative();
            assert!((1.75..=2.25).contains(&rel_ratio), "{rel_ratio}");
        }
    }

    #[test]
    fn emb_score_examples() {
        let dom = Arc::new(RestrictedVocab::full(2));
        let mk = |h: Vec<f64>| SampleRecord {
            id: "x".into(),
            role: Role::Training,
            class_label: None,
            clean: None,
            targets: vec![TokenId(0); h.len() / 2],
            probs: vec![
                ProbRow {
                    values: vec![0.5, 0.5],
                    residual_mass: 0.0
                };
                h.len() / 2
            ],
            hidden: h,
            dim: 2,
            domain: dom.clone(),
        };
        let a = mk(vec![1.0, 0.0]);
        let b = mk(vec![0.0, 1.0]);
        assert_eq!(emb_score(&a, &b).unwrap(), 0.0);
        let c = mk(vec![1.0, 2.0, -3.0, 0.5]);
        assert_eq!(emb_score(&c, &c).unwrap(), 4.0 + 2.5 * 2.5);
    }

    /// With every error row equal to `e_0`, every weight is one and the
    /// pairwise score collapses to the embedding-only score.
    #[test]
    fn emb_score_is_pairwise_with_unit_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dom = Arc::new(RestrictedVocab::full(3));
        let mut v = synth::random_record(&mut rng, "v", 3, 4, &dom, 0.0);
        let mut i = synth::random_record(&mut rng, "i", 2, 4, &dom, 0.0);
        for r in [&mut v, &mut i] {
            for k in 0..r.len() {
                r.targets[k] = TokenId(0);
                r.probs[k] = ProbRow {
                    values: vec![0.0, 0.0, 0.0],
                    residual_mass: 1.0,
                };
            }
        }
        let pairwise = score_pairwise(&v, &i, &dom).unwrap();
        assert!(rel(pairwise, emb_score(&v, &i).unwrap()) < 1e-12);
    }

    #[test]
    fn export_matches_term_i_on_full_vocab() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inst = synth::toy_instance(&mut rng, &ToySizes::default(), false);
        let full = Arc::new(RestrictedVocab::full(inst.model.vocab_size));
        let val = export_records(&inst.model, &inst.valid, Role::Valuation, None).unwrap();
        let train = export_records(&inst.model, &inst.train, Role::Training, None).unwrap();
        for (rv, sv) in val.iter().zip(&inst.valid) {
            for (ri, si) in train.iter().zip(&inst.train) {
                let engine = score_pairwise(rv, ri, &full).unwrap();
                assert!(rel(engine, term_i(&inst.model, sv, si)) < 1e-6);
            }
        }
        for r in &val {
            for p in &r.probs {
                assert_eq!(p.residual_mass, 0.0);
                assert!((p.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn restricted_export_shrinks_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inst = synth::toy_instance(&mut rng, &ToySizes::default(), false);
        let all: Vec<ToySample> = inst.train.iter().chain(&inst.valid).cloned().collect();
        let targets = RestrictedVocab::from_tokens(all.iter().flat_map(|s| s.targets.iter().copied()));
        let vd = Arc::new(targets);
        let full = export_records(&inst.model, &all, Role::Training, None).unwrap();
        let restricted = export_records(&inst.model, &all, Role::Training, Some(&vd)).unwrap();
        for (f, r) in full.iter().zip(&restricted) {
            for (pf, pr) in f.probs.iter().zip(&r.probs) {
                assert!(pr.values.len() <= pf.values.len());
                assert!((pr.total() - 1.0).abs() < 1e-12);
            }
        }
        let missing = Arc::new(RestrictedVocab::from_tokens([TokenId(0)]));
        assert!(export_records(&inst.model, &all, Role::Training, Some(&missing)).is_err());
    }
}
