//! Seeded generators for records, toy-model instances and labelled class
//! datasets, plus the numerical checks built on them.

use std::ops::Range;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::record::{ProbRow, RestrictedVocab, Role, SampleRecord, TokenId};
use crate::toy::{self, gaussian_vec, ToyModel, ToySample};

/// Random record over `domain`: Gaussian hidden rows, targets drawn from
/// the domain, probability rows with in-domain mass `1 - residual`.
pub fn random_record<R: Rng + ?Sized>(
    rng: &mut R,
    id: &str,
    len: usize,
    dim: usize,
    domain: &Arc<RestrictedVocab>,
    residual: f64,
) -> SampleRecord {
    assert!(!domain.is_empty(), "empty domain");
    assert!((0.0..1.0).contains(&residual), "residual mass must be in [0, 1)");
    let targets = (0..len)
        .map(|_| *domain.tokens().choose(rng).expect("non-empty"))
        .collect();
    let probs = (0..len).map(|_| random_prob_row(rng, domain.len(), residual)).collect();
    SampleRecord {
        id: id.to_string(),
        role: Role::Training,
        class_label: None,
        clean: None,
        targets,
        hidden: gaussian_vec(rng, len * dim, 1.0),
        dim,
        probs,
        domain: domain.clone(),
    }
}

/// Probabilities proportional to `exp(g)` with standard Gaussian `g`,
/// scaled to total `1 - residual`.
pub fn random_prob_row<R: Rng + ?Sized>(rng: &mut R, n: usize, residual: f64) -> ProbRow {
    let mut values: Vec<f64> = gaussian_vec(rng, n, 1.0).into_iter().map(f64::exp).collect();
    let total: f64 = values.iter().sum();
    let scale = (1.0 - residual) / total;
    values.iter_mut().for_each(|p| *p *= scale);
    ProbRow {
        values,
        residual_mass: residual,
    }
}

/// Rounds every stored real of `rec` to the nearest `f32`.
pub fn round_to_f32(rec: &mut SampleRecord) {
    let round = |x: &mut f64| *x = *x as f32 as f64;
    rec.hidden.iter_mut().for_each(round);
    for row in &mut rec.probs {
        row.values.iter_mut().for_each(round);
        round(&mut row.residual_mass);
    }
}

/// Adds random tokens of `domain` to `base` until it holds `size` tokens
/// (or all of `domain`).
pub fn pad_vocab<R: Rng + ?Sized>(
    rng: &mut R,
    base: &RestrictedVocab,
    domain: &RestrictedVocab,
    size: usize,
) -> RestrictedVocab {
    let mut extra: Vec<TokenId> = domain.tokens().iter().copied().filter(|&t| !base.contains(t)).collect();
    extra.shuffle(rng);
    let need = size.saturating_sub(base.len());
    let added = RestrictedVocab::from_tokens(extra.into_iter().take(need));
    base.union(&added)
}

/// The targets of `rec`, padded from `domain` to `size` tokens.
pub fn covering_subvocab<R: Rng + ?Sized>(
    rng: &mut R,
    rec: &SampleRecord,
    domain: &RestrictedVocab,
    size: usize,
) -> RestrictedVocab {
    pad_vocab(rng, &rec.target_vocab(), domain, size)
}

/// Copy of `rec` holding only the positions in `range`.
pub fn slice_positions(rec: &SampleRecord, range: Range<usize>) -> SampleRecord {
    let d = rec.dim;
    SampleRecord {
        id: rec.id.clone(),
        role: rec.role,
        class_label: rec.class_label.clone(),
        clean: rec.clean,
        targets: rec.targets[range.clone()].to_vec(),
        hidden: rec.hidden[range.start * d..range.end * d].to_vec(),
        dim: d,
        probs: rec.probs[range].to_vec(),
        domain: rec.domain.clone(),
    }
}

/// Shape of a random toy instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToySizes {
    pub vocab: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for ToySizes {
    fn default() -> Self {
        ToySizes {
            vocab: 20,
            dim: 8,
            n_train: 12,
            n_valid: 4,
            min_len: 2,
            max_len: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyInstance {
    pub model: ToyModel,
    pub train: Vec<ToySample>,
    pub valid: Vec<ToySample>,
}

/// Random toy model with training and valuation samples. With `sharing`,
/// every other training sample reuses the contexts of a valuation sample
/// for a prefix of its positions, so the two have identical prefixes.
pub fn toy_instance<R: Rng + ?Sized>(rng: &mut R, sizes: &ToySizes, sharing: bool) -> ToyInstance {
    let scale = 1.0 / (sizes.dim as f64).sqrt();
    let mut model = ToyModel::random(sizes.vocab, sizes.dim, rng);
    let draw_sample = |model: &mut ToyModel, rng: &mut R, id: String| {
        let len = rng.random_range(sizes.min_len..=sizes.max_len);
        let targets = (0..len).map(|_| TokenId(rng.random_range(0..sizes.vocab as u32))).collect();
        let embeddings = (0..len).map(|_| gaussian_vec(rng, sizes.dim, scale)).collect();
        model.add_sample(&id, targets, embeddings).expect("fresh ids")
    };
    let valid: Vec<ToySample> = (0..sizes.n_valid)
        .map(|n| draw_sample(&mut model, rng, format!("v{n:02}")))
        .collect();
    let mut train = Vec::with_capacity(sizes.n_train);
    for n in 0..sizes.n_train {
        let id = format!("t{n:02}");
        if sharing && n % 2 == 0 && !valid.is_empty() {
            let src = &valid[(n / 2) % valid.len()];
            let len = rng.random_range(sizes.min_len..=sizes.max_len);
            let shared = rng.random_range(1..=len.min(src.len()));
            let mut contexts = Vec::with_capacity(len);
            for k in 0..len {
                let key = (id.clone(), k);
                let ctx = if k < shared {
                    model.alias(key, src.contexts[k]).expect("fresh key");
                    src.contexts[k]
                } else {
                    model.add_context(key, gaussian_vec(rng, sizes.dim, scale)).expect("fresh key")
                };
                contexts.push(ctx);
            }
            // identical prefixes imply identical targets before the last shared position
            let mut targets: Vec<TokenId> = src.targets[..shared - 1].to_vec();
            targets.extend((shared - 1..len).map(|_| TokenId(rng.random_range(0..sizes.vocab as u32))));
            train.push(ToySample {
                id,
                targets,
                contexts,
                class_label: None,
                clean: None,
            });
        } else {
            train.push(draw_sample(&mut model, rng, id));
        }
    }
    ToyInstance { model, train, valid }
}

/// Compares [`toy::sft_gradient`] against central differences of
/// [`toy::sft_loss`] on every parameter. Returns the largest absolute
/// deviation and the number of coordinates checked.
pub fn finite_difference_check(model: &ToyModel, samples: &[ToySample], step: f64) -> (f64, usize) {
    let analytic = toy::sft_gradient(model, samples).flatten();
    let n_w = model.w.len();
    let d = model.dim;
    let mut probe = model.clone();
    let mut max_err = 0.0f64;
    fn coord(m: &mut ToyModel, idx: usize, n_w: usize, d: usize) -> &mut f64 {
        if idx < n_w {
            &mut m.w[idx]
        } else {
            let j = idx - n_w;
            &mut m.embeddings[j / d][j % d]
        }
    }
    for (idx, &g) in analytic.iter().enumerate() {
        let orig = *coord(&mut probe, idx, n_w, d);
        *coord(&mut probe, idx, n_w, d) = orig + step;
        let up = toy::sft_loss(&probe, samples);
        *coord(&mut probe, idx, n_w, d) = orig - step;
        let down = toy::sft_loss(&probe, samples);
        *coord(&mut probe, idx, n_w, d) = orig;
        max_err = max_err.max(((up - down) / (2.0 * step) - g).abs());
    }
    (max_err, analytic.len())
}

/// One point of the first-order likelihood-change check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaylorPoint {
    pub lr: f64,
    /// `ln pi_v` after one step minus before.
    pub actual: f64,
    /// `(lr / n) sum_i <grad ln pi_v, grad ln pi_i>`.
    pub predicted: f64,
    pub residual: f64,
}

impl TaylorPoint {
    pub fn relative(&self) -> f64 {
        self.residual / self.actual.abs().max(1e-300)
    }
}

/// Likelihood change of `v` after one gradient step on `train`, against
/// its first-order prediction, for each learning rate.
pub fn taylor_residuals(
    model: &ToyModel,
    train: &[ToySample],
    v: &ToySample,
    lrs: &[f64],
) -> Result<Vec<TaylorPoint>> {
    if train.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    let before = toy::log_likelihood(model, v);
    let influence: f64 = train.iter().map(|i| toy::hessian_free_score(model, v, i)).sum();
    lrs.iter()
        .map(|&lr| {
            let next = toy::gradient_step(model, train, lr)?;
            let actual = toy::log_likelihood(&next, v) - before;
            let predicted = lr / train.len() as f64 * influence;
            Ok(TaylorPoint {
                lr,
                actual,
                predicted,
                residual: (actual - predicted).abs(),
            })
        })
        .collect()
}

/// Layout of a labelled class dataset. Each class owns a block of
/// `motif_size` target tokens and an embedding centroid; every context
/// embedding is `common + cluster_scale * centroid + noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub n_classes: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub motif_size: usize,
    pub dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub common_scale: f64,
    pub cluster_scale: f64,
    pub noise_scale: f64,
    /// Fraction of training samples whose label and targets move to another
    /// class while their inputs stay in the original cluster.
    pub flip_fraction: f64,
}

impl Default for ClassSpec {
    fn default() -> Self {
        ClassSpec {
            n_classes: 5,
            n_train: 50,
            n_valid: 10,
            motif_size: 4,
            dim: 16,
            min_len: 3,
            max_len: 10,
            common_scale: 1.0,
            cluster_scale: 1.0,
            noise_scale: 0.3,
            flip_fraction: 0.0,
        }
    }
}

impl ClassSpec {
    pub fn vocab_size(&self) -> usize {
        self.n_classes * self.motif_size
    }
}

pub fn class_name(c: usize) -> String {
    format!("c{c}")
}

/// Balanced labelled dataset on a fresh random toy model. Training samples
/// are `t000..`, valuation samples `v000..`; valuation samples are always
/// clean. Exactly `round(flip_fraction * n_train)` training samples are
/// flipped.
pub fn class_dataset<R: Rng + ?Sized>(rng: &mut R, spec: &ClassSpec) -> Result<ToyInstance> {
    if spec.n_classes < 2 || spec.motif_size == 0 || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::InvalidArgument(format!("degenerate class spec {spec:?}")));
    }
    if !(0.0..=1.0).contains(&spec.flip_fraction) {
        return Err(Error::InvalidArgument(format!("flip fraction {}", spec.flip_fraction)));
    }
    let d = spec.dim;
    let unit = 1.0 / (d as f64).sqrt();
    let mut model = ToyModel::random(spec.vocab_size(), d, rng);
    let common = gaussian_vec(rng, d, unit);
    let centroids: Vec<Vec<f64>> = (0..spec.n_classes).map(|_| gaussian_vec(rng, d, unit)).collect();

    let n_flip = (spec.flip_fraction * spec.n_train as f64).round() as usize;
    let mut flipped = vec![false; spec.n_train];
    let mut order: Vec<usize> = (0..spec.n_train).collect();
    order.shuffle(rng);
    for &i in &order[..n_flip] {
        flipped[i] = true;
    }

    let make = |model: &mut ToyModel, rng: &mut R, id: String, cluster: usize, label: usize, clean: bool| {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let targets = (0..len)
            .map(|_| TokenId((label * spec.motif_size + rng.random_range(0..spec.motif_size)) as u32))
            .collect();
        let embeddings = (0..len)
            .map(|_| {
                let noise = gaussian_vec(rng, d, unit);
                (0..d)
                    .map(|j| {
                        spec.common_scale * common[j]
                            + spec.cluster_scale * centroids[cluster][j]
                            + spec.noise_scale * noise[j]
                    })
                    .collect()
            })
            .collect();
        let mut s = model.add_sample(&id, targets, embeddings)?;
        s.class_label = Some(class_name(label));
        s.clean = Some(clean);
        Ok::<_, Error>(s)
    };

    let mut train = Vec::with_capacity(spec.n_train);
    for (n, &flip) in flipped.iter().enumerate() {
        let cluster = n % spec.n_classes;
        let label = if flip {
            (cluster + rng.random_range(1..spec.n_classes)) % spec.n_classes
        } else {
            cluster
        };
        train.push(make(&mut model, rng, format!("t{n:03}"), cluster, label, !flip)?);
    }
    let valid = (0..spec.n_valid)
        .map(|n| {
            let c = n % spec.n_classes;
            make(&mut model, rng, format!("v{n:03}"), c, c, true)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyInstance { model, train, valid })
}

/// Runs `steps` gradient steps on `samples`.
pub fn train(model: &ToyModel, samples: &[ToySample], lr: f64, steps: usize) -> Result<ToyModel> {
    let mut m = model.clone();
    for _ in 0..steps {
        m = toy::gradient_step(&m, samples, lr)?;
    }
    Ok(m)
}

/// Labels file text (`id,class,clean` per line) for toy samples that carry
/// labels.
pub fn labels_text(samples: &[ToySample]) -> String {
    let mut out = String::new();
    for s in samples {
        if let Some(c) = &s.class_label {
            out.push_str(&s.id);
            out.push(',');
            out.push_str(c);
            if let Some(clean) = s.clean {
                out.push_str(if clean { ",1" } else { ",0" });
            }
            out.push('\n');
        }
    }
    out
}

/// Synthetic scoring workload: records of `len` positions over the full
/// vocabulary `0..vocab`, with targets drawn uniformly.
#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub len: usize,
    pub dim: usize,
    pub vocab: usize,
}

impl BenchSpec {
    pub fn domain(&self) -> Arc<RestrictedVocab> {
        Arc::new(RestrictedVocab::full(self.vocab))
    }

    pub fn record<R: Rng + ?Sized>(&self, rng: &mut R, id: String, role: Role, domain: &Arc<RestrictedVocab>) -> SampleRecord {
        let mut r = random_record(rng, &id, self.len, self.dim, domain, 0.0);
        r.role = role;
        r
    }
}
