use std::sync::Arc;

use forvalue::ingest::{decode_record, encode_record, SampleEntry};
use forvalue::metrics::{auc, recall_at_class};
use forvalue::sketch::build_sketch;
use forvalue::synth;
use forvalue::valuation::{
    restriction_bound, run_valuation, score_pairwise, score_sketch, ScorePath, ValuationConfig, VocabMode,
};
use forvalue::{RestrictedVocab, Role, SampleRecord, TokenId};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn domain_from(tokens: Vec<u32>) -> Arc<RestrictedVocab> {
    Arc::new(RestrictedVocab::from_tokens(tokens.into_iter().map(TokenId)))
}

fn entry(rec: &SampleRecord) -> SampleEntry {
    SampleEntry {
        id: rec.id.clone(),
        role: rec.role,
        class_label: None,
        clean: None,
        file: "x.fvd".into(),
        byte_length: 0,
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_decode_encode_is_byte_exact(
        seed in any::<u64>(),
        tokens in prop::collection::btree_set(0u32..5000, 1..40),
        len in 0usize..12,
        dim in 1usize..10,
        residual in 0.0f64..0.5,
    ) {
        let dom = domain_from(tokens.into_iter().collect());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rec = synth::random_record(&mut rng, "s", len, dim, &dom, residual);
        synth::round_to_f32(&mut rec);
        let bytes = encode_record(&rec).unwrap();
        let back = decode_record(&bytes, &entry(&rec), &dom).unwrap();
        prop_assert_eq!(&back, &rec);
        prop_assert_eq!(encode_record(&back).unwrap(), bytes);
    }

    #[test]
    fn vocab_lookup_round_trips(tokens in prop::collection::vec(0u32..100_000, 0..64)) {
        let v = RestrictedVocab::from_tokens(tokens.iter().copied().map(TokenId));
        for (local, &t) in v.tokens().iter().enumerate() {
            prop_assert_eq!(v.local(t), Some(local));
            prop_assert_eq!(v.token(local), t);
        }
        for &t in &tokens {
            prop_assert!(v.contains(TokenId(t)));
        }
        prop_assert!(v.tokens().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sketch_is_sum_of_position_sketches(seed in any::<u64>(), len in 1usize..8, dim in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dom = Arc::new(RestrictedVocab::full(12));
        let rec = synth::random_record(&mut rng, "r", len, dim, &dom, 0.1);
        let whole = build_sketch(&rec, &dom).unwrap();
        let mut sum = vec![0.0; whole.m.len()];
        for k in 0..len {
            let part = build_sketch(&synth::slice_positions(&rec, k..k + 1), &dom).unwrap();
            for (s, x) in sum.iter_mut().zip(&part.m) {
                *s += x;
            }
        }
        for (a, b) in whole.m.iter().zip(&sum) {
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-12) + 1e-15);
        }
    }

    #[test]
    fn sketch_and_pairwise_agree(
        seed in any::<u64>(),
        tv in 1usize..10,
        ti in 1usize..10,
        dim in 1usize..16,
        pad in 0usize..20,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dom = Arc::new(RestrictedVocab::full(40));
        let v = synth::random_record(&mut rng, "v", tv, dim, &dom, 0.05);
        let i = synth::random_record(&mut rng, "i", ti, dim, &dom, 0.05);
        let base = v.target_vocab().union(&i.target_vocab());
        let hat = Arc::new(synth::pad_vocab(&mut rng, &base, &dom, base.len() + pad));
        let p = score_pairwise(&v, &i, &hat).unwrap();
        let s = score_sketch(&build_sketch(&v, &hat).unwrap(), &build_sketch(&i, &hat).unwrap()).unwrap();
        prop_assert!((s - p).abs() <= 1e-5 * p.abs().max(1.0), "{} vs {}", s, p);
    }

    #[test]
    fn score_is_symmetric(seed in any::<u64>(), tv in 1usize..8, ti in 1usize..8, dim in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dom = Arc::new(RestrictedVocab::full(16));
        let v = synth::random_record(&mut rng, "v", tv, dim, &dom, 0.0);
        let i = synth::random_record(&mut rng, "i", ti, dim, &dom, 0.0);
        let hat = v.target_vocab().union(&i.target_vocab());
        let a = score_pairwise(&v, &i, &hat).unwrap();
        let b = score_pairwise(&i, &v, &hat).unwrap();
        prop_assert!(close(a, b, 1e-12));
    }

    #[test]
    fn batch_size_does_not_change_scores(seed in any::<u64>(), batch in 1usize..9, sketch in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dom = Arc::new(RestrictedVocab::full(24));
        let train: Vec<SampleRecord> = (0..9)
            .map(|n| synth::random_record(&mut rng, &format!("t{n}"), 1 + n % 4, 6, &dom, 0.0))
            .collect();
        let mut valid: Vec<SampleRecord> = (0..3)
            .map(|n| synth::random_record(&mut rng, &format!("v{n}"), 2 + n, 6, &dom, 0.0))
            .collect();
        valid.iter_mut().for_each(|v| v.role = Role::Valuation);
        let path = if sketch { ScorePath::Sketch } else { ScorePath::Pairwise };
        let run = |batch_size, vocab_mode| {
            let cfg = ValuationConfig { batch_size, path, vocab_mode, ..ValuationConfig::default() };
            run_valuation(train.iter().cloned().map(Ok), &valid, &cfg).unwrap()
        };
        let whole = run(64, VocabMode::Dataset);
        let split = run(batch, VocabMode::Dataset);
        prop_assert_eq!(&whole.training_ids, &split.training_ids);
        for (a, b) in whole.scores.iter().zip(&split.scores) {
            prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-12), "{} vs {}", a, b);
        }
        // Batch-union vocabularies depend on batch composition; the shift
        // from the dataset vocabulary stays within the restriction bound of
        // the smallest vocabulary the pair can see.
        let union = run(batch, VocabMode::BatchUnion);
        for (vi, v) in valid.iter().enumerate() {
            for (ii, i) in train.iter().enumerate() {
                let hat = v.target_vocab().union(&i.target_vocab());
                let bound = restriction_bound(v, i, &hat).unwrap();
                let diff = (union.get(vi, ii) - whole.get(vi, ii)).abs();
                prop_assert!(diff <= bound * (1.0 + 1e-9) + 1e-12, "{} > {}", diff, bound);
            }
        }
    }

    #[test]
    fn auc_ignores_increasing_transforms(
        scores in prop::collection::vec(-100.0f64..100.0, 2..30),
        flags in prop::collection::vec(any::<bool>(), 30),
    ) {
        let labels: Vec<bool> = flags[..scores.len()].to_vec();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let moved: Vec<f64> = scores.iter().map(|s| (s / 50.0).exp() * 3.0 - 1.0).collect();
        let a = auc(&scores, &labels).unwrap();
        let b = auc(&moved, &labels).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn recall_ignores_transforms_and_order(
        raw in prop::collection::btree_set(-10_000i32..10_000, 2..30),
        flags in prop::collection::vec(any::<bool>(), 30),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let scores: Vec<f64> = raw.iter().map(|&s| s as f64).collect();
        let labels: Vec<bool> = flags[..scores.len()].to_vec();
        prop_assume!(labels.iter().any(|&l| l));
        let r = recall_at_class(&scores, &labels).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s + 7.0).collect();
        prop_assert_eq!(recall_at_class(&cubed, &labels).unwrap(), r);
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let ps: Vec<f64> = order.iter().map(|&j| scores[j]).collect();
        let pl: Vec<bool> = order.iter().map(|&j| labels[j]).collect();
        prop_assert_eq!(recall_at_class(&ps, &pl).unwrap(), r);
    }
}
