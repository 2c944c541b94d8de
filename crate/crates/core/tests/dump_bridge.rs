//! Toy model -> dump directory -> engine, checked against the toy model's
//! exact embedding term.

use std::sync::Arc;

use forvalue::ingest::{read_all, read_dump, write_dump, DumpLayout};
use forvalue::synth::{self, ToySizes};
use forvalue::toy;
use forvalue::valuation::{run_valuation, ScorePath, ValuationConfig, VocabMode};
use forvalue::{RestrictedVocab, Role};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn dumped_toy_scores_match_term_i() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = synth::toy_instance(&mut rng, &ToySizes::default(), false);
        let vocab = Arc::new(RestrictedVocab::full(inst.model.vocab_size));
        let layout = DumpLayout {
            embedding_dim: inst.model.dim,
            global_vocab_size: Some(inst.model.vocab_size as u32),
            vocab: vocab.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        let train_dir = dir.path().join("train");
        let valid_dir = dir.path().join("valid");
        let train = toy::export_records(&inst.model, &inst.train, Role::Training, Some(&vocab)).unwrap();
        let valid = toy::export_records(&inst.model, &inst.valid, Role::Valuation, Some(&vocab)).unwrap();
        write_dump(&train_dir, &layout, train).unwrap();
        write_dump(&valid_dir, &layout, valid).unwrap();

        let (_, valid) = read_all(&valid_dir).unwrap();
        let (_, reader) = read_dump(&train_dir).unwrap();
        let cfg = ValuationConfig {
            vocab_mode: VocabMode::FullIfAvailable,
            global_vocab_size: Some(inst.model.vocab_size),
            path: ScorePath::Sketch,
            ..ValuationConfig::default()
        };
        let table = run_valuation(reader, &valid, &cfg).unwrap();
        for (v, sv) in inst.valid.iter().enumerate() {
            for (i, si) in inst.train.iter().enumerate() {
                let oracle = toy::term_i(&inst.model, sv, si);
                let got = table.get(v, i);
                // inputs are stored as f32
                assert!(
                    (got - oracle).abs() <= 1e-5 * oracle.abs().max(1e-3),
                    "seed {seed} ({v}, {i}): {got} vs {oracle}"
                );
            }
        }
    }
}

#[test]
fn streaming_reader_yields_manifest_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dom = Arc::new(RestrictedVocab::full(6));
    let recs: Vec<_> = (0..5)
        .map(|n| {
            let mut r = synth::random_record(&mut rng, &format!("s{n}"), 2, 3, &dom, 0.0);
            synth::round_to_f32(&mut r);
            r
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let layout = DumpLayout {
        embedding_dim: 3,
        global_vocab_size: None,
        vocab: dom.clone(),
    };
    write_dump(dir.path(), &layout, recs.clone()).unwrap();
    let (manifest, reader) = read_dump(dir.path()).unwrap();
    assert_eq!(reader.len(), 5);
    let ids: Vec<String> = reader.map(|r| r.unwrap().id).collect();
    let expected: Vec<String> = manifest.samples.iter().map(|s| s.id.clone()).collect();
    assert_eq!(ids, expected);
    assert_eq!(ids, recs.iter().map(|r| r.id.clone()).collect::<Vec<_>>());
}
