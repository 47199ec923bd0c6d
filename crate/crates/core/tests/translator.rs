mod common;

use std::sync::OnceLock;

use common::{tiny_config, Fixture};
use modnmt_core::corpus::{cipher_oracle_translate, TokenMatrix};
use modnmt_core::model::{encode, ModuleRegistry};
use modnmt_core::objective::{DistanceKind, DistanceMetric};
use modnmt_core::trainer::*;
use modnmt_core::translator::*;
use modnmt_core::NmtError;
use modnmt_tensor::Graph;

struct Trained {
    fixture: Fixture,
    registry: ModuleRegistry,
}

/// Eight memorized sentence pairs plus a briefly trained `enc.z`.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let fixture = Fixture::new(8, (3, 5), 21);
        let corpus = fixture.corpus("x", "y");
        let config = TrainingConfig {
            batch_tokens: 512,
            lr_peak: 5e-3,
            metric: DistanceMetric::new(DistanceKind::None, 0.0).unwrap(),
            ..tiny_config(400)
        };
        let joint = joint_train(
            JointData {
                corpus: &corpus,
                src_vocab: &fixture.vocabs["x"],
                tgt_vocab: &fixture.vocabs["y"],
                validation: None,
            },
            &config,
            &mut |_, _| {},
        )
        .unwrap();
        let zc = fixture.corpus("z", "x");
        let added = add_language(
            joint.registry,
            AdditionData {
                corpus: &zc,
                new_vocab: &fixture.vocabs["z"],
                pivot_vocab: &fixture.vocabs["x"],
            },
            &TrainingConfig { steps: 30, ..config },
            false,
            &mut |_, _| {},
        )
        .unwrap();
        Trained {
            fixture,
            registry: added.registry,
        }
    })
}

#[test]
fn greedy_reproduces_memorized_targets() {
    let t = trained();
    let vocabs = t.fixture.vocabularies();
    let tr = Translator::new(&t.registry, &vocabs);
    let xs = &t.fixture.text["x"];
    let out = tr.translate(&TranslationRequest::direct("x", "y"), xs).unwrap();
    for (src, hyp) in xs.iter().zip(&out) {
        let oracle = cipher_oracle_translate(&t.fixture.ciphers["x"], &t.fixture.ciphers["y"], src).unwrap();
        assert_eq!(*hyp, oracle);
    }
    assert_eq!(out, tr.translate(&TranslationRequest::direct("x", "y"), xs).unwrap());
    let auto = tr.translate(&TranslationRequest::direct("x", "x"), xs).unwrap();
    assert_eq!(&auto, xs);
}

#[test]
fn zero_length_cap_gives_empty_output() {
    let t = trained();
    let mut g = Graph::new();
    let enc = t.registry.encoder("x").unwrap().bind_constant(&mut g).unwrap();
    let dec = t.registry.decoder("y").unwrap().bind_constant(&mut g).unwrap();
    let ids = t.fixture.vocabs["x"].encode(&t.fixture.text["x"][0]).ids;
    let memory = encode(&mut g, &enc, &TokenMatrix::from_rows(&[ids])).unwrap();
    assert_eq!(greedy_decode(&mut g, &dec, &memory, &[0]).unwrap(), vec![Vec::<usize>::new()]);
    assert!(beam_decode(&mut g, &dec, &memory, 1, 0).unwrap().is_empty());
}

fn random_sentences(n: usize, seed: u64) -> Vec<String> {
    let f = Fixture::new(n, (1, 8), seed);
    f.text["x"].clone()
}

#[test]
fn beam_of_width_one_is_greedy() {
    let t = trained();
    let vocabs = t.fixture.vocabularies();
    let tr = Translator::new(&t.registry, &vocabs);
    let inputs = random_sentences(100, 99);
    let greedy = tr.translate(&TranslationRequest::direct("x", "y"), &inputs).unwrap();
    let beam = tr
        .translate(&TranslationRequest::direct("x", "y").with_decoding(Decoding::Beam { width: 1 }), &inputs)
        .unwrap();
    assert_eq!(greedy, beam);
}

#[test]
fn beam_stops_early_when_every_hypothesis_ends() {
    let t = trained();
    let vocabs = t.fixture.vocabularies();
    let tr = Translator::new(&t.registry, &vocabs);
    let xs = &t.fixture.text["x"];
    let req = TranslationRequest::direct("x", "y").with_decoding(Decoding::Beam { width: 4 });
    for src in xs {
        let out = tr.translate_sentence(&req, src).unwrap();
        let cap = req.length.max_len(src.split_whitespace().count());
        assert!(out.split_whitespace().count() < cap);
        let oracle = cipher_oracle_translate(&t.fixture.ciphers["x"], &t.fixture.ciphers["y"], src).unwrap();
        assert_eq!(out, oracle);
    }
}

#[test]
fn zero_shot_touches_only_source_and_target_vocabularies() {
    let t = trained();
    let vocabs = t.fixture.vocabularies();
    let tr = Translator::new(&t.registry, &vocabs);
    let counts = || {
        ["x", "y", "z"]
            .map(|l| vocabs.get(l).unwrap().use_count())
    };
    let before = counts();
    tr.translate(&TranslationRequest::zero_shot("z", "y"), &t.fixture.text["z"]).unwrap();
    let after = counts();
    assert_eq!(after[0], before[0], "pivot vocabulary was used");
    assert!(after[1] > before[1] && after[2] > before[2]);

    tr.translate(&TranslationRequest::pivot("z", "x", "y"), &t.fixture.text["z"]).unwrap();
    assert!(counts()[0] > after[0]);
}

#[test]
fn pivot_is_two_direct_calls() {
    let t = trained();
    let vocabs = t.fixture.vocabularies();
    let tr = Translator::new(&t.registry, &vocabs);
    let zs = &t.fixture.text["z"];
    let via = tr.translate(&TranslationRequest::direct("z", "x"), zs).unwrap();
    let two = tr.translate(&TranslationRequest::direct("x", "y"), &via).unwrap();
    let pivot = tr.translate(&TranslationRequest::pivot("z", "x", "y"), zs).unwrap();
    assert_eq!(pivot, two);
    let zero = tr.translate(&TranslationRequest::zero_shot("z", "y"), zs).unwrap();
    let direct = tr.translate(&TranslationRequest::direct("z", "y"), zs).unwrap();
    assert_eq!(zero, direct);
}

#[test]
fn missing_modules_are_route_errors() {
    let t = trained();
    let vocabs = t.fixture.vocabularies();
    let tr = Translator::new(&t.registry, &vocabs);
    let err = tr.translate_sentence(&TranslationRequest::direct("x", "z"), "").unwrap_err();
    assert!(matches!(err, NmtError::Route(_)), "{err}");
    let err = tr.translate_sentence(&TranslationRequest::direct("w", "y"), "").unwrap_err();
    assert!(matches!(err, NmtError::Route(_)), "{err}");
}

#[test]
fn wrong_vocabulary_is_rejected() {
    let t = trained();
    let mut vocabs = t.fixture.vocabularies();
    let mut lines = t.fixture.text["y"].clone();
    lines.push("extra".into());
    vocabs.insert(modnmt_core::tokenizer::learn_bpe("y", &lines, 40).unwrap());
    let tr = Translator::new(&t.registry, &vocabs);
    let err = tr.translate_sentence(&TranslationRequest::direct("x", "y"), "").unwrap_err();
    assert!(matches!(err, NmtError::VocabMismatch { .. }), "{err}");
}

#[test]
fn request_metadata_names_route_and_modules() {
    let meta = TranslationRequest::pivot("z", "x", "y")
        .with_decoding(Decoding::Beam { width: 4 })
        .metadata();
    assert!(meta.contains("route: pivot:x"));
    assert!(meta.contains("modules: enc.z dec.x enc.x dec.y"));
    assert!(meta.contains("decoding: beam:4"));
    assert_eq!(TranslationRequest::zero_shot("z", "y").legs(), [("z".to_string(), "y".to_string())]);
    assert_eq!(LengthPolicy::default().max_len(4), 13);
}
