mod common;

use std::collections::BTreeMap;

use common::{tiny_config, Fixture};
use modnmt_core::corpus::cipher_oracle_translate;
use modnmt_core::evaluation::*;
use modnmt_core::trainer::*;
use modnmt_core::translator::{Decoding, Route, Translator};
use proptest::prelude::*;

#[test]
fn identical_corpus_scores_one_hundred() {
    let r = corpus_bleu(&["a b c d e", "f g h i"], &["a b c d e", "f g h i"], false).unwrap();
    assert_eq!(r.bleu, 100.0);
    assert_eq!(r.brevity_penalty, 1.0);
}

#[test]
fn missing_trigram_zeroes_unsmoothed_bleu() {
    let r = corpus_bleu(&["a b x d"], &["a b c d"], false).unwrap();
    assert_eq!(r.precisions[2], 0.0);
    assert_eq!(r.bleu, 0.0);
    assert!(!r.smoothed);
}

#[test]
fn unigram_counts_are_clipped() {
    let r = corpus_bleu(&["a a a a"], &["a b c d"], false).unwrap();
    assert_eq!(r.precisions[0], 0.25);
    assert_eq!((r.matches[0], r.totals[0]), (1, 4));
}

#[test]
fn brevity_penalty_formula() {
    let r = corpus_bleu(&["a b c"], &["a b c d e f"], true).unwrap();
    assert!((r.brevity_penalty - (1.0f64 - 6.0 / 3.0).exp()).abs() < 1e-15);
    let (hl, rl) = (r.hyp_len, r.ref_len);
    assert_eq!((hl, rl), (3, 6));
}

#[test]
fn malformed_inputs_are_errors() {
    assert!(corpus_bleu(&["a"], &["a", "b"], false).is_err());
    let empty: [&str; 0] = [];
    assert!(corpus_bleu(&empty, &empty, false).is_err());
}

#[test]
fn oracle_translations_score_one_hundred() {
    let f = Fixture::new(50, (3, 12), 3);
    let hyps: Vec<String> = f.text["x"]
        .iter()
        .map(|s| cipher_oracle_translate(&f.ciphers["x"], &f.ciphers["y"], s).unwrap())
        .collect();
    assert_eq!(corpus_bleu(&hyps, &f.text["y"], false).unwrap().bleu, 100.0);
}

fn small_system() -> (Fixture, modnmt_core::model::ModuleRegistry) {
    let f = Fixture::new(60, (3, 6), 4);
    let corpus = f.corpus("x", "y");
    let cfg = tiny_config(10);
    let joint = joint_train(
        JointData {
            corpus: &corpus,
            src_vocab: &f.vocabs["x"],
            tgt_vocab: &f.vocabs["y"],
            validation: None,
        },
        &cfg,
        &mut |_, _| {},
    )
    .unwrap();
    let zc = f.corpus("z", "x");
    let added = add_language(
        joint.registry,
        AdditionData {
            corpus: &zc,
            new_vocab: &f.vocabs["z"],
            pivot_vocab: &f.vocabs["x"],
        },
        &cfg,
        false,
        &mut |_, _| {},
    )
    .unwrap();
    (f, added.registry)
}

#[test]
fn grid_reports_every_direction_and_the_ordering_check() {
    let (f, registry) = small_system();
    let vocabs = f.vocabularies();
    let tr = Translator::new(&registry, &vocabs);
    let dirs = GridDirection::parse_list("joint x y\njoint y x\nadded z x\nzero_shot z y\npivot z y x\n").unwrap();
    let test: BTreeMap<String, Vec<String>> = f.text.iter().map(|(k, v)| (k.clone(), v[..20].to_vec())).collect();
    let grid = experiment_grid(&tr, &dirs, &test, Decoding::Greedy).unwrap();
    assert_eq!(grid.rows.len(), 5);
    assert_eq!(grid.rows[4].direction.route, Route::Pivot { via: "x".into() });

    let csv = grid.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], GRID_CSV_HEADER);
    assert!(lines[4].starts_with("zero_shot,z,y,"));
    assert!(lines[5].starts_with("pivot:x,z,y,"));

    let checks = grid.ordering_checks();
    assert_eq!(checks.len(), 1);
    assert_eq!((checks[0].src.as_str(), checks[0].tgt.as_str()), ("z", "y"));
    let md = grid.to_markdown();
    assert!(md.contains("ordering z→y"));
    // `joint` has no z→y cell, so that cell stays blank.
    let joint_row = md.lines().find(|l| l.starts_with("| joint |")).unwrap();
    assert!(joint_row.contains("|  |"));

    let again = experiment_grid(&tr, &dirs, &test, Decoding::Greedy).unwrap();
    assert_eq!(again, grid);
}

#[test]
fn empty_direction_list_gives_empty_grid() {
    let (f, registry) = small_system();
    let vocabs = f.vocabularies();
    let tr = Translator::new(&registry, &vocabs);
    let grid = experiment_grid(&tr, &[], &f.text, Decoding::Greedy).unwrap();
    assert!(grid.rows.is_empty());
    assert_eq!(grid.to_csv(), format!("{GRID_CSV_HEADER}\n"));
    assert!(grid.ordering_checks().is_empty());
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..10).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn joint_shuffle_leaves_bleu_unchanged(
        pairs in prop::collection::vec((sentence(), sentence()), 1..12),
        rotate in 0usize..12,
    ) {
        let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let base = corpus_bleu(&h, &r, true).unwrap();
        let mut shuffled = pairs.clone();
        shuffled.reverse();
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        let (h2, r2): (Vec<String>, Vec<String>) = shuffled.into_iter().unzip();
        let other = corpus_bleu(&h2, &r2, true).unwrap();
        prop_assert_eq!(base.matches, other.matches);
        prop_assert_eq!(base.totals, other.totals);
        prop_assert_eq!(base.bleu, other.bleu);
        prop_assert!((0.0..=100.0).contains(&base.bleu));
    }

    #[test]
    fn truncation_lowers_the_brevity_penalty(pairs in prop::collection::vec((sentence(), sentence()), 1..8)) {
        let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let truncated: Vec<String> = h
            .iter()
            .map(|s| {
                let w: Vec<&str> = s.split_whitespace().collect();
                w[..w.len().div_ceil(2)].join(" ")
            })
            .collect();
        let full = corpus_bleu(&h, &r, false).unwrap();
        let cut = corpus_bleu(&truncated, &r, false).unwrap();
        prop_assume!(cut.hyp_len < full.hyp_len && cut.hyp_len < cut.ref_len);
        prop_assert!(cut.brevity_penalty < full.brevity_penalty);
    }

    #[test]
    fn self_scoring_is_exact(refs in prop::collection::vec(sentence(), 1..10)) {
        let long: Vec<String> = refs.iter().map(|s| format!("{s} a b c d")).collect();
        prop_assert_eq!(corpus_bleu(&long, &long, false).unwrap().bleu, 100.0);
    }
}
