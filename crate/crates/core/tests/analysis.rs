mod common;

use std::collections::BTreeMap;

use common::Fixture;
use modnmt_core::analysis::*;
use modnmt_core::model::{ArchConfig, LanguageModule, ModuleKind, ModuleRegistry};
use modnmt_core::NmtError;
use modnmt_tensor::Tensor;
use proptest::prelude::*;

fn untrained(f: &Fixture, arch: ArchConfig) -> ModuleRegistry {
    let mut reg = ModuleRegistry::new();
    for (i, lang) in common::LANGS.iter().enumerate() {
        let v = &f.vocabs[*lang];
        for kind in [ModuleKind::Encoder, ModuleKind::Decoder] {
            reg.insert(LanguageModule::new(kind, lang, v.len(), arch, 40 + i as u64).unwrap(), v.hash())
                .unwrap();
        }
    }
    reg
}

fn multi(f: &Fixture, n: usize) -> BTreeMap<String, Vec<String>> {
    f.text.iter().map(|(k, v)| (k.clone(), v[..n].to_vec())).collect()
}

#[test]
fn four_languages_give_four_aligned_dumps() {
    let f = Fixture::new(DEFAULT_DUMP_SENTENCES, (3, 12), 1);
    let reg = untrained(&f, ArchConfig { d_model: 16, blocks: 1, heads: 2, ff: 32 });
    let before: Vec<Vec<u8>> = reg.iter().map(|m| m.module.param_bytes()).collect();
    let dumps = extract_representations(&reg, &f.vocabularies(), &f.text, &Stage::EncoderFinal).unwrap();
    assert_eq!(dumps.len(), 4);
    for d in &dumps {
        assert_eq!((d.rows(), d.dim()), (130, 16));
        assert_eq!(d.indices, (0..130).collect::<Vec<_>>());
        assert!(d.matrix.is_finite());
    }
    let after: Vec<Vec<u8>> = reg.iter().map(|m| m.module.param_bytes()).collect();
    assert_eq!(before, after);

    let again = extract_representations(&reg, &f.vocabularies(), &f.text, &Stage::EncoderFinal).unwrap();
    assert_eq!(again, dumps);
}

#[test]
fn repeated_sentence_gives_repeated_row() {
    let f = Fixture::new(40, (3, 12), 2);
    let reg = untrained(&f, ArchConfig { d_model: 16, blocks: 1, heads: 2, ff: 32 });
    let mut m = multi(&f, 40);
    for lines in m.values_mut() {
        lines[5] = lines[0].clone();
    }
    let dumps = extract_representations(&reg, &f.vocabularies(), &m, &Stage::EncoderFinal).unwrap();
    assert_eq!(dumps[0].row(0), dumps[0].row(5));
}

#[test]
fn decoder_stage_gives_one_dump_per_source_language() {
    let f = Fixture::new(40, (3, 12), 3);
    let reg = untrained(&f, ArchConfig { d_model: 16, blocks: 1, heads: 2, ff: 32 });
    let stage: Stage = "decoder_last:x".parse().unwrap();
    let dumps = extract_representations(&reg, &f.vocabularies(), &multi(&f, 40), &stage).unwrap();
    assert_eq!(dumps.len(), 4);
    assert!(dumps.iter().all(|d| d.stage == stage && d.rows() == 40));
    assert_ne!(dumps[0].matrix, dumps[1].matrix);
    assert!(matches!("decoder_block_3".parse::<Stage>(), Err(NmtError::Analysis(_))));
}

#[test]
fn self_distance_is_exactly_zero_and_random_encoders_are_uncorrelated() {
    let f = Fixture::new(DEFAULT_DUMP_SENTENCES, (3, 12), 4);
    let reg = untrained(&f, ArchConfig::default());
    let dumps = extract_representations(&reg, &f.vocabularies(), &f.text, &Stage::EncoderFinal).unwrap();
    let report = representation_report(&dumps).unwrap();
    for i in 0..4 {
        assert_eq!(report.distances[i][i], 0.0);
        for j in 0..4 {
            if i != j {
                let d = report.distances[i][j];
                assert!((d - 1.0).abs() <= 0.3, "{} vs {}: {d}", report.labels[i], report.labels[j]);
            }
        }
    }
    for c in &report.collapse {
        assert!((-1.0..=1.0).contains(&c.mean_cosine));
        assert!(c.min_variance <= c.mean_variance && c.mean_variance <= c.max_variance);
    }
    assert!(report.to_text().contains("x@encoder_final"));
}

#[test]
fn report_rejects_misaligned_or_small_inputs() {
    let dump = |lang: &str, n: usize| RepresentationDump {
        language: lang.into(),
        stage: Stage::EncoderFinal,
        matrix: Tensor::new([n, 2], (0..2 * n).map(|v| (v * v % 7) as f64).collect()).unwrap(),
        indices: (0..n).collect(),
    };
    assert!(representation_report(&[dump("x", 40)]).is_err());
    assert!(representation_report(&[dump("x", 40), dump("y", 41)]).is_err());
    assert!(collapse_indicator(&dump("x", 10)).is_err());
    let identical = collapse_indicator(&RepresentationDump {
        matrix: Tensor::new([30, 2], [1.0, 2.0].repeat(30)).unwrap(),
        ..dump("x", 30)
    })
    .unwrap();
    assert!((identical.mean_cosine - 1.0).abs() < 1e-12);
    assert_eq!(identical.max_variance, 0.0);
}

#[test]
fn axis_aligned_data_recovers_axes() {
    let pts = [[3.0, 0.0], [-3.0, 0.0], [0.0, 1.0], [0.0, -1.0], [1.5, 0.5], [-1.5, 0.5], [1.5, -0.5], [-1.5, -0.5]];
    let data = Tensor::new([8, 2], pts.concat()).unwrap();
    let p = pca_project(&data, 2).unwrap();
    assert!((p.components[0][0].abs() - 1.0).abs() < 1e-9);
    assert!((p.components[1][1].abs() - 1.0).abs() < 1e-9);
    assert!(p.components[0][0] > 0.0 && p.components[1][1] > 0.0);
    assert!(p.explained_variance[0] >= p.explained_variance[1]);
    for (i, pt) in pts.iter().enumerate() {
        assert!((p.coords.data()[2 * i] - pt[0]).abs() < 1e-9);
    }
}

#[test]
fn rank_one_data_has_one_component() {
    let dir = [1.0, -2.0, 0.5];
    let data: Vec<f64> = (0..10).flat_map(|i| dir.map(|d| d * (i as f64 - 3.0))).collect();
    let p = pca_project(&Tensor::new([10, 3], data).unwrap(), 2).unwrap();
    assert!(p.explained_variance[0] > 1.0);
    assert!(p.explained_variance[1].abs() < 1e-9);
}

#[test]
fn too_many_components_is_an_error() {
    let data = Tensor::new([4, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0]).unwrap();
    assert!(matches!(pca_project(&data, 3), Err(NmtError::Analysis(_))));
    assert!(pca_project(&data, 0).is_err());
}

#[test]
fn exports_have_documented_columns() {
    let dump = RepresentationDump {
        language: "x".into(),
        stage: Stage::EncoderFinal,
        matrix: Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 5.0, 8.0, 13.0]).unwrap(),
        indices: vec![0, 1, 2],
    };
    let csv = dumps_csv(std::slice::from_ref(&dump));
    assert_eq!(csv.lines().next().unwrap(), "lang,sentence_idx,stage,v0,v1");
    assert_eq!(csv.lines().nth(2).unwrap(), "x,1,encoder_final,3,5");
    let (stacked, labels) = stack_dumps(&[dump.clone(), RepresentationDump { language: "y".into(), ..dump }]).unwrap();
    assert_eq!(stacked.shape(), &[6, 2]);
    let proj = projection_csv(&labels, &pca_project(&stacked, 2).unwrap()).unwrap();
    assert_eq!(proj.lines().next().unwrap(), "lang,sentence_idx,x,y");
    assert!(proj.lines().nth(4).unwrap().starts_with("y,0,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pca_ignores_row_order(
        values in prop::collection::vec(-5.0f64..5.0, 24),
        shift in 0usize..8,
    ) {
        let (n, d) = (8, 3);
        let data = Tensor::new([n, d], values.clone()).unwrap();
        let perm: Vec<usize> = (0..n).map(|i| (i * 3 + shift) % n).collect();
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| values[i * d..(i + 1) * d].to_vec()).collect();
        let a = pca_project(&data, 2).unwrap();
        let b = pca_project(&Tensor::new([n, d], permuted).unwrap(), 2).unwrap();
        prop_assert_eq!(&a.components, &b.components);
        prop_assert_eq!(&a.explained_variance, &b.explained_variance);
        for (row, &src) in perm.iter().enumerate() {
            prop_assert_eq!(&b.coords.data()[row * 2..row * 2 + 2], &a.coords.data()[src * 2..src * 2 + 2]);
        }
        prop_assert!(a.explained_variance[0] >= a.explained_variance[1]);
    }
}
