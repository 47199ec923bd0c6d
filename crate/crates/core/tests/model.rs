use modnmt_core::checkpoint;
use modnmt_core::corpus::TokenMatrix;
use modnmt_core::model::*;
use modnmt_core::tokenizer::{VocabHash, BOS, EOS};
use modnmt_core::NmtError;
use modnmt_tensor::{Adam, AdamConfig, Graph, Tensor};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

const V: usize = 12;

fn arch() -> ArchConfig {
    ArchConfig {
        d_model: 16,
        blocks: 2,
        heads: 2,
        ff: 32,
    }
}

fn enc(lang: &str, seed: u64) -> LanguageModule {
    LanguageModule::new(ModuleKind::Encoder, lang, V, arch(), seed).unwrap()
}

fn dec(lang: &str, seed: u64) -> LanguageModule {
    LanguageModule::new(ModuleKind::Decoder, lang, V, arch(), seed).unwrap()
}

fn pooled(m: &LanguageModule, src: &TokenMatrix) -> Tensor {
    let mut g = Graph::new();
    let b = m.bind_constant(&mut g).unwrap();
    let e = encode(&mut g, &b, src).unwrap();
    g.tensor(e.pooled)
}

fn logits(e: &LanguageModule, d: &LanguageModule, src: &TokenMatrix, tgt: &TokenMatrix) -> Tensor {
    let mut g = Graph::new();
    let eb = e.bind_constant(&mut g).unwrap();
    let db = d.bind_constant(&mut g).unwrap();
    let mem = encode(&mut g, &eb, src).unwrap();
    let out = decode(&mut g, &db, &mem, tgt).unwrap();
    g.tensor(out.logits)
}

#[test]
fn identical_sentences_give_identical_rows() {
    let src = TokenMatrix::from_rows(&[vec![BOS, 5, 6, 7, EOS], vec![BOS, 5, 6, 7, EOS]]);
    let h = pooled(&enc("x", 1), &src);
    assert_eq!(h.shape(), &[2, 16]);
    assert_eq!(h.data()[..16], h.data()[16..]);
}

#[test]
fn single_token_pool_equals_its_state() {
    let m = enc("x", 2);
    let src = TokenMatrix::from_rows(&[vec![6]]);
    let mut g = Graph::new();
    let b = m.bind_constant(&mut g).unwrap();
    let e = encode(&mut g, &b, &src).unwrap();
    assert_eq!(g.value(e.states), g.value(e.pooled));
}

#[test]
fn untrained_logits_are_reproducible() {
    let src = TokenMatrix::from_rows(&[vec![BOS, 4, 9, EOS]]);
    let tgt = TokenMatrix::from_rows(&[vec![BOS, 8, 5]]);
    let a = logits(&enc("x", 3), &dec("y", 3), &src, &tgt);
    let b = logits(&enc("x", 3), &dec("y", 3), &src, &tgt);
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[1, 3, V]);
}

#[test]
fn mismatched_dimensions_do_not_compose() {
    let wide = ArchConfig { d_model: 32, ..arch() };
    let e = enc("x", 1);
    let d = LanguageModule::new(ModuleKind::Decoder, "y", V, wide, 1).unwrap();
    let src = TokenMatrix::from_rows(&[vec![BOS, 4, EOS]]);
    let tgt = TokenMatrix::from_rows(&[vec![BOS, 4]]);
    let mut g = Graph::new();
    let eb = e.bind_constant(&mut g).unwrap();
    let db = d.bind_constant(&mut g).unwrap();
    let mem = encode(&mut g, &eb, &src).unwrap();
    assert!(matches!(decode(&mut g, &db, &mem, &tgt), Err(NmtError::Composition(_))));
    assert!(matches!(encode(&mut g, &db, &src), Err(NmtError::Composition(_))));

    let mut reg = ModuleRegistry::new();
    reg.insert(e, VocabHash([0; 32])).unwrap();
    reg.insert(d, VocabHash([0; 32])).unwrap();
    assert!(matches!(reg.check_composable("x", "y"), Err(NmtError::Composition(_))));
}

#[test]
fn one_encoder_feeds_any_decoder_of_matching_dimension() {
    let e = enc("z", 1);
    let src = TokenMatrix::from_rows(&[vec![BOS, 4, 7, EOS]]);
    let tgt = TokenMatrix::from_rows(&[vec![BOS, 4]]);
    for d in [dec("x", 1), dec("y", 2)] {
        assert!(logits(&e, &d, &src, &tgt).is_finite());
    }
}

#[test]
fn parameters_are_disjoint_across_modules() {
    let mut reg = ModuleRegistry::new();
    for m in [enc("x", 1), dec("x", 1), enc("y", 1), dec("y", 1)] {
        reg.insert(m, VocabHash([0; 32])).unwrap();
    }
    let mut names: Vec<String> = reg
        .iter()
        .flat_map(|m| m.module.params().iter().map(|p| p.name().to_string()))
        .collect();
    let total = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), total);

    let before: Vec<Vec<u8>> = reg.iter().map(|m| m.module.param_bytes()).collect();
    for p in reg.get_mut("enc.x").unwrap().module.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += 1.0);
    }
    let after: Vec<Vec<u8>> = reg.iter().map(|m| m.module.param_bytes()).collect();
    let changed: Vec<&str> = reg
        .names()
        .zip(before.iter().zip(&after))
        .filter(|(_, (b, a))| b != a)
        .map(|(n, _)| n)
        .collect();
    assert_eq!(changed, ["enc.x"]);
}

#[test]
fn same_language_name_and_seed_give_same_init() {
    assert_eq!(enc("z", 5).param_bytes(), enc("z", 5).param_bytes());
    assert_ne!(enc("z", 5).param_bytes(), enc("w", 5).param_bytes());
    assert_ne!(enc("z", 5).param_bytes(), dec("z", 5).param_bytes());
}

fn train_steps(e: &mut LanguageModule, d: &mut LanguageModule, steps: usize) {
    let src = TokenMatrix::from_rows(&[vec![BOS, 4, 5, 6, EOS], vec![BOS, 7, 8, EOS]]);
    let tgt = TokenMatrix::from_rows(&[vec![BOS, 6, 5, 4, EOS], vec![BOS, 8, 7, EOS]]);
    let mut adam = Adam::new(AdamConfig::default());
    let mut g = Graph::new();
    for _ in 0..steps {
        e.zero_grad();
        d.zero_grad();
        g.reset();
        let eb = e.bind(&mut g).unwrap();
        let db = d.bind(&mut g).unwrap();
        let mem = encode(&mut g, &eb, &src).unwrap();
        let loss = teacher_forced_loss(&mut g, &db, &mem, &tgt).unwrap();
        let grads = g.backward(loss).unwrap();
        e.accumulate(&grads, &eb).unwrap();
        d.accumulate(&grads, &db).unwrap();
        let mut params: Vec<_> = e.params_mut().iter_mut().chain(d.params_mut().iter_mut()).collect();
        adam.step(&mut params, 1e-2).unwrap();
    }
}

#[test]
fn frozen_module_survives_training_bit_for_bit() {
    let (mut e, mut d) = (enc("x", 1), dec("y", 1));
    e.set_frozen(true);
    e.set_frozen(true);
    assert!(e.params().iter().all(|p| p.is_frozen()));
    let (e0, d0) = (e.param_bytes(), d.param_bytes());
    train_steps(&mut e, &mut d, 100);
    assert_eq!(e.param_bytes(), e0);
    assert_ne!(d.param_bytes(), d0);

    e.set_frozen(false);
    train_steps(&mut e, &mut d, 3);
    assert_ne!(e.param_bytes(), e0);
}

#[test]
fn registry_freeze_errors_on_unknown_module() {
    let mut reg = ModuleRegistry::new();
    reg.insert(enc("x", 1), VocabHash([0; 32])).unwrap();
    assert!(matches!(reg.set_frozen("enc.q", true), Err(NmtError::UnknownModule(_))));
    assert!(matches!(reg.insert(enc("x", 2), VocabHash([0; 32])), Err(NmtError::DuplicateModule(_))));
    reg.set_frozen("enc.x", true).unwrap();
    assert!(reg.encoder("x").unwrap().is_frozen());
}

fn sample_registry() -> ModuleRegistry {
    let mut reg = ModuleRegistry::new();
    reg.insert(enc("x", 1), VocabHash([1; 32])).unwrap();
    reg.insert(dec("x", 1), VocabHash([1; 32])).unwrap();
    let mut ey = enc("y", 2);
    ey.set_frozen(true);
    reg.insert(ey, VocabHash([2; 32])).unwrap();
    reg
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let reg = sample_registry();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    checkpoint::save(&reg, &a).unwrap();
    let back = checkpoint::load(&a).unwrap();
    checkpoint::save(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    for (x, y) in reg.iter().zip(back.iter()) {
        assert_eq!(x.module.param_bytes(), y.module.param_bytes());
        assert_eq!(x.module.is_frozen(), y.module.is_frozen());
        assert_eq!(x.module.arch(), y.module.arch());
        assert_eq!(x.vocab_hash, y.vocab_hash);
    }
}

#[test]
fn truncated_checkpoint_fails_checksum() {
    let bytes = checkpoint::to_bytes(&sample_registry());
    let cut = &bytes[..bytes.len() - 100];
    assert!(matches!(checkpoint::from_bytes(cut), Err(NmtError::Checksum { .. })));
    let mut flipped = bytes.clone();
    flipped[200] ^= 1;
    assert!(matches!(checkpoint::from_bytes(&flipped), Err(NmtError::Checksum { .. })));
    assert!(checkpoint::from_bytes(&bytes[..10]).is_err());
}

#[test]
fn unknown_version_is_rejected() {
    let mut bytes = checkpoint::to_bytes(&sample_registry());
    bytes.truncate(bytes.len() - 8);
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    let digest = Sha256::digest(&bytes);
    let sum = u64::from_le_bytes(digest[..8].try_into().unwrap());
    bytes.extend_from_slice(&sum.to_le_bytes());
    let err = checkpoint::from_bytes(&bytes).unwrap_err().to_string();
    assert!(err.contains("version 99"), "{err}");
}

fn random_rows(ids: &[usize], lens: &[usize]) -> Vec<Vec<usize>> {
    let mut it = ids.iter().cycle();
    lens.iter()
        .map(|&n| (0..n).map(|_| 4 + it.next().unwrap() % (V - 4)).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn padded_source_positions_are_ignored(
        ids in prop::collection::vec(0usize..100, 1..40),
        lens in prop::collection::vec(1usize..7, 2..4),
        noise in 4usize..V,
    ) {
        let rows = random_rows(&ids, &lens);
        let src = TokenMatrix::from_rows(&rows);
        let mut noisy = src.clone();
        for (id, pad) in noisy.ids.iter_mut().zip(&noisy.pad) {
            if *pad {
                *id = noise;
            }
        }
        let e = enc("x", 4);
        prop_assert_eq!(pooled(&e, &src), pooled(&e, &noisy));
        let tgt = TokenMatrix::from_rows(&vec![vec![BOS, 5, 6]; rows.len()]);
        let d = dec("y", 4);
        prop_assert_eq!(logits(&e, &d, &src, &tgt), logits(&e, &d, &noisy, &tgt));
    }

    #[test]
    fn decoder_is_causal(
        ids in prop::collection::vec(0usize..100, 2..10),
        t in 0usize..9,
        replacement in 4usize..V,
    ) {
        let t = t % ids.len();
        let tgt_ids: Vec<usize> = ids.iter().map(|i| 4 + i % (V - 4)).collect();
        prop_assume!(tgt_ids[t] != replacement);
        let mut changed = tgt_ids.clone();
        changed[t] = replacement;
        let src = TokenMatrix::from_rows(&[vec![BOS, 5, 9, EOS]]);
        let (e, d) = (enc("x", 6), dec("y", 6));
        let a = logits(&e, &d, &src, &TokenMatrix::from_rows(std::slice::from_ref(&tgt_ids)));
        let b = logits(&e, &d, &src, &TokenMatrix::from_rows(&[changed]));
        for pos in 0..tgt_ids.len() {
            let slice = pos * V..(pos + 1) * V;
            if pos < t {
                prop_assert_eq!(&a.data()[slice.clone()], &b.data()[slice]);
            } else if pos == t {
                prop_assert_ne!(&a.data()[slice.clone()], &b.data()[slice]);
            }
        }
    }
}
