//! Small cipher-language fixtures shared by the training-level tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use modnmt_core::corpus::{generate_multiway, CipherLanguage, ParallelCorpus, ParallelText};
use modnmt_core::model::ArchConfig;
use modnmt_core::objective::DistanceMetric;
use modnmt_core::tokenizer::{learn_bpe, Vocabularies, Vocabulary};
use modnmt_core::trainer::TrainingConfig;

pub const BASE: usize = 12;
pub const LANGS: [&str; 4] = ["x", "y", "z", "w"];

pub struct Fixture {
    pub ciphers: BTreeMap<String, CipherLanguage>,
    /// Multi-way aligned sentences per language.
    pub text: BTreeMap<String, Vec<String>>,
    pub vocabs: BTreeMap<String, Vocabulary>,
}

impl Fixture {
    pub fn new(n: usize, len_range: (usize, usize), seed: u64) -> Self {
        let ciphers: BTreeMap<String, CipherLanguage> = LANGS
            .iter()
            .enumerate()
            .map(|(i, l)| (l.to_string(), CipherLanguage::random(l, BASE, 100 + i as u64).unwrap()))
            .collect();
        let refs: Vec<&CipherLanguage> = ciphers.values().collect();
        let text = generate_multiway(&refs, n, len_range, seed).unwrap();
        let vocabs = text
            .iter()
            .map(|(l, lines)| (l.clone(), learn_bpe(l, lines, BASE + 4).unwrap()))
            .collect();
        Self { ciphers, text, vocabs }
    }

    pub fn pair(&self, a: &str, b: &str) -> ParallelText {
        ParallelText::new(a, b, self.text[a].clone(), self.text[b].clone()).unwrap()
    }

    pub fn corpus(&self, a: &str, b: &str) -> ParallelCorpus {
        ParallelCorpus::from_text(&self.pair(a, b), &self.vocabs[a], &self.vocabs[b]).unwrap()
    }

    pub fn vocabularies(&self) -> Vocabularies {
        let mut v = Vocabularies::new();
        for vocab in self.vocabs.values() {
            v.insert(vocab.clone());
        }
        v
    }
}

pub fn tiny_config(steps: usize) -> TrainingConfig {
    TrainingConfig {
        steps,
        batch_tokens: 96,
        lr_peak: 3e-3,
        warmup_steps: 20,
        seed: 5,
        metric: DistanceMetric::default(),
        arch: ArchConfig {
            d_model: 16,
            blocks: 1,
            heads: 2,
            ff: 32,
        },
        ..TrainingConfig::default()
    }
}
