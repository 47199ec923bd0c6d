//! Parallel text ingestion, batching, and synthetic cipher languages.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, NmtError, Result};
use crate::tokenizer::{normalize, TokenizedSentence, Vocabulary, PAD};

pub const DEFAULT_MAX_WORDS: usize = 80;

/// Sentence-aligned raw text for one language pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelText {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl ParallelText {
    pub fn new(src_lang: &str, tgt_lang: &str, src: Vec<String>, tgt: Vec<String>) -> Result<Self> {
        check_aligned(src.len(), tgt.len())?;
        Ok(Self {
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.to_string(),
            src,
            tgt,
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// The same pairs with source and target swapped.
    pub fn reversed(&self) -> Self {
        Self {
            src_lang: self.tgt_lang.clone(),
            tgt_lang: self.src_lang.clone(),
            src: self.tgt.clone(),
            tgt: self.src.clone(),
        }
    }

    /// Reads two line-aligned UTF-8 files.
    pub fn read(src_lang: &str, tgt_lang: &str, src_path: impl AsRef<Path>, tgt_path: impl AsRef<Path>) -> Result<Self> {
        Self::new(src_lang, tgt_lang, read_lines(src_path)?, read_lines(tgt_path)?)
    }
}

fn check_aligned(src: usize, tgt: usize) -> Result<()> {
    if src != tgt {
        return Err(NmtError::Alignment {
            src_lines: src,
            tgt_lines: tgt,
            first_unpaired: src.min(tgt) + 1,
        });
    }
    Ok(())
}

pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_lines(path: impl AsRef<Path>, lines: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PreprocessReport {
    pub input_pairs: usize,
    pub kept: usize,
    /// 1-based line numbers of pairs dropped by the length filter.
    pub too_long: Vec<usize>,
    /// 1-based line numbers of pairs dropped because a side was empty.
    pub empty: Vec<usize>,
    pub warnings: Vec<String>,
}

fn is_title_case(word: &str) -> bool {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) if c.is_uppercase() => !chars.any(char::is_uppercase),
        _ => false,
    }
}

/// Lowercases a capitalized first word unless the same capitalized word also
/// occurs later in the sentence, which is taken as evidence of a name.
pub fn truecase(sentence: &str) -> String {
    let words: Vec<&str> = sentence.split(' ').collect();
    let Some(first) = words.first() else {
        return String::new();
    };
    if !is_title_case(first) || words[1..].contains(first) {
        return sentence.to_string();
    }
    let mut out = first.to_lowercase();
    for w in &words[1..] {
        out.push(' ');
        out.push_str(w);
    }
    out
}

/// Normalizes, truecases and length-filters a raw parallel text. A pair is
/// dropped if either side has more than `max_words` whitespace words or is
/// empty after normalization.
pub fn preprocess<S: AsRef<str>>(
    src_lang: &str,
    tgt_lang: &str,
    lines_src: &[S],
    lines_tgt: &[S],
    max_words: usize,
) -> Result<(ParallelText, PreprocessReport)> {
    check_aligned(lines_src.len(), lines_tgt.len())?;
    let mut report = PreprocessReport {
        input_pairs: lines_src.len(),
        ..Default::default()
    };
    let (mut src, mut tgt) = (Vec::new(), Vec::new());
    for (i, (s, t)) in lines_src.iter().zip(lines_tgt).enumerate() {
        let s = truecase(&normalize(s.as_ref()));
        let t = truecase(&normalize(t.as_ref()));
        let (ns, nt) = (word_count(&s), word_count(&t));
        if ns == 0 || nt == 0 {
            report.empty.push(i + 1);
        } else if ns > max_words || nt > max_words {
            report.too_long.push(i + 1);
        } else {
            src.push(s);
            tgt.push(t);
        }
    }
    report.kept = src.len();
    if report.kept == 0 {
        report.warnings.push(format!(
            "no usable pairs out of {} input lines; the corpus is empty",
            report.input_pairs
        ));
    }
    Ok((ParallelText::new(src_lang, tgt_lang, src, tgt)?, report))
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Tokenized parallel sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub src_lang: String,
    pub tgt_lang: String,
    pub pairs: Vec<(TokenizedSentence, TokenizedSentence)>,
}

impl ParallelCorpus {
    pub fn from_text(text: &ParallelText, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Result<Self> {
        check_aligned(text.src.len(), text.tgt.len())?;
        for (vocab, lang) in [(src_vocab, &text.src_lang), (tgt_vocab, &text.tgt_lang)] {
            if vocab.language() != lang {
                return Err(NmtError::Vocabulary(format!(
                    "vocabulary for `{}` used to tokenize `{lang}` text",
                    vocab.language()
                )));
            }
        }
        let pairs = text
            .src
            .iter()
            .zip(&text.tgt)
            .map(|(s, t)| (src_vocab.encode(s), tgt_vocab.encode(t)))
            .collect();
        Ok(Self {
            src_lang: text.src_lang.clone(),
            tgt_lang: text.tgt_lang.clone(),
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// A padded `[rows, cols]` matrix of token ids with its padding mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatrix {
    pub ids: Vec<usize>,
    pub pad: Vec<bool>,
    pub rows: usize,
    pub cols: usize,
}

impl TokenMatrix {
    /// Right-pads every sequence to the longest one.
    pub fn from_rows<R: AsRef<[usize]>>(seqs: &[R]) -> Self {
        let rows = seqs.len();
        let cols = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = vec![PAD; rows * cols];
        let mut pad = vec![true; rows * cols];
        for (r, s) in seqs.iter().enumerate() {
            for (c, &id) in s.as_ref().iter().enumerate() {
                ids[r * cols + c] = id;
                pad[r * cols + c] = false;
            }
        }
        Self { ids, pad, rows, cols }
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    pub fn pad_row(&self, r: usize) -> &[bool] {
        &self.pad[r * self.cols..(r + 1) * self.cols]
    }

    /// The unpadded prefix of row `r`.
    pub fn sequence(&self, r: usize) -> &[usize] {
        let len = self.pad_row(r).iter().take_while(|p| !**p).count();
        &self.row(r)[..len]
    }

    /// Columns `from..to` of every row.
    pub fn slice_cols(&self, from: usize, to: usize) -> Self {
        let cols = to - from;
        let mut ids = Vec::with_capacity(self.rows * cols);
        let mut pad = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            ids.extend_from_slice(&self.row(r)[from..to]);
            pad.extend_from_slice(&self.pad_row(r)[from..to]);
        }
        Self { ids, pad, rows: self.rows, cols }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: TokenMatrix,
    pub tgt: TokenMatrix,
    /// Corpus positions of the rows.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(corpus: &ParallelCorpus, indices: &[usize]) -> Self {
        let src: Vec<&[usize]> = indices.iter().map(|&i| corpus.pairs[i].0.ids.as_slice()).collect();
        let tgt: Vec<&[usize]> = indices.iter().map(|&i| corpus.pairs[i].1.ids.as_slice()).collect();
        Self {
            src: TokenMatrix::from_rows(&src),
            tgt: TokenMatrix::from_rows(&tgt),
            indices: indices.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.indices.len()
    }

    /// The batch with source and target swapped.
    pub fn reversed(&self) -> Self {
        Self {
            src: self.tgt.clone(),
            tgt: self.src.clone(),
            indices: self.indices.clone(),
        }
    }
}

fn pair_width(corpus: &ParallelCorpus, i: usize) -> usize {
    let (s, t) = &corpus.pairs[i];
    s.ids.len().max(t.ids.len())
}

/// Splits the corpus into length-bucketed batches whose padded size
/// (`rows × longest side`) stays within `batch_tokens`. Pairs are shuffled
/// before bucketing and the batch order is shuffled after, both from `seed`.
pub fn make_batches(corpus: &ParallelCorpus, batch_tokens: usize, seed: u64) -> Result<Vec<Batch>> {
    if corpus.is_empty() {
        return Err(NmtError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| pair_width(corpus, i));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut width = 0;
    for i in order {
        let w = pair_width(corpus, i);
        if w > batch_tokens {
            return Err(NmtError::BatchBudget {
                index: i,
                needed: w,
                budget: batch_tokens,
            });
        }
        let new_width = width.max(w);
        if !current.is_empty() && (current.len() + 1) * new_width > batch_tokens {
            groups.push(std::mem::take(&mut current));
            width = w;
        } else {
            width = new_width;
        }
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut rng);
    Ok(groups.iter().map(|g| Batch::from_pairs(corpus, g)).collect())
}

/// Code point of base symbol 0. Symbols map to consecutive CJK ideographs,
/// which are NFC-stable, caseless and never split by normalization.
const SYMBOL_BASE: u32 = 0x4E00;
const MAX_BASE_VOCAB: usize = 20_000;

/// A synthetic language: a fixed permutation of a shared latent symbol set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherLanguage {
    pub language: String,
    pub seed: u64,
    permutation: Vec<usize>,
    inverse: Vec<usize>,
}

impl CipherLanguage {
    /// A random permutation drawn from `seed`.
    pub fn random(language: &str, base_vocab_size: usize, seed: u64) -> Result<Self> {
        let mut perm: Vec<usize> = (0..base_vocab_size).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::from_permutation(language, perm, seed)
    }

    pub fn identity(language: &str, base_vocab_size: usize) -> Result<Self> {
        Self::from_permutation(language, (0..base_vocab_size).collect(), 0)
    }

    pub fn from_permutation(language: &str, permutation: Vec<usize>, seed: u64) -> Result<Self> {
        let n = permutation.len();
        if n == 0 || n > MAX_BASE_VOCAB {
            return Err(NmtError::Cipher(format!("base vocabulary size must be in 1..={MAX_BASE_VOCAB}, got {n}")));
        }
        let mut inverse = vec![usize::MAX; n];
        for (i, &p) in permutation.iter().enumerate() {
            if p >= n || inverse[p] != usize::MAX {
                return Err(NmtError::Cipher(format!("not a permutation of 0..{n}: entry {p} at {i}")));
            }
            inverse[p] = i;
        }
        Ok(Self {
            language: language.to_string(),
            seed,
            permutation,
            inverse,
        })
    }

    pub fn base_vocab_size(&self) -> usize {
        self.permutation.len()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    fn check_symbol(&self, s: usize) -> Result<()> {
        if s >= self.base_vocab_size() {
            return Err(NmtError::Cipher(format!(
                "symbol {s} is outside the base vocabulary of {} ({})",
                self.base_vocab_size(),
                self.language
            )));
        }
        Ok(())
    }

    /// Latent symbols to this language's surface symbols.
    pub fn encipher(&self, latent: &[usize]) -> Result<Vec<usize>> {
        latent.iter().map(|&s| self.check_symbol(s).map(|_| self.permutation[s])).collect()
    }

    /// Surface symbols back to latent symbols.
    pub fn decipher(&self, surface: &[usize]) -> Result<Vec<usize>> {
        surface.iter().map(|&s| self.check_symbol(s).map(|_| self.inverse[s])).collect()
    }

    /// Writes surface symbols as space-separated words.
    pub fn render(&self, surface: &[usize]) -> String {
        let words: Vec<String> = surface
            .iter()
            .map(|&s| char::from_u32(SYMBOL_BASE + s as u32).map_or_else(String::new, String::from))
            .collect();
        words.join(" ")
    }

    /// Reads a rendered sentence back into surface symbols.
    pub fn parse(&self, sentence: &str) -> Result<Vec<usize>> {
        sentence
            .split_whitespace()
            .map(|w| {
                let mut chars = w.chars();
                let sym = match (chars.next(), chars.next()) {
                    (Some(c), None) => (c as u32).checked_sub(SYMBOL_BASE).map(|v| v as usize),
                    _ => None,
                };
                match sym {
                    Some(s) if s < self.base_vocab_size() => Ok(s),
                    _ => Err(NmtError::Cipher(format!("`{w}` is not a symbol of {}", self.language))),
                }
            })
            .collect()
    }

    pub fn to_spec_string(&self) -> String {
        let perm: Vec<String> = self.permutation.iter().map(usize::to_string).collect();
        format!(
            "language: {}\nbase_vocab_size: {}\nseed: {}\npermutation: {}\n",
            self.language,
            self.base_vocab_size(),
            self.seed,
            perm.join(" ")
        )
    }

    pub fn from_spec_string(text: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| NmtError::Cipher(format!("malformed spec line `{line}`")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| NmtError::Cipher(format!("spec is missing `{k}`")))
        };
        let bad = |k: &str| NmtError::Cipher(format!("spec field `{k}` is not a number"));
        let size: usize = get("base_vocab_size")?.parse().map_err(|_| bad("base_vocab_size"))?;
        let seed: u64 = get("seed")?.parse().map_err(|_| bad("seed"))?;
        let perm = get("permutation")?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| bad("permutation")))
            .collect::<Result<Vec<_>>>()?;
        if perm.len() != size {
            return Err(NmtError::Cipher(format!(
                "permutation has {} entries but base_vocab_size is {size}",
                perm.len()
            )));
        }
        Self::from_permutation(get("language")?, perm, seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_spec_string()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_spec_string(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

fn check_same_base(langs: &[&CipherLanguage]) -> Result<usize> {
    let base = langs.first().map_or(0, |l| l.base_vocab_size());
    if let Some(other) = langs.iter().find(|l| l.base_vocab_size() != base) {
        return Err(NmtError::Cipher(format!(
            "base vocabulary sizes differ: {} has {base}, {} has {}",
            langs[0].language,
            other.language,
            other.base_vocab_size()
        )));
    }
    Ok(base)
}

/// Latent sentences with i.i.d. uniform symbols and uniform lengths in
/// `len_range` (inclusive).
pub fn latent_sentences(base_vocab_size: usize, n: usize, len_range: (usize, usize), seed: u64) -> Result<Vec<Vec<usize>>> {
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(NmtError::Cipher(format!("invalid length range {lo}..={hi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let len = rng.gen_range(lo..=hi);
            (0..len).map(|_| rng.gen_range(0..base_vocab_size)).collect()
        })
        .collect())
}

/// Renders the same latent sentences in every language, keyed by tag.
pub fn generate_multiway(
    langs: &[&CipherLanguage],
    n: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<BTreeMap<String, Vec<String>>> {
    let base = check_same_base(langs)?;
    let latent = latent_sentences(base, n, len_range, seed)?;
    let mut out = BTreeMap::new();
    for lang in langs {
        let lines = latent
            .iter()
            .map(|s| lang.encipher(s).map(|v| lang.render(&v)))
            .collect::<Result<Vec<_>>>()?;
        out.insert(lang.language.clone(), lines);
    }
    Ok(out)
}

/// An exactly translatable parallel text between two cipher languages.
pub fn generate_cipher_corpus(
    a: &CipherLanguage,
    b: &CipherLanguage,
    n: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<ParallelText> {
    check_same_base(&[a, b])?;
    let latent = latent_sentences(a.base_vocab_size(), n, len_range, seed)?;
    let mut src = Vec::with_capacity(n);
    let mut tgt = Vec::with_capacity(n);
    for s in &latent {
        src.push(a.render(&a.encipher(s)?));
        tgt.push(b.render(&b.encipher(s)?));
    }
    ParallelText::new(&a.language, &b.language, src, tgt)
}

/// Ground-truth translation of a rendered A sentence into B.
pub fn cipher_oracle_translate(a: &CipherLanguage, b: &CipherLanguage, sentence: &str) -> Result<String> {
    check_same_base(&[a, b])?;
    let latent = a.decipher(&a.parse(sentence)?)?;
    Ok(b.render(&b.encipher(&latent)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truecase_keeps_names_seen_later() {
        assert_eq!(truecase("The cat sat"), "the cat sat");
        assert_eq!(truecase("Paris likes Paris"), "Paris likes Paris");
        assert_eq!(truecase("NATO met"), "NATO met");
        assert_eq!(truecase(""), "");
    }

    #[test]
    fn token_matrix_pads_right() {
        let m = TokenMatrix::from_rows(&[vec![1, 5, 2], vec![1, 2]]);
        assert_eq!((m.rows, m.cols), (2, 3));
        assert_eq!(m.row(1), &[1, 2, PAD]);
        assert_eq!(m.pad_row(0), &[false; 3]);
        assert_eq!(m.pad_row(1), &[false, false, true]);
        assert_eq!(m.sequence(1), &[1, 2]);
        assert_eq!(m.slice_cols(1, 3).row(0), &[5, 2]);
    }

    #[test]
    fn spec_file_round_trip() {
        let c = CipherLanguage::random("z", 16, 99).unwrap();
        let back = CipherLanguage::from_spec_string(&c.to_spec_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_non_bijection() {
        assert!(CipherLanguage::from_permutation("x", vec![0, 0, 1], 0).is_err());
        assert!(CipherLanguage::from_permutation("x", vec![0, 3, 1], 0).is_err());
    }
}
