//! Monolingual byte-pair-encoding vocabularies.
//!
//! Words are split into characters with the end-of-word marker fused onto the
//! final character (`"cat"` → `c a t</w>`), so detokenization is a plain join
//! at marker boundaries. Merges never cross word boundaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::{io_err, NmtError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const END_OF_WORD: &str = "</w>";
pub const UNK_TEXT: &str = "<unk>";

const FILE_VERSION: u32 = 1;
const MERGES_SENTINEL: &str = "#MERGES";

/// Punctuation split off from adjacent words by [`normalize`].
fn is_split_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '¡' | '¿' | '«' | '»' | '“' | '”' | '‘' | '’' | '„' | '…' | '–' | '—' | '·'
        )
}

/// Unicode NFC, punctuation spacing and whitespace collapsing. This is the
/// in-house stand-in for an external tokenizer pipeline; it is idempotent.
pub fn normalize(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    let mut spaced = String::with_capacity(nfc.len() + 8);
    for c in nfc.chars() {
        if is_split_punct(c) {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// SHA-256 of a vocabulary's serialized form.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VocabHash(pub [u8; 32]);

impl VocabHash {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 64 {
            return None;
        }
        let mut out = [0u8; 32];
        for (i, o) in out.iter_mut().enumerate() {
            *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
        }
        Some(Self(out))
    }
}

impl fmt::Debug for VocabHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VocabHash({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for VocabHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSentence {
    pub ids: Vec<usize>,
    pub surface: String,
}

impl TokenizedSentence {
    /// Number of tokens between BOS and EOS.
    pub fn content_len(&self) -> usize {
        self.ids.len().saturating_sub(2)
    }
}

/// A monolingual subword vocabulary. Immutable after construction; the only
/// interior state is a usage counter used to audit which vocabularies a code
/// path touches.
#[derive(Debug)]
pub struct Vocabulary {
    language: String,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    uses: AtomicU64,
}

impl Clone for Vocabulary {
    fn clone(&self) -> Self {
        Self::assemble(self.language.clone(), self.tokens.clone(), self.merges.clone())
            .expect("a valid vocabulary clones to a valid vocabulary")
    }
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.language == other.language && self.tokens == other.tokens && self.merges == other.merges
    }
}

/// Initial symbol sequence of one word.
fn word_units(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len().saturating_sub(1);
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == last {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns a vocabulary from one language's lines.
///
/// Merges are greedy by pair frequency (ties broken by the lexicographically
/// smallest pair) and stop at `target_vocab_size` tokens or when no pair occurs
/// at least twice.
pub fn learn_bpe<I, S>(language: &str, lines: I, target_vocab_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for line in lines {
        for w in normalize(line.as_ref()).split(' ').filter(|w| !w.is_empty()) {
            *word_counts.entry(w.to_string()).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(NmtError::EmptyCorpus);
    }
    let mut words: Vec<(Vec<String>, u64)> = word_counts.iter().map(|(w, &c)| (word_units(w), c)).collect();
    let inventory: BTreeSet<String> = words.iter().flat_map(|(u, _)| u.iter().cloned()).collect();
    let minimum = inventory.len() + SPECIAL_TOKENS.len();
    if target_vocab_size < minimum {
        return Err(NmtError::Vocabulary(format!(
            "target size {target_vocab_size} is below the character inventory plus specials ({minimum})"
        )));
    }
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(inventory.iter().cloned());
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();
    let mut merges = Vec::new();

    while tokens.len() < target_vocab_size {
        let mut pair_counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (units, count) in &words {
            for pair in units.windows(2) {
                *pair_counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += count;
            }
        }
        // BTreeMap iteration is lexicographic, so the first maximum wins ties.
        let mut best: Option<((&str, &str), u64)> = None;
        for (&pair, &count) in &pair_counts {
            if best.is_none_or(|(_, c)| count > c) {
                best = Some((pair, count));
            }
        }
        let Some(((left, right), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (left, right) = (left.to_string(), right.to_string());
        for (units, _) in words.iter_mut() {
            *units = merge_pair(units, &left, &right);
        }
        let merged = format!("{left}{right}");
        if known.insert(merged.clone()) {
            tokens.push(merged);
        }
        merges.push((left, right));
    }
    Vocabulary::assemble(language.to_string(), tokens, merges)
}

impl Vocabulary {
    fn assemble(language: String, tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..4].iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s) {
            return Err(NmtError::Vocabulary("special tokens missing from ids 0..3".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(NmtError::Vocabulary(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(NmtError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        let ranks = merges.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        Ok(Self {
            language,
            tokens,
            index,
            merges,
            ranks,
            uses: AtomicU64::new(0),
        })
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// How many encode/decode calls this vocabulary has served.
    pub fn use_count(&self) -> u64 {
        self.uses.load(Ordering::Relaxed)
    }

    fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols = word_units(word);
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (left, right) = &self.merges[rank];
            symbols = merge_pair(&symbols, left, right);
        }
        symbols
    }

    /// Normalizes, segments and wraps a sentence in BOS/EOS.
    pub fn encode(&self, sentence: &str) -> TokenizedSentence {
        self.uses.fetch_add(1, Ordering::Relaxed);
        let norm = normalize(sentence);
        let mut ids = vec![BOS];
        for word in norm.split(' ').filter(|w| !w.is_empty()) {
            ids.extend(self.segment_word(word).iter().map(|s| self.id(s).unwrap_or(UNK)));
        }
        ids.push(EOS);
        TokenizedSentence {
            ids,
            surface: sentence.to_string(),
        }
    }

    /// Joins subwords back into text. Specials are dropped and UNK becomes a
    /// standalone placeholder word.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        self.uses.fetch_add(1, Ordering::Relaxed);
        let mut words: Vec<String> = Vec::new();
        let mut current = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(NmtError::TokenOutOfRange { id, size: self.len() })?;
            match id {
                PAD | BOS | EOS => {}
                UNK => {
                    if !current.is_empty() {
                        words.push(std::mem::take(&mut current));
                    }
                    words.push(UNK_TEXT.to_string());
                }
                _ => {
                    if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                        current.push_str(stem);
                        words.push(std::mem::take(&mut current));
                    } else {
                        current.push_str(tok);
                    }
                }
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        Ok(words.join(" "))
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!("{FILE_VERSION}\t{}\t{}\n", self.language, self.tokens.len());
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out.push_str(MERGES_SENTINEL);
        out.push('\n');
        for (l, r) in &self.merges {
            out.push_str(l);
            out.push('\t');
            out.push_str(r);
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(s: &str) -> Result<Self> {
        let bad = |m: &str| NmtError::Vocabulary(m.to_string());
        let mut lines = s.lines();
        let header = lines.next().ok_or_else(|| bad("missing header"))?;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad("header must be version<TAB>language<TAB>size"));
        }
        let version: u32 = fields[0].parse().map_err(|_| bad("bad version"))?;
        if version != FILE_VERSION {
            return Err(NmtError::Vocabulary(format!("unsupported vocabulary version {version}")));
        }
        let size: usize = fields[2].parse().map_err(|_| bad("bad size"))?;
        let tokens: Vec<String> = lines.by_ref().take(size).map(str::to_string).collect();
        if tokens.len() != size {
            return Err(bad("fewer tokens than the header declares"));
        }
        if lines.next() != Some(MERGES_SENTINEL) {
            return Err(bad("missing #MERGES sentinel"));
        }
        let merges = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('\t')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| bad("merge lines must be left<TAB>right"))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(fields[1].to_string(), tokens, merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_file_string(&s)
    }

    pub fn hash(&self) -> VocabHash {
        VocabHash(Sha256::digest(self.to_file_string().as_bytes()).into())
    }
}

/// Vocabularies of every language in a run, keyed by language tag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabularies(BTreeMap<String, Vocabulary>);

impl Vocabularies {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, vocab: Vocabulary) {
        self.0.insert(vocab.language().to_string(), vocab);
    }

    pub fn get(&self, language: &str) -> Result<&Vocabulary> {
        self.0
            .get(language)
            .ok_or_else(|| NmtError::Vocabulary(format!("no vocabulary for language `{language}`")))
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vocabulary> {
        self.0.values()
    }
}
