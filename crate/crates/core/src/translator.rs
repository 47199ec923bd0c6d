//! Inference by composing any encoder with any decoder.

use std::fmt;
use std::str::FromStr;

use modnmt_tensor::Graph;

use crate::corpus::TokenMatrix;
use crate::error::{NmtError, Result};
use crate::model::{decode, encode, BoundModule, Encoded, LanguageModule, ModuleKind, ModuleRegistry, module_name};
use crate::tokenizer::{Vocabularies, Vocabulary, BOS, EOS};

const INFERENCE_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Route {
    Direct,
    /// Mechanically identical to `Direct`; marks a pair that was never trained
    /// together.
    ZeroShot,
    /// Cascade through the text of an intermediate language.
    Pivot { via: String },
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Route::Direct => f.write_str("direct"),
            Route::ZeroShot => f.write_str("zero_shot"),
            Route::Pivot { via } => write!(f, "pivot:{via}"),
        }
    }
}

impl FromStr for Route {
    type Err = NmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Route::Direct),
            "zero_shot" | "zero-shot" => Ok(Route::ZeroShot),
            _ => match s.strip_prefix("pivot:") {
                Some(via) if !via.is_empty() => Ok(Route::Pivot { via: via.to_string() }),
                _ => Err(NmtError::Route(format!(
                    "unknown route `{s}` (expected direct, zero_shot or pivot:<lang>)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decoding {
    Greedy,
    Beam { width: usize },
}

impl fmt::Display for Decoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decoding::Greedy => f.write_str("greedy"),
            Decoding::Beam { width } => write!(f, "beam:{width}"),
        }
    }
}

impl FromStr for Decoding {
    type Err = NmtError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(Decoding::Greedy);
        }
        match s.strip_prefix("beam:").map(str::parse::<usize>) {
            Some(Ok(width)) if width >= 1 => Ok(Decoding::Beam { width }),
            _ => Err(NmtError::Config(format!(
                "unknown decoding `{s}` (expected greedy or beam:<width>)"
            ))),
        }
    }
}

/// Output length cap `scale · source_tokens + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LengthPolicy {
    pub scale: usize,
    pub offset: usize,
}

impl Default for LengthPolicy {
    fn default() -> Self {
        Self { scale: 2, offset: 5 }
    }
}

impl LengthPolicy {
    pub fn max_len(&self, src_tokens: usize) -> usize {
        self.scale * src_tokens + self.offset
    }
}

impl fmt::Display for LengthPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}*src_len+{}", self.scale, self.offset)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranslationRequest {
    pub src: String,
    pub tgt: String,
    pub route: Route,
    pub decoding: Decoding,
    pub length: LengthPolicy,
}

impl TranslationRequest {
    pub fn new(src: &str, tgt: &str, route: Route) -> Self {
        Self {
            src: src.to_string(),
            tgt: tgt.to_string(),
            route,
            decoding: Decoding::Greedy,
            length: LengthPolicy::default(),
        }
    }

    pub fn direct(src: &str, tgt: &str) -> Self {
        Self::new(src, tgt, Route::Direct)
    }

    pub fn zero_shot(src: &str, tgt: &str) -> Self {
        Self::new(src, tgt, Route::ZeroShot)
    }

    pub fn pivot(src: &str, via: &str, tgt: &str) -> Self {
        Self::new(src, tgt, Route::Pivot { via: via.to_string() })
    }

    pub fn with_decoding(mut self, decoding: Decoding) -> Self {
        self.decoding = decoding;
        self
    }

    /// The direct legs this request runs, in order.
    pub fn legs(&self) -> Vec<(String, String)> {
        match &self.route {
            Route::Direct | Route::ZeroShot => vec![(self.src.clone(), self.tgt.clone())],
            Route::Pivot { via } => vec![(self.src.clone(), via.clone()), (via.clone(), self.tgt.clone())],
        }
    }

    /// Sidecar description of the request: route, modules and decoding.
    pub fn metadata(&self) -> String {
        let modules: Vec<String> = self
            .legs()
            .iter()
            .flat_map(|(s, t)| [module_name(ModuleKind::Encoder, s), module_name(ModuleKind::Decoder, t)])
            .collect();
        let via = match &self.route {
            Route::Pivot { via } => via.as_str(),
            _ => "",
        };
        format!(
            "route: {}\nsrc_lang: {}\ntgt_lang: {}\nvia: {via}\nmodules: {}\ndecoding: {}\nmax_len: {}\n\
             evaluation_tokens: whitespace words after subword join\n",
            self.route,
            self.src,
            self.tgt,
            modules.join(" "),
            self.decoding,
            self.length
        )
    }
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn last_position_logits(g: &Graph, logits: modnmt_tensor::Var, row: usize) -> &[f64] {
    let shape = g.shape(logits);
    let (t, v) = (shape[1], shape[2]);
    let start = (row * t + t - 1) * v;
    &g.value(logits)[start..start + v]
}

/// Greedy decoding of every row of `memory`. Row `r` stops at EOS or after
/// `max_lens[r]` tokens. Returned sequences exclude BOS and EOS.
pub fn greedy_decode(g: &mut Graph, dec: &BoundModule, memory: &Encoded, max_lens: &[usize]) -> Result<Vec<Vec<usize>>> {
    let rows = memory.rows;
    if max_lens.len() != rows {
        return Err(NmtError::Contract(format!("{} length caps for {rows} rows", max_lens.len())));
    }
    let mark = g.len();
    let mut prefixes = vec![vec![BOS]; rows];
    let mut outputs = vec![Vec::new(); rows];
    let mut done: Vec<bool> = max_lens.iter().map(|&m| m == 0).collect();
    while !done.iter().all(|d| *d) {
        let tgt_in = TokenMatrix::from_rows(&prefixes);
        let out = decode(g, dec, memory, &tgt_in)?;
        for r in 0..rows {
            let tok = argmax(last_position_logits(g, out.logits, r));
            prefixes[r].push(tok);
            if done[r] {
                continue;
            }
            if tok == EOS {
                done[r] = true;
            } else {
                outputs[r].push(tok);
                done[r] = outputs[r].len() >= max_lens[r];
            }
        }
        g.truncate(mark);
    }
    Ok(outputs)
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
    finished: bool,
}

impl Hypothesis {
    fn score(&self) -> f64 {
        let len = self.tokens.len() + usize::from(self.finished);
        if len == 0 {
            0.0
        } else {
            self.log_prob / len as f64
        }
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Beam search for a single sentence. `memory` must hold `width` identical
/// rows. Hypotheses are ranked by log-probability divided by token count
/// (EOS included); ties keep the earlier beam and the lower token id.
pub fn beam_decode(g: &mut Graph, dec: &BoundModule, memory: &Encoded, width: usize, max_len: usize) -> Result<Vec<usize>> {
    if width == 0 {
        return Err(NmtError::Config("beam width must be at least 1".into()));
    }
    if memory.rows != width {
        return Err(NmtError::Contract(format!(
            "beam search needs {width} memory rows, got {}",
            memory.rows
        )));
    }
    let mark = g.len();
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    for _ in 0..max_len {
        let live: Vec<&Hypothesis> = beams.iter().filter(|h| !h.finished).collect();
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = (0..width)
            .map(|i| {
                let h = live[i.min(live.len() - 1)];
                std::iter::once(BOS).chain(h.tokens.iter().copied()).collect()
            })
            .collect();
        let out = decode(g, dec, memory, &TokenMatrix::from_rows(&prefixes))?;
        let mut candidates: Vec<Hypothesis> = beams.iter().filter(|h| h.finished).cloned().collect();
        for (i, h) in live.iter().enumerate() {
            let lp = log_softmax(last_position_logits(g, out.logits, i));
            for (tok, l) in lp.into_iter().enumerate() {
                let mut tokens = h.tokens.clone();
                let finished = tok == EOS;
                if !finished {
                    tokens.push(tok);
                }
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + l,
                    finished,
                });
            }
        }
        g.truncate(mark);
        candidates.sort_by(|a, b| b.score().total_cmp(&a.score()));
        candidates.truncate(width);
        beams = candidates;
    }
    let best = beams
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.score().total_cmp(&b.score()).then(j.cmp(i)))
        .map(|(_, h)| h.tokens.clone())
        .unwrap_or_default();
    Ok(best)
}

/// Translation over a registry and the vocabularies of its languages.
#[derive(Debug, Clone, Copy)]
pub struct Translator<'a> {
    registry: &'a ModuleRegistry,
    vocabs: &'a Vocabularies,
}

struct Leg<'a> {
    enc: &'a LanguageModule,
    dec: &'a LanguageModule,
    src_vocab: &'a Vocabulary,
    tgt_vocab: &'a Vocabulary,
}

impl<'a> Translator<'a> {
    pub fn new(registry: &'a ModuleRegistry, vocabs: &'a Vocabularies) -> Self {
        Self { registry, vocabs }
    }

    pub fn registry(&self) -> &ModuleRegistry {
        self.registry
    }

    fn resolve(&self, src: &str, tgt: &str) -> Result<Leg<'a>> {
        let route_err = |e: NmtError| match e {
            NmtError::UnknownModule(name) => NmtError::Route(format!("module {name} is not in the registry")),
            NmtError::Vocabulary(m) => NmtError::Route(m),
            other => other,
        };
        let enc = self.registry.get(&module_name(ModuleKind::Encoder, src)).map_err(route_err)?;
        let dec = self.registry.get(&module_name(ModuleKind::Decoder, tgt)).map_err(route_err)?;
        self.registry
            .check_composable(src, tgt)
            .map_err(|e| NmtError::Route(e.to_string()))?;
        let src_vocab = self.vocabs.get(src).map_err(route_err)?;
        let tgt_vocab = self.vocabs.get(tgt).map_err(route_err)?;
        for (reg, vocab) in [(enc, src_vocab), (dec, tgt_vocab)] {
            if reg.vocab_hash != vocab.hash() {
                return Err(NmtError::VocabMismatch {
                    module: reg.module.name().to_string(),
                    expected: reg.vocab_hash.to_hex(),
                    found: vocab.hash().to_hex(),
                });
            }
        }
        Ok(Leg {
            enc: &enc.module,
            dec: &dec.module,
            src_vocab,
            tgt_vocab,
        })
    }

    fn run_leg<S: AsRef<str>>(&self, src: &str, tgt: &str, sentences: &[S], decoding: Decoding, length: LengthPolicy) -> Result<Vec<String>> {
        let leg = self.resolve(src, tgt)?;
        let encoded: Vec<Vec<usize>> = sentences.iter().map(|s| leg.src_vocab.encode(s.as_ref()).ids).collect();
        let mut g = Graph::new();
        let enc = leg.enc.bind_constant(&mut g)?;
        let dec = leg.dec.bind_constant(&mut g)?;
        let mark = g.len();
        let mut out_ids: Vec<Vec<usize>> = Vec::with_capacity(sentences.len());
        match decoding {
            Decoding::Greedy => {
                for chunk in encoded.chunks(INFERENCE_BATCH) {
                    let memory = encode(&mut g, &enc, &TokenMatrix::from_rows(chunk))?;
                    let caps: Vec<usize> = chunk.iter().map(|s| length.max_len(s.len() - 2)).collect();
                    out_ids.extend(greedy_decode(&mut g, &dec, &memory, &caps)?);
                    g.truncate(mark);
                }
            }
            Decoding::Beam { width } => {
                for s in &encoded {
                    let rows = vec![s.clone(); width.max(1)];
                    let memory = encode(&mut g, &enc, &TokenMatrix::from_rows(&rows))?;
                    out_ids.push(beam_decode(&mut g, &dec, &memory, width, length.max_len(s.len() - 2))?);
                    g.truncate(mark);
                }
            }
        }
        out_ids.iter().map(|ids| leg.tgt_vocab.decode(ids)).collect()
    }

    /// Translates every sentence along the request's route.
    pub fn translate<S: AsRef<str>>(&self, req: &TranslationRequest, sentences: &[S]) -> Result<Vec<String>> {
        let legs = req.legs();
        let mut current = self.run_leg(&legs[0].0, &legs[0].1, sentences, req.decoding, req.length)?;
        for (s, t) in &legs[1..] {
            current = self.run_leg(s, t, &current, req.decoding, req.length)?;
        }
        Ok(current)
    }

    pub fn translate_sentence(&self, req: &TranslationRequest, sentence: &str) -> Result<String> {
        Ok(self.translate(req, &[sentence])?.remove(0))
    }
}
