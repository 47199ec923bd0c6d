//! Per-language transformer encoders and decoders and the registry that owns
//! them.
//!
//! Both module kinds are pre-norm transformers with sinusoidal positions. An
//! encoder's sentence representation is the mean of its final (post layer
//! norm) states over non-padded positions.

use std::collections::BTreeMap;

use modnmt_tensor::{Gradients, Graph, Parameter, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::TokenMatrix;
use crate::error::{NmtError, Result};
use crate::tokenizer::VocabHash;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            blocks: 2,
            heads: 4,
            ff: 256,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.blocks == 0 || self.heads == 0 || self.ff == 0 {
            return Err(NmtError::Config(format!("architecture extents must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(NmtError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleKind {
    Encoder,
    Decoder,
}

impl ModuleKind {
    pub fn prefix(self) -> &'static str {
        match self {
            ModuleKind::Encoder => "enc",
            ModuleKind::Decoder => "dec",
        }
    }

    pub fn to_u8(self) -> u8 {
        match self {
            ModuleKind::Encoder => 0,
            ModuleKind::Decoder => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ModuleKind::Encoder),
            1 => Some(ModuleKind::Decoder),
            _ => None,
        }
    }
}

/// Registry name of a language's module, e.g. `enc.x`.
pub fn module_name(kind: ModuleKind, language: &str) -> String {
    format!("{}.{language}", kind.prefix())
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

struct ParamSpec {
    local: String,
    shape: Vec<usize>,
    init: Init,
}

fn spec(local: String, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { local, shape, init }
}

fn push_norm(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    specs.push(spec(format!("{prefix}.gain"), vec![d], Init::Ones));
    specs.push(spec(format!("{prefix}.bias"), vec![d], Init::Zeros));
}

fn push_linear(specs: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    specs.push(spec(format!("{prefix}.w"), vec![fan_in, fan_out], Init::Uniform { fan_in }));
    specs.push(spec(format!("{prefix}.b"), vec![fan_out], Init::Zeros));
}

fn push_attention(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        push_linear(specs, &format!("{prefix}.{proj}"), d, d);
    }
}

/// Parameter layout in binding order. The forward passes consume bound
/// variables in exactly this order.
fn layout(kind: ModuleKind, arch: &ArchConfig, vocab: usize) -> Vec<ParamSpec> {
    let d = arch.d_model;
    let mut s = vec![spec("embed".into(), vec![vocab, d], Init::Uniform { fan_in: d })];
    for b in 0..arch.blocks {
        let p = format!("block{b}");
        push_norm(&mut s, &format!("{p}.ln_self"), d);
        push_attention(&mut s, &format!("{p}.self_attn"), d);
        if kind == ModuleKind::Decoder {
            push_norm(&mut s, &format!("{p}.ln_cross"), d);
            push_attention(&mut s, &format!("{p}.cross_attn"), d);
        }
        push_norm(&mut s, &format!("{p}.ln_ff"), d);
        push_linear(&mut s, &format!("{p}.ff1"), d, arch.ff);
        push_linear(&mut s, &format!("{p}.ff2"), arch.ff, d);
    }
    push_norm(&mut s, "ln_final", d);
    if kind == ModuleKind::Decoder {
        push_linear(&mut s, "out", d, vocab);
    }
    s
}

fn init_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes))
}

/// One language's encoder or decoder: an independently owned parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModule {
    name: String,
    kind: ModuleKind,
    language: String,
    vocab_size: usize,
    arch: ArchConfig,
    params: Vec<Parameter>,
}

impl LanguageModule {
    /// Fresh module with scaled-uniform weights, zero biases and unit gains.
    /// The initialization stream depends only on `seed` and the module name.
    pub fn new(kind: ModuleKind, language: &str, vocab_size: usize, arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        if vocab_size < 4 {
            return Err(NmtError::Config(format!("vocabulary size {vocab_size} is below the 4 specials")));
        }
        let name = module_name(kind, language);
        let mut rng = init_rng(seed, &name);
        let params = layout(kind, &arch, vocab_size)
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Uniform { fan_in } => {
                        let bound = (3.0 / fan_in as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                    }
                };
                let t = Tensor::new(s.shape, data).expect("layout shapes are consistent");
                Parameter::new(format!("{name}.{}", s.local), t)
            })
            .collect();
        Ok(Self {
            name,
            kind,
            language: language.to_string(),
            vocab_size,
            arch,
            params,
        })
    }

    /// Reassembles a module from stored parameters, checking them against the
    /// layout implied by `kind`, `arch` and `vocab_size`.
    pub fn from_parts(
        kind: ModuleKind,
        language: &str,
        vocab_size: usize,
        arch: ArchConfig,
        params: Vec<Parameter>,
    ) -> Result<Self> {
        arch.validate()?;
        let name = module_name(kind, language);
        let specs = layout(kind, &arch, vocab_size);
        if specs.len() != params.len() {
            return Err(NmtError::Checkpoint(format!(
                "module {name} has {} parameters, expected {}",
                params.len(),
                specs.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            let expected = format!("{name}.{}", s.local);
            if p.name() != expected || p.shape() != s.shape.as_slice() {
                return Err(NmtError::Checkpoint(format!(
                    "parameter {} {:?} does not match layout entry {expected} {:?}",
                    p.name(),
                    p.shape(),
                    s.shape
                )));
            }
        }
        Ok(Self {
            name,
            kind,
            language: language.to_string(),
            vocab_size,
            arch,
            params,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ModuleKind {
        self.kind
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn arch(&self) -> ArchConfig {
        self.arch
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name() == name)
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.data().len()).sum()
    }

    /// True when every parameter is frozen.
    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(Parameter::is_frozen)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.iter_mut().for_each(|p| p.set_frozen(frozen));
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// L2 norm of the accumulated gradients of all parameters.
    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad_norm().powi(2)).sum::<f64>().sqrt()
    }

    /// Little-endian bytes of every parameter value, in layout order.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.params
            .iter()
            .flat_map(|p| p.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// Records the parameters on `g`. Frozen parameters become constants.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundModule> {
        let vars = self.params.iter().map(|p| g.param(p)).collect::<modnmt_tensor::Result<Vec<_>>>()?;
        Ok(self.bound(vars))
    }

    /// Records the parameters as constants regardless of freeze flags.
    pub fn bind_constant(&self, g: &mut Graph) -> Result<BoundModule> {
        let vars = self
            .params
            .iter()
            .map(|p| g.constant(p.shape().to_vec(), p.data().to_vec()))
            .collect::<modnmt_tensor::Result<Vec<_>>>()?;
        Ok(self.bound(vars))
    }

    fn bound(&self, vars: Vec<Var>) -> BoundModule {
        BoundModule {
            name: self.name.clone(),
            kind: self.kind,
            vocab_size: self.vocab_size,
            arch: self.arch,
            vars,
        }
    }

    /// Adds the gradients of a bound copy into the parameter accumulators.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &BoundModule) -> Result<()> {
        if bound.name != self.name || bound.vars.len() != self.params.len() {
            return Err(NmtError::Contract(format!("{} was not bound from {}", bound.name, self.name)));
        }
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            grads.accumulate_into(v, p)?;
        }
        Ok(())
    }
}

/// A module's parameters recorded on a graph.
#[derive(Debug, Clone)]
pub struct BoundModule {
    name: String,
    kind: ModuleKind,
    vocab_size: usize,
    arch: ArchConfig,
    vars: Vec<Var>,
}

impl BoundModule {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn cursor(&self) -> Cursor<'_> {
        Cursor { vars: &self.vars, pos: 0 }
    }
}

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}

/// Sinusoidal position table `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

fn check_ids(m: &BoundModule, tokens: &TokenMatrix) -> Result<()> {
    if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= m.vocab_size) {
        return Err(NmtError::Composition(format!(
            "token id {bad} is outside the {}-token vocabulary of {}",
            m.vocab_size, m.name
        )));
    }
    if tokens.rows == 0 || tokens.cols == 0 {
        return Err(NmtError::Composition(format!("{} received an empty token matrix", m.name)));
    }
    Ok(())
}

fn embed(g: &mut Graph, cur: &mut Cursor<'_>, tokens: &TokenMatrix, d: usize) -> Result<Var> {
    let table = cur.next();
    let x = g.embedding(table, &tokens.ids)?;
    let x = g.scale(x, (d as f64).sqrt())?;
    let x = g.reshape(x, [tokens.rows, tokens.cols, d])?;
    let pe = positional_encoding(tokens.cols, d);
    let pe: Vec<f64> = (0..tokens.rows).flat_map(|_| pe.iter().copied()).collect();
    let pe = g.constant([tokens.rows, tokens.cols, d], pe)?;
    Ok(g.add(x, pe)?)
}

fn norm(g: &mut Graph, cur: &mut Cursor<'_>, x: Var) -> Result<Var> {
    let gain = cur.next();
    let bias = cur.next();
    Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
}

fn linear(g: &mut Graph, cur: &mut Cursor<'_>, x: Var) -> Result<Var> {
    let w = cur.next();
    let b = cur.next();
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

fn attention(g: &mut Graph, cur: &mut Cursor<'_>, x: Var, memory: Var, heads: usize, allowed: &[bool]) -> Result<Var> {
    let q = linear(g, cur, x)?;
    let k = linear(g, cur, memory)?;
    let v = linear(g, cur, memory)?;
    let a = g.attention(q, k, v, heads, allowed)?;
    linear(g, cur, a)
}

fn feed_forward(g: &mut Graph, cur: &mut Cursor<'_>, x: Var) -> Result<Var> {
    let h = linear(g, cur, x)?;
    let h = g.gelu(h)?;
    linear(g, cur, h)
}

/// Keys a query may attend to: non-padded keys, and with `causal` only keys at
/// or before the query position.
fn self_mask(tokens: &TokenMatrix, causal: bool) -> Vec<bool> {
    let (b, s) = (tokens.rows, tokens.cols);
    let mut allowed = vec![false; b * s * s];
    for bi in 0..b {
        for i in 0..s {
            for j in 0..s {
                allowed[(bi * s + i) * s + j] = !tokens.pad[bi * s + j] && (!causal || j <= i);
            }
        }
    }
    allowed
}

fn cross_mask(src_pad: &[bool], rows: usize, src_len: usize, tgt_len: usize) -> Vec<bool> {
    let mut allowed = Vec::with_capacity(rows * tgt_len * src_len);
    for bi in 0..rows {
        for _ in 0..tgt_len {
            allowed.extend(src_pad[bi * src_len..(bi + 1) * src_len].iter().map(|p| !p));
        }
    }
    allowed
}

/// Encoder output for one batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Final states `[B, S, D]`.
    pub states: Var,
    /// Sentence representations `[B, D]`.
    pub pooled: Var,
    pub pad: Vec<bool>,
    pub rows: usize,
    pub len: usize,
    pub d_model: usize,
}

pub fn encode(g: &mut Graph, enc: &BoundModule, src: &TokenMatrix) -> Result<Encoded> {
    if enc.kind != ModuleKind::Encoder {
        return Err(NmtError::Composition(format!("{} is not an encoder", enc.name)));
    }
    check_ids(enc, src)?;
    let arch = enc.arch;
    let mut cur = enc.cursor();
    let mut x = embed(g, &mut cur, src, arch.d_model)?;
    let allowed = self_mask(src, false);
    for _ in 0..arch.blocks {
        let h = norm(g, &mut cur, x)?;
        let a = attention(g, &mut cur, h, h, arch.heads, &allowed)?;
        x = g.add(x, a)?;
        let h = norm(g, &mut cur, x)?;
        let f = feed_forward(g, &mut cur, h)?;
        x = g.add(x, f)?;
    }
    let states = norm(g, &mut cur, x)?;
    let pooled = g.masked_mean_pool(states, &src.pad)?;
    Ok(Encoded {
        states,
        pooled,
        pad: src.pad.clone(),
        rows: src.rows,
        len: src.cols,
        d_model: arch.d_model,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    /// Final decoder states `[B, T, D]`.
    pub hidden: Var,
    /// Next-token logits `[B, T, V]`.
    pub logits: Var,
}

/// Runs the decoder over `tgt_in` with causal self-attention and
/// cross-attention over the non-padded encoder states.
pub fn decode(g: &mut Graph, dec: &BoundModule, memory: &Encoded, tgt_in: &TokenMatrix) -> Result<Decoded> {
    if dec.kind != ModuleKind::Decoder {
        return Err(NmtError::Composition(format!("{} is not a decoder", dec.name)));
    }
    let arch = dec.arch;
    if memory.d_model != arch.d_model {
        return Err(NmtError::Composition(format!(
            "encoder dimension {} does not match {} dimension {}",
            memory.d_model, dec.name, arch.d_model
        )));
    }
    if memory.rows != tgt_in.rows {
        return Err(NmtError::Composition(format!(
            "{} source rows but {} target rows",
            memory.rows, tgt_in.rows
        )));
    }
    check_ids(dec, tgt_in)?;
    let mut cur = dec.cursor();
    let mut x = embed(g, &mut cur, tgt_in, arch.d_model)?;
    let self_allowed = self_mask(tgt_in, true);
    let cross_allowed = cross_mask(&memory.pad, tgt_in.rows, memory.len, tgt_in.cols);
    for _ in 0..arch.blocks {
        let h = norm(g, &mut cur, x)?;
        let a = attention(g, &mut cur, h, h, arch.heads, &self_allowed)?;
        x = g.add(x, a)?;
        let h = norm(g, &mut cur, x)?;
        let c = attention(g, &mut cur, h, memory.states, arch.heads, &cross_allowed)?;
        x = g.add(x, c)?;
        let h = norm(g, &mut cur, x)?;
        let f = feed_forward(g, &mut cur, h)?;
        x = g.add(x, f)?;
    }
    let hidden = norm(g, &mut cur, x)?;
    let logits = linear(g, &mut cur, hidden)?;
    Ok(Decoded { hidden, logits })
}

/// Mean cross-entropy of predicting `tgt[:, 1:]` from `tgt[:, :-1]`.
pub fn teacher_forced_loss(g: &mut Graph, dec: &BoundModule, memory: &Encoded, tgt: &TokenMatrix) -> Result<Var> {
    if tgt.cols < 2 {
        return Err(NmtError::Contract("target rows need at least BOS and EOS".into()));
    }
    let input = tgt.slice_cols(0, tgt.cols - 1);
    let target = tgt.slice_cols(1, tgt.cols);
    let out = decode(g, dec, memory, &input)?;
    Ok(g.cross_entropy(out.logits, &target.ids, &target.pad)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegisteredModule {
    pub module: LanguageModule,
    pub vocab_hash: VocabHash,
}

/// Owns every module of a run, keyed by module name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModuleRegistry {
    modules: BTreeMap<String, RegisteredModule>,
}

impl ModuleRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, module: LanguageModule, vocab_hash: VocabHash) -> Result<()> {
        if self.modules.contains_key(module.name()) {
            return Err(NmtError::DuplicateModule(module.name().to_string()));
        }
        self.modules
            .insert(module.name().to_string(), RegisteredModule { module, vocab_hash });
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Result<RegisteredModule> {
        self.modules
            .remove(name)
            .ok_or_else(|| NmtError::UnknownModule(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.modules.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&RegisteredModule> {
        self.modules
            .get(name)
            .ok_or_else(|| NmtError::UnknownModule(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut RegisteredModule> {
        self.modules
            .get_mut(name)
            .ok_or_else(|| NmtError::UnknownModule(name.to_string()))
    }

    pub fn module(&self, kind: ModuleKind, language: &str) -> Result<&LanguageModule> {
        Ok(&self.get(&module_name(kind, language))?.module)
    }

    pub fn encoder(&self, language: &str) -> Result<&LanguageModule> {
        self.module(ModuleKind::Encoder, language)
    }

    pub fn decoder(&self, language: &str) -> Result<&LanguageModule> {
        self.module(ModuleKind::Decoder, language)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.get_mut(name)?.module.set_frozen(frozen);
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.modules.values_mut().for_each(|m| m.module.set_frozen(true));
    }

    /// Every parameter of every module, in module-name order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.modules
            .values_mut()
            .flat_map(|m| m.module.params_mut().iter_mut())
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.modules.values_mut().for_each(|m| m.module.zero_grad());
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.modules.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &RegisteredModule> {
        self.modules.values()
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    /// Languages that have an encoder (resp. decoder) registered.
    pub fn languages(&self, kind: ModuleKind) -> Vec<String> {
        self.iter()
            .filter(|m| m.module.kind() == kind)
            .map(|m| m.module.language().to_string())
            .collect()
    }

    /// Checks that `enc.src` can feed `dec.tgt`.
    pub fn check_composable(&self, src: &str, tgt: &str) -> Result<()> {
        let e = self.encoder(src)?;
        let d = self.decoder(tgt)?;
        if e.arch().d_model != d.arch().d_model {
            return Err(NmtError::Composition(format!(
                "{} has dimension {} but {} expects {}",
                e.name(),
                e.arch().d_model,
                d.name(),
                d.arch().d_model
            )));
        }
        Ok(())
    }
}
