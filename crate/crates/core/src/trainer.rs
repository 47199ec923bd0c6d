//! Joint bilingual training and incremental language addition.

use std::fs;
use std::path::Path;

use modnmt_tensor::{AdamConfig, Adam, Graph, TensorError};
use sha2::{Digest, Sha256};

use crate::corpus::{make_batches, Batch, ParallelCorpus, ParallelText};
use crate::error::{io_err, NmtError, Result};
use crate::evaluation::evaluate_direction;
use crate::model::{encode, module_name, teacher_forced_loss, ArchConfig, LanguageModule, ModuleKind, ModuleRegistry};
use crate::objective::{joint_loss, DistanceKind, DistanceMetric, LossBreakdown, PairModules, LOSS_CSV_HEADER};
use crate::tokenizer::{Vocabularies, Vocabulary};
use crate::translator::{TranslationRequest, Translator};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub steps: usize,
    /// Padded token budget of one batch (`rows × longest side`).
    pub batch_tokens: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub metric: DistanceMetric,
    /// Validation interval in steps; 0 disables validation.
    pub eval_every: usize,
    pub arch: ArchConfig,
    /// Batches whose gradients are summed into one optimizer step.
    pub accum_steps: usize,
    pub adam: AdamConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_tokens: 512,
            lr_peak: 1e-3,
            warmup_steps: 200,
            seed: 7,
            metric: DistanceMetric::default(),
            eval_every: 0,
            arch: ArchConfig::default(),
            accum_steps: 1,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.steps == 0 || self.warmup_steps == 0 || self.accum_steps == 0 || self.batch_tokens == 0 {
            return Err(NmtError::Config(
                "steps, warmup_steps, accum_steps and batch_tokens must all be at least 1".into(),
            ));
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(NmtError::Config(format!("lr_peak must be positive, got {}", self.lr_peak)));
        }
        DistanceMetric::new(self.metric.kind, self.metric.weight)?;
        Ok(())
    }

    /// The configuration as manifest entries.
    pub fn manifest_entries(&self) -> Vec<(String, String)> {
        let a = &self.arch;
        [
            ("steps", self.steps.to_string()),
            ("batch_tokens", self.batch_tokens.to_string()),
            ("lr_peak", self.lr_peak.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("metric", self.metric.kind.to_string()),
            ("metric_weight", self.metric.weight.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("d_model", a.d_model.to_string()),
            ("blocks", a.blocks.to_string()),
            ("heads", a.heads.to_string()),
            ("ff", a.ff.to_string()),
            ("accum_steps", self.accum_steps.to_string()),
            ("adam_beta1", self.adam.beta1.to_string()),
            ("adam_beta2", self.adam.beta2.to_string()),
            ("adam_epsilon", self.adam.epsilon.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("config.{k}"), v))
        .collect()
    }
}

/// Linear warmup to `lr_peak` at `warmup`, then inverse square-root decay.
pub fn lr_schedule(step: usize, warmup: usize, lr_peak: f64) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
    if s < w {
        lr_peak * s / w
    } else {
        lr_peak * (w / s).sqrt()
    }
}

/// Ordered `key: value` record of a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunManifest {
    entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `key`, replacing an earlier value in place.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string().replace('\n', " ");
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(": ")
                .or_else(|| line.strip_suffix(':').map(|k| (k, "")))
                .ok_or_else(|| NmtError::Config(format!("malformed manifest line `{line}`")))?;
            m.set(k, v);
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// SHA-256 over the surface text of every pair.
pub fn corpus_hash(corpus: &ParallelCorpus) -> String {
    let mut h = Sha256::new();
    for (s, t) in &corpus.pairs {
        h.update(s.surface.as_bytes());
        h.update(b"\t");
        h.update(t.surface.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub breakdown: LossBreakdown,
    pub lr: f64,
}

pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&r.breakdown.csv_row(r.step, r.lr));
        out.push('\n');
    }
    out
}

/// What the observer sees after every optimizer step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub record: LossRecord,
    /// Gradient norm of every module, in module-name order.
    pub grad_norms: Vec<(String, f64)>,
    /// Validation BLEU per `src-tgt` direction, on validation steps only.
    pub validation: Option<Vec<(String, f64)>>,
}

pub type Observer<'a> = dyn FnMut(&StepReport, &ModuleRegistry) + 'a;

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub registry: ModuleRegistry,
    pub manifest: RunManifest,
    pub log: Vec<LossRecord>,
}

/// Endless seeded batch sequence: each epoch reshuffles with `seed + epoch`.
struct BatchStream<'a> {
    corpus: &'a ParallelCorpus,
    batch_tokens: usize,
    seed: u64,
    min_rows: usize,
    epoch: u64,
    batches: Vec<Batch>,
    pos: usize,
}

impl<'a> BatchStream<'a> {
    fn new(corpus: &'a ParallelCorpus, batch_tokens: usize, seed: u64, min_rows: usize) -> Result<Self> {
        let batches = make_batches(corpus, batch_tokens, seed)?;
        if batches.iter().all(|b| b.rows() < min_rows) {
            return Err(NmtError::Config(format!(
                "no batch holds at least {min_rows} rows; raise batch_tokens"
            )));
        }
        Ok(Self {
            corpus,
            batch_tokens,
            seed,
            min_rows,
            epoch: 0,
            batches,
            pos: 0,
        })
    }

    fn next(&mut self) -> Result<&Batch> {
        loop {
            if self.pos == self.batches.len() {
                self.epoch += 1;
                self.batches = make_batches(self.corpus, self.batch_tokens, self.seed.wrapping_add(self.epoch))?;
                self.pos = 0;
            }
            self.pos += 1;
            if self.batches[self.pos - 1].rows() >= self.min_rows {
                return Ok(&self.batches[self.pos - 1]);
            }
        }
    }
}

fn is_divergence(e: &NmtError) -> Option<String> {
    match e {
        NmtError::Tensor(t @ (TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. })) => {
            Some(t.to_string())
        }
        _ => None,
    }
}

fn diverged(step: usize, err: NmtError, manifest: &RunManifest) -> NmtError {
    match is_divergence(&err) {
        Some(reason) => {
            let mut m = manifest.clone();
            m.set("status", "diverged");
            m.set("failed_step", step);
            m.set("failure", &reason);
            NmtError::Diverged {
                step,
                reason,
                manifest: Box::new(m),
            }
        }
        None => err,
    }
}

fn grad_norms(registry: &ModuleRegistry) -> Vec<(String, f64)> {
    registry
        .iter()
        .map(|m| (m.module.name().to_string(), m.module.grad_norm()))
        .collect()
}

fn base_manifest(run: &str, config: &TrainingConfig) -> RunManifest {
    let mut m = RunManifest::new();
    m.set("run", run);
    m.set("status", "running");
    for (k, v) in config.manifest_entries() {
        m.set(k, v);
    }
    m
}

fn frozen_snapshot(registry: &ModuleRegistry) -> Vec<(String, Vec<u8>)> {
    registry
        .iter()
        .filter(|m| m.module.is_frozen())
        .map(|m| (m.module.name().to_string(), m.module.param_bytes()))
        .collect()
}

fn check_frozen_unchanged(registry: &ModuleRegistry, before: &[(String, Vec<u8>)]) -> Result<()> {
    for (name, bytes) in before {
        if registry.get(name)?.module.param_bytes() != *bytes {
            return Err(NmtError::Contract(format!("frozen module {name} changed during training")));
        }
    }
    Ok(())
}

/// Inputs of a joint run; `corpus.src_lang` is X and `corpus.tgt_lang` is Y.
#[derive(Debug, Clone, Copy)]
pub struct JointData<'a> {
    pub corpus: &'a ParallelCorpus,
    pub src_vocab: &'a Vocabulary,
    pub tgt_vocab: &'a Vocabulary,
    pub validation: Option<&'a ParallelText>,
}

fn validate_joint(
    registry: &ModuleRegistry,
    data: &JointData<'_>,
    valid: &ParallelText,
) -> Result<Vec<(String, f64)>> {
    let mut vocabs = Vocabularies::new();
    vocabs.insert(data.src_vocab.clone());
    vocabs.insert(data.tgt_vocab.clone());
    let translator = Translator::new(registry, &vocabs);
    let (x, y) = (&valid.src_lang, &valid.tgt_lang);
    let mut out = Vec::new();
    for (s, t, src, refs) in [
        (x, x, &valid.src, &valid.src),
        (y, y, &valid.tgt, &valid.tgt),
        (x, y, &valid.src, &valid.tgt),
        (y, x, &valid.tgt, &valid.src),
    ] {
        let report = evaluate_direction(&translator, &TranslationRequest::direct(s, t), src, refs)?;
        out.push((format!("{s}-{t}"), report.bleu));
    }
    Ok(out)
}

/// Trains fresh `enc.x`, `dec.x`, `enc.y`, `dec.y` on the joint objective.
pub fn joint_train(data: JointData<'_>, config: &TrainingConfig, observer: &mut Observer<'_>) -> Result<TrainingRun> {
    config.validate()?;
    let corpus = data.corpus;
    let (x, y) = (corpus.src_lang.as_str(), corpus.tgt_lang.as_str());
    if x == y {
        return Err(NmtError::Config(format!("joint training needs two languages, got {x} twice")));
    }
    for (v, lang) in [(data.src_vocab, x), (data.tgt_vocab, y)] {
        if v.language() != lang {
            return Err(NmtError::Vocabulary(format!(
                "vocabulary of `{}` supplied for `{lang}`",
                v.language()
            )));
        }
    }
    let mut registry = ModuleRegistry::new();
    for (lang, vocab) in [(x, data.src_vocab), (y, data.tgt_vocab)] {
        for kind in [ModuleKind::Encoder, ModuleKind::Decoder] {
            let m = LanguageModule::new(kind, lang, vocab.len(), config.arch, config.seed)?;
            registry.insert(m, vocab.hash())?;
        }
    }
    let mut manifest = base_manifest("joint", config);
    manifest.set("src_lang", x);
    manifest.set("tgt_lang", y);
    manifest.set("corpus.pairs", corpus.len());
    manifest.set("corpus.sha256", corpus_hash(corpus));
    manifest.set(format!("vocab.{x}.sha256"), data.src_vocab.hash());
    manifest.set(format!("vocab.{y}.sha256"), data.tgt_vocab.hash());
    manifest.set("modules.trained", registry.names().collect::<Vec<_>>().join(" "));
    manifest.set("modules.frozen", "");

    let names = [
        module_name(ModuleKind::Encoder, x),
        module_name(ModuleKind::Decoder, x),
        module_name(ModuleKind::Encoder, y),
        module_name(ModuleKind::Decoder, y),
    ];
    let min_rows = if config.metric.kind == DistanceKind::Correlation { 2 } else { 1 };
    let mut stream = BatchStream::new(corpus, config.batch_tokens, config.seed, min_rows)?;
    let mut adam = Adam::new(config.adam);
    let mut log = Vec::with_capacity(config.steps);
    let mut g = Graph::new();

    for step in 1..=config.steps {
        let lr = lr_schedule(step, config.warmup_steps, config.lr_peak);
        let result: Result<LossBreakdown> = (|| {
            registry.zero_grad();
            let mut sum: Option<LossBreakdown> = None;
            for _ in 0..config.accum_steps {
                let batch = stream.next()?;
                g.reset();
                let bound = names
                    .iter()
                    .map(|n| registry.get(n)?.module.bind(&mut g))
                    .collect::<Result<Vec<_>>>()?;
                let loss = joint_loss(
                    &mut g,
                    batch,
                    PairModules {
                        enc_x: &bound[0],
                        dec_x: &bound[1],
                        enc_y: &bound[2],
                        dec_y: &bound[3],
                    },
                    config.metric,
                )?;
                let grads = g.backward(loss.total)?;
                for (n, b) in names.iter().zip(&bound) {
                    registry.get_mut(n)?.module.accumulate(&grads, b)?;
                }
                let b = loss.breakdown(&g, config.metric.weight);
                sum = Some(match sum {
                    None => b,
                    Some(acc) => sum_breakdowns(acc, b),
                });
            }
            let mut params = registry.parameters_mut();
            adam.step_accumulated(&mut params, lr, config.accum_steps)?;
            Ok(finish_average(sum.expect("accum_steps >= 1"), config.accum_steps))
        })();
        let breakdown = result.map_err(|e| diverged(step, e, &manifest))?;
        let record = LossRecord { step, breakdown, lr };
        log.push(record);
        let validation = match data.validation {
            Some(valid) if config.eval_every > 0 && step % config.eval_every == 0 => {
                let scores = validate_joint(&registry, &data, valid)?;
                for (dir, bleu) in &scores {
                    manifest.set(format!("valid.bleu.{dir}"), bleu);
                }
                manifest.set("valid.step", step);
                Some(scores)
            }
            _ => None,
        };
        observer(
            &StepReport {
                record,
                grad_norms: grad_norms(&registry),
                validation,
            },
            &registry,
        );
    }
    finish_manifest(&mut manifest, &log);
    Ok(TrainingRun { registry, manifest, log })
}

/// Component-wise sum; the final division happens in [`finish_average`].
fn sum_breakdowns(acc: LossBreakdown, b: LossBreakdown) -> LossBreakdown {
    LossBreakdown {
        l_xx: acc.l_xx + b.l_xx,
        l_yy: acc.l_yy + b.l_yy,
        l_xy: acc.l_xy + b.l_xy,
        l_yx: acc.l_yx + b.l_yx,
        d: acc.d + b.d,
        weight: acc.weight,
        total: acc.total + b.total,
    }
}

/// Averages summed components. With one micro-batch the values are returned
/// untouched, so the reported total is exactly the graph's total. With several,
/// the total is recomputed from the averaged parts to keep the row additive.
fn finish_average(sum: LossBreakdown, count: usize) -> LossBreakdown {
    if count == 1 {
        return sum;
    }
    let n = count as f64;
    let mut b = LossBreakdown {
        l_xx: sum.l_xx / n,
        l_yy: sum.l_yy / n,
        l_xy: sum.l_xy / n,
        l_yx: sum.l_yx / n,
        d: sum.d / n,
        weight: sum.weight,
        total: 0.0,
    };
    b.total = b.sum_of_parts();
    b
}

fn finish_manifest(manifest: &mut RunManifest, log: &[LossRecord]) {
    manifest.set("status", "ok");
    manifest.set("steps_completed", log.len());
    if let Some(last) = log.last() {
        manifest.set("final.total", last.breakdown.total);
        manifest.set("final.lr", last.lr);
    }
}

/// Inputs of a language addition; `corpus.src_lang` is the new language Z and
/// `corpus.tgt_lang` the already trained language X.
#[derive(Debug, Clone, Copy)]
pub struct AdditionData<'a> {
    pub corpus: &'a ParallelCorpus,
    pub new_vocab: &'a Vocabulary,
    pub pivot_vocab: &'a Vocabulary,
}

/// Trains a fresh `enc.z` against the frozen `dec.x` with plain cross-entropy.
/// With `both_directions`, a fresh `dec.z` is also trained from the frozen
/// `enc.x`. Every pre-existing module is frozen and left bit-identical.
pub fn add_language(
    mut registry: ModuleRegistry,
    data: AdditionData<'_>,
    config: &TrainingConfig,
    both_directions: bool,
    observer: &mut Observer<'_>,
) -> Result<TrainingRun> {
    config.validate()?;
    let corpus = data.corpus;
    let (z, x) = (corpus.src_lang.as_str(), corpus.tgt_lang.as_str());
    if data.new_vocab.language() != z || data.pivot_vocab.language() != x {
        return Err(NmtError::Vocabulary(format!(
            "vocabularies ({}, {}) do not match the corpus languages ({z}, {x})",
            data.new_vocab.language(),
            data.pivot_vocab.language()
        )));
    }
    let pivot_hash = data.pivot_vocab.hash();
    let mut pivots = vec![module_name(ModuleKind::Decoder, x)];
    if both_directions {
        pivots.push(module_name(ModuleKind::Encoder, x));
    }
    for name in &pivots {
        let reg = registry.get(name)?;
        if reg.vocab_hash != pivot_hash {
            return Err(NmtError::VocabMismatch {
                module: name.clone(),
                expected: reg.vocab_hash.to_hex(),
                found: pivot_hash.to_hex(),
            });
        }
        if reg.module.arch().d_model != config.arch.d_model {
            return Err(NmtError::Composition(format!(
                "{name} has dimension {} but the new module would have {}",
                reg.module.arch().d_model,
                config.arch.d_model
            )));
        }
    }
    registry.freeze_all();
    let frozen: Vec<String> = registry.names().map(str::to_string).collect();
    let before = frozen_snapshot(&registry);

    let enc_z = LanguageModule::new(ModuleKind::Encoder, z, data.new_vocab.len(), config.arch, config.seed)?;
    let mut trained = vec![enc_z.name().to_string()];
    registry.insert(enc_z, data.new_vocab.hash())?;
    if both_directions {
        let dec_z = LanguageModule::new(ModuleKind::Decoder, z, data.new_vocab.len(), config.arch, config.seed)?;
        trained.push(dec_z.name().to_string());
        registry.insert(dec_z, data.new_vocab.hash())?;
    }

    let mut manifest = base_manifest("add_language", config);
    manifest.set("new_lang", z);
    manifest.set("pivot_lang", x);
    manifest.set("both_directions", both_directions);
    manifest.set("corpus.pairs", corpus.len());
    manifest.set("corpus.sha256", corpus_hash(corpus));
    manifest.set(format!("vocab.{z}.sha256"), data.new_vocab.hash());
    manifest.set(format!("vocab.{x}.sha256"), pivot_hash);
    manifest.set("modules.trained", trained.join(" "));
    manifest.set("modules.frozen", frozen.join(" "));

    let enc_z_name = module_name(ModuleKind::Encoder, z);
    let dec_z_name = module_name(ModuleKind::Decoder, z);
    let enc_x_name = module_name(ModuleKind::Encoder, x);
    let dec_x_name = module_name(ModuleKind::Decoder, x);
    let mut stream = BatchStream::new(corpus, config.batch_tokens, config.seed, 1)?;
    let mut adam = Adam::new(config.adam);
    let mut log = Vec::with_capacity(config.steps);
    let mut g = Graph::new();

    for step in 1..=config.steps {
        let lr = lr_schedule(step, config.warmup_steps, config.lr_peak);
        let result: Result<LossBreakdown> = (|| {
            registry.zero_grad();
            let mut sum: Option<LossBreakdown> = None;
            for _ in 0..config.accum_steps {
                let batch = stream.next()?;
                g.reset();
                let ez = registry.get(&enc_z_name)?.module.bind(&mut g)?;
                let dx = registry.get(&dec_x_name)?.module.bind(&mut g)?;
                let mem = encode(&mut g, &ez, &batch.src)?;
                let l_zx = teacher_forced_loss(&mut g, &dx, &mem, &batch.tgt)?;
                let mut total = l_zx;
                let mut reverse = None;
                if both_directions {
                    let ex = registry.get(&enc_x_name)?.module.bind(&mut g)?;
                    let dz = registry.get(&dec_z_name)?.module.bind(&mut g)?;
                    let mem = encode(&mut g, &ex, &batch.tgt)?;
                    let l_xz = teacher_forced_loss(&mut g, &dz, &mem, &batch.src)?;
                    total = g.add(l_zx, l_xz)?;
                    reverse = Some((l_xz, dz));
                }
                let grads = g.backward(total)?;
                registry.get_mut(&enc_z_name)?.module.accumulate(&grads, &ez)?;
                if let Some((_, dz)) = &reverse {
                    registry.get_mut(&dec_z_name)?.module.accumulate(&grads, dz)?;
                }
                let b = LossBreakdown {
                    l_xx: 0.0,
                    l_yy: 0.0,
                    l_xy: g.scalar(l_zx),
                    l_yx: reverse.as_ref().map_or(0.0, |(l, _)| g.scalar(*l)),
                    d: 0.0,
                    weight: 0.0,
                    total: g.scalar(total),
                };
                sum = Some(match sum {
                    None => b,
                    Some(acc) => sum_breakdowns(acc, b),
                });
            }
            let mut params = registry.parameters_mut();
            adam.step_accumulated(&mut params, lr, config.accum_steps)?;
            Ok(finish_average(sum.expect("accum_steps >= 1"), config.accum_steps))
        })();
        let breakdown = result.map_err(|e| diverged(step, e, &manifest))?;
        let record = LossRecord { step, breakdown, lr };
        log.push(record);
        observer(
            &StepReport {
                record,
                grad_norms: grad_norms(&registry),
                validation: None,
            },
            &registry,
        );
    }
    check_frozen_unchanged(&registry, &before)?;
    finish_manifest(&mut manifest, &log);
    Ok(TrainingRun { registry, manifest, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(100, 100, 1e-3), 1e-3);
        assert_eq!(lr_schedule(50, 100, 1e-3), 5e-4);
        assert_eq!(lr_schedule(400, 100, 1e-3), 5e-4);
    }

    #[test]
    fn manifest_round_trip() {
        let mut m = RunManifest::new();
        m.set("run", "joint");
        m.set("modules.frozen", "");
        m.set("run", "add_language");
        let back = RunManifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.get("run"), Some("add_language"));
        assert_eq!(back.entries().len(), 2);
    }
}
