//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use modnmt_core::analysis::{
    dumps_csv, extract_representations, pca_project, projection_csv, representation_report, stack_dumps, Stage,
};
use modnmt_core::checkpoint;
use modnmt_core::corpus::{
    generate_multiway, preprocess, read_lines, write_lines, CipherLanguage, ParallelCorpus, ParallelText,
    DEFAULT_MAX_WORDS,
};
use modnmt_core::evaluation::{experiment_grid, GridDirection};
use modnmt_core::model::ModuleRegistry;
use modnmt_core::tokenizer::{learn_bpe, Vocabularies, Vocabulary};
use modnmt_core::trainer::{
    add_language as core_add_language, joint_train, loss_csv, AdditionData, JointData, RunManifest, StepReport,
    TrainingConfig, TrainingRun,
};
use modnmt_core::translator::{Decoding, Route, TranslationRequest, Translator};
use modnmt_core::NmtError;

use crate::config::RunConfig;
use crate::{
    AddLanguageArgs, BuildVocabArgs, CliError, EvaluateArgs, GenDataArgs, InspectRepsArgs, TrainJointArgs,
    TrainOptions, TranslateArgs, RUN_ROOT_ENV,
};

pub const DEFAULT_VOCAB_SIZE: usize = 8000;
const DEFAULT_LOG_EVERY: usize = 100;
const LANGUAGE_TAGS: [&str; 8] = ["x", "y", "z", "w", "v", "u", "t", "s"];

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.txt";

type CliResult<T> = Result<T, CliError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| {
        CliError::Run(NmtError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Uses `out` when given, otherwise `<run root>/<command>`.
fn run_dir(out: &Option<PathBuf>, command: &str) -> CliResult<PathBuf> {
    let dir = match out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(command)
        }
    };
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    Ok(dir)
}

fn split_file(data: &Path, split: &str, lang: &str) -> PathBuf {
    data.join(format!("{split}.{lang}.txt"))
}

fn vocab_file(dir: &Path, lang: &str) -> PathBuf {
    dir.join(format!("vocab.{lang}.txt"))
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    if a.langs < 2 || a.langs > LANGUAGE_TAGS.len() {
        return Err(usage(format!("--langs must be between 2 and {}", LANGUAGE_TAGS.len())));
    }
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let out = run_dir(&a.out, "gen-data")?;
    let ciphers = LANGUAGE_TAGS[..a.langs]
        .iter()
        .enumerate()
        .map(|(i, tag)| CipherLanguage::random(tag, a.base_vocab, a.seed.wrapping_add(1 + i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&CipherLanguage> = ciphers.iter().collect();
    let total = a.n + a.valid + a.test;
    let multi = generate_multiway(&refs, total, (a.min_len, a.max_len), a.seed)?;
    let mut manifest = RunManifest::new();
    manifest.set("run", "gen-data");
    manifest.set("base_vocab", a.base_vocab);
    manifest.set("langs", LANGUAGE_TAGS[..a.langs].join(" "));
    manifest.set("train", a.n);
    manifest.set("valid", a.valid);
    manifest.set("test", a.test);
    manifest.set("len_range", format!("{}..={}", a.min_len, a.max_len));
    manifest.set("seed", a.seed);
    for c in &ciphers {
        c.save(out.join(format!("spec.{}.txt", c.language)))?;
        let lines = &multi[&c.language];
        let splits = [
            ("train", &lines[..a.n]),
            ("valid", &lines[a.n..a.n + a.valid]),
            ("test", &lines[a.n + a.valid..]),
        ];
        for (split, part) in splits {
            if !part.is_empty() {
                write_lines(split_file(&out, split, &c.language), part)?;
            }
        }
    }
    manifest.set("status", "ok");
    manifest.save(out.join(MANIFEST_FILE))?;
    eprintln!("wrote {} languages x {total} sentences to {}", a.langs, out.display());
    Ok(())
}

pub fn build_vocab(a: &BuildVocabArgs) -> CliResult<()> {
    let lines = read_lines(split_file(&a.data, &a.split, &a.lang))?;
    let vocab = learn_bpe(&a.lang, &lines, a.size)?;
    let out = a.out.clone().unwrap_or_else(|| vocab_file(&a.data, &a.lang));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    vocab.save(&out)?;
    eprintln!("{} tokens, {} merges -> {}", vocab.len(), vocab.merges().len(), out.display());
    Ok(())
}

/// Config file, then explicit flags, then `--set` overrides.
fn load_config(opts: &TrainOptions, flags: &[(&str, Option<String>)]) -> CliResult<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let common = [
        ("data", opts.data.as_ref().map(|p| p.display().to_string())),
        ("steps", opts.steps.map(|s| s.to_string())),
        ("seed", opts.seed.map(|s| s.to_string())),
        ("metric", opts.metric.clone()),
    ];
    for (k, v) in common.iter().chain(flags) {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    cfg.apply_overrides(&opts.set)?;
    Ok(cfg)
}

fn required<'a>(cfg: &'a RunConfig, key: &str) -> CliResult<&'a str> {
    cfg.get(key)
        .ok_or_else(|| usage(format!("missing `{key}` (flag --{} or config key)", key.replace('_', "-"))))
}

/// Reads and preprocesses the training pair `src`/`tgt` from `data`.
fn load_pair(data: &Path, src: &str, tgt: &str, max_words: usize, manifest: &mut RunManifest) -> CliResult<ParallelText> {
    let s = read_lines(split_file(data, "train", src))?;
    let t = read_lines(split_file(data, "train", tgt))?;
    let (text, report) = preprocess(src, tgt, &s, &t, max_words)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    manifest.set("preprocess.input_pairs", report.input_pairs);
    manifest.set("preprocess.kept", report.kept);
    manifest.set("preprocess.too_long", report.too_long.len());
    manifest.set("preprocess.empty", report.empty.len());
    if text.is_empty() {
        return Err(NmtError::EmptyCorpus.into());
    }
    Ok(text)
}

/// The vocabulary stored next to the data if present, otherwise one learned
/// from `lines`.
fn data_vocab(data: &Path, lang: &str, lines: &[String], size: usize) -> CliResult<Vocabulary> {
    let path = vocab_file(data, lang);
    if path.exists() {
        Ok(Vocabulary::load(&path)?)
    } else {
        Ok(learn_bpe(lang, lines, size)?)
    }
}

fn progress_observer(log_every: usize) -> impl FnMut(&StepReport, &ModuleRegistry) {
    move |r: &StepReport, _: &ModuleRegistry| {
        if let Some(v) = &r.validation {
            let scores: Vec<String> = v.iter().map(|(d, b)| format!("{d} {b:.2}")).collect();
            eprintln!("step {:>6}  valid bleu  {}", r.record.step, scores.join("  "));
        }
        if log_every > 0 && r.record.step.is_multiple_of(log_every) {
            let b = r.record.breakdown;
            eprintln!(
                "step {:>6}  total {:.4}  xx {:.4}  yy {:.4}  xy {:.4}  yx {:.4}  d {:.4}  lr {:.2e}",
                r.record.step, b.total, b.l_xx, b.l_yy, b.l_xy, b.l_yx, b.d, r.record.lr
            );
        }
    }
}

fn echo_config(manifest: &mut RunManifest, cfg: &RunConfig, train: &TrainingConfig) {
    let from_training: Vec<(String, String)> = train.manifest_entries();
    for (k, v) in &from_training {
        manifest.set(k.as_str(), v);
    }
    for (k, v) in cfg.entries() {
        let key = format!("config.{k}");
        if !from_training.iter().any(|(t, _)| *t == key) {
            manifest.set(key, v);
        }
    }
}

fn config_text(cfg: &RunConfig, train: &TrainingConfig) -> String {
    let mut lines: Vec<(String, String)> = train
        .manifest_entries()
        .into_iter()
        .map(|(k, v)| (k.trim_start_matches("config.").to_string(), v))
        .collect();
    for (k, v) in cfg.entries() {
        if !lines.iter().any(|(t, _)| t == k) {
            lines.push((k.to_string(), v.to_string()));
        }
    }
    lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn write_run(dir: &Path, run: &TrainingRun, vocabs: &Vocabularies, cfg_text: &str) -> CliResult<()> {
    checkpoint::save(&run.registry, dir.join(CHECKPOINT_FILE))?;
    for v in vocabs.iter() {
        v.save(vocab_file(dir, v.language()))?;
    }
    let loss = dir.join(LOSS_FILE);
    fs::write(&loss, loss_csv(&run.log)).map_err(io(&loss))?;
    let cfg = dir.join(CONFIG_FILE);
    fs::write(&cfg, cfg_text).map_err(io(&cfg))?;
    run.manifest.save(dir.join(MANIFEST_FILE))?;
    Ok(())
}

/// On divergence the partial manifest is kept in the run directory.
fn handle_training<T>(dir: &Path, result: Result<T, NmtError>) -> CliResult<T> {
    match result {
        Err(NmtError::Diverged { step, reason, manifest }) => {
            manifest.save(dir.join(MANIFEST_FILE))?;
            Err(NmtError::Diverged { step, reason, manifest }.into())
        }
        other => Ok(other?),
    }
}

pub fn train_joint(a: &TrainJointArgs) -> CliResult<()> {
    let cfg = load_config(&a.opts, &[("src", a.src.clone()), ("tgt", a.tgt.clone())])?;
    let train = cfg.training()?;
    let data = PathBuf::from(required(&cfg, "data")?);
    let (x, y) = (required(&cfg, "src")?, required(&cfg, "tgt")?);
    if x == y {
        return Err(usage("--src and --tgt must differ"));
    }
    let max_words = cfg.parsed_or("max_words", DEFAULT_MAX_WORDS)?;
    let vocab_size = cfg.parsed_or("vocab_size", DEFAULT_VOCAB_SIZE)?;
    let log_every = cfg.parsed_or("log_every", DEFAULT_LOG_EVERY)?;
    let out = run_dir(&a.opts.out, "train-joint")?;

    let mut pre = RunManifest::new();
    let text = load_pair(&data, x, y, max_words, &mut pre)?;
    let vx = data_vocab(&data, x, &text.src, vocab_size)?;
    let vy = data_vocab(&data, y, &text.tgt, vocab_size)?;
    let corpus = ParallelCorpus::from_text(&text, &vx, &vy)?;
    let valid = match (split_file(&data, "valid", x), split_file(&data, "valid", y)) {
        (s, t) if train.eval_every > 0 && s.exists() && t.exists() => Some(ParallelText::read(x, y, s, t)?),
        _ => None,
    };
    let mut observer = progress_observer(log_every);
    let result = joint_train(
        JointData {
            corpus: &corpus,
            src_vocab: &vx,
            tgt_vocab: &vy,
            validation: valid.as_ref(),
        },
        &train,
        &mut observer,
    );
    let mut run = handle_training(&out, result)?;
    run.manifest.set("data", data.display());
    for (k, v) in pre.entries() {
        run.manifest.set(k.as_str(), v);
    }
    echo_config(&mut run.manifest, &cfg, &train);
    let mut vocabs = Vocabularies::new();
    vocabs.insert(vx);
    vocabs.insert(vy);
    write_run(&out, &run, &vocabs, &config_text(&cfg, &train))?;
    eprintln!("joint run finished: {}", out.display());
    Ok(())
}

/// A trained run: registry plus every vocabulary stored beside the checkpoint.
struct LoadedRun {
    dir: PathBuf,
    registry: ModuleRegistry,
    vocabs: Vocabularies,
}

fn load_run(from: &Path) -> CliResult<LoadedRun> {
    let (dir, ckpt) = if from.is_dir() {
        (from.to_path_buf(), from.join(CHECKPOINT_FILE))
    } else {
        let dir = from.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        (dir, from.to_path_buf())
    };
    let registry = checkpoint::load(&ckpt)?;
    let mut vocabs = Vocabularies::new();
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("vocab.") && n.ends_with(".txt"))
        })
        .collect();
    files.sort();
    for f in files {
        vocabs.insert(Vocabulary::load(&f)?);
    }
    Ok(LoadedRun { dir, registry, vocabs })
}

pub fn add_language(a: &AddLanguageArgs) -> CliResult<()> {
    let cfg = load_config(
        &a.opts,
        &[
            ("new", a.new.clone()),
            ("both_directions", a.both_directions.then(|| "true".to_string())),
        ],
    )?;
    let mut cfg = cfg;
    if let Some(p) = &a.parallel {
        let (z, x) = p
            .split_once('-')
            .ok_or_else(|| usage(format!("--parallel `{p}` is not of the form new-pivot")))?;
        if cfg.get("new").is_some_and(|n| n != z) {
            return Err(usage(format!("--parallel `{p}` does not start with the new language")));
        }
        cfg.set("new", z)?;
        cfg.set("pivot", x)?;
    }
    let train = cfg.training()?;
    let data = PathBuf::from(required(&cfg, "data")?);
    let z = required(&cfg, "new")?.to_string();
    let x = required(&cfg, "pivot")?.to_string();
    let both = cfg.parsed_or("both_directions", false)?;
    let max_words = cfg.parsed_or("max_words", DEFAULT_MAX_WORDS)?;
    let vocab_size = cfg.parsed_or("vocab_size", DEFAULT_VOCAB_SIZE)?;
    let log_every = cfg.parsed_or("log_every", DEFAULT_LOG_EVERY)?;

    let base = load_run(&a.from)?;
    let out = run_dir(&a.opts.out, "add-language")?;
    if fs::canonicalize(&out).ok() == fs::canonicalize(&base.dir).ok() {
        return Err(usage("--out must differ from the run being extended"));
    }
    let vx = base.vocabs.get(&x)?.clone();
    let mut pre = RunManifest::new();
    let text = load_pair(&data, &z, &x, max_words, &mut pre)?;
    let vz = data_vocab(&data, &z, &text.src, vocab_size)?;
    let corpus = ParallelCorpus::from_text(&text, &vz, &vx)?;
    let mut observer = progress_observer(log_every);
    let result = core_add_language(
        base.registry,
        AdditionData {
            corpus: &corpus,
            new_vocab: &vz,
            pivot_vocab: &vx,
        },
        &train,
        both,
        &mut observer,
    );
    let mut run = handle_training(&out, result)?;
    run.manifest.set("data", data.display());
    run.manifest.set("from", a.from.display());
    for (k, v) in pre.entries() {
        run.manifest.set(k.as_str(), v);
    }
    echo_config(&mut run.manifest, &cfg, &train);
    let mut vocabs = base.vocabs;
    vocabs.insert(vz);
    write_run(&out, &run, &vocabs, &config_text(&cfg, &train))?;
    eprintln!("added language {z}: {}", out.display());
    Ok(())
}

fn parse_decoding(s: &str) -> CliResult<Decoding> {
    s.parse().map_err(|e: NmtError| usage(e.to_string()))
}

pub fn translate(a: &TranslateArgs) -> CliResult<()> {
    let route: Route = a.route.parse().map_err(|e: NmtError| usage(e.to_string()))?;
    let decoding = parse_decoding(&a.decoding)?;
    let run = load_run(&a.from)?;
    let req = TranslationRequest::new(&a.src, &a.tgt, route).with_decoding(decoding);
    let lines = read_lines(&a.input)?;
    let out = Translator::new(&run.registry, &run.vocabs).translate(&req, &lines)?;
    match &a.output {
        Some(path) => {
            write_lines(path, &out)?;
            let mut meta = path.clone().into_os_string();
            meta.push(".meta");
            let meta = PathBuf::from(meta);
            fs::write(&meta, req.metadata()).map_err(io(&meta))?;
        }
        None => {
            for l in &out {
                println!("{l}");
            }
        }
    }
    Ok(())
}

/// First `limit` lines of `<split>.<lang>.txt` for every language.
fn read_multiway<'a>(
    data: &Path,
    split: &str,
    langs: impl IntoIterator<Item = &'a str>,
    limit: Option<usize>,
) -> CliResult<BTreeMap<String, Vec<String>>> {
    let mut multi = BTreeMap::new();
    for lang in langs {
        let mut lines = read_lines(split_file(data, split, lang))?;
        if let Some(n) = limit {
            lines.truncate(n);
        }
        multi.insert(lang.to_string(), lines);
    }
    Ok(multi)
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let decoding = parse_decoding(&a.decoding)?;
    let grid_text = fs::read_to_string(&a.grid).map_err(io(&a.grid))?;
    let directions = GridDirection::parse_list(&grid_text).map_err(|e| usage(e.to_string()))?;
    if directions.is_empty() {
        return Err(usage(format!("grid file {} lists no directions", a.grid.display())));
    }
    let run = load_run(&a.from)?;
    let mut langs: Vec<&str> = directions.iter().flat_map(|d| [d.src.as_str(), d.tgt.as_str()]).collect();
    langs.sort_unstable();
    langs.dedup();
    let test = read_multiway(&a.data, &a.split, langs, a.limit)?;
    let translator = Translator::new(&run.registry, &run.vocabs);
    let grid = experiment_grid(&translator, &directions, &test, decoding)?;
    let out = run_dir(&a.out, "evaluate")?;
    let csv = out.join("grid.csv");
    fs::write(&csv, grid.to_csv()).map_err(io(&csv))?;
    let md = out.join("grid.md");
    let table = grid.to_markdown();
    fs::write(&md, &table).map_err(io(&md))?;
    let mut manifest = RunManifest::new();
    manifest.set("run", "evaluate");
    manifest.set("from", a.from.display());
    manifest.set("grid", a.grid.display());
    manifest.set("data", a.data.display());
    manifest.set("split", &a.split);
    manifest.set("decoding", decoding);
    manifest.set("sentences", test.values().next().map_or(0, Vec::len));
    for row in &grid.rows {
        let d = &row.direction;
        manifest.set(format!("bleu.{}.{}-{}", d.label, d.src, d.tgt), row.report.bleu);
    }
    for check in grid.ordering_checks() {
        let holds = check.holds();
        manifest.set(format!("ordering.{}-{}", check.src, check.tgt), holds);
        eprintln!(
            "{}->{}: pivot {:.2} vs zero-shot {:.2} ({})",
            check.src,
            check.tgt,
            check.pivot,
            check.zero_shot,
            if holds { "pivot >= zero-shot" } else { "pivot < zero-shot" }
        );
    }
    manifest.set("status", "ok");
    manifest.save(out.join(MANIFEST_FILE))?;
    print!("{table}");
    Ok(())
}

pub fn inspect_reps(a: &InspectRepsArgs) -> CliResult<()> {
    let stage: Stage = a.stage.parse().map_err(|e: NmtError| usage(e.to_string()))?;
    if a.sentences == 0 {
        return Err(usage("--sentences must be at least 1"));
    }
    let run = load_run(&a.from)?;
    let mut langs: Vec<String> = run
        .registry
        .languages(modnmt_core::model::ModuleKind::Encoder)
        .into_iter()
        .filter(|l| split_file(&a.data, &a.split, l).exists())
        .collect();
    if let Stage::DecoderLast { decoder } = &stage {
        if !langs.contains(decoder) {
            langs.push(decoder.clone());
        }
    }
    let multi = read_multiway(&a.data, &a.split, langs.iter().map(String::as_str), Some(a.sentences))?;
    let dumps = extract_representations(&run.registry, &run.vocabs, &multi, &stage)?;
    let report = representation_report(&dumps)?;
    let (stacked, labels) = stack_dumps(&dumps)?;
    let projection = pca_project(&stacked, a.components)?;
    let out = run_dir(&a.out, "inspect-reps")?;
    let files = [
        ("reps.csv", dumps_csv(&dumps)),
        ("projection.csv", projection_csv(&labels, &projection)?),
        ("report.txt", report.to_text()),
    ];
    for (name, body) in files {
        let p = out.join(name);
        fs::write(&p, body).map_err(io(&p))?;
    }
    let mut manifest = RunManifest::new();
    manifest.set("run", "inspect-reps");
    manifest.set("from", a.from.display());
    manifest.set("data", a.data.display());
    manifest.set("split", &a.split);
    manifest.set("stage", &stage);
    manifest.set("sentences", dumps.first().map_or(0, |d| d.rows()));
    manifest.set("components", a.components);
    manifest.set("status", "ok");
    manifest.save(out.join(MANIFEST_FILE))?;
    print!("{}", report.to_text());
    Ok(())
}
