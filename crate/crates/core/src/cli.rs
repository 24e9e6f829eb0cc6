//! Command-line front end.
//!
//! Every subcommand writes its outputs and a `manifest.json` (resolved
//! configuration plus content hashes of inputs and outputs) into `--out`.
//! Exit codes: 0 success, 1 internal error, 2 invalid input, 3 failed check.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corpus::{
    dataset_stats, encode_sample, filter_reason, load_corpus, preprocess, read_processed, write_processed,
    FilterConfig, FilterRule, ProcessedSample, Rejections, StatsConfig, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::features::FeatureStore;
use crate::gradcheck::{group_summary, model_gradcheck, GradCheckConfig, ModelCheckSetup};
use crate::runtime::{
    decode_ids, tag_clean, Checkpoint, DecodeConfig, DecodeMode, LogRecord, ModelCaptioner, TrainConfig, Trainer,
};
use crate::synth::{generate, SynthConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "newscap", version, about = "Entity-aware news image captioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use at most this many samples from each input corpus.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long, value_enum)]
    pub decode: Option<DecodeMode>,
    /// Beam width (implies `--decode beam` when given alone).
    #[arg(long)]
    pub beam: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter, tokenize and encode a raw JSON-lines corpus.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        min_freq: Option<usize>,
        /// Encode with an existing vocabulary instead of building one.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Dataset statistics of a processed corpus.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        train: PathBuf,
        /// Validation corpus (defaults to the training corpus).
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        /// Directory feature references are resolved against (defaults to
        /// the corpus directory).
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Continue from `last.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Caption samples and print pre- and post-cleaning captions.
    Caption {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Caption only this sample.
        #[arg(long)]
        id: Option<String>,
    },
    /// Decode a corpus and report BLEU-4, ROUGE-L, CIDEr and entity P/R.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter group of a small model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// 64-bit arithmetic (always used; accepted for compatibility).
        #[arg(long)]
        fp64: bool,
        /// Coordinates checked per parameter tensor.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Generate a synthetic corpus with feature files.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_heldout: Option<usize>,
    },
}

/// Configuration file schema: the training configuration at top level plus
/// one section per module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub min_freq: usize,
    pub filter: FilterConfig,
    pub stats: StatsConfig,
    pub synth: SynthConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            train: TrainConfig::default(),
            min_freq: 2,
            filter: FilterConfig::default(),
            stats: StatsConfig::default(),
            synth: SynthConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

/// Parsed configuration and the raw JSON it came from (to tell which keys
/// the file set explicitly).
pub struct LoadedConfig {
    pub config: FileConfig,
    raw: Value,
}

impl LoadedConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let raw = match path {
            Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => Value::Object(Default::default()),
        };
        let config = serde_json::from_value(raw.clone())?;
        Ok(LoadedConfig { config, raw })
    }

    pub fn sets(&self, pointer: &str) -> bool {
        self.raw.pointer(pointer).is_some()
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Git-style object hash: SHA-256 of `blob <len>\0<content>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(content_hash(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn hash_tree(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            hash_tree(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != "manifest.json") {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.insert(rel, hash_file(&p)?);
        }
    }
    Ok(())
}

struct Run {
    command: &'static str,
    out: PathBuf,
    config: Value,
    inputs: BTreeMap<String, String>,
}

impl Run {
    fn new(command: &'static str, out: &Path, config: &impl Serialize) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Run {
            command,
            out: out.to_path_buf(),
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(self) -> Result<()> {
        let mut outputs = BTreeMap::new();
        hash_tree(&self.out, &self.out, &mut outputs)?;
        let m = Manifest {
            command: self.command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: self.config,
            inputs: self.inputs,
            outputs,
        };
        let path = self.out.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn limited<T>(mut v: Vec<T>, limit: Option<usize>) -> Vec<T> {
    if let Some(n) = limit {
        v.truncate(n);
    }
    v
}

fn corpus_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn apply_decode(cfg: &mut DecodeConfig, args: &DecodeArgs) {
    if let Some(b) = args.beam {
        cfg.beam = b;
        cfg.mode = DecodeMode::Beam;
    }
    if let Some(m) = args.decode {
        cfg.mode = m;
    }
}

fn rejection_summary(r: &Rejections, f: &FilterConfig) -> String {
    format!(
        "image<{}px: {}, caption<{} words: {}, caption>{} words: {}, invalid: {}",
        f.min_image_side,
        r.image_too_small,
        f.min_caption_words,
        r.caption_too_short,
        f.max_caption_words,
        r.caption_too_long,
        r.invalid
    )
}

fn cmd_preprocess(common: &Common, input: &Path, min_freq: Option<usize>, vocab: Option<&Path>) -> Result<()> {
    let loaded = LoadedConfig::load(common.config.as_deref())?;
    let mut cfg = loaded.config;
    if let Some(m) = min_freq {
        cfg.min_freq = m;
    }
    #[derive(Serialize)]
    struct Resolved {
        min_freq: usize,
        filter: FilterConfig,
        limit: Option<usize>,
        vocab: Option<String>,
    }
    let mut run = Run::new(
        "preprocess",
        &common.out,
        &Resolved {
            min_freq: cfg.min_freq,
            filter: cfg.filter,
            limit: common.limit,
            vocab: vocab.map(|p| p.display().to_string()),
        },
    )?;
    run.input(input)?;
    let raw = limited(load_corpus(input)?.samples, common.limit);
    let (vocab, samples, rejections) = match vocab {
        Some(vp) => {
            run.input(vp)?;
            let vocab = Vocabulary::load(vp)?;
            let mut rej = Rejections::default();
            let mut samples = Vec::new();
            for s in &raw {
                match filter_reason(s, &cfg.filter) {
                    Some(FilterRule::ImageTooSmall) => rej.image_too_small += 1,
                    Some(FilterRule::CaptionTooShort) => rej.caption_too_short += 1,
                    Some(FilterRule::CaptionTooLong) => rej.caption_too_long += 1,
                    None => match encode_sample(s, &vocab) {
                        Ok(p) => samples.push(p),
                        Err(e) => {
                            log::warn!("rejecting {}: {e}", s.id);
                            rej.invalid += 1;
                        }
                    },
                }
            }
            if samples.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "no sample passed filtering ({})",
                    rejection_summary(&rej, &cfg.filter)
                )));
            }
            (vocab, samples, rej)
        }
        None => {
            let out = preprocess(&raw, &cfg.filter, cfg.min_freq)?;
            (out.vocab, out.samples, out.rejections)
        }
    };
    write_processed(&run.path("processed.jsonl"), &samples)?;
    vocab.save(&run.path("vocab.json"))?;
    write_json(&run.path("rejections.json"), &rejections)?;
    println!(
        "kept {} of {} samples; vocabulary {} tokens; rejected: {}",
        samples.len(),
        raw.len(),
        vocab.len(),
        rejection_summary(&rejections, &cfg.filter)
    );
    run.finish()
}

fn cmd_stats(common: &Common, input: &Path) -> Result<()> {
    let mut cfg = LoadedConfig::load(common.config.as_deref())?.config.stats;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let mut run = Run::new("stats", &common.out, &cfg)?;
    run.input(input)?;
    let samples = limited(read_processed(input)?, common.limit);
    let report = dataset_stats(&samples, &cfg);
    for w in &report.warnings {
        log::warn!("{w}");
    }
    write_json(&run.path("stats.json"), &report)?;
    println!(
        "{} samples in {} source(s); {:.3} of caption sentences mention an entity",
        report.total.images,
        report.per_source.len(),
        report.total.frac_sentences_with_entity
    );
    run.finish()
}

/// Model dimensions not set in the file are taken from the data.
fn resolve_train_config(
    loaded: &LoadedConfig,
    common: &Common,
    decode: &DecodeArgs,
    max_epochs: Option<usize>,
    vocab: &Vocabulary,
    features: &FeatureStore,
    first: &ProcessedSample,
) -> Result<TrainConfig> {
    let mut cfg = loaded.config.train.clone();
    if !loaded.sets("/model/vocab_size") {
        cfg.model.vocab_size = vocab.len();
    }
    let grid = features.get(&first.id)?;
    if !loaded.sets("/model/image_patches") {
        cfg.model.image_patches = grid.rows();
    }
    if !loaded.sets("/model/image_dim") {
        cfg.model.image_dim = grid.cols();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = max_epochs {
        cfg.max_epochs = m;
    }
    apply_decode(&mut cfg.decode, decode);
    Ok(cfg)
}

fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)
        .map_err(|e| Error::io(path, e))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    common: &Common,
    decode: &DecodeArgs,
    train_path: &Path,
    val_path: Option<&Path>,
    vocab_path: &Path,
    features_dir: Option<&Path>,
    max_epochs: Option<usize>,
    resume: bool,
) -> Result<()> {
    let loaded = LoadedConfig::load(common.config.as_deref())?;
    let vocab = Vocabulary::load(vocab_path)?;
    let train = limited(read_processed(train_path)?, common.limit);
    let val = match val_path {
        Some(p) => limited(read_processed(p)?, common.limit),
        None => {
            log::warn!("no --val corpus; validating on the training corpus");
            train.clone()
        }
    };
    if train.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    let base = features_dir.map_or_else(|| corpus_dir(train_path), Path::to_path_buf);
    let mut features = FeatureStore::load(&train, &base)?;
    let val_base = features_dir.map_or_else(|| corpus_dir(val_path.unwrap_or(train_path)), Path::to_path_buf);
    for s in &val {
        if features.get(&s.id).is_err() {
            let one = FeatureStore::load(std::slice::from_ref(s), &val_base)?;
            features.insert(s.id.clone(), one.get(&s.id)?.clone());
        }
    }
    let cfg = resolve_train_config(&loaded, common, decode, max_epochs, &vocab, &features, &train[0])?;

    let mut run = Run::new("train", &common.out, &cfg)?;
    run.input(train_path)?;
    if let Some(p) = val_path {
        run.input(p)?;
    }
    run.input(vocab_path)?;
    write_json(&run.path("config.json"), &cfg)?;

    let mut trainer = Trainer::new(cfg, &vocab, &train, &val, &features)?.with_output(&common.out);
    if resume {
        let last = Checkpoint::load(&run.path("last.ckpt"))?;
        let best_path = run.path("best.ckpt");
        let best = if best_path.exists() {
            Some(Checkpoint::load(&best_path)?)
        } else {
            None
        };
        let log = read_log(&run.path("train_log.jsonl"))?;
        trainer.resume(last, best, log)?;
    }
    let outcome = trainer.run()?;
    let p = &outcome.best.header.progress;
    println!(
        "stopped ({:?}) after {} epochs; best validation CIDEr {} at epoch {}",
        outcome.stop,
        outcome.last.header.progress.epoch,
        p.best_cider.map_or("-".into(), |c| format!("{c:.4}")),
        p.best_epoch.map_or("-".into(), |e| e.to_string())
    );
    run.finish()
}

struct Loaded {
    ckpt: Checkpoint,
    vocab: Vocabulary,
    samples: Vec<ProcessedSample>,
    features: FeatureStore,
}

fn load_for_decoding(
    run: &mut Run,
    common: &Common,
    checkpoint: &Path,
    vocab_path: &Path,
    input: &Path,
    features_dir: Option<&Path>,
) -> Result<Loaded> {
    run.input(checkpoint)?;
    run.input(vocab_path)?;
    run.input(input)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let vocab = Vocabulary::load(vocab_path)?;
    ckpt.check_vocab(&vocab)?;
    let samples = limited(read_processed(input)?, common.limit);
    if samples.is_empty() {
        return Err(Error::InvalidInput(format!("{} has no samples", input.display())));
    }
    let base = features_dir.map_or_else(|| corpus_dir(input), Path::to_path_buf);
    let features = FeatureStore::load(&samples, &base)?;
    features.check_dim(ckpt.header.model.image_dim)?;
    Ok(Loaded {
        ckpt,
        vocab,
        samples,
        features,
    })
}

fn decode_config(common: &Common, args: &DecodeArgs) -> Result<DecodeConfig> {
    let mut d = LoadedConfig::load(common.config.as_deref())?.config.train.decode;
    apply_decode(&mut d, args);
    if d.mode == DecodeMode::Beam && d.beam == 0 {
        return Err(Error::InvalidArgument("--beam must be at least 1".into()));
    }
    Ok(d)
}

#[derive(Serialize)]
struct CaptionLine {
    id: String,
    pre_tc: String,
    post_tc: String,
    unresolved_tags: usize,
}

#[allow(clippy::too_many_arguments)]
fn cmd_caption(
    common: &Common,
    decode: &DecodeArgs,
    checkpoint: &Path,
    vocab: &Path,
    input: &Path,
    features: Option<&Path>,
    id: Option<&str>,
) -> Result<()> {
    let d = decode_config(common, decode)?;
    let mut run = Run::new("caption", &common.out, &d)?;
    let mut l = load_for_decoding(&mut run, common, checkpoint, vocab, input, features)?;
    if let Some(id) = id {
        l.samples.retain(|s| s.id == id);
        if l.samples.is_empty() {
            return Err(Error::InvalidInput(format!("no sample with id {id}")));
        }
    }
    let model = l.ckpt.model()?;
    let mut text = String::new();
    for s in &l.samples {
        let ids = decode_ids(&model, &l.ckpt.params, &l.vocab, s, l.features.get(&s.id)?, &d)?;
        let raw = l.vocab.decode(&ids)?;
        let tc = tag_clean(&raw, &s.entity_set);
        println!("{}\n  pre-TC:  {}\n  post-TC: {}", s.id, raw.join(" "), tc.tokens.join(" "));
        text.push_str(&serde_json::to_string(&CaptionLine {
            id: s.id.clone(),
            pre_tc: raw.join(" "),
            post_tc: tc.tokens.join(" "),
            unresolved_tags: tc.unresolved,
        })?);
        text.push('\n');
    }
    let path = run.path("captions.jsonl");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    run.finish()
}

fn cmd_evaluate(
    common: &Common,
    decode: &DecodeArgs,
    checkpoint: &Path,
    vocab: &Path,
    input: &Path,
    features: Option<&Path>,
) -> Result<()> {
    let d = decode_config(common, decode)?;
    let mut run = Run::new("evaluate", &common.out, &d)?;
    let l = load_for_decoding(&mut run, common, checkpoint, vocab, input, features)?;
    let model = l.ckpt.model()?;
    let captioner = ModelCaptioner {
        model: &model,
        params: &l.ckpt.params,
        vocab: &l.vocab,
        features: &l.features,
        decode: d,
    };
    let report = evaluate(&captioner, &l.samples, &d.label(), true)?;
    print!("{report}");
    write_json(&run.path("report.json"), &report)?;
    run.finish()
}

fn cmd_gradcheck(common: &Common, samples: Option<usize>) -> Result<bool> {
    let mut cfg = LoadedConfig::load(common.config.as_deref())?.config.gradcheck;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = samples {
        cfg.samples_per_param = n;
    }
    let run = Run::new("gradcheck", &common.out, &cfg)?;
    let report = model_gradcheck(&ModelCheckSetup::default(), &cfg)?;
    let groups = group_summary(&report);
    for (g, e) in &groups {
        println!("{:<18} {:.3e} {}", g, e, if *e < cfg.tol { "ok" } else { "FAIL" });
    }
    println!("max relative error {:.3e} (tolerance {:.0e})", report.max_rel_error, cfg.tol);
    write_json(&run.path("gradcheck.json"), &serde_json::json!({ "groups": groups, "report": report }))?;
    run.finish()?;
    Ok(report.passed())
}

fn cmd_synth(common: &Common, n_train: Option<usize>, n_heldout: Option<usize>) -> Result<()> {
    let mut cfg = LoadedConfig::load(common.config.as_deref())?.config.synth;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = n_train {
        cfg.n_train = n;
    }
    if let Some(n) = n_heldout {
        cfg.n_heldout = n;
    }
    let run = Run::new("synth", &common.out, &cfg)?;
    let corpus = generate(&cfg)?;
    corpus.write(&common.out)?;
    println!(
        "wrote {} training and {} held-out samples; planted fraction {:.3}",
        corpus.train.len(),
        corpus.heldout.len(),
        corpus.planted_fraction()
    );
    run.finish()
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::FullyMasked { .. } => EXIT_INTERNAL,
        _ => EXIT_INPUT,
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("NEWSCAP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("NEWSCAP_THREADS ignored: {e}");
            }
        }
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let level = if cli.quiet {
        "error"
    } else {
        ["warn", "info", "debug"][usize::from(cli.verbose).min(2)]
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    init_threads();
    let result = match &cli.command {
        Command::Preprocess {
            common,
            input,
            min_freq,
            vocab,
        } => cmd_preprocess(common, input, *min_freq, vocab.as_deref()).map(|_| true),
        Command::Stats { common, input } => cmd_stats(common, input).map(|_| true),
        Command::Train {
            common,
            decode,
            train,
            val,
            vocab,
            features,
            max_epochs,
            resume,
        } => cmd_train(
            common,
            decode,
            train,
            val.as_deref(),
            vocab,
            features.as_deref(),
            *max_epochs,
            *resume,
        )
        .map(|_| true),
        Command::Caption {
            common,
            decode,
            checkpoint,
            vocab,
            input,
            features,
            id,
        } => cmd_caption(
            common,
            decode,
            checkpoint,
            vocab,
            input,
            features.as_deref(),
            id.as_deref(),
        )
        .map(|_| true),
        Command::Evaluate {
            common,
            decode,
            checkpoint,
            vocab,
            input,
            features,
        } => cmd_evaluate(common, decode, checkpoint, vocab, input, features.as_deref()).map(|_| true),
        Command::Gradcheck { common, fp64, samples } => {
            if !fp64 {
                log::info!("gradient checks always run in 64-bit precision");
            }
            cmd_gradcheck(common, *samples)
        }
        Command::Synth {
            common,
            n_train,
            n_heldout,
        } => cmd_synth(common, *n_train, *n_heldout).map(|_| true),
    };
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            eprintln!("error: gradient check exceeded tolerance");
            EXIT_CHECK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
