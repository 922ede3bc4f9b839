//! The `pmm` command line.
//!
//! Every command resolves its settings from built-in defaults, then an
//! optional `--config` file (INI-style `key = value` lines under
//! `[section]` headers), then flags. The resolved values are written to a
//! frozen config file before any work starts, so the run can be repeated
//! with `--config <frozen file>` alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::autodiff::OpKind;
use crate::data::synthetic::{write_corpus, CorpusSpec};
use crate::data::{load_manifest, DatasetManifest, Lane, MixtureSpec, SourceKind};
use crate::error::{Error, Result};
use crate::image::{load_and_preprocess, ImageTensor};
use crate::model::{CrossModalModel, ModelConfig, Sampling, VisualInput, VisualVariant};
use crate::objectives::{MaskStrategy, ObjectiveConfig, PrefixMode};
use crate::rng::{derive_seed, rng_for};
use crate::selftest::{run_selftest, SelftestOptions};
use crate::text::{TextTokenSequence, Vocabulary};
use crate::training::{caption_from, evaluate, paint_tokens, prepare_pair, EvalConfig, TrainConfig, TrainData, Trainer};
use crate::vq::{train_vq_with, ImageTokenGrid, VqConfig, VqModel};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "pmm", version, about = "Train and run a small prefix multi-modal encoder-decoder")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// INI-style settings file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every subsystem seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra override, `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the procedural shapes corpus and its manifests.
    GenSynthetic(GenSyntheticArgs),
    /// Train the VQ image tokenizer.
    TrainVq(TrainVqArgs),
    /// Build the WordPiece vocabulary from manifest captions and documents.
    BuildVocab(BuildVocabArgs),
    /// Train the encoder-decoder.
    Train(TrainArgs),
    /// Caption an image.
    Caption(CaptionArgs),
    /// Paint an image from a caption.
    Paint(PaintArgs),
    /// Teacher-forced accuracies, perplexity and BLEU@4 on a manifest.
    Eval(EvalArgs),
    /// Run the invariant suite and print a table.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct GenSyntheticArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    heldout: Option<usize>,
    #[arg(long)]
    docs: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainVqArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `desk` or `full`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    compression: Option<usize>,
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    vq: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `desk` or `full`.
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated subset of `plm,pim,t2t`.
    #[arg(long)]
    objectives: Option<String>,
    /// `dynamic` or `fixed:<ratio>`.
    #[arg(long)]
    prefix_mode: Option<String>,
    /// `suffix`, `mim` or `inpaint`.
    #[arg(long)]
    mask_strategy: Option<String>,
    /// `conv`, `token` or `patch`.
    #[arg(long)]
    visual_embedder: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stop early once the windowed mean total loss drops below this.
    #[arg(long)]
    target_loss: Option<f64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SamplingArgs {
    /// Sample from the k most likely tokens instead of greedy decoding.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args, Debug)]
struct CaptionArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    vq: Option<PathBuf>,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Directory for the frozen config; nothing is written without it.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PaintArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    caption: Option<String>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    vq: Option<PathBuf>,
    /// Output image, PNG when the extension is `.png`, PPM otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    sampling: SamplingArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    vq: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    no_bleu: bool,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[command(flatten)]
    common: Common,
    /// Seeds for the gradient checks.
    #[arg(long)]
    seeds: Option<u64>,
    /// Flip the sign of one backward rule (e.g. `gelu`, `layer_norm`).
    #[arg(long, value_name = "OP")]
    inject_fault: Option<String>,
}

/// Settings merged from defaults, a config file and flags.
#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<(String, String), String>,
    used: BTreeSet<(String, String)>,
}

fn key(section: &str, name: &str) -> (String, String) {
    (section.to_string(), name.to_string())
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let ini = ini::Ini::load_from_file_noescape(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        let mut s = Settings::default();
        for (section, props) in &ini {
            for (k, v) in props.iter() {
                s.values.insert(key(section.unwrap_or("run"), k), v.to_string());
            }
        }
        Ok(s)
    }

    fn from_common(common: &Common) -> Result<Self> {
        let mut s = match &common.config {
            Some(p) => Settings::from_file(p)?,
            None => Settings::default(),
        };
        s.flag("run", "seed", common.seed);
        for item in &common.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("--set expects section.key=value, got `{item}`")))?;
            let (sec, name) = k
                .split_once('.')
                .ok_or_else(|| Error::invalid(format!("--set key `{k}` needs a section, e.g. train.lr")))?;
            s.values.insert(key(sec.trim(), name.trim()), v.trim().to_string());
        }
        Ok(s)
    }

    /// Applies a flag value when present.
    pub fn flag<T: Display>(&mut self, section: &str, name: &str, value: Option<T>) {
        if let Some(v) = value {
            self.values.insert(key(section, name), v.to_string());
        }
    }

    pub fn flag_path(&mut self, section: &str, name: &str, value: &Option<PathBuf>) {
        self.flag(section, name, value.as_ref().map(|p| p.display()));
    }

    /// Resolved value, recording the default when none was given.
    pub fn get<T: FromStr + Display>(&mut self, section: &str, name: &str, default: T) -> Result<T> {
        let k = key(section, name);
        self.used.insert(k.clone());
        match self.values.get(&k) {
            Some(v) => v.parse().map_err(|_| Error::invalid(format!("{section}.{name} = `{v}` is not valid"))),
            None => {
                self.values.insert(k, default.to_string());
                Ok(default)
            }
        }
    }

    /// Resolved optional value; an empty string means unset.
    pub fn get_opt<T: FromStr>(&mut self, section: &str, name: &str) -> Result<Option<T>> {
        let k = key(section, name);
        self.used.insert(k.clone());
        match self.values.get(&k).map(String::as_str) {
            None | Some("") => {
                self.values.insert(k, String::new());
                Ok(None)
            }
            Some(v) => v.parse().map(Some).map_err(|_| Error::invalid(format!("{section}.{name} = `{v}` is not valid"))),
        }
    }

    /// A required path, made absolute so frozen configs work from any directory.
    pub fn path(&mut self, section: &str, name: &str, flag: &str) -> Result<PathBuf> {
        let p: Option<String> = self.get_opt(section, name)?;
        let p = p.ok_or_else(|| Error::invalid(format!("missing required {flag} (or {section}.{name} in the config file)")))?;
        let abs = std::path::absolute(&p)?;
        self.values.insert(key(section, name), abs.display().to_string());
        Ok(abs)
    }

    pub fn path_or(&mut self, section: &str, name: &str, default: impl FnOnce() -> Option<PathBuf>, flag: &str) -> Result<PathBuf> {
        if !self.values.get(&key(section, name)).is_some_and(|v| !v.is_empty()) {
            if let Some(d) = default() {
                self.values.insert(key(section, name), d.display().to_string());
            }
        }
        self.path(section, name, flag)
    }

    /// Rejects unknown keys in the sections this command read.
    pub fn check_unknown(&self) -> Result<()> {
        let sections: BTreeSet<&String> = self.used.iter().map(|(s, _)| s).collect();
        let unknown: Vec<String> = self
            .values
            .keys()
            .filter(|k| sections.contains(&k.0) && !self.used.contains(*k))
            .map(|(s, n)| format!("{s}.{n}"))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!("unknown setting(s): {}", unknown.join(", "))))
        }
    }

    pub fn to_ini(&self, command: &str) -> String {
        let mut out = format!("# resolved settings for `pmm {command}`\n");
        let mut current = "";
        for ((sec, name), v) in self.values.iter().filter(|(k, _)| self.used.contains(*k)) {
            if sec != current {
                out.push_str(&format!("\n[{sec}]\n"));
                current = sec;
            }
            out.push_str(&format!("{name} = {v}\n"));
        }
        out
    }

    /// Validates and writes the frozen config.
    pub fn freeze(&self, command: &str, path: Option<&Path>) -> Result<()> {
        self.check_unknown()?;
        if let Some(path) = path {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, self.to_ini(command))?;
        }
        Ok(())
    }
}

/// Worker count: the configured value capped by `PMM_THREADS`.
pub fn worker_threads(configured: usize) -> usize {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let wanted = if configured == 0 { avail } else { configured };
    let cap = std::env::var("PMM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    cap.map_or(wanted, |c| wanted.min(c)).max(1)
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => EXIT_NUMERIC,
        Error::Invalid(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `std::env::args` and runs the command.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Invalid(_) | Error::MissingFile(_)) {
                eprintln!("run `pmm help` for usage");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
        Command::TrainVq(a) => cmd_train_vq(a),
        Command::BuildVocab(a) => cmd_build_vocab(a),
        Command::Train(a) => cmd_train(a),
        Command::Caption(a) => cmd_caption(a),
        Command::Paint(a) => cmd_paint(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Selftest(a) => cmd_selftest(a),
    }
}

fn out_dir(s: &mut Settings, flag: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
    s.flag_path("run", "out", flag);
    s.path_or("run", "out", || Some(PathBuf::from(default)), "--out")
}

fn cmd_gen_synthetic(a: GenSyntheticArgs) -> Result<()> {
    let mut s = Settings::from_common(&a.common)?;
    let out = out_dir(&mut s, &a.out, "synthetic")?;
    s.flag("data", "train", a.train);
    s.flag("data", "heldout", a.heldout);
    s.flag("data", "docs", a.docs);
    s.flag("data", "image_size", a.image_size);
    let d = CorpusSpec::default();
    let spec = CorpusSpec {
        train: s.get("data", "train", d.train)?,
        heldout: s.get("data", "heldout", d.heldout)?,
        docs: s.get("data", "docs", d.docs)?,
        image_size: s.get("data", "image_size", d.image_size)?,
    };
    let seed: u64 = s.get("run", "seed", 0)?;
    s.freeze("gen-synthetic", Some(&out.join("config.ini")))?;
    let files = write_corpus(&out, &spec, derive_seed(seed, "synthetic"))?;
    println!("manifest={}", files.manifest.display());
    println!("heldout_manifest={}", files.heldout_manifest.display());
    Ok(())
}

fn manifest_images(manifest: &DatasetManifest, size: usize) -> Result<Vec<ImageTensor>> {
    manifest
        .pair_records()
        .map(|r| load_and_preprocess(r.image.as_ref().expect("image records carry paths"), size))
        .collect()
}

fn cmd_train_vq(a: TrainVqArgs) -> Result<()> {
    let mut s = Settings::from_common(&a.common)?;
    s.flag_path("data", "manifest", &a.manifest);
    let manifest_path = s.path("data", "manifest", "--manifest")?;
    let out = out_dir(&mut s, &a.out, "vq")?;
    s.flag("vq", "preset", a.preset);
    s.flag("vq", "steps", a.steps);
    s.flag("vq", "k", a.codebook_size);
    s.flag("vq", "compression", a.compression);
    let base = match s.get("vq", "preset", "desk".to_string())?.as_str() {
        "desk" => VqConfig::desk(),
        "full" => VqConfig::full(),
        other => return Err(Error::invalid(format!("unknown vq preset `{other}` (desk | full)"))),
    };
    let config = VqConfig {
        k: s.get("vq", "k", base.k)?,
        compression: s.get("vq", "compression", base.compression)?,
        code_dim: s.get("vq", "code_dim", base.code_dim)?,
        beta: s.get("vq", "beta", base.beta)?,
        image_size: s.get("vq", "image_size", base.image_size)?,
        hidden: s.get("vq", "hidden", base.hidden)?,
        lr: s.get("vq", "lr", base.lr)?,
        batch_size: s.get("vq", "batch_size", base.batch_size)?,
        reseed_after: s.get("vq", "reseed_after", base.reseed_after)?,
    };
    let steps: u64 = s.get("vq", "steps", 300)?;
    let seed: u64 = s.get("run", "seed", 0)?;
    config.validate()?;
    s.freeze("train-vq", Some(&out.join("config.ini")))?;

    let manifest = load_manifest(&manifest_path)?;
    let images = manifest_images(&manifest, config.image_size)?;
    if images.is_empty() {
        return Err(Error::Data(format!("{} lists no images", manifest_path.display())));
    }
    let mut log = BufWriter::new(fs::File::create(out.join("vq_log.txt"))?);
    let (model, _) = train_vq_with(&images, config, steps, derive_seed(seed, "vq"), |l| {
        writeln!(log, "step={} recon_mse={:.6} codebook={:.6} commit={:.6} reseeded={}", l.step, l.recon_mse, l.codebook, l.commit, l.reseeded)?;
        if l.step % 50 == 0 {
            eprintln!("step {} recon_mse {:.5}", l.step, l.recon_mse);
        }
        Ok(())
    })?;
    log.flush()?;
    model.save(&out.join("vq.ckpt"))?;
    let mut mse = 0.0;
    for img in &images {
        mse += model.decode_tokens(&model.encode_image(img)?)?.mse(img)?;
    }
    println!("final_mse={:.6}", mse / images.len() as f64);
    println!("checkpoint={}", out.join("vq.ckpt").display());
    Ok(())
}

fn cmd_build_vocab(a: BuildVocabArgs) -> Result<()> {
    let mut s = Settings::from_common(&a.common)?;
    s.flag_path("data", "manifest", &a.manifest);
    let manifest_path = s.path("data", "manifest", "--manifest")?;
    let out = out_dir(&mut s, &a.out, "vocab")?;
    s.flag("vocab", "size", a.size);
    let size: usize = s.get("vocab", "size", crate::text::DEFAULT_VOCAB_SIZE)?;
    s.freeze("build-vocab", Some(&out.join("config.ini")))?;
    let manifest = load_manifest(&manifest_path)?;
    let corpus: Vec<String> = manifest.sources.iter().flat_map(|src| src.records.iter().map(|r| r.caption.clone())).collect();
    let vocab = Vocabulary::build(&corpus, size)?;
    vocab.save(&out.join("vocab.txt"))?;
    println!("vocab_size={}", vocab.len());
    println!("vocab={}", out.join("vocab.txt").display());
    Ok(())
}

fn parse_weights(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|w| w.trim().parse::<f64>().map_err(|_| Error::invalid(format!("mixture weight `{w}` is not a number"))))
        .collect()
}

struct TrainPlan {
    manifest: PathBuf,
    vocab: PathBuf,
    vq: PathBuf,
    out: PathBuf,
    model: ModelConfig,
    train: TrainConfig,
    max_text_len: usize,
    pair_weights: Option<String>,
    text_weights: Option<String>,
    log_every: u64,
    resume: Option<PathBuf>,
}

fn resolve_train(a: TrainArgs) -> Result<(Settings, TrainPlan)> {
    let mut s = Settings::from_common(&a.common)?;
    s.flag_path("data", "manifest", &a.manifest);
    s.flag_path("data", "vocab", &a.vocab);
    s.flag_path("data", "vq", &a.vq);
    s.flag("model", "preset", a.preset);
    s.flag("model", "visual", a.visual_embedder);
    s.flag("train", "objectives", a.objectives);
    s.flag("train", "prefix_mode", a.prefix_mode);
    s.flag("train", "mask_strategy", a.mask_strategy);
    s.flag("train", "steps", a.steps);
    s.flag("train", "epochs", a.epochs);
    s.flag("train", "lr", a.lr);
    s.flag("train", "batch_size", a.batch_size);
    s.flag("train", "target_loss", a.target_loss);
    s.flag_path("train", "resume", &a.resume);

    let manifest = s.path("data", "manifest", "--manifest")?;
    let vocab = s.path("data", "vocab", "--vocab")?;
    let vq = s.path("data", "vq", "--vq")?;
    let out = out_dir(&mut s, &a.out, "run")?;
    let pair_weights = s.get_opt("data", "pair_weights")?;
    let text_weights = s.get_opt("data", "text_weights")?;

    // model shape; vocabulary sizes and the image grid come from the tokenizers
    let preset: String = s.get("model", "preset", "desk".to_string())?;
    let base = match preset.as_str() {
        "desk" => ModelConfig::desk(0, 0),
        "full" => ModelConfig::full(0),
        other => return Err(Error::invalid(format!("unknown model preset `{other}` (desk | full)"))),
    };
    let model = ModelConfig {
        enc_layers: s.get("model", "enc_layers", base.enc_layers)?,
        dec_layers: s.get("model", "dec_layers", base.dec_layers)?,
        d: s.get("model", "d", base.d)?,
        heads: s.get("model", "heads", base.heads)?,
        ffn: s.get("model", "ffn", base.ffn)?,
        max_len: s.get("model", "max_len", base.max_len)?,
        visual: VisualVariant::parse(&s.get("model", "visual", base.visual.name().to_string())?)?,
        patch_size: s.get("model", "patch_size", base.patch_size)?,
        stem_channels: s.get("model", "stem_channels", base.stem_channels)?,
        dropout: s.get("model", "dropout", base.dropout)?,
        ..base
    };

    let d = TrainConfig::default();
    let mut objectives = ObjectiveConfig {
        prefix_mode: PrefixMode::parse(&s.get("train", "prefix_mode", "dynamic".to_string())?)?,
        mask_strategy: MaskStrategy::parse(&s.get("train", "mask_strategy", "suffix".to_string())?)?,
        ..Default::default()
    };
    objectives.parse_objectives(&s.get("train", "objectives", "plm,pim,t2t".to_string())?)?;
    let train = TrainConfig {
        lr: s.get("train", "lr", d.lr)?,
        weight_decay: s.get("train", "weight_decay", d.weight_decay)?,
        beta1: s.get("train", "beta1", d.beta1)?,
        beta2: s.get("train", "beta2", d.beta2)?,
        warmup_fraction: s.get("train", "warmup_fraction", d.warmup_fraction)?,
        epochs: s.get("train", "epochs", d.epochs)?,
        steps: s.get_opt("train", "steps")?,
        batch_size: s.get("train", "batch_size", d.batch_size)?,
        text_batch_size: s.get("train", "text_batch_size", d.text_batch_size)?,
        seed: derive_seed(s.get("run", "seed", 0)?, "train"),
        objectives,
        threads: worker_threads(s.get("run", "threads", 0)?),
        checkpoint_every: s.get("train", "checkpoint_every", 100)?,
        stop_window: s.get("train", "stop_window", d.stop_window)?,
        target_loss: s.get_opt("train", "target_loss")?,
    };
    train.validate()?;
    let max_text_len = s.get("train", "max_text_len", 64)?;
    let log_every = s.get("train", "log_every", 10)?;
    let resume = match s.get_opt::<String>("train", "resume")? {
        Some(_) => Some(s.path("train", "resume", "--resume")?),
        None => None,
    };
    if max_text_len > model.max_len {
        return Err(Error::invalid(format!("train.max_text_len {max_text_len} exceeds model.max_len {}", model.max_len)));
    }
    let plan = TrainPlan { manifest, vocab, vq, out, model, train, max_text_len, pair_weights, text_weights, log_every, resume };
    Ok((s, plan))
}

fn mixture_for(manifest: &DatasetManifest, plan: &TrainPlan) -> Result<MixtureSpec> {
    let mut mix = MixtureSpec::from_manifest(manifest)?;
    if let Some(w) = &plan.pair_weights {
        mix.pairs = MixtureSpec::with_weights(manifest, Lane::Pairs, &parse_weights(w)?)?.pairs;
    }
    if let Some(w) = &plan.text_weights {
        mix.text = MixtureSpec::with_weights(manifest, Lane::Text, &parse_weights(w)?)?.text;
    }
    Ok(mix)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (s, mut plan) = resolve_train(a)?;
    // cheap loads first so conflicts surface before any compute
    let manifest = load_manifest(&plan.manifest)?;
    let vocab = Vocabulary::load(&plan.vocab)?;
    let vq = VqModel::load(&plan.vq)?;
    plan.model.text_vocab = vocab.len();
    plan.model.image_vocab = vq.config.k;
    plan.model.image_size = vq.config.image_size;
    plan.model.grid_side = vq.config.grid_side();
    plan.model.validate()?;
    let o = &plan.train.objectives;
    let has_pairs = manifest.sources.iter().any(|src| src.kind.has_images());
    let has_text = manifest.sources.iter().any(|src| src.kind == SourceKind::Text);
    if (o.plm || o.pim) && !has_pairs {
        return Err(Error::invalid("plm/pim are enabled but the manifest has no image sources"));
    }
    if o.t2t && !has_text {
        return Err(Error::invalid("t2t is enabled but the manifest has no text sources (use --objectives plm,pim)"));
    }
    if !o.pim && o.mask_strategy != MaskStrategy::Suffix {
        return Err(Error::invalid("--mask-strategy only applies to pim, which is disabled"));
    }
    let mixture = mixture_for(&manifest, &plan)?;
    let resumed = match &plan.resume {
        Some(p) => {
            let t = Trainer::load(p)?;
            if t.model.config != plan.model {
                return Err(Error::invalid(format!("{} was trained with a different model config", p.display())));
            }
            if (TrainConfig { threads: 1, ..t.config.clone() }) != (TrainConfig { threads: 1, ..plan.train.clone() }) {
                return Err(Error::invalid(format!("{} was trained with different training settings", p.display())));
            }
            Some(t)
        }
        None => None,
    };
    fs::create_dir_all(&plan.out)?;
    s.freeze("train", Some(&plan.out.join("config.ini")))?;

    let data = TrainData::from_manifest(manifest, mixture, &vocab, &vq, plan.max_text_len)?;
    let total = plan.train.total_steps(data.pairs.len().max(data.texts.len()));
    let mut trainer = match resumed {
        Some(mut t) => {
            t.config.threads = plan.train.threads;
            t
        }
        None => {
            let model = CrossModalModel::new(plan.model.clone(), derive_seed(plan.train.seed, "model.init"))?;
            Trainer::new(model, plan.train.clone(), total)?
        }
    };
    trainer.meta = vec![
        ("vocab".into(), plan.vocab.display().to_string()),
        ("vq".into(), plan.vq.display().to_string()),
    ];
    let ckpt = plan.out.join("model.ckpt");
    let metrics_path = plan.out.join("metrics.log");
    let mut metrics = BufWriter::new(fs::OpenOptions::new().create(true).append(plan.resume.is_some()).write(true).truncate(plan.resume.is_none()).open(&metrics_path)?);
    eprintln!(
        "training {} params for {} steps ({} pairs, {} documents, {} threads)",
        trainer.model.store.count(),
        trainer.total_steps,
        data.pairs.len(),
        data.texts.len(),
        trainer.config.threads
    );
    let log_every = plan.log_every.max(1);
    let result = trainer.train(&data, Some(&ckpt), |l| {
        writeln!(metrics, "{l}")?;
        if l.step % log_every == 0 {
            metrics.flush()?;
            eprintln!("{l}");
        }
        Ok(())
    });
    metrics.flush()?;
    match result {
        Ok(logs) => {
            if let Some(last) = logs.last() {
                println!("{last}");
            }
            println!("checkpoint={}", ckpt.display());
            Ok(())
        }
        Err(e) if e.is_numeric() => {
            // the failed step changed nothing, so the in-memory state is the last good one
            trainer.save(&ckpt)?;
            eprintln!("last good checkpoint (step {}) kept at {}", trainer.step, ckpt.display());
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn sampling(s: &mut Settings, args: &SamplingArgs) -> Result<Sampling> {
    s.flag("sample", "top_k", args.top_k);
    s.flag("sample", "temperature", args.temperature);
    let k: usize = s.get("sample", "top_k", 0)?;
    let temperature: f64 = s.get("sample", "temperature", 1.0)?;
    Ok(if k == 0 { Sampling::Greedy } else { Sampling::TopK { k, temperature } })
}

/// Model checkpoint plus the vocab/tokenizer paths recorded in it unless overridden.
fn load_checkpoint(s: &mut Settings, checkpoint: &Option<PathBuf>, vocab: &Option<PathBuf>, vq: &Option<PathBuf>) -> Result<(PathBuf, Trainer)> {
    s.flag_path("model", "checkpoint", checkpoint);
    let path = s.path("model", "checkpoint", "--checkpoint")?;
    let trainer = Trainer::load(&path)?;
    let meta = |k: &str| trainer.meta.iter().find(|(m, _)| m == k).map(|(_, v)| PathBuf::from(v));
    s.flag_path("data", "vocab", vocab);
    s.flag_path("data", "vq", vq);
    s.path_or("data", "vocab", || meta("vocab"), "--vocab")?;
    s.path_or("data", "vq", || meta("vq"), "--vq")?;
    Ok((path, trainer))
}

fn cmd_caption(a: CaptionArgs) -> Result<()> {
    let mut s = Settings::from_common(&a.common)?;
    let (_, trainer) = load_checkpoint(&mut s, &a.checkpoint, &a.vocab, &a.vq)?;
    s.flag_path("caption", "image", &a.image);
    let image_path = s.path("caption", "image", "--image")?;
    let strategy = sampling(&mut s, &a.sampling)?;
    let max_len: usize = s.get("caption", "max_len", 32)?;
    let seed: u64 = s.get("run", "seed", 0)?;
    let vocab_path = s.path("data", "vocab", "--vocab")?;
    let vq_path = s.path("data", "vq", "--vq")?;
    let out = match &a.out_dir {
        Some(d) => Some(std::path::absolute(d)?.join("caption_config.ini")),
        None => None,
    };
    s.freeze("caption", out.as_deref())?;

    let model = &trainer.model;
    let vocab = Vocabulary::load(&vocab_path)?;
    let image = load_and_preprocess(&image_path, model.config.image_size)?;
    let tokens;
    let input = if model.config.visual == VisualVariant::TokenProjection {
        tokens = VqModel::load(&vq_path)?.encode_image(&image)?.ids;
        VisualInput::Tokens(&tokens)
    } else {
        VisualInput::Pixels(&image)
    };
    let ids = caption_from(model, input, max_len, &strategy, &mut rng_for(seed, "caption"))?;
    println!("{}", vocab.decode(&ids)?);
    Ok(())
}

fn cmd_paint(a: PaintArgs) -> Result<()> {
    let mut s = Settings::from_common(&a.common)?;
    let (_, trainer) = load_checkpoint(&mut s, &a.checkpoint, &a.vocab, &a.vq)?;
    s.flag("paint", "caption", a.caption);
    let caption: String = s
        .get_opt("paint", "caption")?
        .ok_or_else(|| Error::invalid("missing required --caption"))?;
    s.flag_path("paint", "out", &a.out);
    let out = s.path_or("paint", "out", || Some(PathBuf::from("paint.png")), "--out")?;
    let strategy = sampling(&mut s, &a.sampling)?;
    let seed: u64 = s.get("run", "seed", 0)?;
    let vocab_path = s.path("data", "vocab", "--vocab")?;
    let vq_path = s.path("data", "vq", "--vq")?;
    let frozen = out.with_file_name(format!("{}.config.ini", out.file_stem().and_then(|f| f.to_str()).unwrap_or("paint")));
    s.freeze("paint", Some(&frozen))?;

    let vocab = Vocabulary::load(&vocab_path)?;
    let vq = VqModel::load(&vq_path)?;
    let model = &trainer.model;
    if vq.config.k != model.config.image_vocab || vq.config.grid_side() != model.config.grid_side {
        return Err(Error::invalid(format!("{} does not match the model's image tokens", vq_path.display())));
    }
    let ids = TextTokenSequence::caption(&caption, &vocab, model.config.max_len)?.ids().to_vec();
    if ids.len() <= 1 {
        return Err(Error::invalid(format!("caption `{caption}` tokenizes to an empty sequence")));
    }
    let tokens = paint_tokens(model, &ids, &strategy, &mut rng_for(seed, "paint"))?;
    let grid = ImageTokenGrid::new(tokens, vq.config.grid_side(), vq.config.k)?;
    vq.decode_tokens(&grid)?.save(&out)?;
    println!("image={}", out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut s = Settings::from_common(&a.common)?;
    let (_, trainer) = load_checkpoint(&mut s, &a.checkpoint, &a.vocab, &a.vq)?;
    s.flag_path("data", "manifest", &a.manifest);
    let manifest_path = s.path("data", "manifest", "--manifest")?;
    if a.no_bleu {
        s.flag("eval", "bleu", Some(false));
    }
    let d = EvalConfig::default();
    let cfg = EvalConfig {
        prefix_mode: PrefixMode::parse(&s.get("eval", "prefix_mode", "dynamic".to_string())?)?,
        mask_strategy: MaskStrategy::parse(&s.get("eval", "mask_strategy", "suffix".to_string())?)?,
        seed: s.get("run", "seed", 0)?,
        bleu: s.get("eval", "bleu", d.bleu)?,
        max_caption_len: s.get("eval", "max_caption_len", d.max_caption_len)?,
    };
    let vocab_path = s.path("data", "vocab", "--vocab")?;
    let vq_path = s.path("data", "vq", "--vq")?;
    let out = match &a.out_dir {
        Some(dir) => Some(std::path::absolute(dir)?),
        None => None,
    };
    s.freeze("eval", out.as_ref().map(|d| d.join("eval_config.ini")).as_deref())?;

    let manifest = load_manifest(&manifest_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let vq = VqModel::load(&vq_path)?;
    let model = &trainer.model;
    let mut examples = Vec::new();
    for r in manifest.pair_records() {
        let img = load_and_preprocess(r.image.as_ref().expect("image records carry paths"), model.config.image_size)?;
        examples.push(prepare_pair(&img, &r.caption, &vocab, &vq, model.config.max_len)?);
    }
    let m = evaluate(model, &examples, Some(&vocab), &cfg)?;
    let mut report = format!(
        "examples={}\ntext_accuracy={:.6}\ntext_ce={:.6}\ntext_perplexity={:.6}\nimage_accuracy={:.6}\nimage_ce={:.6}\n",
        m.examples, m.text_accuracy, m.text_ce, m.text_perplexity, m.image_accuracy, m.image_ce
    );
    if let Some(b) = m.bleu4 {
        report.push_str(&format!("bleu4={b:.6}\n"));
    }
    print!("{report}");
    if let Some(dir) = out {
        fs::write(dir.join("eval.txt"), report)?;
    }
    Ok(())
}

fn cmd_selftest(a: SelftestArgs) -> Result<()> {
    let mut s = Settings::from_common(&a.common)?;
    s.flag("selftest", "seeds", a.seeds);
    s.flag("selftest", "inject_fault", a.inject_fault);
    let seeds: u64 = s.get("selftest", "seeds", SelftestOptions::default().seeds)?;
    let fault = match s.get_opt::<String>("selftest", "inject_fault")? {
        Some(name) => Some(OpKind::from_name(&name).ok_or_else(|| {
            let names: Vec<String> = OpKind::ALL.iter().map(|k| k.name()).collect();
            Error::invalid(format!("unknown op `{name}`; one of {}", names.join(", ")))
        })?),
        None => None,
    };
    s.freeze("selftest", None)?;
    let checks = run_selftest(&SelftestOptions { seeds, fault });
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {} failed", checks.len(), failed);
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} self-test check(s) failed")));
    }
    Ok(())
}
