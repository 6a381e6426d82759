//! The `captionforge` command-line driver.
//!
//! [`run`] parses arguments, resolves a [`config::RunConfig`] and dispatches
//! to one subcommand. Exit codes: 0 success, 1 usage or configuration error,
//! 2 data or format error (including a failed gradient check), 3 training
//! divergence.

pub mod config;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use captionforge::attributes::{
    export_jsonl, label_targets, select_frequent_words, train_attributes, AttrTrainConfig, AttributeError, AttributeRow,
    DEFAULT_STOPLIST,
};
use captionforge::corpus::{
    split_sentences, synth_corpus, tokenize, CorpusError, Manifest, ManifestEntry, Split, SynthSpec, VideoRecord,
    Vocabulary, DEFAULT_MAX_LEN, DEFAULT_PARAGRAPH_MAX_LEN, MANIFEST_VERSION, SEP_TOKEN,
};
use captionforge::decoding::{beam_decode, greedy_decode, read_decode_file, render_caption, DecodeError, DEFAULT_ALPHA};
use captionforge::evaluation::{corpus_bleu_with, EvalError, EvalPair, EvalReport, Smoothing, MAX_ORDER};
use captionforge::features::{
    self, decode_feature_bytes, decode_pca_bytes, pca_apply, pca_fit, read_pca_file, write_pca_file, FeatureError,
    FEATURE_MAGIC, PCA_MAGIC, REDUCED_DIM,
};
use captionforge::gradsuite;
use captionforge::model::{
    decode_checkpoint, param_count, read_checkpoint, write_checkpoint, ActConfig, ModelConfig, ModelError, Variant,
    CHECKPOINT_MAGIC,
};
use captionforge::training::{self, metrics_csv, Schedule, TrainConfig, TrainError};
use captionforge::PoolMode;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;

use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Largest finite-difference relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SMOKE_CONFIG_FILE: &str = "smoke.cfg";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Divergence(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(format!("[model] {e}")),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(format!("[train] {e}")),
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Config(_) => CliError::Usage(format!("[decode] {e}")),
            DecodeError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AttributeError> for CliError {
    fn from(e: AttributeError) -> Self {
        match e {
            AttributeError::Train(t) => t.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses a flag value with the same spelling the config file uses.
fn serde_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "captionforge", version, about = "Video captioning from precomputed feature sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded synthetic corpus, its manifest and a smoke config
    Synth(SynthCmd),
    /// Fit PCA on the training-split features of a manifest
    PcaFit(PcaFitCmd),
    /// Project every feature file of a manifest and write a new manifest
    PcaApply(PcaApplyCmd),
    /// Train a captioning model
    Train(TrainCmd),
    /// Generate captions with a trained model
    Decode(DecodeCmd),
    /// Score decoded captions against manifest references with BLEU-1..4
    Eval(EvalCmd),
    /// Train the word-attribute head and export per-video label probabilities
    AttrsTrain(AttrsCmd),
    /// Run the finite-difference gradient suite
    Gradcheck(GradcheckCmd),
    /// Print the header of a feature, PCA or checkpoint file
    Inspect(InspectCmd),
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// TOML run configuration; falls back to $CAPTIONFORGE_CONFIG
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Random seed (config key `seed`)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (config key `threads`, default 1)
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output path (config key `out`)
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Manifest JSON (config key `data.manifest`)
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthCmd {
    #[command(flatten)]
    pub global: GlobalArgs,
    /// `synth.n_classes`
    #[arg(long)]
    pub n_classes: Option<usize>,
    /// `synth.videos_per_class`
    #[arg(long)]
    pub videos_per_class: Option<usize>,
    /// `synth.templates_per_class`
    #[arg(long)]
    pub templates_per_class: Option<usize>,
    /// `synth.paraphrases_per_video`
    #[arg(long)]
    pub paraphrases_per_video: Option<usize>,
    /// `synth.dense`: emit multi-sentence paragraphs
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub dense: Option<bool>,
    /// `synth.feature_dim`
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// `synth.min_rows`
    #[arg(long)]
    pub min_rows: Option<usize>,
    /// `synth.max_rows`
    #[arg(long)]
    pub max_rows: Option<usize>,
    /// `synth.signal_strength`
    #[arg(long)]
    pub signal_strength: Option<f64>,
    /// `synth.val_every`
    #[arg(long)]
    pub val_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PcaFitCmd {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// `pca.k`: number of components (default 512)
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PcaApplyCmd {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// `pca.pca`: model written by pca-fit
    #[arg(long, value_name = "PATH")]
    pub pca: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// `model.preset`: msvd_vanilla, msvd_universal or activitynet_universal
    #[arg(long)]
    pub preset: Option<String>,
    /// `model.variant`: vanilla or universal
    #[arg(long, value_parser = serde_value::<Variant>)]
    pub variant: Option<Variant>,
    /// `model.n_layers`
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// `model.d_model`
    #[arg(long)]
    pub d_model: Option<usize>,
    /// `model.n_heads`
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// `model.d_ff`
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// `model.dropout`
    #[arg(long)]
    pub dropout: Option<f64>,
    /// `model.max_decode_len`
    #[arg(long)]
    pub max_decode_len: Option<usize>,
    /// `model.feature_dim` (default: width of the manifest's features)
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// `model.encoder_positions`
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub encoder_positions: Option<bool>,
    /// Enable adaptive halting (presence of `[model.act]`)
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub act: Option<bool>,
    /// `model.act.epsilon`
    #[arg(long)]
    pub act_epsilon: Option<f64>,
    /// `model.act.max_steps`
    #[arg(long)]
    pub act_max_steps: Option<usize>,
    /// `model.act.ponder_weight`
    #[arg(long)]
    pub act_ponder_weight: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// `data.min_count`: vocabulary frequency cut-off (default 2)
    #[arg(long)]
    pub min_count: Option<usize>,
    /// `train.batch_size`
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `train.lr0`
    #[arg(long)]
    pub lr0: Option<f64>,
    /// `train.schedule`: decay or cosine_restarts
    #[arg(long, value_parser = serde_value::<Schedule>)]
    pub schedule: Option<Schedule>,
    /// `train.warmup_steps`
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// `train.restart_period`
    #[arg(long)]
    pub restart_period: Option<usize>,
    /// `train.epochs`
    #[arg(long)]
    pub epochs: Option<usize>,
    /// `train.grad_clip_norm`
    #[arg(long)]
    pub grad_clip_norm: Option<f64>,
    /// `train.divergence_threshold`
    #[arg(long)]
    pub divergence_threshold: Option<f64>,
    /// `train.max_len`: caption token budget including <eos>
    #[arg(long)]
    pub max_len: Option<usize>,
    /// `train.max_steps`: stop after this many optimizer steps
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct DecodeCmd {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// `decode.model`: directory written by train
    #[arg(long, value_name = "DIR")]
    pub model: Option<PathBuf>,
    /// `decode.width`: beam width, 1 for greedy
    #[arg(long)]
    pub width: Option<usize>,
    /// `decode.alpha`: beam length-normalization exponent
    #[arg(long)]
    pub alpha: Option<f64>,
    /// `decode.split`: all, train, val or test
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// `eval.decoded`: output of decode
    #[arg(long, value_name = "PATH")]
    pub decoded: Option<PathBuf>,
    /// `eval.paragraph`: paragraph-wise scoring (default: detected from <sep> in references)
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub paragraph: Option<bool>,
    /// `eval.smoothing`: none or epsilon
    #[arg(long, value_parser = serde_value::<Smoothing>)]
    pub smoothing: Option<Smoothing>,
}

#[derive(Args, Debug)]
pub struct AttrsCmd {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// `attrs.k`: number of word labels
    #[arg(long)]
    pub k: Option<usize>,
    /// `attrs.mode`: elementwise or scored
    #[arg(long, value_parser = serde_value::<PoolMode>)]
    pub mode: Option<PoolMode>,
    /// `attrs.epochs`
    #[arg(long)]
    pub epochs: Option<usize>,
    /// `attrs.lr`
    #[arg(long)]
    pub lr: Option<f64>,
    /// `attrs.use_stoplist`
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub use_stoplist: Option<bool>,
}

#[derive(Args, Debug)]
pub struct GradcheckCmd {
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Args, Debug)]
pub struct InspectCmd {
    #[command(flatten)]
    pub global: GlobalArgs,
    /// Feature (.vfm), PCA or checkpoint file
    pub path: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Synth(c) => cmd_synth(c),
        Command::PcaFit(c) => cmd_pca_fit(c),
        Command::PcaApply(c) => cmd_pca_apply(c),
        Command::Train(c) => cmd_train(c),
        Command::Decode(c) => cmd_decode(c),
        Command::Eval(c) => cmd_eval(c),
        Command::AttrsTrain(c) => cmd_attrs(c),
        Command::Gradcheck(c) => cmd_gradcheck(c),
        Command::Inspect(c) => cmd_inspect(c),
    }
}

/// Settings shared by every command after merging flags over the file.
struct Common {
    cfg: RunConfig,
    seed: Option<u64>,
    threads: usize,
    out: Option<PathBuf>,
}

fn common(g: &GlobalArgs) -> CliResult<Common> {
    let cfg = RunConfig::load(g.config.as_deref())?;
    let threads = g.threads.or(cfg.threads).unwrap_or(1);
    if threads == 0 {
        return Err(CliError::Usage("key `threads`: must be at least 1".into()));
    }
    Ok(Common {
        seed: g.seed.or(cfg.seed),
        out: g.out.clone().or_else(|| cfg.out.clone()),
        threads,
        cfg,
    })
}

impl Common {
    fn require_seed(&self, command: &str) -> CliResult<u64> {
        self.seed
            .ok_or_else(|| CliError::Usage(format!("{command}: a seed is required (flag --seed or config key `seed`)")))
    }

    fn require_out(&self, command: &str) -> CliResult<PathBuf> {
        self.out
            .clone()
            .ok_or_else(|| CliError::Usage(format!("{command}: an output path is required (flag --out or config key `out`)")))
    }

    fn manifest_path(&self, data: &DataArgs, command: &str) -> CliResult<PathBuf> {
        data.manifest.clone().or_else(|| self.cfg.data.manifest.clone()).ok_or_else(|| {
            CliError::Usage(format!("{command}: a manifest is required (flag --manifest or config key `data.manifest`)"))
        })
    }
}

fn manifest_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_records(path: &Path) -> CliResult<Vec<VideoRecord>> {
    let manifest = Manifest::read(path)?;
    if manifest.records.is_empty() {
        return Err(CliError::Data(format!("{}: manifest has no records", path.display())));
    }
    Ok(manifest.load(&manifest_base(path))?)
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

/// Writes to `out` when given, otherwise to stdout.
fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| CliError::Data(format!("stdout: {e}")))
        }
    }
}

fn cmd_synth(c: SynthCmd) -> CliResult<()> {
    let common = common(&c.global)?;
    let seed = common.require_seed("synth")?;
    let out = common.require_out("synth")?;
    let f = &common.cfg.synth;
    let d = SynthSpec::default();
    let spec = SynthSpec {
        n_classes: c.n_classes.or(f.n_classes).unwrap_or(d.n_classes),
        videos_per_class: c.videos_per_class.or(f.videos_per_class).unwrap_or(d.videos_per_class),
        templates_per_class: c.templates_per_class.or(f.templates_per_class).unwrap_or(d.templates_per_class),
        paraphrases_per_video: c.paraphrases_per_video.or(f.paraphrases_per_video).unwrap_or(d.paraphrases_per_video),
        dense: c.dense.or(f.dense).unwrap_or(d.dense),
        feature_dim: c.feature_dim.or(f.feature_dim).unwrap_or(d.feature_dim),
        min_rows: c.min_rows.or(f.min_rows).unwrap_or(d.min_rows),
        max_rows: c.max_rows.or(f.max_rows).unwrap_or(d.max_rows),
        signal_strength: c.signal_strength.or(f.signal_strength).unwrap_or(d.signal_strength),
        val_every: c.val_every.or(f.val_every).unwrap_or(d.val_every),
    };
    let corpus = synth_corpus(&spec, seed).map_err(|e| match e {
        CorpusError::Invalid(m) => CliError::Usage(format!("[synth] {m}")),
        other => other.into(),
    })?;
    create_dir(&out)?;
    let manifest = corpus.write(&out)?;
    let cfg_path = out.join(SMOKE_CONFIG_FILE);
    write_text(&cfg_path, &smoke_config(seed, spec.dense))?;
    println!("wrote {} videos to {}", corpus.records.len(), manifest.display());
    println!("training config: {}", cfg_path.display());
    Ok(())
}

/// Training settings sized for overfitting the synthetic corpus on one core.
pub fn smoke_config(seed: u64, dense: bool) -> String {
    let max_len = if dense { DEFAULT_PARAGRAPH_MAX_LEN } else { DEFAULT_MAX_LEN };
    format!(
        "version = 1\n\
         seed = {seed}\n\
         \n\
         [data]\n\
         manifest = \"manifest.json\"\n\
         min_count = 1\n\
         \n\
         [model]\n\
         variant = \"vanilla\"\n\
         n_layers = 2\n\
         d_model = 32\n\
         n_heads = 2\n\
         d_ff = 128\n\
         dropout = 0.0\n\
         max_decode_len = {max_len}\n\
         \n\
         [train]\n\
         batch_size = 16\n\
         lr0 = 1e-3\n\
         schedule = \"decay\"\n\
         epochs = 1000\n\
         max_steps = 2000\n\
         max_len = {max_len}\n"
    )
}

fn cmd_pca_fit(c: PcaFitCmd) -> CliResult<()> {
    let common = common(&c.global)?;
    let manifest = common.manifest_path(&c.data, "pca-fit")?;
    let out = common.require_out("pca-fit")?;
    let k = c.k.or(common.cfg.pca.k).unwrap_or(REDUCED_DIM);
    let records = load_records(&manifest)?;
    let matrices: Vec<_> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.features.clone())
        .collect();
    if matrices.is_empty() {
        return Err(CliError::Data(format!("{}: no training-split videos to fit on", manifest.display())));
    }
    let dim = matrices[0].dim();
    if k == 0 || k > dim {
        return Err(CliError::Usage(format!("key `pca.k`: {k} components requested from {dim}-dimensional features")));
    }
    let model = pca_fit(&matrices, k)?;
    write_pca_file(&out, &model)?;
    let kept: f64 = model.eigenvalues.iter().sum();
    println!(
        "fitted {} -> {} components on {} videos (retained variance {kept:.6}); wrote {}",
        model.input_dim(),
        model.output_dim(),
        matrices.len(),
        out.display()
    );
    Ok(())
}

fn cmd_pca_apply(c: PcaApplyCmd) -> CliResult<()> {
    let common = common(&c.global)?;
    let manifest_path = common.manifest_path(&c.data, "pca-apply")?;
    let out = common.require_out("pca-apply")?;
    let pca_path = c.pca.clone().or_else(|| common.cfg.pca.pca.clone()).ok_or_else(|| {
        CliError::Usage("pca-apply: a PCA model is required (flag --pca or config key `pca.pca`)".into())
    })?;
    let model = read_pca_file(&pca_path)?;
    let manifest = Manifest::read(&manifest_path)?;
    let base = manifest_base(&manifest_path);
    let feat_dir = out.join("features");
    create_dir(&feat_dir)?;
    let mut entries = Vec::with_capacity(manifest.records.len());
    for e in &manifest.records {
        let src = if e.feature_path.is_absolute() { e.feature_path.clone() } else { base.join(&e.feature_path) };
        let matrix = features::read_feature_file(&src)?;
        let reduced = pca_apply(&model, &matrix).map_err(|err| CliError::Data(format!("{}: {err}", src.display())))?;
        let rel = PathBuf::from("features").join(format!("{}.vfm", e.video_id));
        features::write_feature_file(&out.join(&rel), &reduced)?;
        entries.push(ManifestEntry { feature_path: rel, ..e.clone() });
    }
    let new_manifest = out.join("manifest.json");
    Manifest { version: MANIFEST_VERSION, records: entries }.write(&new_manifest)?;
    println!("projected {} videos to {} dims; wrote {}", manifest.records.len(), model.output_dim(), new_manifest.display());
    Ok(())
}

fn preset_config(name: &str, vocab_size: usize) -> CliResult<ModelConfig> {
    match name {
        "msvd_vanilla" => Ok(ModelConfig::msvd_vanilla(vocab_size)),
        "msvd_universal" => Ok(ModelConfig::msvd_universal(vocab_size)),
        "activitynet_universal" => Ok(ModelConfig::activitynet_universal(vocab_size)),
        other => Err(CliError::Usage(format!(
            "key `model.preset`: unknown preset `{other}` (expected msvd_vanilla, msvd_universal or activitynet_universal)"
        ))),
    }
}

/// Model settings from flags over the file over the preset (default
/// `msvd_vanilla`). The returned config has its vocabulary and feature
/// widths taken from the data unless set explicitly.
fn resolve_model(m: &ModelArgs, cfg: &RunConfig, explicit_max_len: Option<usize>, vocab_size: usize, data_dim: usize) -> CliResult<ModelConfig> {
    let f = &cfg.model;
    let preset = m.preset.as_deref().or(f.preset.as_deref()).unwrap_or("msvd_vanilla");
    let mut mc = preset_config(preset, vocab_size)?;
    if let Some(v) = m.variant.or(f.variant) {
        mc.variant = v;
    }
    if let Some(v) = m.n_layers.or(f.n_layers) {
        mc.n_layers = v;
    }
    if let Some(v) = m.d_model.or(f.d_model) {
        mc.d_model = v;
        mc.d_ff = 4 * v;
    }
    if let Some(v) = m.n_heads.or(f.n_heads) {
        mc.n_heads = v;
    }
    if let Some(v) = m.d_ff.or(f.d_ff) {
        mc.d_ff = v;
    }
    if let Some(v) = m.dropout.or(f.dropout) {
        mc.dropout = v;
    }
    if let Some(v) = m.max_decode_len.or(f.max_decode_len).or(explicit_max_len) {
        mc.max_decode_len = v;
    }
    if let Some(v) = m.encoder_positions.or(f.encoder_positions) {
        mc.encoder_positions = v;
    }
    mc.feature_dim = match m.feature_dim.or(f.feature_dim) {
        Some(v) if v != data_dim => {
            return Err(CliError::Data(format!("key `model.feature_dim`: {v} but the manifest's features are {data_dim}-dimensional")))
        }
        _ => data_dim,
    };
    let act_on = m.act.unwrap_or(f.act.is_some() || m.act_epsilon.is_some() || m.act_max_steps.is_some() || m.act_ponder_weight.is_some());
    mc.act = if act_on {
        let base = f.act.clone().unwrap_or_default();
        Some(ActConfig {
            epsilon: m.act_epsilon.unwrap_or(base.epsilon),
            max_steps: m.act_max_steps.unwrap_or(base.max_steps),
            ponder_weight: m.act_ponder_weight.unwrap_or(base.ponder_weight),
        })
    } else {
        None
    };
    mc.vocab_size = vocab_size;
    mc.validate()?;
    Ok(mc)
}

fn resolve_train(t: &TrainArgs, cfg: &RunConfig, seed: u64, max_len: usize) -> TrainConfig {
    let f = &cfg.train;
    let d = TrainConfig::default();
    TrainConfig {
        batch_size: t.batch_size.or(f.batch_size).unwrap_or(d.batch_size),
        lr0: t.lr0.or(f.lr0).unwrap_or(d.lr0),
        schedule: t.schedule.or(f.schedule).unwrap_or(d.schedule),
        warmup_steps: t.warmup_steps.or(f.warmup_steps).unwrap_or(d.warmup_steps),
        restart_period: t.restart_period.or(f.restart_period).unwrap_or(d.restart_period),
        epochs: t.epochs.or(f.epochs).unwrap_or(d.epochs),
        seed,
        grad_clip_norm: t.grad_clip_norm.or(f.grad_clip_norm).unwrap_or(d.grad_clip_norm),
        divergence_threshold: t.divergence_threshold.or(f.divergence_threshold).unwrap_or(d.divergence_threshold),
        max_len,
        max_steps: t.max_steps.or(f.max_steps),
        metrics_path: None,
        checkpoint_path: None,
    }
}

fn cmd_train(c: TrainCmd) -> CliResult<()> {
    let common = common(&c.global)?;
    let seed = common.require_seed("train")?;
    let out = common.require_out("train")?;
    let manifest = common.manifest_path(&c.data, "train")?;
    let cfg = &common.cfg;
    let min_count = c.train.min_count.or(cfg.data.min_count).unwrap_or(2);
    if min_count == 0 {
        return Err(CliError::Usage("key `data.min_count`: must be at least 1".into()));
    }

    let records = load_records(&manifest)?;
    let train_captions = records.iter().filter(|r| r.split == Split::Train).flat_map(|r| r.captions.iter().map(Vec::as_slice));
    let vocab = Vocabulary::build(train_captions, min_count)?;
    let data_dim = records[0].features.dim();
    if let Some(r) = records.iter().find(|r| r.features.dim() != data_dim) {
        return Err(CliError::Data(format!(
            "{}: {}-dimensional features, expected {data_dim} like the rest of the manifest",
            r.feature_path.display(),
            r.features.dim()
        )));
    }

    let explicit_max_len = c.train.max_len.or(cfg.train.max_len);
    let model_config = resolve_model(&c.model, cfg, explicit_max_len, vocab.len(), data_dim)?;
    let max_len = explicit_max_len.unwrap_or(model_config.max_decode_len);
    let mut train_config = resolve_train(&c.train, cfg, seed, max_len);
    create_dir(&out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    train_config.checkpoint_path = Some(ckpt.clone());
    train_config.metrics_path = Some(out.join(METRICS_FILE));
    write_text(&out.join(VOCAB_FILE), &vocab.to_json())?;

    let outcome = training::train(&records, &vocab, &model_config, &train_config)?;
    write_checkpoint(&ckpt, &outcome.best)?;
    write_text(&out.join(METRICS_FILE), &metrics_csv(&outcome.metrics))?;
    let last = outcome.metrics.last().expect("at least one epoch ran");
    println!(
        "trained {} steps over {} epochs: loss {:.4}, token accuracy {:.4}; best epoch {}",
        outcome.steps,
        outcome.metrics.len(),
        last.loss,
        last.token_acc,
        outcome.best_epoch
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn parse_split(s: &str) -> CliResult<Option<Split>> {
    match s {
        "all" => Ok(None),
        other => serde_value::<Split>(other)
            .map(Some)
            .map_err(|_| CliError::Usage(format!("key `decode.split`: `{other}` is not one of all, train, val, test"))),
    }
}

fn cmd_decode(c: DecodeCmd) -> CliResult<()> {
    let common = common(&c.global)?;
    let cfg = &common.cfg;
    let manifest = common.manifest_path(&c.data, "decode")?;
    let model_dir = c.model.clone().or_else(|| cfg.decode.model.clone()).ok_or_else(|| {
        CliError::Usage("decode: a model directory is required (flag --model or config key `decode.model`)".into())
    })?;
    let width = c.width.or(cfg.decode.width).unwrap_or(1);
    let alpha = c.alpha.or(cfg.decode.alpha).unwrap_or(DEFAULT_ALPHA);
    let split = parse_split(c.split.as_deref().or(cfg.decode.split.as_deref()).unwrap_or("all"))?;
    if width == 0 {
        return Err(CliError::Usage("key `decode.width`: must be at least 1".into()));
    }

    let model = read_checkpoint(&model_dir.join(CHECKPOINT_FILE))?;
    let vocab_path = model_dir.join(VOCAB_FILE);
    let vocab_text = fs::read_to_string(&vocab_path).map_err(|e| io_error(&vocab_path, e))?;
    let vocab = Vocabulary::from_json(&vocab_text).map_err(|e| CliError::Data(format!("{}: {e}", vocab_path.display())))?;
    if vocab.len() != model.config().vocab_size {
        return Err(CliError::Data(format!(
            "{}: {} tokens but the checkpoint expects {}",
            vocab_path.display(),
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let records = load_records(&manifest)?;
    let selected: Vec<&VideoRecord> = records.iter().filter(|r| split.is_none_or(|s| r.split == s)).collect();
    if let Some(r) = selected.iter().find(|r| r.features.dim() != model.config().feature_dim) {
        return Err(CliError::Data(format!(
            "{}: {}-dimensional features, the model expects {}",
            r.feature_path.display(),
            r.features.dim(),
            model.config().feature_dim
        )));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("key `threads`: {e}")))?;
    let rows: Vec<(String, String)> = pool.install(|| {
        selected
            .par_iter()
            .map(|r| -> CliResult<(String, String)> {
                let ids = if width == 1 {
                    greedy_decode(&model, &r.features.values)?
                } else {
                    beam_decode(&model, &r.features.values, width, alpha)?
                };
                Ok((r.video_id.clone(), render_caption(&vocab, &ids)))
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    emit(common.out.as_deref(), &captionforge::decoding::format_decode_output(&rows))?;
    if let Some(out) = &common.out {
        println!("decoded {} videos to {}", rows.len(), out.display());
    }
    Ok(())
}

/// Scores `(video_id, caption)` rows against the captions of `records`.
///
/// In paragraph mode a predicted caption is split into sentences at " . "
/// and each reference at `<sep>`; sentences are concatenated per video
/// before n-gram counting.
pub fn score_decoded(
    decoded: &[(String, String)],
    records: &[VideoRecord],
    paragraph: bool,
    smoothing: Smoothing,
) -> Result<EvalReport, String> {
    let by_id: HashMap<&str, &VideoRecord> = records.iter().map(|r| (r.video_id.as_str(), r)).collect();
    let mut seen = HashSet::new();
    let mut predictions: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    let mut pairs = Vec::with_capacity(decoded.len());
    let mut missing = Vec::new();
    for (id, caption) in decoded {
        if !seen.insert(id.as_str()) {
            return Err(format!("video `{id}` appears more than once"));
        }
        let Some(record) = by_id.get(id.as_str()) else {
            missing.push(id.clone());
            continue;
        };
        if paragraph {
            let sentences: Vec<Vec<String>> = caption.split(" . ").map(tokenize).filter(|s| !s.is_empty()).collect();
            let refs: Vec<Vec<String>> = record.captions.iter().map(|c| split_sentences(c).concat()).collect();
            pairs.push(EvalPair::new(sentences.concat(), refs));
            predictions.insert(id.clone(), sentences);
        } else {
            pairs.push(EvalPair::new(tokenize(caption), record.captions.clone()));
        }
    }
    if !missing.is_empty() {
        return Err(format!("video ids not in the manifest: {missing:?}"));
    }
    let scores = corpus_bleu_with(&pairs, MAX_ORDER, smoothing).map_err(|e| e.to_string())?;
    EvalReport::from_scores(&scores).map_err(|e| e.to_string())
}

fn cmd_eval(c: EvalCmd) -> CliResult<()> {
    let common = common(&c.global)?;
    let cfg = &common.cfg;
    let manifest = common.manifest_path(&c.data, "eval")?;
    let decoded_path = c.decoded.clone().or_else(|| cfg.eval.decoded.clone()).ok_or_else(|| {
        CliError::Usage("eval: decoded captions are required (flag --decoded or config key `eval.decoded`)".into())
    })?;
    let smoothing = c.smoothing.or(cfg.eval.smoothing).unwrap_or_default();
    let records = load_records(&manifest)?;
    let decoded = read_decode_file(&decoded_path)?;
    let paragraph = c
        .paragraph
        .or(cfg.eval.paragraph)
        .unwrap_or_else(|| records.iter().any(|r| r.captions.iter().any(|cap| cap.iter().any(|t| t == SEP_TOKEN))));
    let report = score_decoded(&decoded, &records, paragraph, smoothing)
        .map_err(|e| CliError::Data(format!("{}: {e}", decoded_path.display())))?;
    println!("mode     {}", if paragraph { "paragraph" } else { "sentence" });
    print!("{}", report.table());
    if let Some(out) = &common.out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_text(out, &(json + "\n"))?;
    }
    Ok(())
}

fn cmd_attrs(c: AttrsCmd) -> CliResult<()> {
    let common = common(&c.global)?;
    let f = &common.cfg.attrs;
    let manifest = common.manifest_path(&c.data, "attrs-train")?;
    let d = AttrTrainConfig::default();
    let config = AttrTrainConfig {
        k: c.k.or(f.k).unwrap_or(d.k),
        mode: c.mode.or(f.mode).unwrap_or(d.mode),
        epochs: c.epochs.or(f.epochs).unwrap_or(d.epochs),
        lr: c.lr.or(f.lr).unwrap_or(d.lr),
        seed: common.seed.unwrap_or(d.seed),
        use_stoplist: c.use_stoplist.or(f.use_stoplist).unwrap_or(d.use_stoplist),
    };
    let records = load_records(&manifest)?;
    let train: Vec<&VideoRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    let stoplist: &[&str] = if config.use_stoplist { &DEFAULT_STOPLIST } else { &[] };
    let labels = select_frequent_words(
        train.iter().flat_map(|r| r.captions.iter().map(Vec::as_slice)).filter(|c| !c.is_empty()),
        config.k,
        stoplist,
    )
    .map_err(|e| match e {
        AttributeError::TooFewWords { .. } => CliError::Data(format!("key `attrs.k`: {e}")),
        other => other.into(),
    })?;
    let frames: Vec<_> = train.iter().map(|r| &r.features.values).collect();
    let targets: Vec<Vec<f64>> = train.iter().map(|r| label_targets(&r.captions, &labels)).collect();
    let outcome = train_attributes(&frames, &targets, labels.clone(), &config)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let rows = records
        .iter()
        .map(|r| -> CliResult<AttributeRow> {
            let probs = outcome.head.predict(&r.features.values)?;
            Ok(AttributeRow {
                video_id: r.video_id.clone(),
                labels: labels.iter().cloned().zip(probs).collect(),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    emit(common.out.as_deref(), &export_jsonl(&rows))?;

    let last = outcome.metrics.last().expect("epochs >= 1");
    let mut summary = format!("loss {:.4}, subset accuracy {:.4}\nlabel        f1\n", last.loss, last.subset_accuracy);
    for (l, f1) in labels.iter().zip(&outcome.f1) {
        summary.push_str(&format!("{l:<12} {f1:.4}\n"));
    }
    if common.out.is_some() {
        print!("{summary}");
    } else {
        eprint!("{summary}");
    }
    Ok(())
}

fn cmd_gradcheck(c: GradcheckCmd) -> CliResult<()> {
    let common = common(&c.global)?;
    let suite = gradsuite::full_suite().map_err(|e| CliError::Data(format!("gradient suite: {e}")))?;
    let mut text = String::new();
    let mut worst = 0.0f64;
    for e in &suite {
        worst = worst.max(e.report.max_relative_error);
        text.push_str(&format!("{:<30} {:.3e}\n", e.name, e.report.max_relative_error));
    }
    let passed = worst < GRADCHECK_TOLERANCE;
    text.push_str(&format!(
        "max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e}): {}\n",
        if passed { "ok" } else { "FAILED" }
    ));
    print!("{text}");
    if let Some(out) = &common.out {
        write_text(out, &text)?;
    }
    if passed {
        Ok(())
    } else {
        Err(CliError::Data(format!("gradient check failed: max relative error {worst:.3e}")))
    }
}

fn cmd_inspect(c: InspectCmd) -> CliResult<()> {
    let path = &c.path;
    let shown = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    let magic = bytes.get(..4).unwrap_or(&[]);
    if magic == FEATURE_MAGIC {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let m = decode_feature_bytes(&bytes, &id, &shown)?;
        println!("file     {shown}");
        println!("format   feature matrix (VFM1)");
        println!("rows     {}", m.rows());
        println!("dim      {}", m.dim());
        println!("checksum ok");
    } else if magic == PCA_MAGIC {
        let m = decode_pca_bytes(&bytes, &shown)?;
        println!("file       {shown}");
        println!("format     PCA model (VPC1)");
        println!("input_dim  {}", m.input_dim());
        println!("components {}", m.output_dim());
        println!("variance   {:.6}", m.eigenvalues.iter().sum::<f64>());
    } else if magic == CHECKPOINT_MAGIC {
        let model = decode_checkpoint(&bytes).map_err(|reason| CliError::Data(format!("{shown}: {reason}")))?;
        let cfg = model.config();
        println!("file           {shown}");
        println!("format         checkpoint (VCK1)");
        println!("variant        {:?}", cfg.variant);
        println!("n_layers       {}", cfg.n_layers);
        println!("d_model        {}", cfg.d_model);
        println!("n_heads        {}", cfg.n_heads);
        println!("d_ff           {}", cfg.d_ff);
        println!("vocab_size     {}", cfg.vocab_size);
        println!("feature_dim    {}", cfg.feature_dim);
        println!("max_decode_len {}", cfg.max_decode_len);
        println!("act            {}", cfg.act.as_ref().map_or("off".to_string(), |a| format!("{a:?}")));
        println!("tensors        {}", model.params().len());
        println!("parameters     {}", param_count(cfg));
    } else {
        return Err(CliError::Data(format!("{shown}: unrecognized file magic {magic:?}")));
    }
    Ok(())
}
