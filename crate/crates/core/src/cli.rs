//! Command-line front end.
//!
//! [`run`] parses arguments, executes one subcommand, appends a [`RunRecord`]
//! to the run log and returns the process exit code. Values are resolved as
//! flag, then config file, then built-in default.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::chaos::{validate_raw, ParamError};
use crate::detect::{self, ActivationFeatureSet, DetectError, DEFAULT_L2, SOURCES};
use crate::ga::{self, Decision, GaConfig, GaError, Tolerances};
use crate::nn::data::{load_dir, save_dir, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use crate::nn::{self, evaluate, load_model, save_model, Architecture, DenseNet, NnError, Optimizer, TrainConfig};
use crate::store::{self, write_atomic, ModelWeights, StoreError};
use crate::watermark::{self, WatermarkError, DEFAULT_BINS};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const IO: i32 = 2;
    pub const REJECTED: i32 = 3;
    pub const INCONCLUSIVE: i32 = 4;
    /// Layer missing, shapes or dimensions that do not line up.
    pub const MISMATCH: i32 = 5;
    /// Confidence filtering kept no samples.
    pub const NOTHING_RETAINED: i32 = 6;
    /// Training diverged or the search could not run on the data.
    pub const NUMERIC: i32 = 7;
}

pub const DEFAULT_RUN_LOG: &str = "chaosmark-runs.jsonl";
pub const RUN_LOG_ENV: &str = "CHAOSMARK_RUN_LOG";
pub const DEFAULT_R: f64 = 3.9;
pub const DEFAULT_X0: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_THRESHOLD: f64 = 0.9;

#[derive(Debug, Parser)]
#[command(name = "chaosmark", version, about = "Chaotic-sequence watermarking for dense networks")]
pub struct Cli {
    /// Seed for every random choice. When absent a random seed is drawn and printed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file supplying defaults for any flag (flags take precedence).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// JSON-lines run log. Defaults to $CHAOSMARK_RUN_LOG, then ./chaosmark-runs.jsonl.
    #[arg(long, global = true, value_name = "FILE")]
    pub run_log: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic Gaussian-blob dataset as IDX files.
    GenData(GenDataArgs),
    /// Train a dense classifier on an IDX dataset directory.
    Train(TrainArgs),
    /// Embed a chaotic watermark into one layer, optionally fine-tuning afterwards.
    Embed(EmbedArgs),
    /// Fine-tune a model on the first half of the test split and evaluate on the second.
    Attack(AttackArgs),
    /// Recover the key from a suspect model and decide ownership.
    Verify(VerifyArgs),
    /// Export weight-density tables for one layer of several models.
    Density(DensityArgs),
    /// Classify activations as coming from the original, watermarked or fine-tuned model.
    Detect(DetectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory for the four IDX files.
    #[arg(long)]
    pub out: PathBuf,
    /// Samples per class (70% train, 30% test).
    #[arg(long)]
    pub per_class: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding train/t10k IDX files.
    #[arg(long)]
    pub data: PathBuf,
    /// Model output path; the descriptor and metrics are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Weight tensor to mark (`dense1` is shorthand for `dense1.kernel`).
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub x0: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Manifest output path.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Watermarked model output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory; when given the marked model is fine-tuned on its train split.
    #[arg(long)]
    pub fine_tune_data: Option<PathBuf>,
    /// Fine-tuning epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory; its test split is halved into attack and evaluation parts.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Attacked model output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub suspect: PathBuf,
    /// Pre-watermark reference model.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// GA population size.
    #[arg(long)]
    pub pop: Option<usize>,
    /// GA generation limit.
    #[arg(long)]
    pub gens: Option<usize>,
    /// Leading delta elements matched by the search.
    #[arg(long)]
    pub target_len: Option<usize>,
    /// Output directory for report.txt, result.csv and trace.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DensityArgs {
    /// Model files; one table per model.
    #[arg(long = "models", num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub watermarked: PathBuf,
    #[arg(long)]
    pub fine_tuned: PathBuf,
    /// Dataset directory; the first half of its test split trains the classifier.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub layer: Option<String>,
    /// Minimum softmax confidence for a sample to be kept.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Classifier training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Keys accepted in the `--config` file.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub layer: Option<String>,
    pub r: Option<f64>,
    pub x0: Option<f64>,
    pub epsilon: Option<f64>,
    pub bins: Option<usize>,
    pub threshold: Option<f64>,
    pub pop: Option<usize>,
    pub gens: Option<usize>,
    pub target_len: Option<usize>,
    pub per_class: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub train_epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<OptimizerArg>,
    pub fine_tune_epochs: Option<usize>,
    pub attack_epochs: Option<usize>,
    pub detect_epochs: Option<usize>,
}

/// One line of the run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config: Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub duration_ms: u64,
    pub exit_status: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(exit::USAGE, message)
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new(exit::IO, format!("{}: {e}", path.display()))
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        let code = match e {
            StoreError::UnknownLayer(_) => exit::MISMATCH,
            _ => exit::IO,
        };
        CliError::new(code, e.to_string())
    }
}

fn nn_code(e: &NnError) -> i32 {
    match e {
        NnError::Store(StoreError::UnknownLayer(_)) => exit::MISMATCH,
        NnError::Dimension { .. } | NnError::UnknownLayer(_) => exit::MISMATCH,
        NnError::Config(_) => exit::USAGE,
        NnError::NonFinite { .. } => exit::NUMERIC,
        _ => exit::IO,
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        CliError::new(nn_code(&e), e.to_string())
    }
}

impl From<WatermarkError> for CliError {
    fn from(e: WatermarkError) -> Self {
        match e {
            WatermarkError::Store(s) => s.into(),
            WatermarkError::Params(p) => p.into(),
            WatermarkError::TooFewBins(_) => CliError::usage(e.to_string()),
            WatermarkError::Io(_) => CliError::new(exit::IO, e.to_string()),
            _ => CliError::new(exit::MISMATCH, e.to_string()),
        }
    }
}

impl From<ParamError> for CliError {
    fn from(e: ParamError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<GaError> for CliError {
    fn from(e: GaError) -> Self {
        let code = if matches!(e, GaError::Config(_)) { exit::USAGE } else { exit::NUMERIC };
        CliError::new(code, e.to_string())
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        let code = match &e {
            DetectError::Nn(n) => nn_code(n),
            DetectError::Threshold(_) => exit::USAGE,
            DetectError::NothingRetained { .. } => exit::NOTHING_RETAINED,
            DetectError::Width { .. } | DetectError::Incompatible => exit::MISMATCH,
            DetectError::Io(..) => exit::IO,
            _ => exit::NUMERIC,
        };
        CliError::new(code, e.to_string())
    }
}

/// State shared by every command while it runs; feeds the run record.
struct Ctx {
    seed: u64,
    file: FileConfig,
    config: Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Ctx {
    fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(path, bytes).map_err(|e| io_err(path, e))?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    fn save_model(&mut self, net: &DenseNet, train: &TrainConfig, path: &Path) -> Result<(), CliError> {
        save_model(net, train, path)?;
        self.outputs.push(path.display().to_string());
        self.outputs.push(nn::net::arch_path(path).display().to_string());
        Ok(())
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn run_log_path(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(RUN_LOG_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_LOG))
}

fn append_record(path: &Path, record: &RunRecord) {
    let mut line = serde_json::to_string(record).expect("record serializes");
    line.push('\n');
    let res = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| f.write_all(line.as_bytes()));
    if let Err(e) = res {
        eprintln!("warning: could not append to run log {}: {e}", path.display());
    }
}

/// Manifest timestamp: `SOURCE_DATE_EPOCH` when set, otherwise the clock.
fn created_at() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Embed(_) => "embed",
        Command::Attack(_) => "attack",
        Command::Verify(_) => "verify",
        Command::Density(_) => "density",
        Command::Detect(_) => "detect",
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => exit::OK,
                _ => exit::USAGE,
            };
        }
    };
    let started = Instant::now();
    let log_path = run_log_path(cli.run_log.clone());
    let name = command_name(&cli.command);

    let file = match load_file_config(cli.config.as_deref()) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {}", e.message);
            return e.code;
        }
    };
    let seed = match cli.seed.or(file.seed) {
        Some(s) => s,
        None => {
            let s = rand::rng().random::<u64>();
            eprintln!("seed {s}");
            s
        }
    };
    let mut ctx = Ctx { seed, file, config: Value::Null, inputs: Vec::new(), outputs: Vec::new() };
    if let Some(p) = &cli.config {
        ctx.input(p);
    }
    let result = match &cli.command {
        Command::GenData(a) => gen_data(&mut ctx, a),
        Command::Train(a) => train(&mut ctx, a),
        Command::Embed(a) => embed(&mut ctx, a),
        Command::Attack(a) => attack(&mut ctx, a),
        Command::Verify(a) => verify(&mut ctx, a),
        Command::Density(a) => density(&mut ctx, a),
        Command::Detect(a) => detect_cmd(&mut ctx, a),
    };
    let (code, message) = match result {
        Ok(code) => (code, None),
        Err(e) => {
            eprintln!("error: {}", e.message);
            (e.code, Some(e.message))
        }
    };
    let record = RunRecord {
        command: name.to_string(),
        config: ctx.config,
        inputs: ctx.inputs,
        outputs: ctx.outputs,
        seed,
        duration_ms: started.elapsed().as_millis() as u64,
        exit_status: code,
        message,
    };
    append_record(&log_path, &record);
    code
}

fn load_data(ctx: &mut Ctx, dir: &Path) -> Result<(nn::Dataset, nn::Dataset), CliError> {
    for f in [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS] {
        ctx.input(&dir.join(f));
    }
    Ok(load_dir(dir)?)
}

fn load_net(ctx: &mut Ctx, path: &Path) -> Result<(DenseNet, Architecture), CliError> {
    ctx.input(path);
    Ok(load_model(path)?)
}

fn load_weights(ctx: &mut Ctx, path: &Path) -> Result<ModelWeights, CliError> {
    ctx.input(path);
    Ok(store::load_weights(path)?)
}

/// Accepts either a tensor name or a layer name with an implied `.kernel`.
fn resolve_layer(weights: &ModelWeights, layer: &str) -> Result<String, CliError> {
    if weights.contains(layer) {
        return Ok(layer.to_string());
    }
    let kernel = format!("{layer}.kernel");
    if weights.contains(&kernel) {
        return Ok(kernel);
    }
    Err(CliError::new(exit::MISMATCH, format!("layer {layer:?} not found; available: {:?}", weights.names().collect::<Vec<_>>())))
}

fn gen_data(ctx: &mut Ctx, a: &GenDataArgs) -> Result<i32, CliError> {
    let per_class = pick(a.per_class, ctx.file.per_class, nn::desk_blobs(0).per_class);
    let spec = nn::BlobSpec { per_class, ..nn::desk_blobs(ctx.seed) };
    ctx.config = json!({ "classes": spec.classes, "dim": spec.dim, "per_class": per_class,
        "spread": spec.spread, "latent": spec.latent, "out": a.out });
    let data = nn::gaussian_blobs(&spec)?;
    let (train, test) = nn::train_test_split(&data);
    save_dir(&a.out, &train, &test)?;
    for f in [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS] {
        ctx.outputs.push(a.out.join(f).display().to_string());
    }
    println!("wrote {} training and {} test samples to {}", train.len(), test.len(), a.out.display());
    Ok(exit::OK)
}

fn train(ctx: &mut Ctx, a: &TrainArgs) -> Result<i32, CliError> {
    let f = ctx.file.clone();
    let base = nn::desk_train_config(ctx.seed);
    let hidden = pick(a.hidden.clone(), f.hidden, nn::DESK_SIZES[1..nn::DESK_SIZES.len() - 1].to_vec());
    let optimizer = match pick(a.optimizer, f.optimizer, OptimizerArg::Adam) {
        OptimizerArg::Adam => Optimizer::adam(),
        OptimizerArg::Sgd => Optimizer::sgd(),
    };
    let cfg = TrainConfig {
        optimizer,
        learning_rate: pick(a.lr, f.learning_rate, base.learning_rate),
        batch_size: pick(a.batch, f.batch_size, base.batch_size),
        epochs: pick(a.epochs, f.train_epochs, base.epochs),
        seed: ctx.seed,
    };
    ctx.config = json!({ "hidden": hidden, "train": cfg, "data": a.data, "out": a.out });
    cfg.validate()?;
    let (train_set, test_set) = load_data(ctx, &a.data)?;
    let mut sizes = vec![train_set.dim()];
    sizes.extend(&hidden);
    sizes.push(train_set.classes);
    let net = DenseNet::new(&sizes, ctx.seed)?;
    let out = nn::train(&net, &train_set, &cfg)?;
    let metrics = evaluate(&out.net, &test_set)?;

    let mut losses = String::from("epoch,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        let _ = writeln!(losses, "{},{l:e}", i + 1);
    }
    ctx.save_model(&out.net, &cfg, &a.out)?;
    ctx.write(&a.out.with_extension("metrics.txt"), metrics.to_text().as_bytes())?;
    ctx.write(&a.out.with_extension("metrics.csv"), metrics.to_csv().as_bytes())?;
    ctx.write(&a.out.with_extension("loss.csv"), losses.as_bytes())?;
    println!("test accuracy {:.6}", metrics.accuracy);
    Ok(exit::OK)
}

fn embed(ctx: &mut Ctx, a: &EmbedArgs) -> Result<i32, CliError> {
    let f = ctx.file.clone();
    let layer = pick(a.layer.clone(), f.layer, nn::DESK_LAYER.to_string());
    let (r, x0, eps) = (
        pick(a.r, f.r, DEFAULT_R),
        pick(a.x0, f.x0, DEFAULT_X0),
        pick(a.epsilon, f.epsilon, DEFAULT_EPSILON),
    );
    let epochs = pick(a.epochs, f.fine_tune_epochs, nn::DESK_FINE_TUNE_EPOCHS);
    ctx.config = json!({ "layer": layer, "r": r, "x0": x0, "epsilon": eps, "model": a.model,
        "manifest": a.manifest, "out": a.out, "fine_tune_data": a.fine_tune_data,
        "fine_tune_epochs": a.fine_tune_data.as_ref().map(|_| epochs) });
    let params = validate_raw(r, x0, eps, 0)?;
    if a.fine_tune_data.is_some() && epochs == 0 {
        return Err(CliError::usage("fine-tune epochs must be at least 1"));
    }
    let (net, arch) = load_net(ctx, &a.model)?;
    let reference = net.to_weights();
    let layer = resolve_layer(&reference, &layer)?;
    let model_id = a.model.file_stem().map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned());
    let (marked, manifest) = watermark::embed(&reference, &layer, &params, &model_id, created_at())?;
    let marked_net = DenseNet::from_weights(&arch, &marked)?;

    let tuned = match &a.fine_tune_data {
        Some(dir) => {
            let (train_set, _) = load_data(ctx, dir)?;
            let base = TrainConfig { seed: ctx.seed, ..arch.train.clone() };
            Some(nn::fine_tune(&marked_net, &train_set, &base, epochs)?.net)
        }
        None => None,
    };
    match &tuned {
        Some(t) => {
            ctx.save_model(&marked_net, &arch.train, &a.out.with_extension("embedded.cwmt"))?;
            ctx.save_model(t, &arch.train, &a.out)?;
        }
        None => ctx.save_model(&marked_net, &arch.train, &a.out)?,
    }
    ctx.write(&a.manifest, manifest.to_json().as_bytes())?;
    println!("embedded {} values into {layer}", manifest.params.length);
    Ok(exit::OK)
}

fn attack(ctx: &mut Ctx, a: &AttackArgs) -> Result<i32, CliError> {
    let epochs = pick(a.epochs, ctx.file.attack_epochs, nn::DESK_ATTACK_EPOCHS);
    ctx.config = json!({ "epochs": epochs, "model": a.model, "data": a.data, "out": a.out });
    if epochs == 0 {
        return Err(CliError::usage("attack epochs must be at least 1"));
    }
    let (net, arch) = load_net(ctx, &a.model)?;
    let (_, test) = load_data(ctx, &a.data)?;
    let (tune_half, eval_half) = test.halves();
    let before = evaluate(&net, &eval_half)?;
    let base = TrainConfig { seed: ctx.seed, ..arch.train.clone() };
    let attacked = nn::fine_tune(&net, &tune_half, &base, epochs)?.net;
    let after = evaluate(&attacked, &eval_half)?;

    let report = format!(
        "stage,accuracy,samples\nbefore,{:?},{}\nafter,{:?},{}\n",
        before.accuracy, before.samples, after.accuracy, after.samples
    );
    ctx.save_model(&attacked, &arch.train, &a.out)?;
    ctx.write(&a.out.with_extension("attack.csv"), report.as_bytes())?;
    println!(
        "accuracy before {:.6} after {:.6} on {} held-back samples",
        before.accuracy, after.accuracy, after.samples
    );
    Ok(exit::OK)
}

fn verify(ctx: &mut Ctx, a: &VerifyArgs) -> Result<i32, CliError> {
    let f = ctx.file.clone();
    let defaults = GaConfig::default();
    let config = GaConfig {
        population: pick(a.pop, f.pop, defaults.population),
        generations: pick(a.gens, f.gens, defaults.generations),
        target_len: Some(pick(a.target_len, f.target_len, ga::DEFAULT_TARGET_LEN)),
        seed: ctx.seed,
        ..defaults
    };
    let tol = Tolerances::default();
    ctx.config = json!({ "ga": config, "tolerances": tol, "suspect": a.suspect,
        "reference": a.reference, "manifest": a.manifest, "out": a.out });
    config.validate()?;
    ctx.input(&a.manifest);
    let manifest = store::load_manifest(&a.manifest).map_err(|e| io_err(&a.manifest, e))?;
    let suspect = load_weights(ctx, &a.suspect)?;
    let reference = load_weights(ctx, &a.reference)?;
    let warnings = manifest
        .check_against(&reference)
        .map_err(|e| CliError::new(exit::MISMATCH, e.to_string()))?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if !suspect.contains(&manifest.layer) {
        return Err(CliError::new(
            exit::MISMATCH,
            format!("manifest layer {:?} is absent from the suspect model", manifest.layer),
        ));
    }
    let delta = watermark::extract(&suspect, &reference, &manifest.layer)?;
    let report = ga::verify(&delta.values, &manifest.params, &config, &tol)?;
    let own = report.ownership.as_ref().expect("verify sets ownership");

    let result = format!(
        "r,x0,epsilon,fitness,mse,diff_r,diff_x0,diff_epsilon,decision\n{:?},{:?},{:?},{:e},{:e},{:?},{:?},{:?},{}\n",
        report.best.r,
        report.best.x0,
        report.best.epsilon,
        report.fitness,
        report.mse,
        own.diffs[0],
        own.diffs[1],
        own.diffs[2],
        own.decision.as_str()
    );
    let mut trace = Vec::new();
    report.write_trace_csv(&mut trace).map_err(|e| io_err(&a.out, e))?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    ctx.write(&a.out.join("report.txt"), report.to_text().as_bytes())?;
    ctx.write(&a.out.join("result.csv"), result.as_bytes())?;
    ctx.write(&a.out.join("trace.csv"), &trace)?;
    println!(
        "recovered r={:.6} x0={:.6} epsilon={:.6}; diffs {:.6} {:.6} {:.6}; {}",
        report.best.r,
        report.best.x0,
        report.best.epsilon,
        own.diffs[0],
        own.diffs[1],
        own.diffs[2],
        own.decision.as_str()
    );
    Ok(match own.decision {
        Decision::Confirmed => exit::OK,
        Decision::Rejected => exit::REJECTED,
        Decision::Inconclusive => exit::INCONCLUSIVE,
    })
}

/// File stems, with an index prefix when two models share one.
fn labels_for(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| p.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned()))
        .collect();
    stems
        .iter()
        .enumerate()
        .map(|(i, s)| if stems.iter().filter(|t| *t == s).count() > 1 { format!("{i}-{s}") } else { s.clone() })
        .collect()
}

fn density(ctx: &mut Ctx, a: &DensityArgs) -> Result<i32, CliError> {
    let layer = pick(a.layer.clone(), ctx.file.layer.clone(), nn::DESK_LAYER.to_string());
    let bins = pick(a.bins, ctx.file.bins, DEFAULT_BINS);
    ctx.config = json!({ "layer": layer, "bins": bins, "models": a.models, "out": a.out });
    if bins < 2 {
        return Err(CliError::usage(format!("need at least 2 bins, got {bins}")));
    }
    let labels = labels_for(&a.models);
    let mut values = Vec::with_capacity(a.models.len());
    for (path, label) in a.models.iter().zip(&labels) {
        let w = load_weights(ctx, path)?;
        let name = resolve_layer(&w, &layer)?;
        let v = w.get(&name)?.values().to_vec();
        if v.iter().all(|&x| x == v[0]) {
            return Err(CliError::new(exit::MISMATCH, format!("{label}: layer {name} spans a zero range")));
        }
        values.push(v);
    }
    let pairs: Vec<(&str, &[f64])> = labels.iter().map(String::as_str).zip(values.iter().map(Vec::as_slice)).collect();
    let tables = watermark::shared_histograms(&pairs, bins)?;
    let mut l1 = String::from("model,l1_to_first\n");
    for t in &tables {
        let _ = writeln!(l1, "{},{:e}", t.label, watermark::density_l1(&tables[0], t)?);
    }
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    for t in &tables {
        let mut buf = Vec::new();
        t.write_csv(&mut buf).map_err(|e| io_err(&a.out, e))?;
        ctx.write(&a.out.join(format!("{}.csv", t.label)), &buf)?;
    }
    ctx.write(&a.out.join("l1.csv"), l1.as_bytes())?;
    println!("wrote {} density tables with {bins} bins", tables.len());
    Ok(exit::OK)
}

fn detect_cmd(ctx: &mut Ctx, a: &DetectArgs) -> Result<i32, CliError> {
    let f = ctx.file.clone();
    let layer = pick(a.layer.clone(), f.layer, nn::DESK_LAYER.to_string());
    let threshold = pick(a.threshold, f.threshold, DEFAULT_THRESHOLD);
    let lr_cfg = TrainConfig {
        optimizer: Optimizer::adam(),
        learning_rate: 0.01,
        batch_size: 64,
        epochs: pick(a.epochs, f.detect_epochs, 200),
        seed: ctx.seed,
    };
    ctx.config = json!({ "layer": layer, "threshold": threshold, "classifier": lr_cfg, "l2": DEFAULT_L2,
        "original": a.original, "watermarked": a.watermarked, "fine_tuned": a.fine_tuned,
        "data": a.data, "out": a.out });
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CliError::usage(format!("threshold {threshold} must lie strictly between 0 and 1")));
    }
    lr_cfg.validate()?;
    let mut nets = Vec::new();
    for p in [&a.original, &a.watermarked, &a.fine_tuned] {
        nets.push(load_net(ctx, p)?.0);
    }
    let (_, test) = load_data(ctx, &a.data)?;
    let (fit_half, eval_half) = test.halves();

    let mut counts = String::from("model,split,kept,discarded\n");
    let mut collect = |inputs: &nn::Dataset, split: &str| -> Result<ActivationFeatureSet, CliError> {
        let mut parts = Vec::new();
        for (i, net) in nets.iter().enumerate() {
            let set = detect::collect_features(net, &inputs.features, &layer, threshold, i).map_err(|e| {
                let mut err = CliError::from(e);
                err.message = format!("{} model, {split} half: {}", SOURCES[i], err.message);
                err
            })?;
            let _ = writeln!(counts, "{},{split},{},{}", SOURCES[i], set.kept, set.discarded);
            parts.push(set);
        }
        Ok(ActivationFeatureSet::concat(&parts)?.balanced())
    };
    let fit = collect(&fit_half, "fit")?;
    let eval = collect(&eval_half, "eval")?;
    let model = detect::train_logreg(&fit, &lr_cfg, DEFAULT_L2)?;
    let (pred, _) = detect::classify(&model, &eval.features)?;
    let cm = detect::confusion(&eval.labels, &pred, SOURCES.len())?;

    let mut summary = cm.summary(&SOURCES);
    let _ = writeln!(summary, "threshold {threshold}");
    let _ = writeln!(summary, "balanced fit rows {}, eval rows {}", fit.len(), eval.len());
    summary.push_str(&counts);
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    ctx.write(&a.out.join("confusion.csv"), cm.to_csv().as_bytes())?;
    ctx.write(&a.out.join("counts.csv"), counts.as_bytes())?;
    ctx.write(&a.out.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(exit::OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_exits_zero_and_bad_usage_one() {
        assert_eq!(run(["chaosmark", "--help"]), exit::OK);
        assert_eq!(run(["chaosmark", "bogus"]), exit::USAGE);
        assert_eq!(run(["chaosmark", "detect", "--original", "a", "--watermarked", "b", "--data", "d", "--out", "o"]), exit::USAGE);
    }

    #[test]
    fn precedence() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None::<i32>, None, 3), 3);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(toml::from_str::<FileConfig>("seed = 4\nr = 3.8").is_ok());
        assert!(toml::from_str::<FileConfig>("colour = 1").is_err());
    }

    #[test]
    fn duplicate_labels_are_disambiguated() {
        let l = labels_for(&[PathBuf::from("a/m.cwmt"), PathBuf::from("b/m.cwmt"), PathBuf::from("x.cwmt")]);
        assert_eq!(l, vec!["0-m", "1-m", "x"]);
    }
}
