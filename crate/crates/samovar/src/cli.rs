//! Command-line surface tying the library together: synthetic dataset
//! emission, training, evaluation, and interpretation exports.
//!
//! Every command resolves its configuration as defaults → JSON config file →
//! explicit flags, then re-emits the resolved record into the output
//! directory, so any run is reproducible from its artifacts alone. Exit
//! codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::attn_stack::{default_heads, model_dim_for, ModelError, Variant};
use crate::autodiff::{Scalar, TensorError};
use crate::checkpoint::{self, CheckpointError};
use crate::ingest::{self, IngestError, SplitSpec, StandardizedSplits};
use crate::interpret::{
    enumerate_paths, lintrans_attention, pruning_stats, HeatmapAnalysis, InfluencePath,
    InterpretError,
};
use crate::model::{Model, ModelConfig};
use crate::params::ParamError;
use crate::synth_bench::{make_example, Split, SynthConfig};
use crate::train_eval::{
    evaluate, repeat_last_baseline, synth_val_count, train, DataSource, Precision, TrainConfig,
    TrainError,
};
use crate::var_math::VarError;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SAMOVAR_OUT";

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

impl From<ParamError> for CliError {
    fn from(e: ParamError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Conditioning { .. } => CliError::Numeric(e.to_string()),
            ModelError::Tensor(t) => t.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<VarError> for CliError {
    fn from(e: VarError) -> Self {
        match e {
            VarError::Invalid(_) => CliError::Config(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::AllSkipped { .. } => {
                CliError::Numeric(e.to_string())
            }
            TrainError::Model(m) => m.into(),
            TrainError::Ingest(i) => i.into(),
            TrainError::Synth(v) => v.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) | CheckpointError::Corrupt(_) => CliError::Data(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<InterpretError> for CliError {
    fn from(e: InterpretError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Run configurations (serialized into the output directory)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthRun {
    pub synth: SynthConfig,
}

/// Everything a training run needs; `synth` drives generation when `data`
/// is absent, otherwise `data` names a CSV split 0.7/0.1/0.2.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub data: Option<PathBuf>,
    /// Window stride for CSV sources.
    pub stride: usize,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            data: None,
            stride: 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "samovar",
    version,
    about = "Train, evaluate, and dissect dynamic-VAR linear-attention forecasters"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic vector-autoregression datasets (CSV per split plus
    /// a JSON sidecar of the generating processes).
    Synth(SynthArgs),
    /// Train a forecaster; writes the best checkpoint, a metrics log, loss
    /// curves, and the resolved configuration.
    Train(TrainArgs),
    /// Score a checkpoint (optionally against a repeat-last baseline).
    Eval(EvalArgs),
    /// Export contribution heatmaps, influence paths, and pruning statistics
    /// for one window of data.
    Interpret(InterpretArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON configuration; flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $SAMOVAR_OUT or ./samovar_out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub input_len: Option<usize>,
    #[arg(long)]
    pub pred_len: Option<usize>,
    /// Examples per split.
    #[arg(long)]
    pub examples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON configuration; flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $SAMOVAR_OUT or ./samovar_out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// samovar | fixedvar | lintrans. Re-derives width/heads defaults unless
    /// --model-dim/--heads are also given.
    #[arg(long)]
    pub variant: Option<String>,
    /// Channel count; re-derives width/heads defaults like --variant.
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub input_len: Option<usize>,
    #[arg(long)]
    pub pred_len: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Ablation: learn a key projection per layer instead of identity keys.
    #[arg(long)]
    pub with_wk: bool,
    /// Train on sliding windows of this CSV instead of synthetic data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Synthetic examples per epoch.
    #[arg(long)]
    pub examples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Warmup epochs (must end before --epochs).
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub lr_peak: Option<f64>,
    /// f32 | f64.
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training-run configuration (default: config.resolved.json next to the
    /// checkpoint).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Score this CSV's val/test splits instead of the configured source.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (default: $SAMOVAR_OUT or ./samovar_out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also score a repeat-last baseline on the same windows.
    #[arg(long)]
    pub repeat_last: bool,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InterpretArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training-run configuration (default: config.resolved.json next to the
    /// checkpoint).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Take the window from this CSV's val split instead of the configured
    /// source.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation window (or synthetic example) index to dissect.
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    /// Output directory (default: $SAMOVAR_OUT or ./samovar_out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Restrict reconstruction to source tokens within this lag.
    #[arg(long)]
    pub band: Option<usize>,
    /// Sink token for path enumeration (needs --source too).
    #[arg(long)]
    pub sink: Option<usize>,
    /// Source token for path enumeration.
    #[arg(long)]
    pub source: Option<usize>,
    /// Maximum path depth (default: all layers).
    #[arg(long)]
    pub depth: Option<usize>,
    /// Channel stream for path enumeration.
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Parse the process arguments, run, and return the process exit code.
pub fn run_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Interpret(a) => cmd_interpret(a),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn resolve_out(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("samovar_out"))
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn parse_variant(s: &str) -> Result<Variant> {
    match s {
        "samovar" => Ok(Variant::Samovar),
        "fixedvar" => Ok(Variant::FixedVar),
        "lintrans" => Ok(Variant::LinTrans),
        other => Err(CliError::Config(format!(
            "unknown variant {other:?} (expected samovar, fixedvar, or lintrans)"
        ))),
    }
}

fn parse_precision(s: &str) -> Result<Precision> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(CliError::Config(format!("unknown precision {other:?} (expected f32 or f64)"))),
    }
}

/// Defaults → config file → flags, with width/heads re-derived when the
/// variant or channel count changes and no explicit override pins them.
fn resolve_train_run(args: &TrainArgs) -> Result<TrainRun> {
    let mut run: TrainRun = match &args.config {
        Some(p) => load_json(p)?,
        None => TrainRun::default(),
    };
    let mut rederive = false;
    if let Some(c) = args.channels {
        run.model.channels = c;
        rederive = true;
    }
    if let Some(v) = &args.variant {
        run.model.stack.variant = parse_variant(v)?;
        rederive = true;
    }
    if rederive {
        run.model.stack.model_dim = model_dim_for(run.model.channels);
        run.model.stack.heads = default_heads(run.model.stack.variant, run.model.stack.model_dim);
    }
    if let Some(v) = args.input_len {
        run.model.input_len = v;
    }
    if let Some(v) = args.pred_len {
        run.model.pred_len = v;
    }
    if let Some(v) = args.layers {
        run.model.stack.layers = v;
    }
    if let Some(v) = args.model_dim {
        run.model.stack.model_dim = v;
    }
    if let Some(v) = args.heads {
        run.model.stack.heads = v;
    }
    if let Some(v) = args.dropout {
        run.model.stack.dropout = v;
    }
    if args.with_wk {
        run.model.stack.use_wk = true;
    }
    if let Some(p) = &args.data {
        run.data = Some(p.clone());
    }
    if let Some(v) = args.stride {
        run.stride = v;
    }
    if let Some(v) = args.examples {
        run.synth.examples_per_epoch = v;
    }
    if let Some(v) = args.seed {
        run.train.seed = v;
    }
    if let Some(v) = args.epochs {
        run.train.max_epochs = v;
    }
    if let Some(v) = args.batch_size {
        run.train.batch_size = v;
    }
    if let Some(v) = args.patience {
        run.train.patience = v;
    }
    if let Some(v) = args.warmup {
        run.train.warmup_epochs = v;
    }
    if let Some(v) = args.lr_peak {
        run.train.lr_peak = v;
    }
    if let Some(p) = &args.precision {
        run.train.precision = parse_precision(p)?;
    }
    // the synthetic source must feed exactly what the model consumes
    if run.data.is_none() {
        run.synth.channels = run.model.channels;
        run.synth.input_len = run.model.input_len;
        run.synth.pred_len = run.model.pred_len;
    }
    run.model.validate()?;
    Ok(run)
}

/// Load the run record written next to a checkpoint at training time.
fn sibling_config(checkpoint: &Path, explicit: &Option<PathBuf>) -> Result<TrainRun> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("config.resolved.json"),
    };
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "no run configuration at {}; pass --config explicitly",
            path.display()
        )));
    }
    load_json(&path)
}

fn load_checkpoint_named(path: &Path) -> Result<crate::params::ParamVault<f32>> {
    checkpoint::load(path).map_err(|e| match e {
        CheckpointError::Io(io) => {
            CliError::Data(format!("cannot read checkpoint {}: {io}", path.display()))
        }
        other => other.into(),
    })
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

fn restore_model(run: &TrainRun, ckpt: &Path) -> Result<AnyModel> {
    let loaded = load_checkpoint_named(ckpt)?;
    Ok(match run.train.precision {
        Precision::F32 => {
            let mut m = Model::<f32>::new(run.model.clone(), run.train.seed)?;
            checkpoint::apply(&loaded, &mut m.vault)?;
            AnyModel::F32(m)
        }
        Precision::F64 => {
            let mut m = Model::<f64>::new(run.model.clone(), run.train.seed)?;
            checkpoint::apply(&loaded, &mut m.vault)?;
            AnyModel::F64(m)
        }
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(f))
}

fn finish_csv(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush()
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut run: SynthRun = match &args.config {
        Some(p) => load_json(p)?,
        None => SynthRun::default(),
    };
    if let Some(v) = args.channels {
        run.synth.channels = v;
    }
    if let Some(v) = args.input_len {
        run.synth.input_len = v;
    }
    if let Some(v) = args.pred_len {
        run.synth.pred_len = v;
    }
    if let Some(v) = args.examples {
        run.synth.examples_per_epoch = v;
    }
    if let Some(v) = args.seed {
        run.synth.seed = v;
    }
    // surface configuration errors before touching the filesystem
    make_example(&run.synth, Split::Train, 0)?;

    let out = resolve_out(&args.out);
    fs::create_dir_all(&out)?;
    save_json(&out.join("synth.resolved.json"), &run)?;

    let mut sidecar = Vec::new();
    for (split, label) in [(Split::Train, "train"), (Split::Val, "val")] {
        let path = out.join(format!("{label}.csv"));
        let mut w = csv_writer(&path)?;
        let mut header = vec!["example".to_string(), "step".to_string(), "kind".to_string()];
        for c in 0..run.synth.channels {
            header.push(format!("ch{c}"));
        }
        w.write_record(&header).map_err(|e| CliError::Data(e.to_string()))?;
        for i in 0..run.synth.examples_per_epoch {
            let ex = make_example(&run.synth, split, i as u64)?;
            let c = run.synth.channels;
            for (kind, series, len) in
                [("input", &ex.input, run.synth.input_len), ("target", &ex.target, run.synth.pred_len)]
            {
                for t in 0..len {
                    let mut rec = vec![i.to_string(), t.to_string(), kind.to_string()];
                    for ch in 0..c {
                        rec.push(format!("{}", series[t * c + ch]));
                    }
                    w.write_record(&rec).map_err(|e| CliError::Data(e.to_string()))?;
                }
            }
            sidecar.push(json!({
                "split": label,
                "example": i,
                "seed": ex.seed,
                "process": ex.process,
            }));
        }
        finish_csv(w, &path)?;
        println!("wrote {} ({} examples)", path.display(), run.synth.examples_per_epoch);
    }
    save_json(&out.join("processes.json"), &sidecar)?;
    println!("wrote {}", out.join("processes.json").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let run = resolve_train_run(args)?;
    let out = resolve_out(&args.out);
    fs::create_dir_all(&out)?;
    save_json(&out.join("config.resolved.json"), &run)?;
    match run.train.precision {
        Precision::F32 => train_generic::<f32>(&run, &out),
        Precision::F64 => train_generic::<f64>(&run, &out),
    }
}

fn train_generic<S: Scalar>(run: &TrainRun, out: &Path) -> Result<()> {
    let mut model = Model::<S>::new(run.model.clone(), run.train.seed)?;
    let mut splits: Option<StandardizedSplits> = None;
    let source = match &run.data {
        Some(path) => {
            let ds = ingest::load_csv(path)?;
            if ds.channels != run.model.channels {
                return Err(CliError::Config(format!(
                    "{} has {} channels but the model expects {}",
                    path.display(),
                    ds.channels,
                    run.model.channels
                )));
            }
            splits = Some(ingest::split_and_standardize(&ds, &SplitSpec::default())?);
            let s = splits.as_ref().unwrap();
            DataSource::Windows { train: &s.train, val: &s.val, stride: run.stride }
        }
        None => DataSource::Synthetic(&run.synth),
    };
    let outcome = train(&mut model, &source, &run.train)?;
    drop(source);
    drop(splits);

    let metrics_path = out.join("metrics.jsonl");
    let mut jsonl = fs::File::create(&metrics_path)?;
    for rec in &outcome.log {
        let line = serde_json::to_string(rec)
            .map_err(|e| CliError::Config(format!("serializing metrics: {e}")))?;
        writeln!(jsonl, "{line}")?;
    }

    let curve_path = out.join("loss_curve.csv");
    let mut w = csv_writer(&curve_path)?;
    w.write_record(["epoch", "train_mse", "val_mse", "val_mae", "lr", "wall_seconds"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for r in &outcome.log {
        w.write_record([
            r.epoch.to_string(),
            format!("{}", r.train_mse),
            format!("{}", r.val_mse),
            format!("{}", r.val_mae),
            format!("{}", r.lr),
            format!("{}", r.wall_seconds),
        ])
        .map_err(|e| CliError::Data(e.to_string()))?;
    }
    finish_csv(w, &curve_path)?;

    // space-separated column file for gnuplot (`plot "loss_curve.dat" u 1:2`)
    let mut dat = String::from("# epoch train_mse val_mse val_mae lr\n");
    for r in &outcome.log {
        dat.push_str(&format!(
            "{} {} {} {} {}\n",
            r.epoch, r.train_mse, r.val_mse, r.val_mae, r.lr
        ));
    }
    fs::write(out.join("loss_curve.dat"), dat)?;

    let ckpt_path = out.join("model.smvw");
    checkpoint::save(&ckpt_path, &model.vault)?;
    save_json(
        &out.join("summary.json"),
        &json!({
            "best_epoch": outcome.best_epoch,
            "best_val_mse": outcome.best_val_mse,
            "epochs_run": outcome.log.len(),
            "skipped_steps": outcome.skipped_steps,
            "max_grad_norm": outcome.max_grad_norm,
        }),
    )?;
    println!(
        "trained {} epochs; best val mse {:.6e} at epoch {}; wrote {}",
        outcome.log.len(),
        outcome.best_val_mse,
        outcome.best_epoch,
        ckpt_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut run = sibling_config(&args.checkpoint, &args.config)?;
    if let Some(p) = &args.data {
        run.data = Some(p.clone());
    }
    if let Some(v) = args.stride {
        run.stride = v;
    }
    let batch = args.batch_size.unwrap_or(run.train.batch_size);
    let model = restore_model(&run, &args.checkpoint)?;
    let out = resolve_out(&args.out);
    fs::create_dir_all(&out)?;
    save_json(
        &out.join("eval.resolved.json"),
        &json!({
            "checkpoint": args.checkpoint,
            "run": run,
            "batch_size": batch,
            "repeat_last": args.repeat_last,
        }),
    )?;

    let mut report = serde_json::Map::new();
    let mut score_split = |label: &str, windows: &[(&[f64], &[f64])]| -> Result<()> {
        let (mse, mae) = match &model {
            AnyModel::F32(m) => evaluate(m, windows, batch)?,
            AnyModel::F64(m) => evaluate(m, windows, batch)?,
        };
        report.insert(label.to_string(), json!({ "mse": mse, "mae": mae }));
        println!("{label}: mse {mse:.6e} mae {mae:.6e} ({} windows)", windows.len());
        if args.repeat_last {
            let (bmse, bmae) =
                repeat_last_baseline(windows, run.model.channels, run.model.pred_len)?;
            report.insert(format!("repeat_last_{label}"), json!({ "mse": bmse, "mae": bmae }));
            println!("repeat-last {label}: mse {bmse:.6e} mae {bmae:.6e}");
        }
        Ok(())
    };

    match &run.data {
        Some(path) => {
            let ds = ingest::load_csv(path)?;
            if ds.channels != run.model.channels {
                return Err(CliError::Config(format!(
                    "{} has {} channels but the model expects {}",
                    path.display(),
                    ds.channels,
                    run.model.channels
                )));
            }
            let splits = ingest::split_and_standardize(&ds, &SplitSpec::default())?;
            for (label, view) in [("val", &splits.val), ("test", &splits.test)] {
                let windows: Vec<(&[f64], &[f64])> =
                    ingest::window_sampler(view, run.model.input_len, run.model.pred_len, run.stride)?
                        .collect();
                score_split(label, &windows)?;
            }
        }
        None => {
            let count = synth_val_count(run.synth.examples_per_epoch);
            let owned: Vec<(Vec<f64>, Vec<f64>)> = (0..count)
                .map(|i| {
                    make_example(&run.synth, Split::Val, i as u64).map(|e| (e.input, e.target))
                })
                .collect::<std::result::Result<_, _>>()?;
            let windows: Vec<(&[f64], &[f64])> =
                owned.iter().map(|(i, t)| (i.as_slice(), t.as_slice())).collect();
            score_split("val", &windows)?;
        }
    }
    save_json(&out.join("eval_metrics.json"), &serde_json::Value::Object(report))?;
    println!("wrote {}", out.join("eval_metrics.json").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// interpret
// ---------------------------------------------------------------------------

fn cmd_interpret(args: &InterpretArgs) -> Result<()> {
    let mut run = sibling_config(&args.checkpoint, &args.config)?;
    if let Some(p) = &args.data {
        run.data = Some(p.clone());
    }
    let model = restore_model(&run, &args.checkpoint)?;
    let out = resolve_out(&args.out);
    fs::create_dir_all(&out)?;
    save_json(
        &out.join("interpret.resolved.json"),
        &json!({
            "checkpoint": args.checkpoint,
            "run": run,
            "window": args.window,
            "band": args.band,
            "sink": args.sink,
            "source": args.source,
            "depth": args.depth,
            "channel": args.channel,
        }),
    )?;

    let input = fetch_window(&run, args.window)?;
    match &model {
        AnyModel::F32(m) => interpret_generic(m, args, &input, &out),
        AnyModel::F64(m) => interpret_generic(m, args, &input, &out),
    }
}

/// One `input_len × C` window from the run's validation data.
fn fetch_window(run: &TrainRun, index: usize) -> Result<Vec<f64>> {
    match &run.data {
        Some(path) => {
            let ds = ingest::load_csv(path)?;
            if ds.channels != run.model.channels {
                return Err(CliError::Config(format!(
                    "{} has {} channels but the model expects {}",
                    path.display(),
                    ds.channels,
                    run.model.channels
                )));
            }
            let splits = ingest::split_and_standardize(&ds, &SplitSpec::default())?;
            let windows: Vec<(&[f64], &[f64])> = ingest::window_sampler(
                &splits.val,
                run.model.input_len,
                run.model.pred_len,
                run.stride,
            )?
            .collect();
            let w = windows.get(index).ok_or_else(|| {
                CliError::Config(format!(
                    "window {index} out of range: the val split holds {} windows",
                    windows.len()
                ))
            })?;
            Ok(w.0.to_vec())
        }
        None => {
            let count = synth_val_count(run.synth.examples_per_epoch);
            if index >= count {
                return Err(CliError::Config(format!(
                    "window {index} out of range: the synthetic val split holds {count} examples"
                )));
            }
            Ok(make_example(&run.synth, Split::Val, index as u64)?.input)
        }
    }
}

fn interpret_generic<S: Scalar>(
    model: &Model<S>,
    args: &InterpretArgs,
    input: &[f64],
    out: &Path,
) -> Result<()> {
    let cfg = &model.cfg;
    let stack = &cfg.stack;
    let channels = cfg.channels;
    let t_len = 2 * cfg.n_patches();
    let x1 = model.stack_input(input)?;

    let want_paths = match (args.sink, args.source) {
        (Some(_), None) | (None, Some(_)) => {
            return Err(CliError::Config("path enumeration needs both --sink and --source".into()))
        }
        (Some(s), Some(j)) => Some((s, j)),
        (None, None) => None,
    };

    match stack.variant {
        Variant::LinTrans => {
            if want_paths.is_some() {
                return Err(CliError::Config(
                    "influence paths exist only for the dynamic-VAR variant; \
                     this checkpoint gets an averaged attention map instead"
                        .into(),
                ));
            }
            let att = lintrans_attention(stack, &model.vault, &x1, channels, t_len)?;
            let path = out.join("attention.csv");
            let mut w = csv_writer(&path)?;
            w.write_record(["stream", "t", "j", "weight"])
                .map_err(|e| CliError::Data(e.to_string()))?;
            for c in 0..channels {
                for t in 0..t_len {
                    for j in 0..t_len {
                        w.write_record([
                            c.to_string(),
                            t.to_string(),
                            j.to_string(),
                            format!("{}", att[(c * t_len + t) * t_len + j]),
                        ])
                        .map_err(|e| CliError::Data(e.to_string()))?;
                    }
                }
            }
            finish_csv(w, &path)?;
            println!("wrote {} (averaged |attention|)", path.display());
        }
        Variant::FixedVar => {
            return Err(CliError::Config(
                "the fixed-table variant has no per-window weights to dissect; \
                 interpret a samovar or lintrans checkpoint"
                    .into(),
            ));
        }
        Variant::Samovar => {
            let analysis =
                HeatmapAnalysis::new(stack, &model.vault, &x1, channels, t_len, args.band)?;
            let hm = analysis.heatmap()?;
            let path = out.join("heatmap_tokens.csv");
            let mut w = csv_writer(&path)?;
            w.write_record(["t", "j", "out_channel", "in_channel", "weight"])
                .map_err(|e| CliError::Data(e.to_string()))?;
            let c = hm.channels;
            for t in 0..hm.t_len {
                for j in 0..hm.t_len {
                    for co in 0..c {
                        for ci in 0..c {
                            w.write_record([
                                t.to_string(),
                                j.to_string(),
                                co.to_string(),
                                ci.to_string(),
                                format!("{}", hm.weights[((t * hm.t_len + j) * c + co) * c + ci]),
                            ])
                            .map_err(|e| CliError::Data(e.to_string()))?;
                        }
                    }
                }
            }
            finish_csv(w, &path)?;
            println!("wrote {}", path.display());

            let tm = analysis.time_map()?;
            let path = out.join("heatmap_time.csv");
            let mut w = csv_writer(&path)?;
            w.write_record(["t", "j", "out_channel", "in_channel", "weight"])
                .map_err(|e| CliError::Data(e.to_string()))?;
            for t in 0..tm.steps {
                for j in 0..tm.steps {
                    for co in 0..c {
                        for ci in 0..c {
                            w.write_record([
                                t.to_string(),
                                j.to_string(),
                                co.to_string(),
                                ci.to_string(),
                                format!("{}", tm.weights[((t * tm.steps + j) * c + co) * c + ci]),
                            ])
                            .map_err(|e| CliError::Data(e.to_string()))?;
                        }
                    }
                }
            }
            finish_csv(w, &path)?;
            println!("wrote {}", path.display());

            let stats: Vec<_> = analysis.var_weights().iter().map(pruning_stats).collect();
            save_json(&out.join("pruning.json"), &stats)?;
            println!("wrote {}", out.join("pruning.json").display());

            if let Some((sink, source)) = want_paths {
                if args.channel >= channels {
                    return Err(CliError::Config(format!(
                        "channel {} out of range (model has {channels})",
                        args.channel
                    )));
                }
                let d = stack.model_dim;
                let stream = &x1[args.channel * t_len * d..(args.channel + 1) * t_len * d];
                let depth = args.depth.unwrap_or(stack.layers);
                let paths =
                    enumerate_paths(stack, &model.vault, stream, t_len, sink, source, depth)?;
                let dot = paths_to_dot(&paths, sink, source, depth);
                let path = out.join("paths.dot");
                fs::write(&path, dot)?;
                println!("wrote {} ({} paths)", path.display(), paths.len());
            }
        }
    }
    Ok(())
}

/// Render influence chains as a layered DOT digraph, one chain per path,
/// grouped by head. Inner edges carry the chain's dot-product scalars.
fn paths_to_dot(paths: &[InfluencePath], sink: usize, source: usize, depth: usize) -> String {
    let mut s = String::new();
    s.push_str("digraph influence {\n");
    s.push_str("  rankdir=LR;\n  node [shape=box, fontsize=10];\n");
    s.push_str(&format!(
        "  label=\"{} paths from token {source} to token {sink} (depth <= {depth})\";\n",
        paths.len()
    ));
    let heads: std::collections::BTreeSet<usize> = paths.iter().map(|p| p.head).collect();
    for h in heads {
        s.push_str(&format!("  subgraph cluster_h{h} {{\n    label=\"head {h}\";\n"));
        for (pi, p) in paths.iter().enumerate().filter(|(_, p)| p.head == h) {
            let frob = p.matrix.iter().map(|v| v * v).sum::<f64>().sqrt();
            // chain source → i_{m−1} → … → i₁ → sink
            let mut chain = vec![p.source];
            chain.extend(p.intermediates.iter().rev().copied());
            chain.push(p.sink);
            s.push_str(&format!(
                "    // path {pi}: depth {}, |matrix|_F = {frob:.6e}\n",
                p.depth
            ));
            for (k, tok) in chain.iter().enumerate() {
                let role = if k == 0 {
                    "source".to_string()
                } else if k == chain.len() - 1 {
                    "sink".to_string()
                } else {
                    format!("layer {k}")
                };
                s.push_str(&format!("    p{pi}_{k} [label=\"t{tok}\\n{role}\"];\n"));
            }
            for k in 0..chain.len() - 1 {
                if k == 0 {
                    s.push_str(&format!("    p{pi}_0 -> p{pi}_1;\n"));
                } else {
                    s.push_str(&format!(
                        "    p{pi}_{k} -> p{pi}_{} [label=\"{:.4e}\"];\n",
                        k + 1,
                        p.scalars[k - 1]
                    ));
                }
            }
        }
        s.push_str("  }\n");
    }
    s.push_str("}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_overrides_rederive_width_and_heads() {
        let args = TrainArgs {
            config: None,
            out: None,
            variant: Some("lintrans".into()),
            channels: Some(7),
            input_len: None,
            pred_len: None,
            layers: Some(5),
            heads: None,
            model_dim: None,
            dropout: None,
            with_wk: false,
            data: None,
            stride: None,
            examples: Some(16),
            seed: Some(9),
            epochs: Some(3),
            batch_size: None,
            patience: None,
            warmup: None,
            lr_peak: None,
            precision: Some("f64".into()),
        };
        let run = resolve_train_run(&args).unwrap();
        assert!(matches!(run.model.stack.variant, Variant::LinTrans));
        assert_eq!(run.model.stack.model_dim, 64); // 32·⌊√7⌋
        assert_eq!(run.model.stack.heads, 8);
        assert_eq!(run.model.stack.layers, 5);
        assert_eq!(run.train.seed, 9);
        assert_eq!(run.train.precision, Precision::F64);
        // synthetic source mirrors the model dims
        assert_eq!(run.synth.channels, 7);
        assert_eq!(run.synth.examples_per_epoch, 16);
    }

    #[test]
    fn explicit_width_flags_win_over_rederivation() {
        let args = TrainArgs {
            config: None,
            out: None,
            variant: Some("samovar".into()),
            channels: Some(4),
            input_len: None,
            pred_len: None,
            layers: None,
            heads: Some(4),
            model_dim: Some(16),
            dropout: None,
            with_wk: true,
            data: None,
            stride: None,
            examples: None,
            seed: None,
            epochs: None,
            batch_size: None,
            patience: None,
            warmup: None,
            lr_peak: None,
            precision: None,
        };
        let run = resolve_train_run(&args).unwrap();
        assert_eq!(run.model.stack.model_dim, 16);
        assert_eq!(run.model.stack.heads, 4);
        assert!(run.model.stack.use_wk);
    }

    #[test]
    fn unknown_variant_is_a_config_error() {
        let err = parse_variant("transformer").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("transformer"));
    }

    #[test]
    fn error_kinds_map_to_the_documented_exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Data("x".into()).exit_code(), 3);
        assert_eq!(CliError::Numeric("x".into()).exit_code(), 4);
        let e: CliError = TrainError::Diverged { epoch: 0, step: 0, loss: 1e9, lr: 1e-3 }.into();
        assert_eq!(e.exit_code(), 4);
        let e: CliError = IngestError::Empty { path: "x.csv".into() }.into();
        assert_eq!(e.exit_code(), 3);
        let e: CliError = VarError::Invalid("bad range".into()).into();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn train_run_round_trips_through_json() {
        let mut run = TrainRun::default();
        run.model.stack.layers = 7;
        run.train.seed = 42;
        run.data = Some(PathBuf::from("data.csv"));
        let text = serde_json::to_string(&run).unwrap();
        let back: TrainRun = serde_json::from_str(&text).unwrap();
        assert_eq!(back.model.stack.layers, 7);
        assert_eq!(back.train.seed, 42);
        assert_eq!(back.data.as_deref(), Some(Path::new("data.csv")));
    }

    #[test]
    fn partial_json_config_fills_missing_fields_with_defaults() {
        let run: TrainRun =
            serde_json::from_str(r#"{"train": {"seed": 5}, "model": {"channels": 3}}"#).unwrap();
        assert_eq!(run.train.seed, 5);
        assert_eq!(run.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(run.model.channels, 3);
        assert_eq!(run.stride, 1);
    }

    #[test]
    fn dot_export_is_well_formed_for_a_hand_built_path() {
        let paths = vec![InfluencePath {
            source: 2,
            sink: 5,
            depth: 2,
            head: 1,
            intermediates: vec![4],
            scalars: vec![0.25],
            matrix: vec![1.0, 0.0, 0.0, 0.0],
        }];
        let dot = paths_to_dot(&paths, 5, 2, 2);
        assert!(dot.starts_with("digraph influence {"));
        assert!(dot.contains("cluster_h1"));
        assert!(dot.contains("p0_0 -> p0_1;"));
        assert!(dot.contains("2.5000e-1") || dot.contains("2.5000e-01"), "{dot}");
        assert!(dot.trim_end().ends_with('}'));
    }
}
