//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use cliquenet_core::analyzer::{count_flops, count_params, feature_dump, heatmap_image, weight_heatmap};
use cliquenet_core::network::{ModelConfig, PRESETS};
use cliquenet_core::train::{evaluate, toy_splits, train, DatasetSource, EpochLog, TrainConfig, TrainSink, Trainer, LOG_HEADER};

use crate::checkpoint::Checkpoint;
use crate::cifar::load_cifar10;
use crate::config::{load_config, preset};
use crate::error::{CliError, Result};
use crate::export::{ensure_dir, matrix_csv, pgm_bytes, report_csv, report_table, write_atomic};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error (bad flags, unknown preset, out-of-range block)
  3  file missing or unreadable/unwritable
  4  malformed model config
  5  malformed data or checkpoint file
  6  checkpoint incompatible with the model config
  7  training diverged (non-finite loss)

Failures print one line to stderr: error kind=<tag> exit=<code> msg=<JSON string>

Environment:
  CLIQUENET_THREADS  caps the worker threads used inside convolutions";

#[derive(Debug, Parser)]
#[command(name = "cliquenet", version, about = "Train, evaluate and analyze CliqueNet models", after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes log.csv, checkpoint.clqn and periodic
    /// checkpoint_epoch<N>.clqn files into --out.
    Train(TrainArgs),
    /// Print loss and error rate on the test split.
    Eval(EvalArgs),
    /// Print parameter and FLOP counts; writes analysis.csv with --out.
    Analyze(AnalyzeArgs),
    /// Write per-block weight-dependency heatmaps as CSV and PGM.
    Heatmap(HeatmapArgs),
    /// Write the most active Stage-I and Stage-II feature maps as PGM.
    DumpFeatures(DumpArgs),
    /// List the shipped model presets.
    Presets,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Shipped model preset (see `presets`).
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// JSON model config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// CIFAR-10 binary directory; the synthetic toy set when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Save a checkpoint every N epochs (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seed of the untrained model used when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input resolution as HxW; the stem's native size by default.
    #[arg(long, value_parser = parse_resolution)]
    pub resolution: Option<(usize, usize)>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 1-based block index; every block when omitted.
    #[arg(long)]
    pub block: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test-split record to visualize.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub block: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad dimension `{v}` in `{s}`"));
    Ok((num(h)?, num(w)?))
}

fn config_from_args(args: &ModelArgs) -> Result<Option<ModelConfig>> {
    match (&args.preset, &args.config) {
        (Some(name), _) => preset(name).map(Some),
        (None, Some(path)) => load_config(path).map(Some),
        (None, None) => Ok(None),
    }
}

fn require_config(args: &ModelArgs) -> Result<ModelConfig> {
    config_from_args(args)?.ok_or_else(|| CliError::Usage("one of --preset or --config is required".into()))
}

/// Trainer from the model flags and/or a checkpoint. With both, the
/// checkpoint must match the flagged config.
fn load_trainer(args: &ModelArgs, checkpoint: Option<&Path>, seed: u64) -> Result<Trainer<f32>> {
    let config = config_from_args(args)?;
    match (config, checkpoint) {
        (Some(cfg), Some(path)) => {
            let ck = Checkpoint::load(path)?;
            let mut trainer = Trainer::new(&cfg, seed)?;
            ck.restore_into(&mut trainer)?;
            Ok(trainer)
        }
        (None, Some(path)) => Checkpoint::load(path)?.into_trainer(),
        (Some(cfg), None) => Ok(Trainer::new(&cfg, seed)?),
        (None, None) => Err(CliError::Usage("one of --preset, --config or --checkpoint is required".into())),
    }
}

fn load_data(data: Option<&Path>, cfg: &ModelConfig) -> Result<(DatasetSource<f32>, DatasetSource<f32>)> {
    let (train, test) = match data {
        Some(dir) => load_cifar10(dir)?,
        None => toy_splits()?,
    };
    if train.num_classes != cfg.num_classes {
        return Err(CliError::Usage(format!(
            "dataset has {} classes but the model has {}; pass --data for CIFAR-10 or use the toy preset",
            train.num_classes, cfg.num_classes
        )));
    }
    let (c, h, w) = train.image_shape();
    if c != cfg.input_channels {
        return Err(CliError::Usage(format!("dataset images have {c} channels, model expects {}", cfg.input_channels)));
    }
    cliquenet_core::network::spatial_schedule(cfg, h, w)?;
    Ok((train, test))
}

fn block_range(trainer: &Trainer<f32>, block: Option<usize>) -> Result<Vec<usize>> {
    let n = trainer.model.blocks.len();
    match block {
        Some(b) if b == 0 || b > n => Err(CliError::Usage(format!("--block {b} out of range 1..={n}"))),
        Some(b) => Ok(vec![b]),
        None => Ok((1..=n).collect()),
    }
}

struct FileSink {
    log_path: PathBuf,
    out: PathBuf,
    rows: Vec<String>,
    /// First write failure; training stops and the run reports it.
    failure: Option<CliError>,
}

impl FileSink {
    fn flush(&self) -> Result<()> {
        let mut text = format!("{LOG_HEADER}\n");
        for r in &self.rows {
            text.push_str(r);
            text.push('\n');
        }
        write_atomic(&self.log_path, text.as_bytes())
    }

    fn keep(&mut self, r: Result<()>) -> cliquenet_core::Result<()> {
        r.map_err(|e| {
            let stop = cliquenet_core::Error::Usage(e.to_string());
            self.failure = Some(e);
            stop
        })
    }
}

impl TrainSink<f32> for FileSink {
    fn epoch(&mut self, row: &EpochLog) -> cliquenet_core::Result<()> {
        self.rows.push(row.csv_row());
        println!("{}", row.csv_row());
        let r = self.flush();
        self.keep(r)
    }

    fn checkpoint(&mut self, trainer: &Trainer<f32>) -> cliquenet_core::Result<()> {
        let path = self.out.join(format!("checkpoint_epoch{}.clqn", trainer.epoch));
        let r = Checkpoint::from_trainer(trainer).save(&path);
        self.keep(r)
    }
}

/// Log rows of earlier epochs, kept when a run resumes into the same directory.
fn previous_rows(path: &Path, before_epoch: usize) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else { return Vec::new() };
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < before_epoch))
        .map(str::to_string)
        .collect()
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut trainer = load_trainer(&args.model, args.checkpoint.as_deref(), args.seed)?;
    let (train_data, test_data) = load_data(args.data.as_deref(), &trainer.model.config)?;
    ensure_dir(&args.out)?;
    let log_path = args.out.join("log.csv");
    let mut sink = FileSink {
        rows: if trainer.epoch > 0 { previous_rows(&log_path, trainer.epoch) } else { Vec::new() },
        log_path,
        out: args.out.clone(),
        failure: None,
    };
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        checkpoint_every: (args.checkpoint_every > 0).then_some(args.checkpoint_every),
    };
    if let Err(e) = train(&mut trainer, &train_data, &test_data, &config, &mut sink) {
        return Err(sink.failure.take().unwrap_or_else(|| e.into()));
    }
    sink.flush()?;
    Checkpoint::from_trainer(&trainer).save(&args.out.join("checkpoint.clqn"))
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let trainer = load_trainer(&args.model, args.checkpoint.as_deref(), args.seed)?;
    let (_, test) = load_data(args.data.as_deref(), &trainer.model.config)?;
    let (loss, err) = evaluate(&trainer.model, &test, args.batch)?;
    println!("loss={loss:.6} error={err:.6}");
    Ok(())
}

fn run_analyze(args: &AnalyzeArgs) -> Result<()> {
    let cfg = require_config(&args.model)?;
    let model = Trainer::<f32>::new(&cfg, 0)?.model;
    let hw = args.resolution.unwrap_or_else(|| cfg.stem.default_resolution());
    let report = count_flops(&model, hw)?;
    debug_assert_eq!(report.total_params, count_params(&model).total_params);
    let name = args.model.preset.clone().unwrap_or_else(|| "config".into());
    print!("{}", report_table(&name, &report));
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        write_atomic(&out.join("analysis.csv"), report_csv(&report).as_bytes())?;
    }
    Ok(())
}

fn run_heatmap(args: &HeatmapArgs) -> Result<()> {
    let trainer = load_trainer(&args.model, args.checkpoint.as_deref(), args.seed)?;
    ensure_dir(&args.out)?;
    for b in block_range(&trainer, args.block)? {
        let m = weight_heatmap(&trainer.model, b)?;
        write_atomic(&args.out.join(format!("heatmap_block{b}.csv")), matrix_csv(&m).as_bytes())?;
        write_atomic(&args.out.join(format!("heatmap_block{b}.pgm")), &pgm_bytes(&heatmap_image(&m)))?;
    }
    Ok(())
}

fn run_dump(args: &DumpArgs) -> Result<()> {
    let trainer = load_trainer(&args.model, args.checkpoint.as_deref(), args.seed)?;
    let (_, test) = load_data(args.data.as_deref(), &trainer.model.config)?;
    if args.index >= test.len() {
        return Err(CliError::Usage(format!("--index {} out of range for {} test records", args.index, test.len())));
    }
    let (image, _) = test.batch(&[args.index])?;
    ensure_dir(&args.out)?;
    for b in block_range(&trainer, args.block)? {
        for d in feature_dump(&trainer.model, &image, b)? {
            let path = args.out.join(format!("features_block{b}_stage{}.pgm", d.stage));
            write_atomic(&path, &pgm_bytes(&d.image))?;
            println!("block {b} stage {} map {} mean {:.6} -> {}", d.stage, d.channel, d.mean, path.display());
        }
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Analyze(a) => run_analyze(a),
        Command::Heatmap(a) => run_heatmap(a),
        Command::DumpFeatures(a) => run_dump(a),
        Command::Presets => {
            for p in PRESETS {
                println!("{:<20}{}", p.name, p.description);
            }
            Ok(())
        }
    }
}
