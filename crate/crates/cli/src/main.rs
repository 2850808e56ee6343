use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;
use serde::Serialize;

use lowrank::model::{self, count, reference_cnn, ModelGraph};
use lowrank::pipeline::{self, compress, write_report, CompressConfig, StopRule};
use lowrank::rank::{self, check_weakening_factor, RankMode};
use lowrank::runtime::{self, evaluate_accuracy, train_epochs, Dataset, TrainConfig};
use lowrank::Error;

/// Test accuracy a freshly trained reference model is expected to reach.
const TARGET_ACCURACY: f64 = 0.9;

#[derive(Parser)]
#[command(name = "lowrank", version, about = "Iterative low-rank compression of small CNNs")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference CNN on the synthetic dataset and save it.
    Train(TrainCmd),
    /// Compress a saved model and write the result with its report.
    Compress(CompressCmd),
    /// Print test accuracy of a saved model.
    Eval(EvalCmd),
    /// Print per-layer shapes, ranks and counts without changing anything.
    Inspect(InspectCmd),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Global seed for dataset, initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset seed, if it should differ from --seed.
    #[arg(long)]
    dataset_seed: Option<u64>,
    /// Dataset cache directory: loaded if present, written otherwise.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

impl DataArgs {
    fn dataset_seed(&self) -> u64 {
        self.dataset_seed.unwrap_or(self.seed)
    }

    fn load(&self) -> lowrank::Result<Dataset> {
        let seed = self.dataset_seed();
        match &self.dataset {
            Some(dir) if dir.join("dataset.json").exists() => {
                let data = Dataset::load(dir)?;
                if data.seed != seed {
                    warn!("cached dataset was generated with seed {}, not {seed}", data.seed);
                }
                Ok(data)
            }
            Some(dir) => {
                let data = runtime::make_dataset(seed)?;
                data.save(dir)?;
                Ok(data)
            }
            None => runtime::make_dataset(seed),
        }
    }
}

#[derive(Args, Clone, Serialize)]
struct TrainArgs {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Learning rate; defaults to 0.02 for `train` and 0.005 for `compress`.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

impl TrainArgs {
    fn config(&self, default_lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr.unwrap_or(default_lr),
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            extend_while_improving: false,
        }
    }
}

#[derive(Args)]
struct TrainCmd {
    /// Output model directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct CompressCmd {
    /// Input model directory.
    #[arg(long)]
    model: PathBuf,
    /// Output directory for the compressed model and its report.
    #[arg(long)]
    out: PathBuf,
    /// Weakening factor.
    #[arg(long, default_value_t = rank::DEFAULT_WEAKENING)]
    k: f64,
    /// Use the extreme ranks directly (the one-time baseline).
    #[arg(long)]
    no_weaken: bool,
    #[arg(long, default_value_t = 4)]
    max_iterations: usize,
    #[arg(long, default_value_t = 0.01)]
    drop_threshold: f64,
    /// Keep fine-tuning while test accuracy improves, up to 3x --epochs.
    #[arg(long)]
    extend: bool,
    /// Timed forward passes per measurement (0 disables timing).
    #[arg(long, default_value_t = 5)]
    timing_passes: usize,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct InspectCmd {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = rank::DEFAULT_WEAKENING)]
    k: f64,
    #[arg(long)]
    no_weaken: bool,
}

/// Settings echoed into the compression report.
#[derive(Serialize)]
struct Echo<'a> {
    k: f64,
    no_weaken: bool,
    epochs: usize,
    learning_rate: f64,
    momentum: f64,
    batch_size: usize,
    max_iterations: usize,
    drop_threshold: f64,
    extend: bool,
    seed: u64,
    dataset_seed: u64,
    model_name: &'a str,
    model_revision: u32,
}

enum Failure {
    Lib(Error),
    NothingToDo(String),
    Diverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 2,
        Error::Io { .. } => 3,
        Error::MalformedManifest(_) | Error::ChecksumMismatch { .. } => 4,
        Error::TrainingDiverged { .. } => 5,
        Error::NothingToDo(_) => 6,
        _ => 1,
    }
}

fn rank_mode(k: f64, no_weaken: bool) -> lowrank::Result<RankMode> {
    if no_weaken {
        return Ok(RankMode::Extreme);
    }
    if !check_weakening_factor(k)? {
        let (lo, hi) = rank::RECOMMENDED_WEAKENING;
        warn!("k = {k} is outside the recommended range [{lo}, {hi}]");
    }
    Ok(RankMode::Weakened(k))
}

fn load_model(path: &Path) -> lowrank::Result<ModelGraph> {
    model::load(path)
}

fn cmd_train(cmd: TrainCmd) -> Result<(), Failure> {
    let cfg = cmd.train.config(0.02, cmd.data.seed);
    cfg.validate()?;
    let data = cmd.data.load()?;
    let side = data.input_shape().height;
    let init = reference_cnn(side, data.num_classes, cmd.data.seed)?;
    let trained = match train_epochs(&init, &data.train, None, &cfg) {
        Ok(t) => t,
        Err(Error::TrainingDiverged { epoch, .. }) => {
            return Err(Failure::Diverged(format!("training diverged at epoch {epoch}")))
        }
        Err(e) => return Err(e.into()),
    };
    let acc = evaluate_accuracy(&trained.model, &data.test)?;
    model::save(&trained.model, &cmd.out)?;
    println!(
        "trained {} params for {} epochs, test accuracy {:.2}%",
        trained.model.num_params(),
        trained.epochs_run(),
        100.0 * acc
    );
    if acc < TARGET_ACCURACY {
        eprintln!(
            "warning: test accuracy {:.2}% is below the {:.0}% target; try more epochs",
            100.0 * acc,
            100.0 * TARGET_ACCURACY
        );
    }
    Ok(())
}

fn cmd_compress(cmd: CompressCmd) -> Result<(), Failure> {
    let mode = rank_mode(cmd.k, cmd.no_weaken)?;
    let cfg = CompressConfig {
        mode,
        train: TrainConfig {
            extend_while_improving: cmd.extend,
            ..cmd.train.config(0.005, cmd.data.seed)
        },
        stop: StopRule {
            max_iterations: cmd.max_iterations,
            accuracy_drop_threshold: cmd.drop_threshold,
        },
        timing_passes: cmd.timing_passes,
    };
    cfg.validate()?;

    let input = load_model(&cmd.model)?;
    let data = cmd.data.load()?;
    let result = compress(&input, &data, &cfg)?;
    let echo = Echo {
        k: mode.factor(),
        no_weaken: cmd.no_weaken,
        epochs: cfg.train.epochs,
        learning_rate: cfg.train.learning_rate,
        momentum: cfg.train.momentum,
        batch_size: cfg.train.batch_size,
        max_iterations: cfg.stop.max_iterations,
        drop_threshold: cfg.stop.accuracy_drop_threshold,
        extend: cmd.extend,
        seed: cmd.data.seed,
        dataset_seed: cmd.data.dataset_seed(),
        model_name: &input.name,
        model_revision: input.revision,
    };
    model::save(&result.model, &cmd.out)?;
    write_report(&cmd.out, &echo, &result, cfg.timing_passes)?;

    if let Ok(summary) = pipeline::report(&result.records) {
        print!("{}", summary.to_table(cfg.timing_passes > 0));
    }
    if let Some(d) = result.diverged {
        return Err(Failure::Diverged(format!(
            "fine-tuning diverged in iteration {} at epoch {}; kept the last accepted model",
            d.iteration + 1,
            d.epoch
        )));
    }
    if result.records.is_empty() {
        return Err(Failure::NothingToDo(
            "no layer is large enough to decompose; model saved unchanged".into(),
        ));
    }
    println!("wrote {}", cmd.out.display());
    Ok(())
}

fn cmd_eval(cmd: EvalCmd) -> Result<(), Failure> {
    let model = load_model(&cmd.model)?;
    let data = cmd.data.load()?;
    let acc = evaluate_accuracy(&model, &data.test)?;
    println!("test accuracy {:.4} ({} samples)", acc, data.test.len());
    Ok(())
}

fn cmd_inspect(cmd: InspectCmd) -> Result<(), Failure> {
    let mode = rank_mode(cmd.k, cmd.no_weaken)?;
    let model = load_model(&cmd.model)?;
    let shapes = model.shapes()?;
    let counts = count(&model)?;
    let plans = match rank::build_rank_plan(&model, mode) {
        Ok(p) => p,
        Err(Error::NothingToDo(_)) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    println!(
        "{} (revision {}), input {}x{}x{}, k = {}",
        model.name,
        model.revision,
        model.input_shape.channels,
        model.input_shape.height,
        model.input_shape.width,
        mode.factor()
    );
    println!(
        "{:>3} {:<16} {:>12} {:>10} {:>10}  ranks (mode: R_i/R_e/R_w)",
        "#", "layer", "output", "params", "MACs"
    );
    for (i, layer) in model.layers().iter().enumerate() {
        let out = shapes[i + 1];
        let ranks = plans
            .iter()
            .find(|p| p.layer_index == i)
            .map(|p| {
                let modes: Vec<String> = p
                    .modes
                    .iter()
                    .map(|(m, r)| format!("{m}: {}/{}/{}", r.initial, r.extreme, r.weakened))
                    .collect();
                let skip = p.skip.map(|s| format!(" (skip: {s:?})")).unwrap_or_default();
                format!("{}{skip}", modes.join(", "))
            })
            .unwrap_or_default();
        let line = format!(
            "{:>3} {:<16} {:>12} {:>10} {:>10}  {}",
            i,
            layer.kind(),
            format!("{}x{}x{}", out.channels, out.height, out.width),
            counts.layers[i].params,
            counts.layers[i].macs,
            ranks
        );
        println!("{}", line.trim_end());
    }
    println!("total params {}, MACs {}", counts.total_params, counts.total_macs);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    let result = match cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Compress(c) => cmd_compress(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Inspect(c) => cmd_inspect(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(5)
        }
        Err(Failure::NothingToDo(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(6)
        }
    }
}
