//! `isfl`: generate data, train, evaluate and sweep gated encoders.
//!
//! Exit codes: 0 on success, 2 for invalid arguments or configuration,
//! 3 when a run fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use isfl::checkpoint;
use isfl::data::Dataset;
use isfl::experiment::{
    evaluate_checkpoint, sweep, train_experiment, write_run, write_sweep_table, DataSource,
    ExperimentConfig,
};
use isfl::isfl::GateMode;
use isfl::metrics::{EceConfig, MetricsReport};
use isfl::{Error, FusionMode};

#[derive(Parser)]
#[command(
    name = "isfl",
    version,
    about = "Toy Transformer encoder with mid-stack gating by auxiliary features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV and print its Bayes-optimal accuracies.
    Gen(GenArgs),
    /// Split, standardize, train, and write the checkpoint, log and held-out report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split it was trained with.
    Eval(EvalArgs),
    /// Train one gated model per insertion layer plus the `none` and `concat` baselines.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Experiment config whose `data.synthetic` section supplies the task.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of examples.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fusion {
    None,
    Concat,
    LateGate,
    Isfl,
}

impl From<Fusion> for FusionMode {
    fn from(f: Fusion) -> Self {
        match f {
            Fusion::None => FusionMode::None,
            Fusion::Concat => FusionMode::ConcatHead,
            Fusion::LateGate => FusionMode::LateGate,
            Fusion::Isfl => FusionMode::Isfl,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Gate {
    Single,
    TwoLayer,
}

/// Overrides applied on top of the config file (or the built-in defaults).
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train on this CSV instead of the configured data source.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    fusion: Option<Fusion>,
    /// Number of encoder blocks before the gate.
    #[arg(long)]
    insert_layer: Option<usize>,
    #[arg(long, value_enum)]
    gate_mode: Option<Gate>,
    #[arg(long)]
    layers: Option<usize>,
    /// Model width; the feed-forward width follows at twice this.
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// One seed for data generation, split, initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of ECE bins.
    #[arg(long)]
    bins: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset CSV; defaults to the data source recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = EceConfig::default().n_bins)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated insertion layers, each in [0, layers].
    #[arg(long, value_delimiter = ',', required = true)]
    insert_layers: Vec<usize>,
}

enum Failure {
    Core(Error),
    /// Some sweep runs failed; the table was still written.
    Runs {
        failed: usize,
        total: usize,
    },
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Core(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => run_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
        Err(Failure::Runs { failed, total }) => {
            eprintln!("error: {failed} of {total} sweep runs failed");
            ExitCode::from(3)
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn gen(a: GenArgs) -> Result<(), Failure> {
    let base = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let DataSource::Synthetic(mut task) = base.data else {
        return Err(invalid("data", "gen needs a synthetic data source").into());
    };
    if let Some(n) = a.n {
        task.n_examples = n;
    }
    if let Some(seed) = a.seed {
        task.seed = seed;
    }
    task.validate().map_err(|e| match e {
        Error::Invalid { field, reason } if field == "n_examples" => invalid("--n", reason),
        other => other,
    })?;
    let dataset = task.generate()?;
    dataset.save(&a.out)?;
    let bayes = task.bayes_accuracy();
    println!(
        "wrote {} examples to {}\nBayes accuracy: joint {:.4}, text only {:.4}, aux only {:.4}",
        dataset.len(),
        a.out.display(),
        bayes.joint,
        bayes.text_only,
        bayes.aux_only
    );
    Ok(())
}

fn build_config(a: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let mut c = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(path) = &a.data {
        c.data = DataSource::File { path: path.clone() };
    }
    let enc = &mut c.model.encoder;
    if let Some(n) = a.layers {
        enc.n_layers = n;
    }
    if let Some(d) = a.d_model {
        enc.d_model = d;
        enc.d_ff = 2 * d;
    }
    if let Some(h) = a.heads {
        enc.n_heads = h;
    }
    if let Some(m) = a.max_len {
        enc.max_len = m;
    }
    if let Some(f) = a.fusion {
        c.set_fusion_mode(f.into());
    }
    if a.insert_layer.is_some() || a.gate_mode.is_some() {
        let Some(fusion) = c.model.fusion.as_mut() else {
            return Err(invalid(
                "--insert-layer",
                format!(
                    "only applies with --fusion isfl, not {}",
                    c.model.fusion_mode
                ),
            ));
        };
        if let Some(i) = a.insert_layer {
            fusion.insert_layer_index = i;
        }
        if let Some(g) = a.gate_mode {
            fusion.gate_mode = match g {
                Gate::Single => GateMode::SingleAffine,
                Gate::TwoLayer => GateMode::TwoLayer,
            };
        }
    }
    if let Some(e) = a.epochs {
        c.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        c.train.learning_rate = lr;
    }
    if let Some(seed) = a.seed {
        c.set_seed(seed);
    }
    if let Some(b) = a.bins {
        c.ece.n_bins = b;
    }
    if let Some(out) = &a.out {
        c.output_dir = out.clone();
    }
    c.validate()?;
    Ok(c)
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let config = build_config(&a.config)?;
    let outcome = train_experiment(&config)?;
    let report = outcome.test_report(&config.ece)?;
    write_run(&config.output_dir, &outcome, &report)?;
    let resolved = serde_json::to_string_pretty(&config)?;
    std::fs::write(config.output_dir.join("config.json"), resolved + "\n")?;
    summarize(&config.output_dir, &report);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let ece = EceConfig { n_bins: a.bins };
    ece.validate()?;
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let dataset = match &a.data {
        Some(path) => Dataset::load(path)?,
        None => ckpt.preprocessing.data.load()?,
    };
    let report = evaluate_checkpoint(&ckpt, &dataset, &ece)?;
    report.export(&a.out)?;
    summarize(&a.out, &report);
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<(), Failure> {
    let config = build_config(&a.config)?;
    let rows = sweep(&config, &a.insert_layers, Some(&config.output_dir))?;
    let mut table = Vec::new();
    write_sweep_table(&rows, &mut table)?;
    let path = config.output_dir.join("sweep.csv");
    std::fs::write(&path, table)?;
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    for row in &rows {
        match &row.outcome {
            Ok(r) => println!(
                "{:<10} accuracy {:.4}  ece {:.4}",
                row.label, r.accuracy, r.ece
            ),
            Err(e) => println!("{:<10} failed: {e}", row.label),
        }
    }
    println!("wrote {}", path.display());
    if failed > 0 {
        return Err(Failure::Runs {
            failed,
            total: rows.len(),
        });
    }
    Ok(())
}

fn summarize(dir: &Path, r: &MetricsReport) {
    println!(
        "accuracy {:.4}  macro F1 {:.4}  MCC {:.4}  ECE {:.4}  ROC-AUC {:.4}\nwrote {}",
        r.accuracy,
        r.macro_f1,
        r.mcc,
        r.ece,
        r.roc_auc,
        dir.display()
    );
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
}
