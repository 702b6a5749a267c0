use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mdmt_core::datagen::Split;
use mdmt_core::harness::{self, ExperimentConfig};
use mdmt_core::trainer::{Domain2Usage, Strategy};
use mdmt_core::{Error, Result};

/// Semi-supervised multi-domain multi-task training on synthetic volumes.
///
/// Exit status: 0 on success, 1 for configuration errors, 2 for failures
/// while running.
#[derive(Parser, Debug)]
#[command(name = "mdmt", version)]
struct Cli {
    /// Experiment config (JSON). Defaults to the `desk_default` preset.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Named preset: desk_default or paper_scale_reference.
    #[arg(long, global = true)]
    preset: Option<String>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Flags that override fields of the loaded config.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Root directory for datasets, runs and reports.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Training epochs per run.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Mini-batch size.
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Epochs before the first label propagation.
    #[arg(long, global = true)]
    warmup_epochs: Option<usize>,
    /// Weight of pseudo-labelled pairs, in [0, 1].
    #[arg(long, global = true)]
    pseudo_weight: Option<f64>,
    /// Epochs between pseudo-label refreshes.
    #[arg(long, global = true)]
    propagation_period: Option<usize>,
    /// Threshold turning soft ROI maps into masks.
    #[arg(long, global = true)]
    zeta: Option<f64>,
    /// Domain-2 splits used for training: train, train_val or all.
    #[arg(long, global = true, value_parser = parse_usage)]
    domain2_usage: Option<Domain2Usage>,
    /// Comma-separated seed list (compare).
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated strategy list (compare).
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_strategy)]
    strategies: Option<Vec<Strategy>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the effective config as JSON, a starting point for editing.
    InitConfig {
        /// Destination file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate, split and normalize both domain datasets.
    Generate,
    /// Train one strategy with one seed into its run directory.
    Train {
        /// supervised_baseline, semi_supervised, supervised_mdmt or semi_supervised_mdmt.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Strategy,
        #[arg(long)]
        seed: u64,
    },
    /// Score a checkpoint on one split of a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test.
        #[arg(long, value_parser = parse_split)]
        split: Split,
        /// Dataset file; defaults to the config's domain-1 dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run (or reuse) every strategy × seed and write the comparison table.
    Compare,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
        format!("unknown strategy `{s}` (expected one of {})", names.join(", "))
    })
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split `{s}` (expected train, val or test)"))
}

fn parse_usage(s: &str) -> std::result::Result<Domain2Usage, String> {
    match s {
        "train" => Ok(Domain2Usage::Train),
        "train_val" => Ok(Domain2Usage::TrainVal),
        "all" => Ok(Domain2Usage::All),
        _ => Err(format!("unknown domain-2 usage `{s}` (expected train, train_val or all)")),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::desk_default(),
    };
    let o = &cli.overrides;
    let t = &mut cfg.train;
    if let Some(v) = &o.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.lr {
        t.adam.lr = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.warmup_epochs {
        t.warmup_epochs = v;
    }
    if let Some(v) = o.pseudo_weight {
        t.pseudo_weight = v;
    }
    if let Some(v) = o.propagation_period {
        t.propagation_period = v;
    }
    if let Some(v) = o.zeta {
        t.zeta = v;
    }
    if let Some(v) = o.domain2_usage {
        t.domain2_usage = v;
    }
    if let Some(v) = &o.seeds {
        cfg.seeds = v.clone();
    }
    if let Some(v) = &o.strategies {
        cfg.strategies = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("value serializes"));
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::InitConfig { out } => match out {
            Some(path) => std::fs::write(&path, cfg.to_json()).map_err(|e| Error::io(&path, e))?,
            None => print!("{}", cfg.to_json()),
        },
        Command::Generate => print_json(&harness::cmd_generate(&cfg)?),
        Command::Train { strategy, seed } => {
            eprintln!("training {strategy} seed {seed} into {}", cfg.run_dir(strategy, seed).display());
            print_json(&harness::cmd_train(&cfg, strategy, seed)?);
        }
        Command::Evaluate {
            checkpoint,
            split,
            dataset,
        } => {
            let dataset = dataset.unwrap_or_else(|| cfg.dataset_path(1));
            print_json(&harness::cmd_evaluate(&checkpoint, &dataset, split, cfg.train.zeta)?);
        }
        Command::Compare => {
            let report = harness::cmd_compare_with_progress(&cfg, |row, cached| {
                let status = match (&row.error, row.test_auc) {
                    (Some(e), _) => format!("FAILED: {e}"),
                    (None, Some(auc)) => format!("test AUC {auc:.4}"),
                    (None, None) => String::new(),
                };
                let from = if cached { " (cached)" } else { "" };
                eprintln!("{} seed {}: {status}{from}", row.strategy, row.seed);
            })?;
            print!("{}", harness::render_table(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
