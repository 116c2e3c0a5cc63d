//! Command-line front end: generate data, train, evaluate, explain.
//!
//! Configuration comes from an optional JSON file (any subset of the run
//! configuration's fields; the rest take the stock defaults). The `PMN_SEED`
//! environment variable overrides the seed — and only the seed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pmn_core::checkpoint;
use pmn_core::interpret;
use pmn_core::metrics;
use pmn_core::model::Model;
use pmn_core::signal::{self, Dataset};
use pmn_core::train::{self, RunConfig};

#[derive(Parser)]
#[command(name = "pmn", about = "Prototype-matching fault diagnosis toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration; omitted fields use the stock defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset as PMDS train/test files.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory for train.pmds / test.pmds.
        #[arg(long)]
        out_dir: PathBuf,
        /// Also export train.csv / test.csv.
        #[arg(long)]
        csv: bool,
    },
    /// Train a model and write logs plus best/final checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory with train.pmds / test.pmds (defaults to the config's
        /// dataset entry, or on-the-fly generation).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Output directory for train_log.csv, best.pmn, final.pmn.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset; prints an evaluation report as JSON.
    Eval {
        /// Model checkpoint (.pmn).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file (.pmds).
        #[arg(long)]
        dataset: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Export encoder features (plus prototype rows) as CSV.
        #[arg(long)]
        export_features: Option<PathBuf>,
    },
    /// Explain one sample (distances, matched prototype, attribution).
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Sample index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Write the JSON bundle here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the attribution as CSV (bin, hz, attribution).
        #[arg(long)]
        attribution_csv: Option<PathBuf>,
        /// Dump every decoded prototype as a CSV matrix (m rows x 1024 cols).
        #[arg(long)]
        all_prototypes: Option<PathBuf>,
    },
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    let mut config = match &arg.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Ok(seed) = std::env::var("PMN_SEED") {
        config.seed = seed
            .parse()
            .with_context(|| format!("PMN_SEED must be an integer, got '{seed}'"))?;
    }
    config.validate()?;
    Ok(config)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    signal::read_pmds(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn class_counts(dataset: &Dataset) -> Vec<(u16, usize)> {
    let mut counts: Vec<(u16, usize)> = Vec::new();
    for sample in &dataset.samples {
        match counts.iter_mut().find(|(label, _)| *label == sample.label) {
            Some((_, c)) => *c += 1,
            None => counts.push((sample.label, 1)),
        }
    }
    counts.sort_unstable();
    counts
}

fn cmd_generate(config: &ConfigArg, out_dir: &Path, csv: bool) -> Result<()> {
    let config = load_config(config)?;
    let (train_set, test_set) = train::load_or_generate_data(&RunConfig {
        dataset: None,
        ..config
    })?;
    fs::create_dir_all(out_dir)?;
    signal::write_pmds(&out_dir.join("train.pmds"), &train_set)?;
    signal::write_pmds(&out_dir.join("test.pmds"), &test_set)?;
    if csv {
        signal::write_csv(&out_dir.join("train.csv"), &train_set)?;
        signal::write_csv(&out_dir.join("test.csv"), &test_set)?;
    }
    println!("wrote {} train / {} test samples", train_set.len(), test_set.len());
    for (label, count) in class_counts(&train_set) {
        let test_count = class_counts(&test_set)
            .iter()
            .find(|(l, _)| *l == label)
            .map_or(0, |(_, c)| *c);
        println!("class {label}: {count} train / {test_count} test");
    }
    Ok(())
}

fn cmd_train(config: &ConfigArg, data_dir: Option<&Path>, out_dir: &Path) -> Result<()> {
    let mut config = load_config(config)?;
    if let Some(dir) = data_dir {
        config.dataset = Some(dir.display().to_string());
    }
    let (train_set, test_set) = train::load_or_generate_data(&config)?;
    println!(
        "training {:?} on {} train / {} test samples for {} epochs",
        config.variant,
        train_set.len(),
        test_set.len(),
        config.epochs
    );
    let outcome = train::train(&config, &train_set, &test_set, Some(out_dir))?;
    println!(
        "best test accuracy {:.4} at epoch {}; final epoch test accuracy {:.4}",
        outcome.best_test_acc,
        outcome.best_epoch,
        outcome.log.last().map_or(0.0, |e| e.test_acc)
    );
    println!(
        "wrote {}, {}, {}",
        out_dir.join("train_log.csv").display(),
        out_dir.join("best.pmn").display(),
        out_dir.join("final.pmn").display()
    );
    Ok(())
}

fn cmd_eval(
    checkpoint_path: &Path,
    dataset_path: &Path,
    report_path: Option<&Path>,
    export_path: Option<&Path>,
) -> Result<()> {
    let (model, _, _) = checkpoint::load(checkpoint_path)?;
    let dataset = load_dataset(dataset_path)?;
    let report = metrics::evaluate(&model, &dataset)?;
    let json = serde_json::to_string_pretty(&report)?;
    match report_path {
        Some(path) => {
            fs::write(path, format!("{json}\n"))
                .with_context(|| format!("writing report {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    if let Some(path) = export_path {
        metrics::export_features(&model, &dataset, path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_explain(
    checkpoint_path: &Path,
    dataset_path: &Path,
    index: usize,
    out: Option<&Path>,
    attribution_csv: Option<&Path>,
    all_prototypes: Option<&Path>,
) -> Result<()> {
    let (model, _, _) = checkpoint::load(checkpoint_path)?;
    let Model::Pmn(model) = &model else {
        bail!("explain requires a prototype-matching checkpoint (baseline has no prototypes)");
    };
    let dataset = load_dataset(dataset_path)?;

    if let Some(path) = all_prototypes {
        let decoded = interpret::decode_prototypes(model)?;
        let mut text = String::new();
        for row in &decoded {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            text.push_str(&line.join(","));
            text.push('\n');
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {} ({} prototypes)", path.display(), decoded.len());
    }

    if dataset.is_empty() {
        bail!("dataset {} is empty", dataset_path.display());
    }
    if index >= dataset.len() {
        bail!(
            "sample index {index} out of range for a dataset of {}",
            dataset.len()
        );
    }
    let sample = &dataset.samples[index];
    let explanation = interpret::explain_full(model, &sample.bins, index)?;
    let json = serde_json::to_string_pretty(&explanation)?;
    match out {
        Some(path) => {
            fs::write(path, format!("{json}\n"))
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }

    if let Some(path) = attribution_csv {
        let attribution = explanation
            .attribution
            .as_ref()
            .expect("explain_full always attaches attribution");
        let mut text = String::from("# hz = bin * rate / 2048, rate = 12000 Hz\nbin,hz,attribution\n");
        for (bin, score) in attribution.scores.iter().enumerate() {
            text.push_str(&format!(
                "{bin},{},{score}\n",
                bin as f64 * signal::SAMPLE_RATE / signal::WINDOW_LEN as f64
            ));
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Generate { config, out_dir, csv } => cmd_generate(config, out_dir, *csv),
        Command::Train {
            config,
            data_dir,
            out_dir,
        } => cmd_train(config, data_dir.as_deref(), out_dir),
        Command::Eval {
            checkpoint,
            dataset,
            report,
            export_features,
        } => cmd_eval(checkpoint, dataset, report.as_deref(), export_features.as_deref()),
        Command::Explain {
            checkpoint,
            dataset,
            index,
            out,
            attribution_csv,
            all_prototypes,
        } => cmd_explain(
            checkpoint,
            dataset,
            *index,
            out.as_deref(),
            attribution_csv.as_deref(),
            all_prototypes.as_deref(),
        ),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
