//! Batch front end for the training workbench. Each subcommand drives one
//! pipeline stage against a run directory; finished stages are skipped
//! unless `--force`. Human-readable progress goes to stdout, structured
//! errors go to stderr as single-line JSON.

use clap::{Parser, Subcommand};
use encodenet_core::pipeline::{Pipeline, PipelineConfig, TargetMode};
use encodenet_core::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

mod config;
mod report;
mod svg;

const RUN_DIR_ENV: &str = "ENCODENET_RUN_DIR";

#[derive(Parser)]
#[command(name = "encodenet", version, about = "EncodeNet training workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config file (TOML)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override a config value, e.g. --set head_train.epochs=12
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Run directory (default: $ENCODENET_RUN_DIR, else runs/<config stem>)
    #[arg(long, global = true, value_name = "PATH")]
    run_dir: Option<PathBuf>,

    /// Act on a single seed instead of every seed in the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Recompute this stage even when a finished artifact exists
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train the baseline classifier
    TrainBaseline,
    /// Cluster each class in encoder-feature space
    Cluster,
    /// Score prediction entropies and pick per-cell representative images
    Rank,
    /// Train the converting autoencoder toward its target images
    TrainCae,
    /// Graft the trained encoder into a classifier, head untrained
    Assemble,
    /// Train the classifier head with the encoder frozen
    TrainHead,
    /// Run the whole grid: baseline plus all three target modes
    Ablate,
    /// Render tables, plots, and conversion grids from a finished run
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({
                "error": error_kind(&e),
                "message": e.to_string(),
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension(_) => "dimension",
        Error::Numeric(_) => "numeric",
        Error::State(_) => "state",
        Error::Parse { .. } => "parse",
        Error::InvalidModel(_) => "invalid_model",
        Error::Split(_) => "split",
        Error::Synthesis(_) => "synthesis",
        Error::Dataset(_) => "dataset",
        Error::Config(_) => "config",
        Error::Checkpoint(_) => "checkpoint",
        Error::SpecMismatch(_) => "spec_mismatch",
        Error::Clustering(_) => "clustering",
        Error::Entropy(_) => "entropy",
        Error::Prerequisite(_) => "prerequisite",
        Error::Evaluation(_) => "evaluation",
        Error::Io(_) => "io",
        Error::Serde(_) => "serde",
    }
}

struct Invocation {
    pipeline: Pipeline,
    seeds: Vec<u64>,
    force: bool,
}

fn run(cli: &Cli) -> Result<()> {
    let mut inv = build_invocation(cli)?;
    match cli.command {
        Command::TrainBaseline => train_baseline(&mut inv),
        Command::Cluster => cluster(&mut inv),
        Command::Rank => rank(&mut inv),
        Command::TrainCae => train_cae(&mut inv),
        Command::Assemble => assemble(&mut inv),
        Command::TrainHead => train_head(&mut inv),
        Command::Ablate => ablate(&mut inv),
        Command::Report => {
            let written = report::render(&inv.pipeline)?;
            for rel in written {
                println!("wrote {rel}");
            }
            Ok(())
        }
    }
}

/// Resolves config text, run directory, and data root. `report` can run
/// from the copies a previous command left in the run directory; every
/// other command needs `--config`.
fn build_invocation(cli: &Cli) -> Result<Invocation> {
    let (mut config, model_text, data_root, run_dir) = match &cli.config {
        Some(path) => {
            let config = config::load(path, &cli.overrides)?;
            let config_dir = path
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            let model_path = config_dir.join(&config.model);
            let model_text = std::fs::read_to_string(&model_path).map_err(|e| {
                Error::Config(format!("cannot read model {}: {e}", model_path.display()))
            })?;
            let run_dir = resolve_run_dir(cli, Some(path));
            (config, model_text, config_dir, run_dir)
        }
        None => {
            if !matches!(cli.command, Command::Report) {
                return Err(Error::Config("--config is required".into()));
            }
            let run_dir = resolve_run_dir(cli, None);
            let stored = run_dir.join("config.json");
            let config: PipelineConfig = serde_json::from_str(
                &std::fs::read_to_string(&stored).map_err(|e| {
                    Error::Prerequisite(format!(
                        "no --config given and no stored config at {}: {e}",
                        stored.display()
                    ))
                })?,
            )?;
            let model_text = std::fs::read_to_string(run_dir.join("model.txt"))?;
            (config, model_text, run_dir.clone(), run_dir)
        }
    };
    if let Some(s) = cli.seed {
        config.seeds = vec![s];
    }
    let seeds = config.seeds.clone();
    let pipeline = Pipeline::new(config, &model_text, &data_root, run_dir)?;
    Ok(Invocation {
        pipeline,
        seeds,
        force: cli.force,
    })
}

fn resolve_run_dir(cli: &Cli, config_path: Option<&Path>) -> PathBuf {
    if let Some(dir) = &cli.run_dir {
        return dir.clone();
    }
    if let Ok(dir) = std::env::var(RUN_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    let stem = config_path
        .and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "default".into());
    PathBuf::from("runs").join(stem)
}

/// The mode a stage command acts on comes from the config (or a `--set
/// target_mode=...` override).
fn target_mode(inv: &Invocation) -> TargetMode {
    inv.pipeline.config().target_mode
}

fn train_baseline(inv: &mut Invocation) -> Result<()> {
    for &seed in &inv.seeds.clone() {
        if inv.force {
            let key = inv.pipeline.baseline_key(seed);
            inv.pipeline.store().invalidate(&key)?;
        }
        let (_, record) = inv.pipeline.baseline(seed)?;
        println!(
            "baseline seed {seed}: final loss {:.4}, test accuracy {}",
            record.final_loss,
            record
                .test_accuracy
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "-".into())
        );
    }
    Ok(())
}

fn cluster(inv: &mut Invocation) -> Result<()> {
    let mode = target_mode(inv);
    let k_mode = inv
        .pipeline
        .config()
        .effective_k_mode(mode)
        .ok_or_else(|| {
            Error::Config("target_mode same_image does not cluster; nothing to do".into())
        })?;
    for &seed in &inv.seeds.clone() {
        inv.pipeline
            .require(&inv.pipeline.baseline_key(seed), "baseline")?;
        if inv.force {
            let key = inv.pipeline.clusters_key(seed, &k_mode);
            inv.pipeline.store().invalidate(&key)?;
        }
        let (mut baseline, _) = inv.pipeline.baseline(seed)?;
        let (clusters, _) = inv.pipeline.clusters(seed, &k_mode, &mut baseline)?;
        let ks: Vec<String> = clusters
            .classes
            .iter()
            .map(|c| format!("class {}: k={}{}", c.class, c.k, if c.capped { " (capped)" } else { "" }))
            .collect();
        println!("clusters seed {seed}: {}", ks.join(", "));
    }
    Ok(())
}

fn rank(inv: &mut Invocation) -> Result<()> {
    let mode = target_mode(inv);
    let k_mode = inv
        .pipeline
        .config()
        .effective_k_mode(mode)
        .ok_or_else(|| {
            Error::Config("target_mode same_image does not rank; nothing to do".into())
        })?;
    for &seed in &inv.seeds.clone() {
        inv.pipeline
            .require(&inv.pipeline.clusters_key(seed, &k_mode), "clustering")?;
        if inv.force {
            let key = inv.pipeline.rank_key(seed, &k_mode);
            inv.pipeline.store().invalidate(&key)?;
        }
        let (mut baseline, _) = inv.pipeline.baseline(seed)?;
        let (clusters, clusters_key) = inv.pipeline.clusters(seed, &k_mode, &mut baseline)?;
        let (pairs, _) = inv
            .pipeline
            .rank(seed, &clusters_key, &clusters, &mut baseline)?;
        let cells = clusters.cells(inv.pipeline.train_set()).len();
        println!("rank seed {seed}: {} pairs over {cells} cells", pairs.len());
    }
    Ok(())
}

fn train_cae(inv: &mut Invocation) -> Result<()> {
    let mode = target_mode(inv);
    for &seed in &inv.seeds.clone() {
        inv.pipeline
            .require(&inv.pipeline.baseline_key(seed), "baseline")?;
        if let Some(k_mode) = inv.pipeline.config().effective_k_mode(mode) {
            inv.pipeline
                .require(&inv.pipeline.rank_key(seed, &k_mode), "rank")?;
        }
        if inv.force {
            let key = inv.pipeline.cae_key(seed, mode);
            inv.pipeline.store().invalidate(&key)?;
        }
        let (_, record, _, _) = inv.pipeline.cae(seed, mode)?;
        println!(
            "cae {} seed {seed}: final loss {:.6}, holdout {}",
            mode,
            record.final_loss,
            record
                .holdout_loss
                .map(|l| format!("{l:.6}"))
                .unwrap_or_else(|| "-".into())
        );
    }
    Ok(())
}

fn assemble(inv: &mut Invocation) -> Result<()> {
    let mode = target_mode(inv);
    for &seed in &inv.seeds.clone() {
        inv.pipeline
            .require(&inv.pipeline.cae_key(seed, mode), "autoencoder")?;
        if inv.force {
            let key = inv.pipeline.assembled_key(seed, mode);
            inv.pipeline.store().invalidate(&key)?;
        }
        let model = inv.pipeline.assemble(seed, mode)?;
        println!(
            "assembled {} seed {seed}: {} parameters, encoder depth {} layers",
            mode,
            model.params.parameter_count(),
            model.boundary
        );
    }
    Ok(())
}

fn train_head(inv: &mut Invocation) -> Result<()> {
    let mode = target_mode(inv);
    for &seed in &inv.seeds.clone() {
        inv.pipeline
            .require(&inv.pipeline.assembled_key(seed, mode), "assembled model")?;
        if inv.force {
            let key = inv.pipeline.head_key(seed, mode);
            inv.pipeline.store().invalidate(&key)?;
        }
        let (_, record) = inv.pipeline.encodenet(seed, mode)?;
        println!(
            "head {} seed {seed}: test accuracy {}",
            mode,
            record
                .test_accuracy
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "-".into())
        );
    }
    Ok(())
}

fn ablate(inv: &mut Invocation) -> Result<()> {
    inv.pipeline.force = inv.force;
    let table = inv.pipeline.run_ablation()?;
    for row in &table.rows {
        let accs: Vec<String> = row
            .accuracies
            .iter()
            .map(|a| format!("seed {} → {:.4}", a.seed, a.accuracy))
            .collect();
        println!(
            "{:<28} {:<60} median {}",
            row.label,
            accs.join("  "),
            row.median
                .map(|m| format!("{m:.4}"))
                .unwrap_or_else(|| "-".into())
        );
    }
    println!(
        "expected ordering {}",
        if table.expected_order_held { "held" } else { "violated" }
    );
    for f in &table.failures {
        println!("failed: {} seed {}: {}", f.label, f.seed, f.error);
    }
    if table.failures.is_empty() {
        Ok(())
    } else {
        Err(Error::State(format!(
            "{} ablation cell(s) failed",
            table.failures.len()
        )))
    }
}
