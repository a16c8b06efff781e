//! `bm3` — dataset preparation, training, evaluation, ablation, and
//! grid sweeps for the BM3 multi-modal recommender, driven by a flat
//! JSON config.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numeric divergence. `BM3_THREADS` caps internal parallelism.

mod config;
mod output;

use bm3_core::{
    build_dataset, evaluate_checkpoint, kcore_filter, load_interactions, run_ablation, run_grid,
    split_per_user, train, write_index_map, write_interactions, Error, ErrorClass, Phase, Result,
    SplitDataset,
};
use clap::{Parser, Subcommand};
use config::load_run_config;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "bm3",
    version,
    about = "Self-supervised multi-modal recommendation: prepare data, train, evaluate, ablate, sweep"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Filter a raw interaction table to its k-core, index it, split it
    /// per user, and write the prepared artifacts.
    Prepare {
        /// Raw tab-separated interactions: user, item[, timestamp].
        #[arg(long)]
        input: PathBuf,
        /// k-core threshold: keep users/items with at least k interactions.
        #[arg(long, default_value_t = 5)]
        k: u32,
        /// Seed for the per-user train/valid/test split.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output directory for the prepared dataset.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model as described by a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-evaluate a saved checkpoint on the valid or test split.
    Evaluate {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which split to rank: "valid" or "test".
        #[arg(long)]
        phase: String,
    },
    /// Train all seven ablation variants with the config's seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sweep layers x dropout x lambda and pick the best cell by
    /// validation recall.
    Grid {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2u8,
                ErrorClass::Data => 3u8,
                ErrorClass::Divergence => 4u8,
            })
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    init_threads()?;
    match cmd {
        Cmd::Prepare { input, k, seed, out } => cmd_prepare(&input, k, seed, &out),
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Evaluate { checkpoint, phase } => cmd_evaluate(&checkpoint, &phase),
        Cmd::Ablate { config } => cmd_ablate(&config),
        Cmd::Grid { config } => cmd_grid(&config),
    }
}

/// Honors `BM3_THREADS` by sizing the global worker pool before any
/// parallel work runs. Unset means one worker per core.
fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("BM3_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        Error::InvalidParameter {
            name: "BM3_THREADS",
            reason: format!("`{}` is not a positive thread count", raw),
        }
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidConfig(format!("thread pool setup failed: {}", e)))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

/// Reproducibility contract: the config a run was started from is
/// copied into its output directory.
fn copy_config_into(config: &Path, out_dir: &Path) -> Result<()> {
    let dest = out_dir.join("config.json");
    if let (Ok(a), Ok(b)) = (std::fs::canonicalize(config), std::fs::canonicalize(&dest)) {
        if a == b {
            return Ok(());
        }
    }
    std::fs::copy(config, &dest).map_err(|e| Error::Io { path: dest, source: e })?;
    Ok(())
}

fn write_edges(path: &Path, split: &SplitDataset, edges: &[(u32, u32)]) -> Result<()> {
    let mut out = String::with_capacity(edges.len() * 16);
    for &(u, i) in edges {
        out.push_str(&split.dataset.user_keys[u as usize]);
        out.push('\t');
        out.push_str(&split.dataset.item_keys[i as usize]);
        out.push('\n');
    }
    output::write_text(path, &out)
}

#[derive(Serialize)]
struct PrepareStats {
    users: usize,
    items: usize,
    interactions: usize,
    /// Fraction of the user-item matrix without an interaction.
    sparsity: f64,
    k: u32,
    split_seed: u64,
    train_edges: usize,
    valid_edges: usize,
    test_edges: usize,
}

fn cmd_prepare(input: &Path, k: u32, seed: u64, out: &Path) -> Result<()> {
    let records = load_interactions(input, '\t')?;
    let filtered = kcore_filter(&records, k)?;
    let dataset = build_dataset(&filtered)?;
    let stats = dataset.stats();
    let split = split_per_user(dataset, seed)?;

    ensure_dir(out)?;
    write_interactions(&out.join("interactions.tsv"), &filtered)?;
    write_index_map(&out.join("user_index.tsv"), &split.dataset.user_keys)?;
    write_index_map(&out.join("item_index.tsv"), &split.dataset.item_keys)?;
    write_edges(&out.join("train.tsv"), &split, &split.train)?;
    write_edges(&out.join("valid.tsv"), &split, &split.valid)?;
    write_edges(&out.join("test.tsv"), &split, &split.test)?;
    let summary = PrepareStats {
        users: stats.users,
        items: stats.items,
        interactions: stats.interactions,
        sparsity: stats.sparsity,
        k,
        split_seed: seed,
        train_edges: split.train.len(),
        valid_edges: split.valid.len(),
        test_edges: split.test.len(),
    };
    output::write_json_pretty(&out.join("stats.json"), &summary)?;

    println!("prepared {} -> {}", input.display(), out.display());
    println!(
        "{:<14} {:>10}\n{:<14} {:>10}\n{:<14} {:>10}\n{:<14} {:>9.2}%",
        "users",
        summary.users,
        "items",
        summary.items,
        "interactions",
        summary.interactions,
        "sparsity",
        summary.sparsity * 100.0
    );
    println!(
        "split (seed {}): train {} | valid {} | test {}",
        seed,
        summary.train_edges,
        summary.valid_edges,
        summary.test_edges
    );
    Ok(())
}

fn cmd_train(config_path: &Path) -> Result<()> {
    let cfg = load_run_config(config_path)?;
    ensure_dir(&cfg.out_dir)?;
    copy_config_into(config_path, &cfg.out_dir)?;
    let (split, features, pointers) = cfg.load_data()?;
    let report = train(&cfg.train_config(), &split, &features, &cfg.out_dir, Some(pointers))?;
    output::write_json_pretty(&cfg.out_dir.join("report.json"), &report)?;

    let seconds: f64 = report.epoch_seconds.iter().sum();
    println!(
        "trained {} epochs in {:.1}s (best epoch {}{}); artifacts in {}",
        report.epochs_run,
        seconds,
        report.best_epoch,
        if report.stopped_early { ", stopped early" } else { "" },
        cfg.out_dir.display()
    );
    print!("{}", output::metrics_table("valid", &report.best_valid));
    print!("{}", output::metrics_table("test", &report.test_metrics));
    Ok(())
}

fn cmd_evaluate(checkpoint: &Path, phase: &str) -> Result<()> {
    let phase: Phase = phase.parse().map_err(|_| Error::InvalidParameter {
        name: "phase",
        reason: format!("`{}` is neither `valid` nor `test`", phase),
    })?;
    let report = evaluate_checkpoint(checkpoint, phase)?;
    let parent = match checkpoint.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => checkpoint,
    };
    let path = parent.join(format!("eval_{}.json", phase));
    output::write_json_pretty(&path, &report)?;
    println!("evaluated {} -> {}", checkpoint.display(), path.display());
    print!("{}", output::metrics_table(&phase.to_string(), &report));
    Ok(())
}

fn cmd_ablate(config_path: &Path) -> Result<()> {
    let cfg = load_run_config(config_path)?;
    ensure_dir(&cfg.out_dir)?;
    copy_config_into(config_path, &cfg.out_dir)?;
    let (split, features, pointers) = cfg.load_data()?;
    let rows = run_ablation(&cfg.train_config(), &split, &features, &cfg.out_dir, Some(pointers))?;
    let tsv = output::ablation_tsv(&rows, &cfg.cutoffs, cfg.stop_cutoff);
    output::write_text(&cfg.out_dir.join("ablation.tsv"), &tsv)?;
    output::write_json_pretty(&cfg.out_dir.join("ablation.json"), &rows)?;

    println!("ablation of {} variants; artifacts in {}", rows.len(), cfg.out_dir.display());
    print!("{}", tsv.replace('\t', "  "));
    Ok(())
}

fn cmd_grid(config_path: &Path) -> Result<()> {
    let cfg = load_run_config(config_path)?;
    ensure_dir(&cfg.out_dir)?;
    copy_config_into(config_path, &cfg.out_dir)?;
    let (split, features, pointers) = cfg.load_data()?;
    let outcome = run_grid(
        &cfg.train_config(),
        &split,
        &features,
        &cfg.out_dir,
        Some(pointers),
        &cfg.grid_layers,
        &cfg.grid_dropout,
        &cfg.grid_lambda,
    )?;
    let tsv = output::grid_tsv(&outcome, &cfg.cutoffs, cfg.stop_cutoff);
    output::write_text(&cfg.out_dir.join("grid.tsv"), &tsv)?;
    output::write_json_pretty(&cfg.out_dir.join("grid.json"), &outcome)?;

    let best = &outcome.rows[outcome.best];
    println!(
        "swept {} cells; best layers={} dropout={} lambda={} (valid recall@{} = {:.4}); artifacts in {}",
        outcome.rows.len(),
        best.point.layers,
        best.point.dropout,
        best.point.lambda,
        cfg.stop_cutoff,
        best.valid_stop_metric,
        cfg.out_dir.display()
    );
    print!("{}", tsv.replace('\t', "  "));
    Ok(())
}
