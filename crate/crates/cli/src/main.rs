//! Command-line driver for ingest, training, evaluation and synthetic data.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use rsgt::config::{Ablation, ExperimentConfig};
use rsgt::experiment::{
    build_structures, evaluate_model, load_model, model_gradcheck, prepare, run_experiment, train_seed, write_file,
    write_logs, ExperimentError,
};
use rsgt::synth::{generate, SynthConfig, SynthKind};

#[derive(Parser)]
#[command(name = "rsgt", version, about = "Structure-reinforced graph transformer for dynamic link prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `section.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Structural ablation preset.
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (results JSON, checkpoint or summary by subcommand).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `section.key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Load and slice the dataset, print snapshot statistics.
    Ingest(Common),
    /// Train one model and write its checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the test snapshots.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full pipeline over every configured seed.
    Run(Common),
    /// Write a synthetic temporal edge list.
    GenSynth {
        #[arg(long, default_value = "planted-persistent")]
        kind: SynthKind,
        #[arg(long, default_value_t = 50)]
        nodes: usize,
        #[arg(long, default_value_t = 20)]
        slices: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-slice probability of starting a fixed-length burst edge.
        #[arg(long, default_value_t = 0.0)]
        burst_rate: f64,
        #[arg(long, default_value_t = 4)]
        burst_length: usize,
        /// Absent slices before a finished burst restarts; 0 never restarts.
        #[arg(long, default_value_t = 0)]
        burst_gap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check of the full model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "full")]
        ablation: Ablation,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(a) = c.ablation {
        cfg.ablation = a;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    for kv in &c.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn stage_error(e: ExperimentError) -> anyhow::Error {
    let stage = e.stage();
    anyhow::Error::new(e).context(format!("stage {stage} failed"))
}

fn ingest(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = prepare(&cfg).map_err(stage_error)?;
    let mut lines = vec![format!(
        "nodes {} snapshots {} train {} test {}",
        data.sequence.node_count(),
        data.sequence.len(),
        data.train.len(),
        data.test.len()
    )];
    for (t, (s, g)) in data.sequence.snapshots().iter().zip(&data.graphs).enumerate() {
        lines.push(format!("snapshot {t}: {} edges, {} diff-graph edges", s.len(), g.edges().len()));
    }
    let text = lines.join("\n") + "\n";
    match &c.out {
        Some(p) => write_file(p, text.as_bytes()).map_err(stage_error)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = prepare(&cfg).map_err(stage_error)?;
    let structures = build_structures(&cfg, &data).map_err(stage_error)?;
    let ckpt = c.out.clone().or_else(|| cfg.output.checkpoint.clone());
    let (_, log) = train_seed(&cfg, &data, &structures, cfg.seed, ckpt.as_deref()).map_err(stage_error)?;
    if let Some(p) = &cfg.output.log {
        write_logs(p, &[(cfg.seed, log.clone())]).map_err(stage_error)?;
    }
    if let Some(last) = log.epoch_means.last() {
        println!("final epoch loss {last:.6}");
    }
    Ok(())
}

fn eval(c: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(c)?;
    let data = prepare(&cfg).map_err(stage_error)?;
    let structures = build_structures(&cfg, &data).map_err(stage_error)?;
    let model = load_model(&cfg, data.sequence.node_count(), checkpoint).map_err(stage_error)?;
    let (report, baseline) = evaluate_model(&cfg, &data, &structures, &model, cfg.seed).map_err(stage_error)?;
    let json = serde_json::json!({ "model": report, "baseline": baseline });
    let text = serde_json::to_string_pretty(&json)? + "\n";
    match &c.out {
        Some(p) => write_file(p, text.as_bytes()).map_err(stage_error)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    if let Some(p) = &c.out {
        cfg.output.results = Some(p.clone());
    }
    let results = run_experiment(&cfg).map_err(stage_error)?;
    let s = &results.summary;
    print!("accuracy {:.4} ± {:.4}", s.mean.accuracy, s.std.accuracy);
    if let Some(b) = &results.baseline_summary {
        print!(" (common neighbours {:.4} ± {:.4})", b.mean.accuracy, b.std.accuracy);
    }
    println!();
    if cfg.output.results.is_none() {
        println!("{}", results.to_json());
    }
    Ok(())
}

fn main_inner() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest(c) => ingest(&c),
        Command::Train(c) => train(&c),
        Command::Eval { common, checkpoint } => eval(&common, &checkpoint),
        Command::Run(c) => run(&c),
        Command::GenSynth {
            kind,
            nodes,
            slices,
            seed,
            burst_rate,
            burst_length,
            burst_gap,
            out,
        } => {
            let cfg = SynthConfig {
                kind,
                n_nodes: nodes,
                n_slices: slices,
                seed,
                burst_rate,
                burst_length,
                burst_gap,
                ..SynthConfig::default()
            };
            let data = generate(&cfg).context("stage ingest failed")?;
            data.write(&out)?;
            info!("wrote {}", out.display());
            Ok(())
        }
        Command::Gradcheck { seed, ablation } => {
            let r = model_gradcheck(seed, ablation).map_err(stage_error)?;
            println!(
                "checked {} entries: max relative error {:.3e} at {}, max absolute error {:.3e}",
                r.checked, r.max_rel_err, r.worst, r.max_abs_err
            );
            anyhow::ensure!(r.max_rel_err < 1e-4, "gradient check failed");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match main_inner() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
