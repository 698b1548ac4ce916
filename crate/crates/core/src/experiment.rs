//! End-to-end pipeline: ingest, diff graphs, training per seed, test-state
//! roll-out, probe evaluation and the results file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use thiserror::Error;

use crate::config::{Ablation, ExperimentConfig};
use crate::diff_graph::{build_sequence, DiffError, DiffGraph, DurationRule, WeightLaw};
use crate::eval::{
    common_neighbor_baseline, evaluate_features, model_features, per_snapshot_means, roll_test_states, summarize,
    test_examples, EvalError, Metrics, MetricsReport, SeedSummary,
};
use crate::model::{Model, ModelError, SgtConfig, StepStructure};
use crate::rng::{stream_rng, Purpose};
use crate::snapshot::{load_edge_list, parse_edge_list, slice_snapshots, split_train_test, IngestError, SnapshotSequence};
use crate::synth::{generate, SynthConfig, SynthError, SynthKind};
use crate::tensor::gradcheck::GradCheckReport;
use crate::tensor::{load_checkpoint, Tensor};
use crate::train::{build_examples, fit_structures, gradcheck_window, TrainConfig, TrainError, TrainLog};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("ingest: {0}")]
    Ingest(#[from] IngestError),
    #[error("ingest: {0}")]
    Synth(#[from] SynthError),
    #[error("diff_graph: {0}")]
    DiffGraph(#[from] DiffError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("train: {0}")]
    Train(#[from] TrainError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("output: {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ExperimentError {
    pub fn stage(&self) -> &'static str {
        match self {
            Self::Ingest(_) | Self::Synth(_) => "ingest",
            Self::DiffGraph(_) => "diff_graph",
            Self::Model(_) => "model",
            Self::Train(_) => "train",
            Self::Eval(_) => "eval",
            Self::Output { .. } => "output",
        }
    }
}

/// Snapshots and diff graphs shared by every seed of a run.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub sequence: SnapshotSequence,
    pub train: SnapshotSequence,
    pub test: SnapshotSequence,
    pub graphs: Vec<DiffGraph>,
}

/// Loads the configured edge list, or generates the synthetic one, and
/// slices it.
pub fn load_sequence(cfg: &ExperimentConfig) -> Result<SnapshotSequence, ExperimentError> {
    let tel = match &cfg.dataset.path {
        Some(p) => load_edge_list(p)?,
        None => parse_edge_list(generate(&cfg.synth)?.to_edge_list().as_bytes())?,
    };
    Ok(slice_snapshots(&tel, cfg.dataset.n_slices)?)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData, ExperimentError> {
    let sequence = load_sequence(cfg)?;
    let (train, test) = split_train_test(&sequence, cfg.dataset.n_train)?;
    let graphs = build_sequence(&sequence, cfg.dataset.weight_law(), cfg.dataset.duration_rule)?;
    info!(
        "{} nodes, {} snapshots ({} train / {} test)",
        sequence.node_count(),
        sequence.len(),
        train.len(),
        test.len()
    );
    Ok(PreparedData {
        sequence,
        train,
        test,
        graphs,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub model: MetricsReport,
    pub baseline: Option<MetricsReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentResults {
    pub config: BTreeMap<String, String>,
    pub git_describe: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedResult>,
    pub per_snapshot: BTreeMap<usize, Metrics>,
    pub summary: SeedSummary,
    pub baseline_summary: Option<SeedSummary>,
}

impl ExperimentResults {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }
}

/// `git describe --always --dirty` of the working directory, overridable by
/// `RSGT_GIT_DESCRIBE`; `"unknown"` outside a repository.
pub fn git_describe() -> String {
    if let Ok(v) = std::env::var("RSGT_GIT_DESCRIBE") {
        return v;
    }
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

fn with_seed_suffix(path: &Path, seed: u64, multi: bool) -> PathBuf {
    if !multi {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}.seed{seed}"),
    };
    path.with_file_name(name)
}

/// Fresh model for `seed` trained on the train prefix.
pub fn train_seed(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    structures: &[StepStructure],
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<(Model, TrainLog), ExperimentError> {
    let mut model = Model::new(
        cfg.effective_model(),
        data.sequence.node_count(),
        &mut stream_rng(seed, Purpose::Init),
    )?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let log = fit_structures(&mut model, &data.train, &structures[..cfg.dataset.n_train], &tcfg, checkpoint)?;
    Ok((model, log))
}

/// Model shaped by `cfg` with parameters read from `path`.
pub fn load_model(cfg: &ExperimentConfig, node_count: usize, path: &Path) -> Result<Model, ExperimentError> {
    let mut model = Model::new(cfg.effective_model(), node_count, &mut stream_rng(cfg.seed, Purpose::Init))?;
    let store = load_checkpoint(path).map_err(ModelError::from)?;
    model.params_mut().load_values(&store).map_err(ModelError::from)?;
    Ok(model)
}

/// Test-set probe of `model` and, when configured, of the baseline.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    structures: &[StepStructure],
    model: &Model,
    seed: u64,
) -> Result<(MetricsReport, Option<MetricsReport>), ExperimentError> {
    let n_train = cfg.dataset.n_train;
    let states = roll_test_states(model, structures, n_train)?;
    let examples = test_examples(&data.sequence, n_train, cfg.eval.neg_ratio, seed)?;
    let features = model_features(&states, &examples);
    let report = evaluate_features(&features, &examples, n_train, cfg.eval.pooled, seed, &cfg.eval.logistic)?;
    let baseline = if cfg.eval.baseline {
        Some(common_neighbor_baseline(
            &data.sequence,
            n_train,
            &examples,
            cfg.eval.pooled,
            seed,
            &cfg.eval.logistic,
        )?)
    } else {
        None
    };
    Ok((report, baseline))
}

/// Trains one model for `seed` and evaluates it.
pub fn run_seed(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    structures: &[StepStructure],
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<(SeedResult, TrainLog), ExperimentError> {
    let (model, log) = train_seed(cfg, data, structures, seed, checkpoint)?;
    let (report, baseline) = evaluate_model(cfg, data, structures, &model, seed)?;
    info!(
        "seed {seed}: accuracy {:.4}{}",
        report.mean.accuracy,
        baseline
            .as_ref()
            .map(|b| format!(" (common neighbours {:.4})", b.mean.accuracy))
            .unwrap_or_default()
    );
    Ok((
        SeedResult {
            seed,
            epoch_losses: log.epoch_means.clone(),
            model: report,
            baseline,
        },
        log,
    ))
}

/// Diff-graph structures for every snapshot under the effective model
/// config.
pub fn build_structures(cfg: &ExperimentConfig, data: &PreparedData) -> Result<Vec<StepStructure>, ExperimentError> {
    let model_cfg = cfg.effective_model();
    model_cfg.validate()?;
    Ok(data.graphs.iter().map(|g| StepStructure::build(g, &model_cfg)).collect())
}

/// Runs every seed and writes the configured outputs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults, ExperimentError> {
    let data = prepare(cfg)?;
    let structures = build_structures(cfg, &data)?;
    let seeds = cfg.seeds();
    let multi = seeds.len() > 1;

    let mut runs = Vec::with_capacity(seeds.len());
    let mut logs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let ckpt = cfg.output.checkpoint.as_ref().map(|p| with_seed_suffix(p, seed, multi));
        let (run, log) = run_seed(cfg, &data, &structures, seed, ckpt.as_deref())?;
        runs.push(run);
        logs.push((seed, log));
    }

    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.model.clone()).collect();
    let baseline_summary = if cfg.eval.baseline {
        let b: Vec<MetricsReport> = runs.iter().filter_map(|r| r.baseline.clone()).collect();
        Some(summarize(&seeds, &b))
    } else {
        None
    };
    let results = ExperimentResults {
        config: cfg.to_pairs(),
        git_describe: git_describe(),
        seeds: seeds.clone(),
        per_snapshot: per_snapshot_means(&reports),
        summary: summarize(&seeds, &reports),
        baseline_summary,
        runs,
    };

    if let Some(path) = &cfg.output.log {
        write_logs(path, &logs)?;
    }
    if let Some(path) = &cfg.output.results {
        write_file(path, results.to_json().as_bytes())?;
    }
    Ok(results)
}

/// Finite-difference check of the full model on a small churn graph
/// (8 nodes, `d = 8`, two layers, a window of two steps).
pub fn model_gradcheck(seed: u64, ablation: Ablation) -> Result<GradCheckReport, ExperimentError> {
    let synth = SynthConfig {
        kind: SynthKind::Churn,
        n_nodes: 8,
        n_slices: 3,
        seed,
        churn_density: 0.3,
        ..SynthConfig::default()
    };
    let seq = generate(&synth)?.to_sequence();
    let graphs = build_sequence(&seq, WeightLaw { alpha: 1.0, beta: 0.5 }, DurationRule::default())?;
    let mut mcfg = SgtConfig {
        d: 8,
        d_e: 8,
        n_layers: 2,
        n_heads: 2,
        max_spd: 3,
        conv_width: 2,
        ..SgtConfig::default()
    };
    ablation.apply(&mut mcfg);
    let model = Model::new(mcfg, seq.node_count(), &mut stream_rng(seed, Purpose::Init))?;
    let structures: Vec<StepStructure> = graphs[..2].iter().map(|g| StepStructure::build(g, model.config())).collect();
    let steps: Vec<&StepStructure> = structures.iter().collect();
    let tcfg = TrainConfig::default();
    let (pairs, labels) = build_examples(&seq.snapshots()[2], seq.node_count(), &tcfg, &mut stream_rng(seed, Purpose::Sampling))?;
    let residual = Tensor::zeros(&[seq.node_count(), model.config().d]);
    Ok(gradcheck_window(&model, &steps, &residual, &pairs, &labels, 1e-3, 1e-5)?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let err = |source| ExperimentError::Output {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(err)?;
    }
    std::fs::write(path, bytes).map_err(err)
}

/// Training log as CSV with a leading seed column.
pub fn write_logs(path: &Path, logs: &[(u64, TrainLog)]) -> Result<(), ExperimentError> {
    let mut buf = Vec::new();
    writeln!(buf, "seed,epoch,window,loss,wall_time").expect("in-memory write");
    for (seed, log) in logs {
        for r in &log.rows {
            writeln!(buf, "{seed},{},{},{},{:.6}", r.epoch, r.window, r.loss, r.wall_time).expect("in-memory write");
        }
    }
    write_file(path, &buf)
}
