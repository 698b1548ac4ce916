//! Windowed recurrent training by next-snapshot link prediction.
//!
//! Window `w` unrolls the diff graphs `w..w+W` from an entry state and is
//! scored against snapshot `w+W`. The next window enters at the state after
//! graph `w`, recomputed with the updated parameters.
//!
//! Entry states are carried as `R = H − X` with `R` detached, so the history
//! before a window contributes no gradient while `X` stays on the tape.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff_graph::DiffGraph;
use crate::model::{HiddenState, Model, ModelError, StepStructure};
use crate::rng::{stream_rng, Purpose};
use crate::snapshot::{Edge, Snapshot, SnapshotSequence};
use crate::tensor::gradcheck::{check_params, GradCheckReport};
use crate::tensor::{save_checkpoint, AdamW, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training needs at least {need} snapshots, got {have}")]
    InsufficientSnapshots { need: usize, have: usize },
    #[error("cannot sample {requested} negatives, only {available} non-edges exist")]
    NegativeSampling { requested: usize, available: usize },
    #[error("{preds} predictions but {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("{0} diff graphs do not match {1} snapshots")]
    GraphCount(usize, usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Unroll depth and gradient-truncation horizon.
    pub window: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Coefficient of the explicit `Σθ²` term.
    pub l2_lambda: f64,
    pub neg_ratio: f64,
    /// Upper bound on scored examples per window; `None` scores all.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Keep the carried state across epochs instead of restarting from `X`.
    pub carry_state: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: 5,
            epochs: 30,
            lr: 1e-3,
            l2_lambda: 1e-5,
            neg_ratio: 1.0,
            batch_size: None,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            carry_state: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.window == 0 {
            return Err(TrainError::Config("window must be at least 1".into()));
        }
        if !(self.neg_ratio > 0.0) {
            return Err(TrainError::Config("neg_ratio must be positive".into()));
        }
        if self.batch_size == Some(0) {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Uniform directed non-edges `(i, j)`, `i ≠ j`, absent from `target`,
/// without repeats; `round(ratio·|target|)` of them.
pub fn sample_negatives<R: Rng>(
    target: &Snapshot,
    node_count: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<Vec<Edge>, TrainError> {
    let requested = (ratio * target.len() as f64).round() as usize;
    if requested == 0 {
        return Ok(Vec::new());
    }
    let total = node_count * node_count.saturating_sub(1);
    let inside = target.iter().filter(|(i, j)| i != j && *i < node_count && *j < node_count).count();
    let available = total - inside;
    if requested > available {
        return Err(TrainError::NegativeSampling { requested, available });
    }
    if requested * 2 > available {
        let mut pool: Vec<Edge> = (0..node_count)
            .flat_map(|i| (0..node_count).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && !target.contains(&(i, j)))
            .collect();
        pool.shuffle(rng);
        pool.truncate(requested);
        return Ok(pool);
    }
    let mut seen = HashSet::with_capacity(requested);
    let mut out = Vec::with_capacity(requested);
    while out.len() < requested {
        let i = rng.random_range(0..node_count);
        let j = rng.random_range(0..node_count);
        if i == j || target.contains(&(i, j)) || !seen.insert((i, j)) {
            continue;
        }
        out.push((i, j));
    }
    Ok(out)
}

/// Mean binary cross-entropy plus `l2_lambda · Σθ²` over trainable parameters.
pub fn loss(
    tape: &Tape,
    preds: Var,
    labels: &[f64],
    params: &ParamStore,
    l2_lambda: f64,
) -> Result<Var, TrainError> {
    let n = tape.shape(preds).iter().product::<usize>();
    if n != labels.len() {
        return Err(TrainError::LengthMismatch {
            preds: n,
            labels: labels.len(),
        });
    }
    let bce = tape.bce_mean(preds, labels)?;
    if l2_lambda == 0.0 {
        return Ok(bce);
    }
    let mut reg: Option<Var> = None;
    for (id, p) in params.iter() {
        if !p.trainable() {
            continue;
        }
        let s = tape.sum_squares(tape.param(params, id));
        reg = Some(match reg {
            Some(r) => tape.add(r, s)?,
            None => s,
        });
    }
    match reg {
        Some(r) => Ok(tape.add(bce, tape.scale(r, l2_lambda))?),
        None => Ok(bce),
    }
}

/// Positives of `target` followed by sampled negatives, optionally subsampled
/// to at most `batch_size` examples.
pub fn build_examples<R: Rng>(
    target: &Snapshot,
    node_count: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Vec<Edge>, Vec<f64>), TrainError> {
    let negatives = sample_negatives(target, node_count, cfg.neg_ratio, rng)?;
    let mut pairs: Vec<Edge> = target.iter().copied().collect();
    let mut labels = vec![1.0; pairs.len()];
    pairs.extend_from_slice(&negatives);
    labels.resize(pairs.len(), 0.0);
    if let Some(b) = cfg.batch_size {
        if pairs.len() > b {
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(rng);
            order.truncate(b);
            order.sort_unstable();
            pairs = order.iter().map(|&i| pairs[i]).collect();
            labels = order.iter().map(|&i| labels[i]).collect();
        }
    }
    Ok((pairs, labels))
}

#[derive(Clone, Debug)]
pub struct WindowOutcome {
    pub loss: f64,
    /// States after each step of the window, recomputed after the update.
    pub trajectory: Vec<HiddenState>,
}

impl WindowOutcome {
    /// State at the end of the window.
    pub fn exit(&self) -> &HiddenState {
        self.trajectory.last().expect("non-empty window")
    }
}

fn entry_var(tape: &Tape, model: &Model, residual: &Tensor) -> Result<Var, TrainError> {
    let x = model.x_var(tape);
    Ok(tape.add(x, tape.constant(residual.clone()))?)
}

/// Forward-only pass over `steps` from `X + residual`.
pub fn replay(model: &Model, residual: &Tensor, steps: &[&StepStructure]) -> Result<Vec<HiddenState>, TrainError> {
    let x = model.initial_state().into_tensor();
    let data = x.data().iter().zip(residual.data()).map(|(a, b)| a + b).collect();
    let mut h = HiddenState::new(Tensor::new(x.shape().to_vec(), data)?);
    let mut out = Vec::with_capacity(steps.len());
    for st in steps {
        h = model.forward_step(&h, st)?;
        out.push(h.clone());
    }
    Ok(out)
}

/// Loss of one window unrolled from `X + residual` and scored on
/// `pairs`/`labels` after the last step.
pub fn window_loss(
    tape: &Tape,
    model: &Model,
    steps: &[&StepStructure],
    residual: &Tensor,
    pairs: &[Edge],
    labels: &[f64],
    l2_lambda: f64,
) -> Result<Var, TrainError> {
    let mut h = entry_var(tape, model, residual)?;
    for st in steps {
        h = model.forward_step_var(tape, h, st)?;
    }
    let preds = model.link_scores_var(tape, h, pairs)?;
    loss(tape, preds, labels, model.params(), l2_lambda)
}

/// Finite-difference check of [`window_loss`] against every trainable
/// parameter of `model`.
pub fn gradcheck_window(
    model: &Model,
    steps: &[&StepStructure],
    residual: &Tensor,
    pairs: &[Edge],
    labels: &[f64],
    l2_lambda: f64,
    h: f64,
) -> Result<GradCheckReport, TrainError> {
    let mut store = model.params().clone();
    check_params(&mut store, h, |tape, s| {
        let mut m = model.clone();
        *m.params_mut() = s.clone();
        window_loss(tape, &m, steps, residual, pairs, labels, l2_lambda)
    })
}

/// One optimizer step on the examples `pairs`/`labels` scored at the end of
/// `steps`, unrolled from `X + residual`.
pub fn train_window(
    model: &mut Model,
    steps: &[&StepStructure],
    residual: &Tensor,
    pairs: &[Edge],
    labels: &[f64],
    cfg: &TrainConfig,
    opt: &AdamW,
) -> Result<WindowOutcome, TrainError> {
    let loss_value = {
        let tape = Tape::new();
        let j = window_loss(&tape, model, steps, residual, pairs, labels, cfg.l2_lambda)?;
        let v = tape.scalar(j);
        let store = model.params_mut();
        store.zero_grads();
        tape.backward(j, store)?;
        v
    };
    opt.step(model.params_mut());
    model.params_mut().zero_grads();
    let trajectory = replay(model, residual, steps)?;
    Ok(WindowOutcome {
        loss: loss_value,
        trajectory,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub window: usize,
    pub loss: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub epoch_means: Vec<f64>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,window,loss,wall_time")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{:.6}", r.epoch, r.window, r.loss, r.wall_time)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TrainError> {
        let io = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let f = std::fs::File::create(path).map_err(io)?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(io)
    }
}

/// Structures for every diff graph, built once and reused across epochs.
pub fn precompute_structures(model: &Model, graphs: &[DiffGraph]) -> Vec<StepStructure> {
    graphs.iter().map(|g| StepStructure::build(g, model.config())).collect()
}

/// Trains on `train` (snapshots `0..T`) with `graphs[t]` the diff graph of
/// snapshot `t`. Writes the final parameters to `checkpoint` when given.
pub fn fit(
    model: &mut Model,
    train: &SnapshotSequence,
    graphs: &[DiffGraph],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainLog, TrainError> {
    if graphs.len() != train.len() {
        return Err(TrainError::GraphCount(graphs.len(), train.len()));
    }
    let structures = precompute_structures(model, graphs);
    fit_structures(model, train, &structures, cfg, checkpoint)
}

/// [`fit`] over prebuilt structures; `structures[t]` belongs to snapshot `t`.
/// Extra trailing structures are ignored.
pub fn fit_structures(
    model: &mut Model,
    train: &SnapshotSequence,
    structures: &[StepStructure],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    if structures.len() < train.len() {
        return Err(TrainError::GraphCount(structures.len(), train.len()));
    }
    let w = cfg.window;
    if train.len() < w + 1 {
        return Err(TrainError::InsufficientSnapshots {
            need: w + 1,
            have: train.len(),
        });
    }
    let opt = cfg.optimizer();
    let mut rng = stream_rng(cfg.seed, Purpose::Sampling);
    let n = model.node_count();
    let d = model.config().d;
    let n_windows = train.len() - w;
    let start = Instant::now();
    let mut log = TrainLog::default();
    let mut residual = Tensor::zeros(&[n, d]);

    for epoch in 0..cfg.epochs {
        if !cfg.carry_state {
            residual = Tensor::zeros(&[n, d]);
        }
        let mut total = 0.0;
        let mut counted = 0usize;
        for win in 0..n_windows {
            let steps: Vec<&StepStructure> = structures[win..win + w].iter().collect();
            let target = train.get(win + w);
            let (pairs, labels) = build_examples(target, n, cfg, &mut rng)?;
            let next_residual = |traj: &[HiddenState], model: &Model| -> Tensor {
                let x = model.initial_state().into_tensor();
                let h = traj[0].tensor();
                let data = h.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
                Tensor::new(vec![n, d], data).expect("residual shape")
            };
            if pairs.is_empty() {
                warn!("epoch {epoch} window {win}: empty target, skipping update");
                let traj = replay(model, &residual, &steps)?;
                residual = next_residual(&traj, model);
                continue;
            }
            let out = train_window(model, &steps, &residual, &pairs, &labels, cfg, &opt)?;
            debug!("epoch {epoch} window {win} loss {:.6}", out.loss);
            log.rows.push(LogRow {
                epoch,
                window: win,
                loss: out.loss,
                wall_time: start.elapsed().as_secs_f64(),
            });
            total += out.loss;
            counted += 1;
            residual = next_residual(&out.trajectory, model);
        }
        let mean = if counted > 0 { total / counted as f64 } else { f64::NAN };
        info!("epoch {epoch}: mean loss {mean:.6}");
        log.epoch_means.push(mean);
    }

    if let Some(path) = checkpoint {
        save_checkpoint(model.params(), path)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SgtConfig;
    use proptest::prelude::*;
    use rand::Rng;

    fn snap(edges: &[Edge]) -> Snapshot {
        edges.iter().copied().collect()
    }

    #[test]
    fn negatives_count_and_disjoint() {
        let n = 30;
        let mut rng = stream_rng(1, Purpose::Sampling);
        let target: Snapshot = (0..100).map(|k| (k % n, (k * 7 + 1) % n)).filter(|(a, b)| a != b).collect();
        let neg = sample_negatives(&target, n, 1.0, &mut rng).unwrap();
        assert_eq!(neg.len(), target.len());
        assert!(neg.iter().all(|e| !target.contains(e) && e.0 != e.1));
        let uniq: HashSet<_> = neg.iter().collect();
        assert_eq!(uniq.len(), neg.len());
        assert!(sample_negatives(&Snapshot::new(), n, 1.0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn negatives_deterministic_and_bounded() {
        let target = snap(&[(0, 1), (1, 2)]);
        let a = sample_negatives(&target, 10, 1.0, &mut stream_rng(5, Purpose::Sampling)).unwrap();
        let b = sample_negatives(&target, 10, 1.0, &mut stream_rng(5, Purpose::Sampling)).unwrap();
        assert_eq!(a, b);
        let full = snap(&[(0, 1), (1, 0)]);
        let err = sample_negatives(&full, 2, 1.0, &mut stream_rng(0, Purpose::Sampling)).unwrap_err();
        assert!(matches!(err, TrainError::NegativeSampling { requested: 2, available: 0 }));
    }

    fn loss_of(preds: &[f64], labels: &[f64]) -> f64 {
        let tape = Tape::new();
        let p = tape.constant(Tensor::vector(preds.to_vec()));
        let v = loss(&tape, p, labels, &ParamStore::new(), 0.0).unwrap();
        tape.scalar(v)
    }

    #[test]
    fn loss_closed_forms() {
        assert!((loss_of(&[0.5], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss_of(&[0.9], &[0.0]) - 10f64.ln()).abs() < 1e-12);
        assert!(loss_of(&[1.0, 0.0], &[1.0, 0.0]) < 1e-10);
        let tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        assert!(matches!(
            loss(&tape, p, &[1.0], &ParamStore::new(), 0.0),
            Err(TrainError::LengthMismatch { preds: 2, labels: 1 })
        ));
    }

    #[test]
    fn l2_term_added() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::vector(vec![1.0, 2.0]));
        let tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.5]));
        let v = loss(&tape, p, &[1.0], &store, 0.1).unwrap();
        assert!((tape.scalar(v) - (std::f64::consts::LN_2 + 0.5)).abs() < 1e-12);
    }

    fn tiny_model(n: usize) -> Model {
        let cfg = SgtConfig {
            d: 4,
            d_e: 4,
            n_layers: 1,
            n_heads: 2,
            ..SgtConfig::default()
        };
        Model::new(cfg, n, &mut stream_rng(0, Purpose::Init)).unwrap()
    }

    #[test]
    fn insufficient_snapshots() {
        let seq = SnapshotSequence::new(vec![snap(&[(0, 1)]); 3], 3);
        let graphs = crate::diff_graph::build_sequence(&seq, Default::default(), Default::default()).unwrap();
        let mut m = tiny_model(3);
        let cfg = TrainConfig {
            window: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(
            fit(&mut m, &seq, &graphs, &cfg, None),
            Err(TrainError::InsufficientSnapshots { need: 4, have: 3 })
        ));
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let seq = SnapshotSequence::new(vec![snap(&[(0, 1)]); 4], 3);
        let graphs = crate::diff_graph::build_sequence(&seq, Default::default(), Default::default()).unwrap();
        let mut m = tiny_model(3);
        let before = m.clone();
        let cfg = TrainConfig {
            window: 2,
            epochs: 0,
            ..TrainConfig::default()
        };
        let log = fit(&mut m, &seq, &graphs, &cfg, None).unwrap();
        assert!(log.rows.is_empty() && log.epoch_means.is_empty());
        for ((_, a), (_, b)) in m.params().iter().zip(before.params().iter()) {
            assert_eq!(a.value(), b.value());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn negatives_never_hit_targets(seed in 0u64..1000, n in 3usize..12, m in 0usize..30) {
            let mut rng = stream_rng(seed, Purpose::Synth);
            let target: Snapshot = (0..m)
                .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
                .filter(|(a, b)| a != b)
                .collect();
            let mut srng = stream_rng(seed, Purpose::Sampling);
            match sample_negatives(&target, n, 1.0, &mut srng) {
                Ok(neg) => {
                    prop_assert_eq!(neg.len(), target.len());
                    for e in &neg {
                        prop_assert!(!target.contains(e));
                        prop_assert!(e.0 != e.1);
                    }
                }
                Err(TrainError::NegativeSampling { requested, available }) => {
                    prop_assert!(requested > available);
                }
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
