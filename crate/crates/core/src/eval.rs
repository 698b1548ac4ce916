//! Test protocol: roll states through the test slices with frozen weights,
//! build `|h_i − h_j|` features for positives and sampled negatives of each
//! test snapshot, fit a logistic probe on 80% and score the other 20%.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{edge_features, HiddenState, Model, ModelError, StepStructure};
use crate::rng::{stream_rng, Purpose};
use crate::snapshot::{Edge, NodeId, Snapshot, SnapshotSequence};
use crate::train::{sample_negatives, TrainError};

/// Minimum examples of each class for a probe to be fitted.
pub const MIN_PER_CLASS: usize = 5;
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("{0} predictions but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("class {class} has {count} examples, need at least {MIN_PER_CLASS}")]
    TooFewExamples { class: u8, count: usize },
    #[error("no test snapshot could be evaluated")]
    NothingEvaluated,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Metrics {
            accuracy: sum(|m| m.accuracy),
            recall: sum(|m| m.recall),
            precision: sum(|m| m.precision),
            f1: sum(|m| m.f1),
        }
    }

    /// Sample standard deviation per field; zero for fewer than two items.
    pub fn std(items: &[Metrics]) -> Metrics {
        if items.len() < 2 {
            return Metrics::default();
        }
        let m = Metrics::mean(items);
        let n = (items.len() - 1) as f64;
        let sd = |f: fn(&Metrics) -> f64, mu: f64| (items.iter().map(|x| (f(x) - mu).powi(2)).sum::<f64>() / n).sqrt();
        Metrics {
            accuracy: sd(|x| x.accuracy, m.accuracy),
            recall: sd(|x| x.recall, m.recall),
            precision: sd(|x| x.precision, m.precision),
            f1: sd(|x| x.f1, m.f1),
        }
    }
}

/// Accuracy, recall, precision and F1 with the positive class `true`.
/// Undefined precision or recall is reported as 0.
pub fn compute_metrics(pred: &[bool], truth: &[bool]) -> Result<Metrics, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    if tp + fp == 0 {
        warn!("no positive predictions; precision reported as 0");
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Metrics {
        accuracy: ratio(tp + tn, pred.len()),
        recall,
        precision,
        f1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub lr: f64,
    pub max_iter: usize,
    /// Stop once the largest gradient component falls below this.
    pub tol: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

/// Binary logistic regression on standardized features, fitted by full-batch
/// gradient descent on the mean cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticRegression {
    weights: Vec<f64>,
    bias: f64,
    mean: Vec<f64>,
    scale: Vec<f64>,
    pub iterations: usize,
}

impl LogisticRegression {
    pub fn fit(x: &[Vec<f64>], y: &[bool], cfg: &LogisticConfig) -> Result<Self, EvalError> {
        if x.len() != y.len() {
            return Err(EvalError::LengthMismatch(x.len(), y.len()));
        }
        if x.is_empty() {
            return Err(EvalError::Empty);
        }
        let n = x.len() as f64;
        let dim = x[0].len();
        let mut mean = vec![0.0; dim];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for row in x {
            for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        for s in scale.iter_mut() {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|row| row.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
            .collect();

        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let mut iterations = 0;
        let mut gw = vec![0.0; dim];
        for it in 0..cfg.max_iter {
            gw.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for (row, &label) in z.iter().zip(y) {
                let logit: f64 = row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
                let err = crate::tensor::sigmoid_scalar(logit) - if label { 1.0 } else { 0.0 };
                for (g, v) in gw.iter_mut().zip(row) {
                    *g += err * v / n;
                }
                gb += err / n;
            }
            iterations = it + 1;
            let gmax = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
            if gmax < cfg.tol {
                break;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= cfg.lr * g;
            }
            b -= cfg.lr * gb;
        }
        Ok(Self {
            weights: w,
            bias: b,
            mean,
            scale,
            iterations,
        })
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        let logit: f64 = row
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| w * (v - m) / s)
            .sum::<f64>()
            + self.bias;
        crate::tensor::sigmoid_scalar(logit)
    }

    pub fn predict(&self, row: &[f64]) -> bool {
        self.predict_proba(row) >= 0.5
    }
}

/// Stratified split: per class, a seeded shuffle sends the first
/// `round(0.8·n_c)` examples to training. Returns `(train, test)` indices.
pub fn stratified_split<R: Rng>(labels: &[bool], rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        let cut = (TRAIN_FRACTION * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Fits a probe on a stratified 80% of the examples and reports metrics on
/// the remaining 20%.
pub fn logistic_eval(
    features: &[Vec<f64>],
    labels: &[bool],
    split_seed: u64,
    cfg: &LogisticConfig,
) -> Result<Metrics, EvalError> {
    if features.len() != labels.len() {
        return Err(EvalError::LengthMismatch(features.len(), labels.len()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos < MIN_PER_CLASS {
        return Err(EvalError::TooFewExamples { class: 1, count: pos });
    }
    if neg < MIN_PER_CLASS {
        return Err(EvalError::TooFewExamples { class: 0, count: neg });
    }
    let mut rng = stream_rng(split_seed, Purpose::EvalSplit);
    let (tr, te) = stratified_split(labels, &mut rng);
    let x: Vec<Vec<f64>> = tr.iter().map(|&i| features[i].clone()).collect();
    let y: Vec<bool> = tr.iter().map(|&i| labels[i]).collect();
    let clf = LogisticRegression::fit(&x, &y, cfg)?;
    let pred: Vec<bool> = te.iter().map(|&i| clf.predict(&features[i])).collect();
    let truth: Vec<bool> = te.iter().map(|&i| labels[i]).collect();
    compute_metrics(&pred, &truth)
}

/// States entering each test target: for target snapshot `s ≥ n_train`, the
/// state after diff graph `s − 1`, rolled from `X` without updates.
pub fn roll_test_states(
    model: &Model,
    structures: &[StepStructure],
    n_train: usize,
) -> Result<Vec<HiddenState>, EvalError> {
    let total = structures.len();
    let mut out = Vec::with_capacity(total.saturating_sub(n_train));
    let mut h = model.initial_state();
    for (t, st) in structures.iter().enumerate().take(total.saturating_sub(1)) {
        h = model.forward_step(&h, st)?;
        if t + 1 >= n_train {
            out.push(h.clone());
        }
    }
    Ok(out)
}

/// Positive and negative candidate edges of one snapshot with labels.
pub type LabeledPairs = (Vec<Edge>, Vec<bool>);

/// Positives of each test snapshot plus 1:1 sampled negatives.
pub fn test_examples(
    seq: &SnapshotSequence,
    n_train: usize,
    neg_ratio: f64,
    seed: u64,
) -> Result<Vec<LabeledPairs>, EvalError> {
    let mut rng = stream_rng(seed, Purpose::EvalNegatives);
    let mut out = Vec::with_capacity(seq.len().saturating_sub(n_train));
    for s in n_train..seq.len() {
        let target = seq.get(s);
        let neg = sample_negatives(target, seq.node_count(), neg_ratio, &mut rng)?;
        let mut pairs: Vec<Edge> = target.iter().copied().collect();
        let mut labels = vec![true; pairs.len()];
        pairs.extend_from_slice(&neg);
        labels.resize(pairs.len(), false);
        out.push((pairs, labels));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMetrics {
    pub snapshot: usize,
    pub metrics: Metrics,
}

/// One seed's evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_snapshot: Vec<SnapshotMetrics>,
    pub skipped: Vec<usize>,
    pub mean: Metrics,
}

/// Evaluates feature rows per test snapshot (or pooled over all of them).
/// Snapshots with too few examples of a class are skipped with a warning.
pub fn evaluate_features(
    features: &[Vec<Vec<f64>>],
    examples: &[LabeledPairs],
    first_snapshot: usize,
    pooled: bool,
    split_seed: u64,
    cfg: &LogisticConfig,
) -> Result<MetricsReport, EvalError> {
    if pooled {
        let x: Vec<Vec<f64>> = features.iter().flatten().cloned().collect();
        let y: Vec<bool> = examples.iter().flat_map(|e| e.1.iter().copied()).collect();
        let m = logistic_eval(&x, &y, split_seed, cfg)?;
        return Ok(MetricsReport {
            per_snapshot: Vec::new(),
            skipped: Vec::new(),
            mean: m,
        });
    }
    let results: Vec<(usize, Result<Metrics, EvalError>)> = features
        .par_iter()
        .zip(examples.par_iter())
        .enumerate()
        .map(|(k, (x, (_, y)))| {
            let seed = split_seed.wrapping_add(k as u64);
            (first_snapshot + k, logistic_eval(x, y, seed, cfg))
        })
        .collect();
    let mut per_snapshot = Vec::new();
    let mut skipped = Vec::new();
    for (s, r) in results {
        match r {
            Ok(metrics) => per_snapshot.push(SnapshotMetrics { snapshot: s, metrics }),
            Err(EvalError::TooFewExamples { class, count }) => {
                warn!("snapshot {s}: class {class} has {count} examples, skipped");
                skipped.push(s);
            }
            Err(e) => return Err(e),
        }
    }
    if per_snapshot.is_empty() {
        return Err(EvalError::NothingEvaluated);
    }
    let all: Vec<Metrics> = per_snapshot.iter().map(|m| m.metrics).collect();
    Ok(MetricsReport {
        per_snapshot,
        skipped,
        mean: Metrics::mean(&all),
    })
}

/// Model features for the test snapshots.
pub fn model_features(states: &[HiddenState], examples: &[LabeledPairs]) -> Vec<Vec<Vec<f64>>> {
    states
        .iter()
        .zip(examples)
        .map(|(h, (pairs, _))| edge_features(h, pairs))
        .collect()
}

/// Undirected common-neighbour counts from `prev`, one feature per pair.
pub fn common_neighbor_features(prev: &Snapshot, node_count: usize, pairs: &[Edge]) -> Vec<Vec<f64>> {
    let mut adj: Vec<BTreeSet<NodeId>> = vec![BTreeSet::new(); node_count];
    for &(u, v) in prev.iter() {
        adj[u].insert(v);
        adj[v].insert(u);
    }
    pairs
        .iter()
        .map(|&(i, j)| vec![adj[i].intersection(&adj[j]).count() as f64])
        .collect()
}

/// Common-neighbour heuristic on the same examples and probe.
pub fn common_neighbor_baseline(
    seq: &SnapshotSequence,
    n_train: usize,
    examples: &[LabeledPairs],
    pooled: bool,
    split_seed: u64,
    cfg: &LogisticConfig,
) -> Result<MetricsReport, EvalError> {
    let features: Vec<Vec<Vec<f64>>> = examples
        .iter()
        .enumerate()
        .map(|(k, (pairs, _))| common_neighbor_features(seq.get(n_train + k - 1), seq.node_count(), pairs))
        .collect();
    evaluate_features(&features, examples, n_train, pooled, split_seed, cfg)
}

/// Mean and standard deviation of per-seed means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub mean: Metrics,
    pub std: Metrics,
}

pub fn summarize(seeds: &[u64], reports: &[MetricsReport]) -> SeedSummary {
    let means: Vec<Metrics> = reports.iter().map(|r| r.mean).collect();
    SeedSummary {
        seeds: seeds.to_vec(),
        mean: Metrics::mean(&means),
        std: Metrics::std(&means),
    }
}

/// Per-snapshot metric means across reports, keyed by snapshot index.
pub fn per_snapshot_means(reports: &[MetricsReport]) -> BTreeMap<usize, Metrics> {
    let mut by: BTreeMap<usize, Vec<Metrics>> = BTreeMap::new();
    for r in reports {
        for s in &r.per_snapshot {
            by.entry(s.snapshot).or_default().push(s.metrics);
        }
    }
    by.into_iter().map(|(k, v)| (k, Metrics::mean(&v))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn metrics_cases() {
        let m = compute_metrics(&[true, false], &[true, false]).unwrap();
        assert_eq!(m, Metrics { accuracy: 1.0, recall: 1.0, precision: 1.0, f1: 1.0 });
        let m = compute_metrics(&[true, true, false, false], &[true, false, true, false]).unwrap();
        assert_eq!(m, Metrics { accuracy: 0.5, recall: 0.5, precision: 0.5, f1: 0.5 });
        let m = compute_metrics(&[false; 4], &[true, true, false, false]).unwrap();
        assert_eq!((m.accuracy, m.recall, m.f1), (0.5, 0.0, 0.0));
        assert!(matches!(compute_metrics(&[], &[]), Err(EvalError::Empty)));
        assert!(compute_metrics(&[true], &[]).is_err());
    }

    #[test]
    fn separable_probe_is_perfect() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![if i % 2 == 0 { 1.0 + i as f64 * 0.01 } else { -1.0 }]).collect();
        let y: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let m = logistic_eval(&x, &y, 3, &LogisticConfig::default()).unwrap();
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn identical_features_give_half() {
        let x = vec![vec![0.3, 0.3]; 20];
        let y: Vec<bool> = (0..20).map(|i| i < 10).collect();
        let m = logistic_eval(&x, &y, 0, &LogisticConfig::default()).unwrap();
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn too_few_examples() {
        let x = vec![vec![0.0]; 8];
        let y = vec![true, true, true, true, false, false, false, false];
        assert!(matches!(
            logistic_eval(&x, &y, 0, &LogisticConfig::default()),
            Err(EvalError::TooFewExamples { count: 4, .. })
        ));
    }

    #[test]
    fn split_is_stratified() {
        let y: Vec<bool> = (0..50).map(|i| i % 5 == 0).collect();
        let (tr, te) = stratified_split(&y, &mut stream_rng(0, Purpose::EvalSplit));
        assert_eq!(tr.len() + te.len(), 50);
        assert_eq!(tr.iter().filter(|&&i| y[i]).count(), 8);
        assert_eq!(te.iter().filter(|&&i| y[i]).count(), 2);
    }

    #[test]
    fn common_neighbours_undirected() {
        let prev: Snapshot = [(0, 2), (2, 1), (3, 0), (1, 3)].into_iter().collect();
        let f = common_neighbor_features(&prev, 4, &[(0, 1), (2, 3)]);
        assert_eq!(f, vec![vec![2.0], vec![2.0]]);
    }

    #[test]
    fn std_of_seeds() {
        let a = Metrics { accuracy: 0.8, ..Metrics::default() };
        let b = Metrics { accuracy: 1.0, ..Metrics::default() };
        let s = Metrics::std(&[a, b]);
        assert!((s.accuracy - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(Metrics::std(&[a]), Metrics::default());
    }

    proptest! {
        #[test]
        fn metric_properties(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..60), seed in 0u64..100) {
            let (p, t): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
            let m = compute_metrics(&p, &t).unwrap();
            for v in [m.accuracy, m.recall, m.precision, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if m.precision > 0.0 && m.recall > 0.0 {
                prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
                prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-12);
            }
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.shuffle(&mut stream_rng(seed, Purpose::Synth));
            let pp: Vec<bool> = order.iter().map(|&i| p[i]).collect();
            let tt: Vec<bool> = order.iter().map(|&i| t[i]).collect();
            prop_assert_eq!(compute_metrics(&pp, &tt).unwrap(), m);
        }
    }
}
