//! Independent oracles shared by the integration tests. None of them call
//! into the code they check beyond plain data accessors.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rsgt::diff_graph::{DiffGraph, EdgeType, WeightLaw};
use rsgt::model::Model;
use rsgt::snapshot::{Edge, Snapshot, SnapshotSequence};
use rsgt::tensor::Tensor;

pub fn random_sequence<R: Rng>(rng: &mut R, n: usize, slices: usize, density: f64) -> SnapshotSequence {
    let snaps = (0..slices)
        .map(|_| {
            let mut s = Snapshot::new();
            for u in 0..n {
                for v in 0..n {
                    if u != v && rng.random::<f64>() < density {
                        s.insert((u, v));
                    }
                }
            }
            s
        })
        .collect();
    SnapshotSequence::new(snaps, n)
}

/// Expected `(type, k, ω)` of every edge of `Ê_t` by set algebra over the
/// raw snapshots: `k` is the length of the presence run ending at `t`
/// (present edges) or at `t - 1` (disappeared edges).
pub fn diff_oracle(seq: &SnapshotSequence, t: usize, law: WeightLaw) -> BTreeMap<Edge, (EdgeType, u32, f64)> {
    let sets: Vec<BTreeSet<Edge>> = seq.snapshots().iter().map(|s| s.edges().clone()).collect();
    let run_ending = |e: &Edge, end: usize| -> u32 { (0..=end).rev().take_while(|&s| sets[s].contains(e)).count() as u32 };
    let omega = |k: u32| law.alpha * f64::from(k).powf(law.beta);
    let empty = BTreeSet::new();
    let prev = if t == 0 { &empty } else { &sets[t - 1] };
    let cur = &sets[t];
    let mut out = BTreeMap::new();
    for e in cur.intersection(prev) {
        let k = run_ending(e, t);
        out.insert(*e, (EdgeType::Persisting, k, omega(k)));
    }
    for e in cur.difference(prev) {
        out.insert(*e, (EdgeType::Emerging, 1, omega(1)));
    }
    for e in prev.difference(cur) {
        let k = run_ending(e, t - 1);
        out.insert(*e, (EdgeType::Disappeared, k, omega(k)));
    }
    out
}

pub const INF: usize = usize::MAX / 4;

/// All-pairs hop distances over every edge of `g` (Floyd–Warshall).
pub fn floyd_warshall(g: &DiffGraph) -> Vec<Vec<usize>> {
    let n = g.node_count();
    let mut d = vec![vec![INF; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(u, v) in g.edges().keys() {
        d[u][v] = d[u][v].min(1);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k].saturating_add(d[k][j]);
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

/// Lexicographically smallest shortest path `src → dst` as a node sequence,
/// built greedily from exact distances.
pub fn lexmin_path(g: &DiffGraph, dist: &[Vec<usize>], src: usize, dst: usize) -> Option<Vec<usize>> {
    if dist[src][dst] >= INF {
        return None;
    }
    let succ: BTreeMap<usize, BTreeSet<usize>> = g.edges().keys().fold(BTreeMap::new(), |mut m, &(u, v)| {
        m.entry(u).or_default().insert(v);
        m
    });
    let mut path = vec![src];
    let mut at = src;
    while at != dst {
        let need = dist[at][dst] - 1;
        at = *succ[&at].iter().find(|&&v| dist[v][dst] == need).expect("distance-consistent successor");
        path.push(at);
    }
    Some(path)
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Plain matrix product of row-major `a [n, k]` and `b [k, m]`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let x = a[i * k + p];
            for j in 0..m {
                out[i * m + j] += x * b[p * m + j];
            }
        }
    }
    out
}

/// Multi-head attention without any structural term, computed from the
/// named parameters of `layer`: per head `softmax(Q Kᵀ / √d_h) V`, heads
/// concatenated, then `W_out` and `b_out`.
pub fn plain_attention(model: &Model, layer: usize, h: &Tensor) -> Vec<f64> {
    let p = |name: &str| {
        let store = model.params();
        store.get(store.id(&format!("layer{layer}.{name}")).unwrap()).value().data().to_vec()
    };
    let (n, d) = (h.rows(), h.cols());
    let heads = model.config().n_heads;
    let dh = d / heads;
    let q = matmul(h.data(), &p("w_q"), n, d, d);
    let k = matmul(h.data(), &p("w_k"), n, d, d);
    let v = matmul(h.data(), &p("w_v"), n, d, d);
    let mut cat = vec![0.0; n * d];
    for hd in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| q[i * d + hd * dh + c] * k[j * d + hd * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for c in 0..dh {
                cat[i * d + hd * dh + c] = (0..n).map(|j| ex[j] / z * v[j * d + hd * dh + c]).sum();
            }
        }
    }
    let mut out = matmul(&cat, &p("w_out"), n, d, d);
    let b = p("b_out");
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] += b[j];
        }
    }
    out
}

/// Sinusoidal encoding entry: `sin` on even dims, `cos` on odd dims of
/// `pos / base^(2⌊c/2⌋ / dim)`.
pub fn pe_closed_form(pos: usize, c: usize, dim: usize, base: f64) -> f64 {
    let angle = pos as f64 * (-(2.0 * (c / 2) as f64 / dim as f64) * base.ln()).exp();
    if c % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}
