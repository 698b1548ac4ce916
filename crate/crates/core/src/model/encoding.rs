//! Positional encoding and the per-step structural index built from one
//! difference graph.

use std::collections::HashMap;

use crate::diff_graph::{DiffGraph, EdgeType};
use crate::structure::{all_pairs, pair_structures, PairStructure, PathPolicy};
use crate::tensor::Tensor;

use super::SgtConfig;

/// Embedding row reserved for padded path positions in the type table.
pub const TYPE_PAD: usize = EdgeType::COUNT;
/// Embedding row reserved for padded path positions in the duration table.
pub const DUR_PAD: usize = 0;

/// Sinusoidal encoding, `[len, dim]`: even columns `sin(pos / base^(2i/dim))`,
/// odd columns `cos` of the same angle.
pub fn positional_encoding(len: usize, dim: usize, base: f64) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for c in 0..dim {
            let i2 = (c - c % 2) as f64;
            let angle = pos as f64 / base.powf(i2 / dim as f64);
            data[pos * dim + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("pe shape")
}

/// Structural inputs for every ordered node pair of one time step.
///
/// Pairs sharing a topological triple or a path signature share one row, so
/// the encoders run once per distinct value and are gathered back to the
/// `n²` pairs (row-major by source) through `topo_idx` and `path_idx`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStructure {
    pub node_count: usize,
    /// `[U_t, 3]` rows of `[sd_out, td_in, spd]`.
    pub topo_attrs: Tensor,
    pub topo_idx: Vec<usize>,
    /// Padded path length (`max_spd`).
    pub path_len: usize,
    /// `U_p * path_len` type ids, padded with [`TYPE_PAD`].
    pub path_type_ids: Vec<usize>,
    /// `U_p * path_len` duration ids, padded with [`DUR_PAD`].
    pub path_dur_ids: Vec<usize>,
    pub path_mask: Vec<bool>,
    /// Index into the `U_p + 1` path rows; `U_p` is the unreachable row.
    pub path_idx: Vec<usize>,
}

impl StepStructure {
    pub fn unique_paths(&self) -> usize {
        if self.path_len == 0 {
            0
        } else {
            self.path_type_ids.len() / self.path_len
        }
    }

    pub fn unique_topo(&self) -> usize {
        self.topo_attrs.rows()
    }

    pub fn pair_count(&self) -> usize {
        self.node_count * self.node_count
    }

    /// Builds the index for `g`. With both edge types and weights disabled
    /// the graph is first reduced to its current edges with a single type.
    pub fn build(g: &DiffGraph, cfg: &SgtConfig) -> Self {
        let policy = PathPolicy {
            max_spd: cfg.max_spd,
            max_duration: cfg.k_max,
        };
        let reduced;
        let g = if !cfg.use_edge_types && !cfg.use_edge_weights {
            reduced = g.current_only();
            &reduced
        } else {
            g
        };
        let n = g.node_count();
        if !cfg.structure_active() {
            return Self::inactive(n, cfg.max_spd);
        }
        let pairs = pair_structures(g, &all_pairs(n), &policy);
        Self::from_pairs(n, &pairs, &policy, cfg)
    }

    fn inactive(n: usize, path_len: usize) -> Self {
        Self {
            node_count: n,
            topo_attrs: Tensor::zeros(&[0, 3]),
            topo_idx: Vec::new(),
            path_len,
            path_type_ids: Vec::new(),
            path_dur_ids: Vec::new(),
            path_mask: Vec::new(),
            path_idx: Vec::new(),
        }
    }

    /// `pairs` must hold all `n²` pairs in row-major order.
    pub fn from_pairs(n: usize, pairs: &[PairStructure], policy: &PathPolicy, cfg: &SgtConfig) -> Self {
        assert_eq!(pairs.len(), n * n, "structure needs every ordered pair");
        let path_len = policy.max_spd;

        let mut topo_rows: Vec<[usize; 3]> = Vec::new();
        let mut topo_seen: HashMap<[usize; 3], usize> = HashMap::new();
        let mut topo_idx = Vec::with_capacity(pairs.len());
        for ps in pairs {
            let key = [ps.sd_out, ps.td_in, ps.spd];
            let next = topo_rows.len();
            let id = *topo_seen.entry(key).or_insert_with(|| {
                topo_rows.push(key);
                next
            });
            topo_idx.push(id);
        }
        let topo_data = topo_rows.iter().flat_map(|r| r.iter().map(|&v| v as f64)).collect();
        let topo_attrs = Tensor::new(vec![topo_rows.len(), 3], topo_data).expect("topo shape");

        let mut sigs: Vec<Vec<(usize, usize)>> = Vec::new();
        let mut sig_seen: HashMap<Vec<(usize, usize)>, usize> = HashMap::new();
        let mut raw_idx = Vec::with_capacity(pairs.len());
        for ps in pairs {
            if !ps.is_reachable(policy) {
                raw_idx.push(None);
                continue;
            }
            let sig: Vec<(usize, usize)> = ps
                .path_types
                .iter()
                .zip(&ps.path_durations)
                .map(|(tp, &k)| {
                    let t = if cfg.use_edge_types { tp.id() } else { 0 };
                    let w = if cfg.use_edge_weights { k as usize } else { 1 };
                    (t, w)
                })
                .collect();
            let next = sigs.len();
            let id = *sig_seen.entry(sig.clone()).or_insert_with(|| {
                sigs.push(sig);
                next
            });
            raw_idx.push(Some(id));
        }
        let unreachable = sigs.len();
        let path_idx = raw_idx.into_iter().map(|i| i.unwrap_or(unreachable)).collect();

        let mut path_type_ids = Vec::with_capacity(sigs.len() * path_len);
        let mut path_dur_ids = Vec::with_capacity(sigs.len() * path_len);
        let mut path_mask = Vec::with_capacity(sigs.len() * path_len);
        for sig in &sigs {
            for pos in 0..path_len {
                match sig.get(pos) {
                    Some(&(t, w)) => {
                        path_type_ids.push(t);
                        path_dur_ids.push(w);
                        path_mask.push(true);
                    }
                    None => {
                        path_type_ids.push(TYPE_PAD);
                        path_dur_ids.push(DUR_PAD);
                        path_mask.push(false);
                    }
                }
            }
        }

        Self {
            node_count: n,
            topo_attrs,
            topo_idx,
            path_len,
            path_type_ids,
            path_dur_ids,
            path_mask,
            path_idx,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff_graph::{build_sequence, DurationRule, WeightLaw};
    use crate::snapshot::SnapshotSequence;

    #[test]
    fn pe_closed_form_points() {
        let pe = positional_encoding(3, 4, 10000.0);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get2(1, 0) - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!((pe.get2(1, 3) - (1.0f64 / 100.0).cos()).abs() < 1e-15);
    }

    fn toy() -> DiffGraph {
        let seq = SnapshotSequence::new(
            vec![
                [(0, 1), (1, 2)].into_iter().collect(),
                [(0, 1), (2, 3)].into_iter().collect(),
            ],
            4,
        );
        build_sequence(&seq, WeightLaw::default(), DurationRule::ResetOnChange)
            .unwrap()
            .pop()
            .unwrap()
    }

    #[test]
    fn dedup_indices_round_trip() {
        let cfg = SgtConfig::default();
        let g = toy();
        let st = StepStructure::build(&g, &cfg);
        let policy = PathPolicy::default();
        let pairs = pair_structures(&g, &all_pairs(4), &policy);
        assert_eq!(st.topo_idx.len(), 16);
        for (p, ps) in pairs.iter().enumerate() {
            let row = st.topo_attrs.row(st.topo_idx[p]);
            assert_eq!(row, &[ps.sd_out as f64, ps.td_in as f64, ps.spd as f64]);
            let pi = st.path_idx[p];
            if ps.is_reachable(&policy) {
                let ids = &st.path_type_ids[pi * 5..pi * 5 + 5];
                let mask = &st.path_mask[pi * 5..pi * 5 + 5];
                assert_eq!(mask.iter().filter(|m| **m).count(), ps.spd);
                for (k, tp) in ps.path_types.iter().enumerate() {
                    assert_eq!(ids[k], tp.id());
                }
            } else {
                assert_eq!(pi, st.unique_paths());
            }
        }
    }

    #[test]
    fn ablations_collapse_ids() {
        let g = toy();
        let cfg = SgtConfig {
            use_edge_types: false,
            ..SgtConfig::default()
        };
        let st = StepStructure::build(&g, &cfg);
        assert!(st
            .path_type_ids
            .iter()
            .zip(&st.path_mask)
            .all(|(t, m)| !*m || *t == 0));
        let cfg = SgtConfig {
            use_edge_weights: false,
            ..SgtConfig::default()
        };
        let st = StepStructure::build(&g, &cfg);
        assert!(st.path_dur_ids.iter().zip(&st.path_mask).all(|(w, m)| !*m || *w == 1));
    }
}
