//! Weighted multi-relation difference graphs.
//!
//! For each time slice `t` the difference graph covers `E_{t-1} ∪ E_t`.
//! Every edge carries a temporal state: its type (emerging, persisting or
//! disappeared), the duration `k` of its current presence run, and a weight
//! `ω = α·k^β` that is frozen when the edge disappears. A disappeared edge
//! survives exactly one slice.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::snapshot::{Edge, NodeId, Snapshot, SnapshotSequence};

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("edge ({0}, {1}) is {2:?} but has no recorded history")]
    MissingHistory(NodeId, NodeId, EdgeType),
    #[error("disappeared edge needs its previous weight")]
    MissingWeight,
    #[error("duration must be at least 1")]
    ZeroDuration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeType {
    Emerging,
    Persisting,
    Disappeared,
}

impl EdgeType {
    pub const COUNT: usize = 3;

    /// Embedding row of this type; row `COUNT` is reserved for padding.
    pub fn id(self) -> usize {
        match self {
            EdgeType::Emerging => 0,
            EdgeType::Persisting => 1,
            EdgeType::Disappeared => 2,
        }
    }

    pub fn code(self) -> char {
        match self {
            EdgeType::Emerging => 'e',
            EdgeType::Persisting => 'p',
            EdgeType::Disappeared => 'd',
        }
    }
}

/// `ω = α·k^β` for present edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightLaw {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for WeightLaw {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

impl WeightLaw {
    pub fn weight(&self, k: u32) -> f64 {
        self.alpha * f64::from(k).powf(self.beta)
    }
}

/// How the duration of a re-emerging edge is counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DurationRule {
    /// A new presence run restarts at `k = 1`.
    #[default]
    ResetOnChange,
    /// `k` counts every slice the edge has ever been present in.
    Cumulative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeState {
    pub tp: EdgeType,
    pub k: u32,
    pub omega: f64,
}

/// Per-edge state carried from one slice to the next.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StateHistory {
    entries: HashMap<Edge, EdgeState>,
    /// Total slices of presence, only maintained under [`DurationRule::Cumulative`].
    presence: HashMap<Edge, u32>,
}

impl StateHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, e: &Edge) -> Option<&EdgeState> {
        self.entries.get(e)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Difference graph `Ĝ_t` over a registry of `node_count` nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffGraph {
    node_count: usize,
    edges: BTreeMap<Edge, EdgeState>,
    /// Sorted out-neighbour lists over all edges, disappeared ones included.
    out_adj: Vec<Vec<NodeId>>,
}

impl DiffGraph {
    pub fn from_states(node_count: usize, edges: BTreeMap<Edge, EdgeState>) -> Self {
        let mut out_adj = vec![Vec::new(); node_count];
        // BTreeMap order keeps every list sorted
        for &(u, v) in edges.keys() {
            out_adj[u].push(v);
        }
        Self {
            node_count,
            edges,
            out_adj,
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &BTreeMap<Edge, EdgeState> {
        &self.edges
    }

    pub fn state(&self, e: &Edge) -> Option<&EdgeState> {
        self.edges.get(e)
    }

    pub fn out_neighbors(&self, u: NodeId) -> &[NodeId] {
        &self.out_adj[u]
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn count(&self, tp: EdgeType) -> usize {
        self.edges.values().filter(|s| s.tp == tp).count()
    }

    /// The plain current snapshot: disappeared edges removed and every
    /// remaining edge re-labelled as a unit-weight emerging edge. This is the
    /// graph seen by the variant without temporal state modelling.
    pub fn current_only(&self) -> DiffGraph {
        let edges = self
            .edges
            .iter()
            .filter(|(_, s)| s.tp != EdgeType::Disappeared)
            .map(|(e, _)| {
                (
                    *e,
                    EdgeState {
                        tp: EdgeType::Emerging,
                        k: 1,
                        omega: 1.0,
                    },
                )
            })
            .collect();
        DiffGraph::from_states(self.node_count, edges)
    }

    /// One `src dst tp k omega` line per edge in `(src, dst)` order.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (&(u, v), st) in &self.edges {
            let _ = writeln!(s, "{u} {v} {} {} {}", st.tp.code(), st.k, st.omega);
        }
        s
    }
}

/// Labels every edge of `E_prev ∪ E_cur`.
pub fn classify_edges(prev: &Snapshot, cur: &Snapshot) -> BTreeMap<Edge, EdgeType> {
    let mut out = BTreeMap::new();
    for e in cur.iter() {
        let tp = if prev.contains(e) {
            EdgeType::Persisting
        } else {
            EdgeType::Emerging
        };
        out.insert(*e, tp);
    }
    for e in prev.iter().filter(|e| !cur.contains(e)) {
        out.insert(*e, EdgeType::Disappeared);
    }
    out
}

/// Duration under [`DurationRule::ResetOnChange`]: emerging edges restart at
/// 1, persisting edges extend the previous run, disappeared edges keep it.
pub fn update_duration(prev: Option<&EdgeState>, tp: EdgeType, edge: Edge) -> Result<u32, DiffError> {
    match (tp, prev) {
        (EdgeType::Emerging, _) => Ok(1),
        (EdgeType::Persisting, Some(p)) => Ok(p.k + 1),
        (EdgeType::Disappeared, Some(p)) => Ok(p.k),
        (tp, None) => Err(DiffError::MissingHistory(edge.0, edge.1, tp)),
    }
}

pub fn compute_weight(tp: EdgeType, k: u32, prev_omega: Option<f64>, law: WeightLaw) -> Result<f64, DiffError> {
    if k == 0 {
        return Err(DiffError::ZeroDuration);
    }
    match tp {
        EdgeType::Emerging | EdgeType::Persisting => Ok(law.weight(k)),
        EdgeType::Disappeared => prev_omega.ok_or(DiffError::MissingWeight),
    }
}

/// Builds `Ĝ_t` from `G_{t-1}`, `G_t` and the history up to `t-1`, returning
/// the graph and the history for the next slice. Pass an empty `prev` and
/// history at the first slice.
pub fn build_diff_graph(
    prev: &Snapshot,
    cur: &Snapshot,
    hist: &StateHistory,
    node_count: usize,
    law: WeightLaw,
    rule: DurationRule,
) -> Result<(DiffGraph, StateHistory), DiffError> {
    let types = classify_edges(prev, cur);
    let mut next = StateHistory::new();
    if rule == DurationRule::Cumulative {
        next.presence = hist.presence.clone();
    }
    let mut states = BTreeMap::new();
    for (e, tp) in types {
        let before = hist.get(&e);
        let k = match rule {
            DurationRule::ResetOnChange => update_duration(before, tp, e)?,
            DurationRule::Cumulative => match tp {
                EdgeType::Disappeared => update_duration(before, tp, e)?,
                _ => {
                    let seen = next.presence.entry(e).or_insert(0);
                    *seen += 1;
                    *seen
                }
            },
        };
        let omega = compute_weight(tp, k, before.map(|s| s.omega), law)?;
        let st = EdgeState { tp, k, omega };
        states.insert(e, st);
        next.entries.insert(e, st);
    }
    Ok((DiffGraph::from_states(node_count, states), next))
}

/// Difference graphs for every slice of `seq`, starting from an empty
/// predecessor.
pub fn build_sequence(seq: &SnapshotSequence, law: WeightLaw, rule: DurationRule) -> Result<Vec<DiffGraph>, DiffError> {
    let empty = Snapshot::new();
    let mut hist = StateHistory::new();
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let prev = if t == 0 { &empty } else { seq.get(t - 1) };
        let (g, h) = build_diff_graph(prev, seq.get(t), &hist, seq.node_count(), law, rule)?;
        out.push(g);
        hist = h;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn snap(edges: &[Edge]) -> Snapshot {
        edges.iter().copied().collect()
    }

    #[test]
    fn classification_cases() {
        let c = classify_edges(&snap(&[(1, 2)]), &snap(&[(1, 2), (2, 3)]));
        assert_eq!(c[&(1, 2)], EdgeType::Persisting);
        assert_eq!(c[&(2, 3)], EdgeType::Emerging);
        let c = classify_edges(&snap(&[(1, 2)]), &snap(&[]));
        assert_eq!(c.len(), 1);
        assert_eq!(c[&(1, 2)], EdgeType::Disappeared);
        assert!(classify_edges(&snap(&[]), &snap(&[])).is_empty());
    }

    #[test]
    fn weights() {
        let unit = WeightLaw::default();
        assert_eq!(compute_weight(EdgeType::Persisting, 3, None, unit), Ok(3.0));
        assert_eq!(compute_weight(EdgeType::Disappeared, 3, Some(2.0), unit), Ok(2.0));
        let law = WeightLaw { alpha: 2.0, beta: 0.5 };
        assert_eq!(compute_weight(EdgeType::Emerging, 1, None, law), Ok(2.0));
        assert_eq!(compute_weight(EdgeType::Disappeared, 1, None, law), Err(DiffError::MissingWeight));
    }

    #[test]
    fn duration_requires_history() {
        assert_eq!(update_duration(None, EdgeType::Emerging, (0, 1)), Ok(1));
        assert!(update_duration(None, EdgeType::Persisting, (0, 1)).is_err());
        assert!(update_duration(None, EdgeType::Disappeared, (0, 1)).is_err());
    }

    fn replay(slices: &[&[Edge]], rule: DurationRule) -> Vec<DiffGraph> {
        let seq = SnapshotSequence::new(slices.iter().map(|s| snap(s)).collect(), 4);
        build_sequence(&seq, WeightLaw::default(), rule).unwrap()
    }

    #[test]
    fn run_lengths_and_reset() {
        let gs = replay(&[&[(1, 2)], &[(1, 2)], &[(1, 2)]], DurationRule::ResetOnChange);
        assert_eq!(gs[2].state(&(1, 2)).unwrap().k, 3);

        let gs = replay(&[&[(1, 2)], &[], &[(1, 2)]], DurationRule::ResetOnChange);
        let st = gs[2].state(&(1, 2)).unwrap();
        assert_eq!((st.tp, st.k), (EdgeType::Emerging, 1));
        assert_eq!(gs[1].state(&(1, 2)).unwrap().tp, EdgeType::Disappeared);

        let gs = replay(&[&[(1, 2)], &[], &[(1, 2)]], DurationRule::Cumulative);
        let st = gs[2].state(&(1, 2)).unwrap();
        assert_eq!((st.tp, st.k, st.omega), (EdgeType::Emerging, 2, 2.0));
    }

    #[test]
    fn first_slice_all_emerging() {
        let law = WeightLaw { alpha: 0.5, beta: 2.0 };
        let (g, _) = build_diff_graph(
            &Snapshot::new(),
            &snap(&[(0, 1), (1, 2)]),
            &StateHistory::new(),
            3,
            law,
            DurationRule::ResetOnChange,
        )
        .unwrap();
        for st in g.edges().values() {
            assert_eq!((st.tp, st.k, st.omega), (EdgeType::Emerging, 1, 0.5));
        }
    }

    #[test]
    fn disappeared_edge_lives_one_slice() {
        let gs = replay(&[&[(0, 1)], &[], &[]], DurationRule::ResetOnChange);
        assert!(gs[1].state(&(0, 1)).is_some());
        assert!(gs[2].state(&(0, 1)).is_none());
        assert!(gs[2].is_empty());
    }

    #[test]
    fn current_only_and_dump() {
        let gs = replay(&[&[(0, 1), (2, 3)], &[(0, 1)]], DurationRule::ResetOnChange);
        assert_eq!(gs[1].dump(), "0 1 p 2 2\n2 3 d 1 1\n");
        let cur = gs[1].current_only();
        assert_eq!(cur.len(), 1);
        assert_eq!(cur.state(&(0, 1)).unwrap().omega, 1.0);
        assert_eq!(cur.out_neighbors(2), &[] as &[usize]);
    }

    proptest! {
        #[test]
        fn partition_and_freeze(
            slices in prop::collection::vec(prop::collection::btree_set((0usize..6, 0usize..6), 0..12), 1..6)
        ) {
            let seq = SnapshotSequence::new(
                slices.iter().map(|s| s.iter().copied().collect()).collect(), 6);
            let gs = build_sequence(&seq, WeightLaw { alpha: 1.5, beta: 0.7 }, DurationRule::ResetOnChange).unwrap();
            for t in 0..gs.len() {
                let prev: std::collections::BTreeSet<Edge> =
                    if t == 0 { Default::default() } else { seq.get(t - 1).edges().clone() };
                let union: std::collections::BTreeSet<Edge> = prev.union(seq.get(t).edges()).copied().collect();
                prop_assert_eq!(gs[t].len(), union.len());
                prop_assert_eq!(
                    gs[t].count(EdgeType::Emerging) + gs[t].count(EdgeType::Persisting) + gs[t].count(EdgeType::Disappeared),
                    union.len()
                );
                for (e, st) in gs[t].edges() {
                    match st.tp {
                        EdgeType::Emerging => prop_assert_eq!(st.k, 1),
                        EdgeType::Persisting => prop_assert!(st.k >= 2),
                        EdgeType::Disappeared => {
                            let before = gs[t - 1].state(e).unwrap();
                            prop_assert_eq!(st.omega.to_bits(), before.omega.to_bits());
                        }
                    }
                }
            }
        }

        #[test]
        fn weight_strictly_increasing_in_k(alpha in 0.01f64..5.0, beta in 0.01f64..3.0, k in 1u32..200) {
            let law = WeightLaw { alpha, beta };
            prop_assert!(law.weight(k + 1) > law.weight(k));
        }
    }
}
