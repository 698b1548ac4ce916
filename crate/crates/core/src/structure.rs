//! Pairwise structural attributes over a difference graph: degrees, bounded
//! hop distance, and the edge types and durations along one shortest path.

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff_graph::{DiffGraph, EdgeType};
use crate::snapshot::{Edge, NodeId};

pub const DEFAULT_MAX_SPD: usize = 5;
pub const DEFAULT_MAX_DURATION: u32 = 64;

/// How shortest paths are searched and summarised.
///
/// Among equal-length paths the one whose node sequence is lexicographically
/// smallest is kept; this is what a breadth-first search over sorted
/// adjacency lists with first-discovery parents produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathPolicy {
    pub max_spd: usize,
    /// Durations along the path are clamped to `1..=max_duration`.
    pub max_duration: u32,
}

impl Default for PathPolicy {
    fn default() -> Self {
        Self {
            max_spd: DEFAULT_MAX_SPD,
            max_duration: DEFAULT_MAX_DURATION,
        }
    }
}

impl PathPolicy {
    /// Distance reported for pairs with no path of at most `max_spd` hops.
    pub fn unreachable(&self) -> usize {
        self.max_spd + 1
    }

    /// Discrete duration index for an edge weight: `clamp(round(ω), 1, K_max)`.
    pub fn duration_index(&self, omega: f64) -> u32 {
        let r = omega.round();
        if r.is_nan() || r < 1.0 {
            1
        } else {
            (r.min(f64::from(self.max_duration))) as u32
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathRecord {
    pub spd: usize,
    pub path_types: Vec<EdgeType>,
    pub path_durations: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PairStructure {
    pub src: NodeId,
    pub dst: NodeId,
    pub sd_out: usize,
    pub td_in: usize,
    /// Hop distance, or `max_spd + 1` when unreachable within the cap.
    pub spd: usize,
    pub path_types: Vec<EdgeType>,
    pub path_durations: Vec<u32>,
}

impl PairStructure {
    pub fn is_reachable(&self, policy: &PathPolicy) -> bool {
        self.spd <= policy.max_spd
    }
}

/// Out- and in-degrees over every edge of `Ĝ_t`, disappeared edges included.
pub fn node_degrees(g: &DiffGraph) -> (Vec<usize>, Vec<usize>) {
    let n = g.node_count();
    let mut out_deg = vec![0; n];
    let mut in_deg = vec![0; n];
    for &(u, v) in g.edges().keys() {
        out_deg[u] += 1;
        in_deg[v] += 1;
    }
    (out_deg, in_deg)
}

/// Breadth-first search tree from `src`, truncated at `max_spd` hops.
struct BfsTree {
    dist: Vec<Option<usize>>,
    parent: Vec<Option<NodeId>>,
}

fn bfs(g: &DiffGraph, src: NodeId, max_spd: usize) -> BfsTree {
    let n = g.node_count();
    let mut dist = vec![None; n];
    let mut parent = vec![None; n];
    let mut queue = VecDeque::new();
    dist[src] = Some(0);
    queue.push_back(src);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap();
        if du == max_spd {
            continue;
        }
        for &v in g.out_neighbors(u) {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                parent[v] = Some(u);
                queue.push_back(v);
            }
        }
    }
    BfsTree { dist, parent }
}

fn path_from_tree(g: &DiffGraph, tree: &BfsTree, src: NodeId, dst: NodeId, policy: &PathPolicy) -> PathRecord {
    let Some(spd) = tree.dist[dst] else {
        return PathRecord {
            spd: policy.unreachable(),
            path_types: Vec::new(),
            path_durations: Vec::new(),
        };
    };
    let mut nodes = vec![dst];
    let mut cur = dst;
    while cur != src {
        cur = tree.parent[cur].expect("bfs parent chain");
        nodes.push(cur);
    }
    nodes.reverse();
    let mut path_types = Vec::with_capacity(spd);
    let mut path_durations = Vec::with_capacity(spd);
    for w in nodes.windows(2) {
        let st = g.state(&(w[0], w[1])).expect("path edge in graph");
        path_types.push(st.tp);
        path_durations.push(policy.duration_index(st.omega));
    }
    PathRecord {
        spd,
        path_types,
        path_durations,
    }
}

pub fn shortest_path(g: &DiffGraph, src: NodeId, dst: NodeId, policy: &PathPolicy) -> PathRecord {
    let tree = bfs(g, src, policy.max_spd);
    path_from_tree(g, &tree, src, dst, policy)
}

/// One record per requested pair, in request order. Searches from distinct
/// sources run in parallel.
pub fn pair_structures(g: &DiffGraph, pairs: &[Edge], policy: &PathPolicy) -> Vec<PairStructure> {
    let (out_deg, in_deg) = node_degrees(g);
    let mut by_src: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
    for (i, &(s, _)) in pairs.iter().enumerate() {
        by_src.entry(s).or_default().push(i);
    }
    let groups: Vec<(NodeId, Vec<usize>)> = by_src.into_iter().collect();
    let computed: Vec<Vec<(usize, PairStructure)>> = groups
        .par_iter()
        .map(|(src, idxs)| {
            let tree = bfs(g, *src, policy.max_spd);
            idxs.iter()
                .map(|&i| {
                    let dst = pairs[i].1;
                    let rec = path_from_tree(g, &tree, *src, dst, policy);
                    (
                        i,
                        PairStructure {
                            src: *src,
                            dst,
                            sd_out: out_deg[*src],
                            td_in: in_deg[dst],
                            spd: rec.spd,
                            path_types: rec.path_types,
                            path_durations: rec.path_durations,
                        },
                    )
                })
                .collect()
        })
        .collect();
    let mut out: Vec<Option<PairStructure>> = vec![None; pairs.len()];
    for (i, ps) in computed.into_iter().flatten() {
        out[i] = Some(ps);
    }
    out.into_iter().map(|p| p.expect("every pair computed")).collect()
}

/// All `n²` ordered pairs in row-major `(src, dst)` order.
pub fn all_pairs(node_count: usize) -> Vec<Edge> {
    (0..node_count)
        .flat_map(|i| (0..node_count).map(move |j| (i, j)))
        .collect()
}
