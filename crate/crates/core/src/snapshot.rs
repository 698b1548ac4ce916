//! Temporal edge-list ingestion and snapshot slicing.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use thiserror::Error;

/// Dense node index in `0..node_count`.
pub type NodeId = usize;

/// Directed edge `(src, dst)`.
pub type Edge = (NodeId, NodeId);

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("empty input: no edge events")]
    Empty,
    #[error("line {line}: malformed record `{content}` (expected `src dst ts`)")]
    Malformed { line: usize, content: String },
    #[error("slice count must be at least 1, got {0}")]
    InvalidSlices(i64),
    #[error("train split {n_train} out of range for {total} snapshots (need 1 <= n_train < total)")]
    SplitOutOfRange { n_train: usize, total: usize },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TemporalEvent {
    pub src: NodeId,
    pub dst: NodeId,
    pub ts: i64,
}

/// Parsed events, sorted by timestamp, over densely remapped node ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalEdgeList {
    events: Vec<TemporalEvent>,
    /// Original identifier of each dense id.
    raw_ids: Vec<u64>,
}

impl TemporalEdgeList {
    pub fn events(&self) -> &[TemporalEvent] {
        &self.events
    }

    pub fn node_count(&self) -> usize {
        self.raw_ids.len()
    }

    pub fn raw_id(&self, node: NodeId) -> u64 {
        self.raw_ids[node]
    }

    pub fn time_range(&self) -> (i64, i64) {
        let first = self.events.first().map_or(0, |e| e.ts);
        let last = self.events.last().map_or(0, |e| e.ts);
        (first, last)
    }

    pub fn distinct_edges(&self) -> BTreeSet<Edge> {
        self.events.iter().map(|e| (e.src, e.dst)).collect()
    }
}

/// Parses whitespace-separated `src dst ts` lines. Blank lines and lines
/// starting with `#` are skipped; self-loops are dropped before id
/// assignment. Ids are assigned in order of first appearance in the file and
/// events are stably sorted by timestamp, so duplicate triples survive.
pub fn parse_edge_list(text: &[u8]) -> Result<TemporalEdgeList, IngestError> {
    let text = String::from_utf8_lossy(text);
    let mut ids: HashMap<u64, NodeId> = HashMap::new();
    let mut raw_ids = Vec::new();
    let mut events = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let malformed = || IngestError::Malformed {
            line: lineno + 1,
            content: trimmed.to_string(),
        };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(malformed());
        }
        let src: u64 = fields[0].parse().map_err(|_| malformed())?;
        let dst: u64 = fields[1].parse().map_err(|_| malformed())?;
        let ts: i64 = fields[2].parse().map_err(|_| malformed())?;
        if src == dst {
            continue;
        }
        let mut intern = |raw: u64| {
            *ids.entry(raw).or_insert_with(|| {
                raw_ids.push(raw);
                raw_ids.len() - 1
            })
        };
        let (src, dst) = (intern(src), intern(dst));
        events.push(TemporalEvent { src, dst, ts });
    }
    if events.is_empty() {
        return Err(IngestError::Empty);
    }
    events.sort_by_key(|e| e.ts);
    Ok(TemporalEdgeList { events, raw_ids })
}

pub fn load_edge_list(path: &Path) -> Result<TemporalEdgeList, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_edge_list(&bytes)
}

/// Deduplicated directed edge set of one time slice.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Snapshot {
    edges: BTreeSet<Edge>,
}

impl Snapshot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, e: Edge) -> bool {
        self.edges.insert(e)
    }

    pub fn contains(&self, e: &Edge) -> bool {
        self.edges.contains(e)
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Edges in ascending `(src, dst)` order.
    pub fn iter(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter()
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }
}

impl FromIterator<Edge> for Snapshot {
    fn from_iter<I: IntoIterator<Item = Edge>>(iter: I) -> Self {
        Self {
            edges: iter.into_iter().collect(),
        }
    }
}

/// Ordered snapshots over a shared node registry of `node_count` nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSequence {
    snapshots: Vec<Snapshot>,
    node_count: usize,
}

impl SnapshotSequence {
    /// Panics if an edge endpoint is outside the registry.
    pub fn new(snapshots: Vec<Snapshot>, node_count: usize) -> Self {
        for s in &snapshots {
            for &(u, v) in s.iter() {
                assert!(u < node_count && v < node_count, "edge ({u},{v}) outside registry of {node_count}");
            }
        }
        Self { snapshots, node_count }
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn get(&self, t: usize) -> &Snapshot {
        &self.snapshots[t]
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_union(&self) -> BTreeSet<Edge> {
        self.snapshots.iter().flat_map(|s| s.iter().copied()).collect()
    }
}

/// Partitions `[ts_min, ts_max]` into `n_slices` equal-width bins, half-open
/// except the last, and collects the deduplicated edges of each bin. Binning
/// is exact integer arithmetic. When every event shares one timestamp they
/// all land in the last bin.
pub fn slice_snapshots(tel: &TemporalEdgeList, n_slices: i64) -> Result<SnapshotSequence, IngestError> {
    if n_slices < 1 {
        return Err(IngestError::InvalidSlices(n_slices));
    }
    if tel.events.is_empty() {
        return Err(IngestError::Empty);
    }
    let n = n_slices as usize;
    let (min, max) = tel.time_range();
    let span = (max - min) as i128;
    let mut snapshots = vec![Snapshot::new(); n];
    for e in &tel.events {
        let bin = if span == 0 {
            n - 1
        } else {
            (((e.ts - min) as i128 * n as i128) / span).min(n as i128 - 1) as usize
        };
        snapshots[bin].insert((e.src, e.dst));
    }
    Ok(SnapshotSequence::new(snapshots, tel.node_count()))
}

/// First `n_train` snapshots for training, the rest for testing. Both halves
/// keep the full registry.
pub fn split_train_test(
    seq: &SnapshotSequence,
    n_train: usize,
) -> Result<(SnapshotSequence, SnapshotSequence), IngestError> {
    if n_train < 1 || n_train >= seq.len() {
        return Err(IngestError::SplitOutOfRange {
            n_train,
            total: seq.len(),
        });
    }
    let (a, b) = seq.snapshots.split_at(n_train);
    Ok((
        SnapshotSequence::new(a.to_vec(), seq.node_count),
        SnapshotSequence::new(b.to_vec(), seq.node_count),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn remaps_and_sorts() {
        let tel = parse_edge_list(b"1 2 10\n1 3 5\n").unwrap();
        // ids by first appearance: 1 -> 0, 2 -> 1, 3 -> 2
        let got: Vec<_> = tel.events().iter().map(|e| (e.src, e.dst, e.ts)).collect();
        assert_eq!(got, vec![(0, 2, 5), (0, 1, 10)]);
        assert_eq!(tel.node_count(), 3);
        assert_eq!(tel.raw_id(2), 3);
    }

    #[test]
    fn rejects_empty_and_malformed() {
        assert!(matches!(parse_edge_list(b""), Err(IngestError::Empty)));
        assert!(matches!(parse_edge_list(b"# only a comment\n\n"), Err(IngestError::Empty)));
        assert!(matches!(parse_edge_list(b"x y z\n"), Err(IngestError::Malformed { line: 1, .. })));
        assert!(matches!(
            parse_edge_list(b"1 2 3\n4 5\n"),
            Err(IngestError::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn comments_self_loops_and_duplicates() {
        let tel = parse_edge_list(b"# header\n7 7 1\n1 2 3\n1 2 3\n").unwrap();
        assert_eq!(tel.events().len(), 2);
        assert_eq!(tel.node_count(), 2);
    }

    /// Independent binning oracle: linear search for the bin whose edges
    /// `min + b*span/n <= t < min + (b+1)*span/n` contain each timestamp,
    /// compared in exact cross-multiplied form.
    fn oracle_bins(ts: &[i64], n: usize) -> Vec<usize> {
        let min = *ts.iter().min().unwrap() as i128;
        let span = *ts.iter().max().unwrap() as i128 - min;
        let n = n as i128;
        ts.iter()
            .map(|&t| {
                let off = (t as i128 - min) * n;
                (0..n)
                    .find(|&b| off >= b * span && (off < (b + 1) * span || b == n - 1))
                    .unwrap() as usize
            })
            .collect()
    }

    #[test]
    fn two_bins_over_ten_events() {
        let text: String = (0..10).map(|t| format!("{} {} {t}\n", t, t + 100)).collect();
        let tel = parse_edge_list(text.as_bytes()).unwrap();
        let seq = slice_snapshots(&tel, 2).unwrap();
        let bins = oracle_bins(&(0..10).collect::<Vec<_>>(), 2);
        let expect0 = bins.iter().filter(|&&b| b == 0).count();
        assert_eq!(expect0, 5);
        assert_eq!(seq.get(0).len(), expect0);
        assert_eq!(seq.get(1).len(), 10 - expect0);
    }

    #[test]
    fn single_bin_and_single_timestamp() {
        let tel = parse_edge_list(b"1 2 4\n2 3 4\n1 2 4\n").unwrap();
        let one = slice_snapshots(&tel, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.get(0).len(), 2);
        let three = slice_snapshots(&tel, 3).unwrap();
        assert_eq!(three.len(), 3);
        assert!(three.get(0).is_empty() && three.get(1).is_empty());
        assert_eq!(three.get(2).len(), 2);
        assert!(matches!(slice_snapshots(&tel, 0), Err(IngestError::InvalidSlices(0))));
    }

    #[test]
    fn split_counts() {
        let seq = SnapshotSequence::new(vec![Snapshot::new(); 88], 3);
        let (tr, te) = split_train_test(&seq, 25).unwrap();
        assert_eq!((tr.len(), te.len()), (25, 63));
        let seq2 = SnapshotSequence::new(vec![Snapshot::new(); 2], 3);
        let (tr, te) = split_train_test(&seq2, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
        assert!(split_train_test(&seq2, 0).is_err());
        assert!(split_train_test(&seq2, 2).is_err());
    }

    proptest! {
        #[test]
        fn slicing_matches_oracle_and_preserves_edges(
            raw in prop::collection::vec((0u64..12, 0u64..12, -50i64..50), 1..60),
            n in 1usize..9,
        ) {
            let text: String = raw.iter().map(|(a, b, t)| format!("{a} {b} {t}\n")).collect();
            let Ok(tel) = parse_edge_list(text.as_bytes()) else {
                // only self-loops
                prop_assert!(raw.iter().all(|(a, b, _)| a == b));
                return Ok(());
            };
            let seq = slice_snapshots(&tel, n as i64).unwrap();
            prop_assert_eq!(seq.len(), n);
            prop_assert_eq!(seq.edge_union(), tel.distinct_edges());
            let ts: Vec<i64> = tel.events().iter().map(|e| e.ts).collect();
            let bins = oracle_bins(&ts, n);
            for (e, b) in tel.events().iter().zip(bins) {
                prop_assert!(seq.get(b).contains(&(e.src, e.dst)));
            }
            for s in seq.snapshots() {
                for &(u, v) in s.iter() {
                    prop_assert!(u < seq.node_count() && v < seq.node_count());
                }
            }
            // deterministic
            let again = slice_snapshots(&parse_edge_list(text.as_bytes()).unwrap(), n as i64).unwrap();
            prop_assert_eq!(again, seq);
        }
    }
}
