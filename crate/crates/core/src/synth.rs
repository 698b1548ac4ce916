//! Synthetic temporal edge lists.
//!
//! `PlantedPersistent` plants a backbone of directed bipartite blocks
//! (sources `A_k` to targets `B_k`) present in every slice, plus independent
//! per-slice noise. Backbone endpoints share no neighbours, so
//! common-neighbour counts carry almost no signal about backbone edges.
//! With bursts enabled, extra edges appear and persist for a fixed number of
//! slices before vanishing, so the duration of an edge decides whether it
//! survives the next slice. With a burst gap, a finished burst restarts after
//! exactly that many absent slices, so a just-disappeared edge with a full
//! duration is certain to return.
//!
//! `Churn` starts from a random edge set and toggles every pair with a
//! probability that ramps linearly across slices.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream_rng, Purpose};
use crate::snapshot::{Edge, NodeId, Snapshot, SnapshotSequence};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least 4 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("need at least one slice")]
    NoSlices,
    #[error("burst_length must be positive")]
    ZeroBurst,
    #[error("{name} must be a probability, got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("unknown synthetic kind {0:?}")]
    UnknownKind(String),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthKind {
    #[default]
    PlantedPersistent,
    Churn,
}

impl FromStr for SynthKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "planted-persistent" => Ok(Self::PlantedPersistent),
            "churn" => Ok(Self::Churn),
            other => Err(SynthError::UnknownKind(other.to_string())),
        }
    }
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::PlantedPersistent => "planted-persistent",
            Self::Churn => "churn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub n_nodes: usize,
    pub n_slices: usize,
    pub seed: u64,
    /// Backbone block count; 0 picks `max(1, n_nodes / 10)`.
    pub n_blocks: usize,
    /// Probability of each `A_k → B_k` pair joining the backbone.
    pub block_density: f64,
    /// Per-slice probability of each non-backbone ordered pair.
    pub noise_rate: f64,
    /// Per-slice probability that a non-backbone pair starts a burst.
    pub burst_rate: f64,
    /// Slices a burst lasts.
    pub burst_length: usize,
    /// Absent slices before a finished burst restarts; 0 never restarts.
    pub burst_gap: usize,
    /// Initial edge density for `Churn`.
    pub churn_density: f64,
    pub churn_toggle_min: f64,
    pub churn_toggle_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kind: SynthKind::PlantedPersistent,
            n_nodes: 50,
            n_slices: 20,
            seed: 0,
            n_blocks: 0,
            block_density: 0.6,
            noise_rate: 0.002,
            burst_rate: 0.0,
            burst_length: 4,
            burst_gap: 0,
            churn_density: 0.05,
            churn_toggle_min: 0.05,
            churn_toggle_max: 0.3,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.n_nodes < 4 {
            return Err(SynthError::TooFewNodes(self.n_nodes));
        }
        if self.n_slices == 0 {
            return Err(SynthError::NoSlices);
        }
        if self.burst_length == 0 {
            return Err(SynthError::ZeroBurst);
        }
        for (name, value) in [
            ("block_density", self.block_density),
            ("noise_rate", self.noise_rate),
            ("burst_rate", self.burst_rate),
            ("churn_density", self.churn_density),
            ("churn_toggle_min", self.churn_toggle_min),
            ("churn_toggle_max", self.churn_toggle_max),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SynthError::Probability { name, value });
            }
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        if self.n_blocks > 0 {
            self.n_blocks.min(self.n_nodes / 2)
        } else {
            (self.n_nodes / 10).max(1)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub n_nodes: usize,
    pub slices: Vec<BTreeSet<Edge>>,
    /// Edges present in every slice by construction (planted kind only).
    pub backbone: BTreeSet<Edge>,
    /// Noise draws per slice, excluding backbone and burst edges.
    pub noise: Vec<BTreeSet<Edge>>,
}

impl SynthData {
    /// `src dst ts` lines with `ts` the slice index.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# synthetic temporal edge list: src dst slice").unwrap();
        for (t, edges) in self.slices.iter().enumerate() {
            for (u, v) in edges {
                writeln!(s, "{u} {v} {t}").unwrap();
            }
        }
        s
    }

    pub fn to_sequence(&self) -> SnapshotSequence {
        SnapshotSequence::new(
            self.slices.iter().map(|e| e.iter().copied().collect::<Snapshot>()).collect(),
            self.n_nodes,
        )
    }

    pub fn write(&self, path: &Path) -> Result<(), SynthError> {
        std::fs::write(path, self.to_edge_list()).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn planted<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> SynthData {
    let n = cfg.n_nodes;
    let mut nodes: Vec<NodeId> = (0..n).collect();
    nodes.shuffle(rng);
    let k = cfg.blocks();
    let per = n / k;
    let mut backbone = BTreeSet::new();
    for b in 0..k {
        let members = &nodes[b * per..(b + 1) * per];
        let (src, dst) = members.split_at(per / 2);
        for &u in src {
            for &v in dst {
                if rng.random::<f64>() < cfg.block_density {
                    backbone.insert((u, v));
                }
            }
        }
    }

    // (edge, slices left after this one) for running bursts
    let mut active: Vec<(Edge, usize)> = Vec::new();
    // (edge, slices until restart) for finished recurring bursts
    let mut sleeping: Vec<(Edge, usize)> = Vec::new();
    // edges owned by a running or sleeping burst
    let mut busy: BTreeSet<Edge> = BTreeSet::new();
    let len = cfg.burst_length;
    let mut slices = Vec::with_capacity(cfg.n_slices);
    let mut noise = Vec::with_capacity(cfg.n_slices);
    for _ in 0..cfg.n_slices {
        let mut edges = backbone.clone();
        let mut ended = Vec::new();
        let mut waking = Vec::new();
        sleeping.retain_mut(|(e, wait)| {
            *wait -= 1;
            if *wait == 0 {
                waking.push(*e);
            }
            *wait > 0
        });
        active.retain_mut(|(e, left)| {
            edges.insert(*e);
            *left -= 1;
            if *left == 0 {
                ended.push(*e);
            }
            *left > 0
        });
        let mut starts = waking;
        let mut slice_noise = BTreeSet::new();
        for u in 0..n {
            for v in 0..n {
                if u == v || backbone.contains(&(u, v)) {
                    continue;
                }
                if cfg.burst_rate > 0.0 && !busy.contains(&(u, v)) && rng.random::<f64>() < cfg.burst_rate {
                    busy.insert((u, v));
                    starts.push((u, v));
                }
                if cfg.noise_rate > 0.0 && rng.random::<f64>() < cfg.noise_rate {
                    slice_noise.insert((u, v));
                }
            }
        }
        for e in starts {
            edges.insert(e);
            if len > 1 {
                active.push((e, len - 1));
            } else {
                ended.push(e);
            }
        }
        for e in ended {
            if cfg.burst_gap > 0 {
                sleeping.push((e, cfg.burst_gap + 1));
            } else {
                busy.remove(&e);
            }
        }
        edges.extend(slice_noise.iter().copied());
        slices.push(edges);
        noise.push(slice_noise);
    }
    SynthData {
        n_nodes: n,
        slices,
        backbone,
        noise,
    }
}

fn churn<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> SynthData {
    let n = cfg.n_nodes;
    let mut current = BTreeSet::new();
    for u in 0..n {
        for v in 0..n {
            if u != v && rng.random::<f64>() < cfg.churn_density {
                current.insert((u, v));
            }
        }
    }
    let mut slices = Vec::with_capacity(cfg.n_slices);
    for t in 0..cfg.n_slices {
        if t > 0 {
            let frac = if cfg.n_slices > 1 {
                t as f64 / (cfg.n_slices - 1) as f64
            } else {
                0.0
            };
            let q = cfg.churn_toggle_min + (cfg.churn_toggle_max - cfg.churn_toggle_min) * frac;
            let present_q = q;
            let absent_q = q * cfg.churn_density;
            let mut next = BTreeSet::new();
            for u in 0..n {
                for v in 0..n {
                    if u == v {
                        continue;
                    }
                    let on = current.contains(&(u, v));
                    let flip = rng.random::<f64>() < if on { present_q } else { absent_q };
                    if on != flip {
                        next.insert((u, v));
                    }
                }
            }
            current = next;
        }
        slices.push(current.clone());
    }
    SynthData {
        n_nodes: n,
        noise: vec![BTreeSet::new(); slices.len()],
        slices,
        backbone: BTreeSet::new(),
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData, SynthError> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, Purpose::Synth);
    Ok(match cfg.kind {
        SynthKind::PlantedPersistent => planted(cfg, &mut rng),
        SynthKind::Churn => churn(cfg, &mut rng),
    })
}

/// Edge-list text for `kind` with default densities.
pub fn gen_synthetic(kind: SynthKind, n_nodes: usize, n_slices: usize, seed: u64) -> Result<String, SynthError> {
    let cfg = SynthConfig {
        kind,
        n_nodes,
        n_slices,
        seed,
        ..SynthConfig::default()
    };
    Ok(generate(&cfg)?.to_edge_list())
}
