//! Dynamic graph representation learning over discrete snapshot sequences.
//!
//! The pipeline turns a temporal edge list into snapshots
//! ([`snapshot`]), annotates each snapshot with edge temporal states in a
//! weighted multi-relation difference graph ([`diff_graph`]), extracts
//! pairwise structural attributes ([`structure`]), and learns node states
//! with a recurrent structure-reinforced graph transformer ([`model`])
//! trained by dynamic link prediction ([`train`]) and evaluated with a
//! per-snapshot logistic probe ([`eval`]).

pub mod config;
pub mod diff_graph;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod snapshot;
pub mod structure;
pub mod synth;
pub mod tensor;
pub mod train;

pub use diff_graph::{DiffGraph, EdgeState, EdgeType, StateHistory};
pub use model::{HiddenState, Model, SgtConfig};
pub use snapshot::{Edge, NodeId, SnapshotSequence, TemporalEdgeList};
pub use structure::{PairStructure, PathPolicy};
pub use tensor::{Tape, Tensor, Var};
