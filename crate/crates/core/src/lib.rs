//! Hierarchy-constrained node classification.
//!
//! Class taxonomies compile to descendant matrices; a max-constraint layer
//! turns raw per-class scores into hierarchy-consistent ones; MCLoss trains
//! graph networks (GAT, GCN, SAGE, MLP) over per-patient kNN graphs; and the
//! harness runs cross-validated experiments with hierarchical metrics.

pub mod constraint;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod graph;
pub mod harness;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod taxonomy;

pub use constraint::{find_delegations, find_violations, mcm, Delegation, ScoreMatrix, Violation};
pub use data::CellTable;
pub use diffcore::Tensor;
pub use error::{Error, Result};
pub use graph::{Adjacency, CellGraph, Standardization};
pub use harness::{Checkpoint, ExperimentConfig, RunRecord};
pub use layers::{Network, NetworkConfig};
pub use loss::LossKind;
pub use metrics::MetricsReport;
pub use taxonomy::{
    builtin_taxonomies, descendant_matrix, parse_taxonomy, preset, ClassRef, DescendantMatrix, Taxonomy,
};
