//! Query-driven community search over heterogeneous information networks.
//!
//! The crate trains an edge-semantic attention network that scores how likely
//! each node is to belong to the community of a given query node, then
//! extracts the community with a depth-limited BFS. A synthetic generator
//! with planted communities provides end-to-end verification data, and a
//! timing harness compares the full-graph and sampled training/query paths.

pub mod autodiff;
pub mod seeds;

pub mod graph;

pub mod dataset;

pub mod model;

pub mod sampler;

pub mod search;

pub mod metrics;

pub mod train;

pub mod synth;

pub mod bench;
