//! Fanout-bounded recursive neighbor sampling.
//!
//! Starting from a task's labeled nodes, each round samples up to a fixed
//! number of distinct neighbors per node; the union of all rounds induces the
//! training subgraph. Fresh seeds per epoch give the trainer a different
//! subgraph every pass.

use std::collections::BTreeSet;

use rand::Rng;
use thiserror::Error;

use crate::graph::{Csr, HeteroGraph, NodeId, QueryTask};
use crate::seeds;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("sampler: empty labeled node set")]
    EmptyLabeledSet,
    #[error("sampler: fanout of 0 at position {0}")]
    ZeroFanout(usize),
    #[error("sampler: labeled node {0} out of range")]
    NodeOutOfRange(NodeId),
}

/// Induced training subgraph with its bookkeeping.
pub struct SampledBlock {
    /// Induced subgraph over the sampled nodes, local ids `0..m`.
    pub graph: HeteroGraph,
    /// Local id -> global id, ascending.
    pub global_ids: Vec<NodeId>,
    /// Sampled node sets per round: `layer_sets[0]` is the labeled set,
    /// `layer_sets[r]` the nodes reached by round `r`. Global ids.
    pub layer_sets: Vec<BTreeSet<NodeId>>,
    /// Local ids of the task's labeled nodes, in `task.labeled()` order.
    pub labeled_local: Vec<usize>,
    /// Local id of the query node.
    pub query_local: usize,
}

impl SampledBlock {
    pub fn local_of(&self, global: NodeId) -> Option<usize> {
        self.global_ids.binary_search(&global).ok()
    }
}

/// Distinct neighbor nodes of `v` across all edge types, canonical order.
fn distinct_neighbors(graph: &HeteroGraph, v: NodeId) -> Vec<NodeId> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (u, _, _) in graph.neighbors_unchecked(v) {
        if seen.insert(u) {
            out.push(u);
        }
    }
    out
}

/// Samples `k` distinct items from `pool` without replacement (all of them
/// when `k >= pool.len()`), by partial Fisher-Yates.
fn sample_distinct<R: Rng>(rng: &mut R, mut pool: Vec<NodeId>, k: usize) -> Vec<NodeId> {
    if k >= pool.len() {
        return pool;
    }
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Runs the sampling rounds and extracts the induced subgraph.
///
/// `fanouts` has one entry per model layer; the first entry bounds the
/// neighbors sampled for the labeled nodes, the next the neighbors of those
/// neighbors, and so on. Deterministic in `seed`.
pub fn sample_block(
    graph: &HeteroGraph,
    task: &QueryTask,
    fanouts: &[usize],
    seed: u64,
) -> Result<SampledBlock, SampleError> {
    let (labeled_ids, _) = task.labeled();
    if labeled_ids.is_empty() {
        return Err(SampleError::EmptyLabeledSet);
    }
    for &id in labeled_ids.iter().chain([task.query].iter()) {
        if id >= graph.node_count() {
            return Err(SampleError::NodeOutOfRange(id));
        }
    }
    if let Some(pos) = fanouts.iter().position(|&f| f == 0) {
        return Err(SampleError::ZeroFanout(pos));
    }

    let mut rng = seeds::rng_for(seed, &[seeds::TAG_SAMPLE]);
    let mut layer_sets: Vec<BTreeSet<NodeId>> = Vec::with_capacity(fanouts.len() + 1);
    let mut frontier: BTreeSet<NodeId> = labeled_ids.iter().copied().collect();
    layer_sets.push(frontier.clone());
    for &fanout in fanouts {
        let mut next = BTreeSet::new();
        for &v in &frontier {
            let pool = distinct_neighbors(graph, v);
            for u in sample_distinct(&mut rng, pool, fanout) {
                next.insert(u);
            }
        }
        layer_sets.push(next.clone());
        frontier = next;
    }

    let mut union: BTreeSet<NodeId> = BTreeSet::new();
    for s in &layer_sets {
        union.extend(s.iter().copied());
    }
    let global_ids: Vec<NodeId> = union.into_iter().collect();

    let graph_block = induced_subgraph(graph, &global_ids);
    let labeled_local = labeled_ids
        .iter()
        .map(|&g| global_ids.binary_search(&g).unwrap())
        .collect();
    let query_local = global_ids.binary_search(&task.query).unwrap();

    Ok(SampledBlock {
        graph: graph_block,
        global_ids,
        layer_sets,
        labeled_local,
        query_local,
    })
}

/// Induced subgraph over `global_ids` (sorted ascending): all edges of every
/// type whose endpoints both lie in the set, preserving per-source edge
/// order so canonical neighbor order carries over.
pub fn induced_subgraph(graph: &HeteroGraph, global_ids: &[NodeId]) -> HeteroGraph {
    let registry = graph.registry().clone();
    let m = global_ids.len();
    let local_of = |g: NodeId| global_ids.binary_search(&g).ok();

    let node_type: Vec<_> = global_ids.iter().map(|&g| graph.node_type_of(g)).collect();

    // Per-type feature tables in local member order (ascending local id
    // within type, which matches ascending global id).
    let n_types = registry.node_types.len();
    let mut features: Vec<Vec<f64>> = vec![Vec::new(); n_types];
    for &g in global_ids {
        let t = graph.node_type_of(g);
        features[t.0].extend_from_slice(graph.node_features(g));
    }

    let mut csr = Vec::with_capacity(registry.edge_types.len());
    for (tix, info) in registry.edge_types.iter().enumerate() {
        let src_csr: &Csr = graph.csr(crate::graph::EdgeTypeId(tix));
        let feat_dim = info.feature_dim;
        let mut offsets = Vec::with_capacity(m + 1);
        offsets.push(0usize);
        let mut targets = Vec::new();
        let mut feats: Option<Vec<f64>> = feat_dim.map(|_| Vec::new());
        for &g_src in global_ids {
            let (start, end) = (src_csr.offsets[g_src], src_csr.offsets[g_src + 1]);
            for (k, &g_dst) in src_csr.targets[start..end].iter().enumerate() {
                if let Some(l_dst) = local_of(g_dst) {
                    targets.push(l_dst);
                    if let (Some(dim), Some(out)) = (feat_dim, feats.as_mut()) {
                        let row = start + k;
                        out.extend_from_slice(
                            &src_csr.features.as_ref().unwrap()[row * dim..(row + 1) * dim],
                        );
                    }
                }
            }
            offsets.push(targets.len());
        }
        csr.push(Csr {
            offsets,
            targets,
            features: feats,
        });
    }

    HeteroGraph::from_parts(registry, node_type, features, csr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{
        build_graph, BuildOptions, EdgeRow, EdgeTable, EdgeTypeDecl, NodeTable, NodeTypeDecl,
        NodeTypeId, SchemaDecl,
    };

    fn line_schema() -> SchemaDecl {
        SchemaDecl {
            node_types: vec![
                NodeTypeDecl {
                    name: "a".into(),
                    feature_dim: 1,
                },
                NodeTypeDecl {
                    name: "b".into(),
                    feature_dim: 1,
                },
            ],
            edge_types: vec![EdgeTypeDecl {
                name: "r".into(),
                src: "a".into(),
                dst: "b".into(),
                feature_dim: None,
            }],
        }
    }

    /// Star: node 0 ("a") connected to nodes 1..=k ("b").
    fn star(k: usize) -> HeteroGraph {
        let nodes = vec![
            NodeTable {
                type_name: "a".into(),
                rows: vec![(0, vec![0.0])],
            },
            NodeTable {
                type_name: "b".into(),
                rows: (1..=k).map(|i| (i, vec![i as f64])).collect(),
            },
        ];
        let edges = vec![EdgeTable {
            type_name: "r".into(),
            rows: (1..=k)
                .map(|i| EdgeRow {
                    src: 0,
                    dst: i,
                    features: None,
                })
                .collect(),
        }];
        build_graph(&line_schema(), nodes, edges, &BuildOptions::default()).unwrap()
    }

    fn star_task() -> QueryTask {
        QueryTask {
            query: 0,
            pos: vec![0],
            neg: vec![],
            target_types: vec![NodeTypeId(0)],
        }
    }

    #[test]
    fn fanout_above_degree_takes_all_neighbors() {
        let g = star(3);
        let block = sample_block(&g, &star_task(), &[5], 1).unwrap();
        assert_eq!(block.layer_sets[1].len(), 3);
        assert_eq!(block.global_ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fanout_below_degree_samples_exactly_k_distinct() {
        let g = star(3);
        let block = sample_block(&g, &star_task(), &[2], 7).unwrap();
        assert_eq!(block.layer_sets[1].len(), 2);
        for &v in &block.layer_sets[1] {
            assert!((1..=3).contains(&v));
        }
        // Same seed, same subset; some other seed eventually differs.
        let again = sample_block(&g, &star_task(), &[2], 7).unwrap();
        assert_eq!(block.layer_sets, again.layer_sets);
        let mut saw_different = false;
        for seed in 0..50 {
            let other = sample_block(&g, &star_task(), &[2], seed).unwrap();
            if other.layer_sets[1] != block.layer_sets[1] {
                saw_different = true;
                break;
            }
        }
        assert!(saw_different, "resampling never varied the block");
    }

    #[test]
    fn zero_fanout_and_empty_labels_rejected() {
        let g = star(3);
        assert!(matches!(
            sample_block(&g, &star_task(), &[0], 1),
            Err(SampleError::ZeroFanout(0))
        ));
        let empty = QueryTask {
            query: 0,
            pos: vec![],
            neg: vec![],
            target_types: vec![NodeTypeId(0)],
        };
        assert!(matches!(
            sample_block(&g, &empty, &[2], 1),
            Err(SampleError::EmptyLabeledSet)
        ));
    }

    #[test]
    fn full_fanouts_cover_l_hop_neighborhood() {
        // Path 0-1-2-3 over alternating types; 2 rounds from {0} reach {0,1,2}.
        let nodes = vec![
            NodeTable {
                type_name: "a".into(),
                rows: vec![(0, vec![0.0]), (2, vec![2.0])],
            },
            NodeTable {
                type_name: "b".into(),
                rows: vec![(1, vec![1.0]), (3, vec![3.0])],
            },
        ];
        let edges = vec![EdgeTable {
            type_name: "r".into(),
            rows: vec![
                EdgeRow {
                    src: 0,
                    dst: 1,
                    features: None,
                },
                EdgeRow {
                    src: 2,
                    dst: 1,
                    features: None,
                },
                EdgeRow {
                    src: 2,
                    dst: 3,
                    features: None,
                },
            ],
        }];
        let g = build_graph(&line_schema(), nodes, edges, &BuildOptions::default()).unwrap();
        let block = sample_block(&g, &star_task(), &[10, 10], 3).unwrap();
        assert_eq!(block.global_ids, vec![0, 1, 2]);

        // BFS oracle: 2-hop ball around node 0.
        let mut ball = BTreeSet::from([0usize]);
        let mut frontier = vec![0usize];
        for _ in 0..2 {
            let mut next = Vec::new();
            for &v in &frontier {
                for (u, _, _) in g.neighbors_unchecked(v) {
                    if ball.insert(u) {
                        next.push(u);
                    }
                }
            }
            frontier = next;
        }
        let ball: Vec<_> = ball.into_iter().collect();
        assert_eq!(block.global_ids, ball);
    }

    #[test]
    fn induced_subgraph_preserves_edges_and_types() {
        let g = star(3);
        let block = sample_block(&g, &star_task(), &[2], 9).unwrap();
        let sub = &block.graph;
        assert!(sub.validate().is_ok());
        assert_eq!(sub.node_count(), 3);
        // Every induced edge exists in the parent with the same type.
        for v_local in 0..sub.node_count() {
            let v_global = block.global_ids[v_local];
            for (u_local, etype, _) in sub.neighbors_unchecked(v_local) {
                let u_global = block.global_ids[u_local];
                let found = g
                    .neighbors_unchecked(v_global)
                    .any(|(u, t, _)| u == u_global && t == etype);
                assert!(found, "edge {v_global}->{u_global} missing in parent");
            }
        }
    }

    #[test]
    fn frontier_bound_holds() {
        let g = star(5);
        for seed in 0..10 {
            let block = sample_block(&g, &star_task(), &[3, 2], seed).unwrap();
            for (r, &fanout) in [3usize, 2].iter().enumerate() {
                let bound: usize = block.layer_sets[r]
                    .iter()
                    .map(|&v| fanout.min(distinct_neighbors(&g, v).len()))
                    .sum();
                assert!(block.layer_sets[r + 1].len() <= bound);
            }
        }
    }
}
