//! Community extraction from node probabilities.
//!
//! BFS from the query node; a node is expanded only while its depth is below
//! the bound, every neighbor of an expanded node is enqueued regardless of
//! score (low-probability or off-type nodes still bridge to members behind
//! them), and a neighbor joins the community when its type is targeted and
//! its probability clears the threshold. The query node is always a member.

use std::collections::{BTreeSet, VecDeque};

use serde::Serialize;
use thiserror::Error;

use crate::graph::{HeteroGraph, NodeId, NodeTypeId};

#[derive(Clone, Debug)]
pub struct SearchConfig {
    /// Strict membership threshold: a node joins when `p > gamma`.
    pub gamma: f64,
    /// Maximum expansion depth; `None` runs an unbounded BFS.
    pub max_depth: Option<usize>,
    pub target_types: BTreeSet<NodeTypeId>,
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("search: query node {q} out of range ({count} nodes)")]
    InvalidQuery { q: NodeId, count: usize },
    #[error("search: {got} probabilities for {expected} nodes")]
    ProbabilityLength { got: usize, expected: usize },
    #[error("search: missing probability for visited node {0}")]
    MissingProbability(NodeId),
    #[error("search: gamma {0} outside [0, 1]")]
    InvalidGamma(f64),
}

/// Extracted community plus traversal statistics.
#[derive(Clone, Debug, Serialize)]
pub struct CommunityResult {
    /// Members in discovery order; the query node comes first.
    pub members: Vec<NodeId>,
    /// Number of expanded nodes.
    pub visited: usize,
    /// Deepest level at which a node was expanded.
    pub max_depth_reached: usize,
}

impl CommunityResult {
    pub fn member_set(&self) -> BTreeSet<NodeId> {
        self.members.iter().copied().collect()
    }
}

/// Depth-limited heuristic search.
pub fn search(
    graph: &HeteroGraph,
    query: NodeId,
    probabilities: &[f64],
    config: &SearchConfig,
) -> Result<CommunityResult, SearchError> {
    let n = graph.node_count();
    if query >= n {
        return Err(SearchError::InvalidQuery { q: query, count: n });
    }
    if probabilities.len() != n {
        return Err(SearchError::ProbabilityLength {
            got: probabilities.len(),
            expected: n,
        });
    }
    if !(0.0..=1.0).contains(&config.gamma) {
        return Err(SearchError::InvalidGamma(config.gamma));
    }
    let d_max = config.max_depth.unwrap_or(usize::MAX);

    let mut members = vec![query];
    let mut member_set = BTreeSet::from([query]);
    let mut visited: BTreeSet<NodeId> = BTreeSet::new();
    let mut queue: VecDeque<(NodeId, usize)> = VecDeque::from([(query, 0)]);
    let mut max_depth_reached = 0;

    while let Some((v, depth)) = queue.pop_front() {
        if visited.contains(&v) || depth >= d_max {
            continue;
        }
        visited.insert(v);
        max_depth_reached = max_depth_reached.max(depth);
        for (u, _, _) in graph.neighbors_unchecked(v) {
            queue.push_back((u, depth + 1));
            let p = probabilities[u];
            if p.is_nan() {
                return Err(SearchError::MissingProbability(u));
            }
            if config.target_types.contains(&graph.node_type_of(u))
                && p > config.gamma
                && member_set.insert(u)
            {
                members.push(u);
            }
        }
    }

    Ok(CommunityResult {
        members,
        visited: visited.len(),
        max_depth_reached,
    })
}

/// Unbounded BFS variant.
pub fn full_search(
    graph: &HeteroGraph,
    query: NodeId,
    probabilities: &[f64],
    gamma: f64,
    target_types: &BTreeSet<NodeTypeId>,
) -> Result<CommunityResult, SearchError> {
    search(
        graph,
        query,
        probabilities,
        &SearchConfig {
            gamma,
            max_depth: None,
            target_types: target_types.clone(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{
        build_graph, BuildOptions, EdgeRow, EdgeTable, EdgeTypeDecl, NodeTable, NodeTypeDecl,
        SchemaDecl,
    };

    /// Homogeneous-ish graph: one node type "n" plus edge type "e"
    /// (symmetrized), with ids 0..count and the given undirected edges.
    fn plain_graph(count: usize, edges: &[(usize, usize)]) -> HeteroGraph {
        let schema = SchemaDecl {
            node_types: vec![
                NodeTypeDecl {
                    name: "n".into(),
                    feature_dim: 1,
                },
                NodeTypeDecl {
                    name: "unused".into(),
                    feature_dim: 1,
                },
            ],
            edge_types: vec![EdgeTypeDecl {
                name: "e".into(),
                src: "n".into(),
                dst: "n".into(),
                feature_dim: None,
            }],
        };
        build_graph(
            &schema,
            vec![
                NodeTable {
                    type_name: "n".into(),
                    rows: (0..count).map(|i| (i, vec![0.0])).collect(),
                },
                NodeTable {
                    type_name: "unused".into(),
                    rows: vec![],
                },
            ],
            vec![EdgeTable {
                type_name: "e".into(),
                rows: edges
                    .iter()
                    .map(|&(src, dst)| EdgeRow {
                        src,
                        dst,
                        features: None,
                    })
                    .collect(),
            }],
            &BuildOptions::default(),
        )
        .unwrap()
    }

    fn all_n() -> BTreeSet<NodeTypeId> {
        BTreeSet::from([NodeTypeId(0)])
    }

    #[test]
    fn zero_depth_returns_query_only() {
        let g = plain_graph(3, &[(0, 1), (1, 2)]);
        let probs = vec![0.9, 0.9, 0.9];
        let r = search(
            &g,
            0,
            &probs,
            &SearchConfig {
                gamma: 0.5,
                max_depth: Some(0),
                target_types: all_n(),
            },
        )
        .unwrap();
        assert_eq!(r.members, vec![0]);
        assert_eq!(r.visited, 0);
        assert_eq!(r.max_depth_reached, 0);
    }

    #[test]
    fn hand_traced_depth_bounds() {
        // Edges a-b, a-c, b-d with a=0, b=1, c=2, d=3.
        let g = plain_graph(4, &[(0, 1), (0, 2), (1, 3)]);
        let probs = vec![0.0, 0.9, 0.3, 0.8];
        let run = |d| {
            search(
                &g,
                0,
                &probs,
                &SearchConfig {
                    gamma: 0.5,
                    max_depth: Some(d),
                    target_types: all_n(),
                },
            )
            .unwrap()
            .member_set()
        };
        assert_eq!(run(1), BTreeSet::from([0, 1]));
        assert_eq!(run(2), BTreeSet::from([0, 1, 3]));
    }

    #[test]
    fn off_type_nodes_bridge_but_never_join() {
        // Chain a - v - b where v has the untargeted type.
        let schema = SchemaDecl {
            node_types: vec![
                NodeTypeDecl {
                    name: "n".into(),
                    feature_dim: 1,
                },
                NodeTypeDecl {
                    name: "m".into(),
                    feature_dim: 1,
                },
            ],
            edge_types: vec![EdgeTypeDecl {
                name: "e".into(),
                src: "n".into(),
                dst: "m".into(),
                feature_dim: None,
            }],
        };
        let g = build_graph(
            &schema,
            vec![
                NodeTable {
                    type_name: "n".into(),
                    rows: vec![(0, vec![0.0]), (2, vec![0.0])],
                },
                NodeTable {
                    type_name: "m".into(),
                    rows: vec![(1, vec![0.0])],
                },
            ],
            vec![EdgeTable {
                type_name: "e".into(),
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
                ],
            }],
            &BuildOptions::default(),
        )
        .unwrap();
        let probs = vec![0.0, 0.99, 0.9];
        let r = search(
            &g,
            0,
            &probs,
            &SearchConfig {
                gamma: 0.5,
                max_depth: Some(3),
                target_types: BTreeSet::from([NodeTypeId(0)]),
            },
        )
        .unwrap();
        assert_eq!(r.member_set(), BTreeSet::from([0, 2]));
    }

    #[test]
    fn full_search_equals_deep_bounded_search() {
        let g = plain_graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        let probs = vec![0.9; 5];
        let full = full_search(&g, 0, &probs, 0.5, &all_n()).unwrap();
        let bounded = search(
            &g,
            0,
            &probs,
            &SearchConfig {
                gamma: 0.5,
                max_depth: Some(6),
                target_types: all_n(),
            },
        )
        .unwrap();
        assert_eq!(full.member_set(), bounded.member_set());
        assert_eq!(full.visited, bounded.visited);
    }

    #[test]
    fn unreachable_high_probability_nodes_stay_out() {
        let g = plain_graph(4, &[(0, 1), (2, 3)]);
        let probs = vec![0.9; 4];
        let r = full_search(&g, 0, &probs, 0.5, &all_n()).unwrap();
        assert_eq!(r.member_set(), BTreeSet::from([0, 1]));
    }

    #[test]
    fn errors_on_bad_inputs() {
        let g = plain_graph(3, &[(0, 1)]);
        assert!(matches!(
            full_search(&g, 9, &[0.5; 3], 0.5, &all_n()),
            Err(SearchError::InvalidQuery { .. })
        ));
        assert!(matches!(
            full_search(&g, 0, &[0.5; 2], 0.5, &all_n()),
            Err(SearchError::ProbabilityLength { .. })
        ));
        let mut probs = vec![0.5; 3];
        probs[1] = f64::NAN;
        assert!(matches!(
            full_search(&g, 0, &probs, 0.5, &all_n()),
            Err(SearchError::MissingProbability(1))
        ));
    }

    #[test]
    fn query_is_member_even_below_threshold_or_off_type() {
        let g = plain_graph(2, &[(0, 1)]);
        let probs = vec![0.01, 0.9];
        let r = full_search(&g, 0, &probs, 0.5, &all_n()).unwrap();
        assert!(r.members.contains(&0));
        assert_eq!(r.members[0], 0);
    }

    #[test]
    fn monotone_in_depth_and_gamma() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(13);
        for _ in 0..20 {
            let n = rng.random_range(2..20);
            let mut edges = Vec::new();
            for _ in 0..rng.random_range(1..40) {
                edges.push((rng.random_range(0..n), rng.random_range(0..n)));
            }
            let g = plain_graph(n, &edges);
            let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let run = |d: usize, gamma: f64| {
                search(
                    &g,
                    0,
                    &probs,
                    &SearchConfig {
                        gamma,
                        max_depth: Some(d),
                        target_types: all_n(),
                    },
                )
                .unwrap()
                .member_set()
            };
            let mut prev = run(0, 0.5);
            for d in 1..6 {
                let cur = run(d, 0.5);
                assert!(prev.is_subset(&cur), "members shrank as depth grew");
                prev = cur;
            }
            let mut prev = run(4, 0.9);
            for gamma in [0.7, 0.5, 0.3, 0.0] {
                let cur = run(4, gamma);
                assert!(prev.is_subset(&cur), "members shrank as gamma fell");
                prev = cur;
            }
        }
    }
}
