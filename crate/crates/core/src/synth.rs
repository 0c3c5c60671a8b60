//! Synthetic heterogeneous graphs with planted communities.
//!
//! Nodes of each type are partitioned into disjoint planted communities plus
//! background; compatible node pairs are wired with probability `p_in` inside
//! a community and `p_out` across, via geometric skipping so sparse graphs
//! cost O(edges). Member features are a per-community mean of norm `signal`
//! plus unit Gaussian noise. Every planted community is re-wired until it is
//! connected, so the emitted ground truth is always usable.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CommunityRecord, DatasetTables, TaskSpec};
use crate::graph::{
    EdgeRow, EdgeTable, EdgeTypeDecl, NodeId, NodeTable, NodeTypeDecl, SchemaDecl,
};
use crate::seeds::{self, TAG_SYNTH};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthNodeType {
    pub name: String,
    pub count: usize,
    pub feature_dim: usize,
    /// Members of this type per planted community.
    pub community_size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthEdgeType {
    pub name: String,
    pub src: String,
    pub dst: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub node_types: Vec<SynthNodeType>,
    pub edge_types: Vec<SynthEdgeType>,
    pub communities: usize,
    /// Edge probability within a community (per compatible pair).
    pub p_in: f64,
    /// Edge probability across communities / background.
    pub p_out: f64,
    /// Norm of the per-community feature mean.
    pub signal: f64,
    pub tasks_per_community: usize,
    /// Fraction of a community's targeted members used as positives.
    pub pos_fraction: f64,
    pub target_types: Vec<String>,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synth: type `{name}` needs {needed} community members but has {count} nodes")]
    Infeasible {
        name: String,
        needed: usize,
        count: usize,
    },
    #[error("synth: p_in {p_in} must exceed p_out {p_out} and both lie in [0, 1]")]
    BadProbabilities { p_in: f64, p_out: f64 },
    #[error("synth: unknown type `{0}` in edge schema or targets")]
    UnknownType(String),
    #[error("synth: community {0} still disconnected after {1} wiring attempts")]
    Disconnected(usize, usize),
    #[error("synth: no targeted members in community {0}")]
    NoTargetedMembers(usize),
}

/// Default bibliographic-style config: four node types, three relations
/// (author-paper, paper-venue, paper-term), multi-type targets. Type counts
/// scale with `total_nodes`; cross-community density falls quadratically so
/// larger graphs keep bounded cross-community degree.
pub fn bibliographic(total_nodes: usize, seed: u64) -> SynthConfig {
    let scale = total_nodes as f64;
    let communities = (total_nodes / 250).max(2);
    let share = |f: f64| ((scale * f) as usize).max(1);
    SynthConfig {
        seed,
        node_types: vec![
            SynthNodeType {
                name: "author".into(),
                count: share(0.32),
                feature_dim: 16,
                community_size: 30,
            },
            SynthNodeType {
                name: "paper".into(),
                count: share(0.40),
                feature_dim: 16,
                community_size: 40,
            },
            SynthNodeType {
                name: "venue".into(),
                count: share(0.08),
                feature_dim: 8,
                community_size: 2,
            },
            SynthNodeType {
                name: "term".into(),
                count: share(0.20),
                feature_dim: 8,
                community_size: 10,
            },
        ],
        edge_types: vec![
            SynthEdgeType {
                name: "writes".into(),
                src: "author".into(),
                dst: "paper".into(),
            },
            SynthEdgeType {
                name: "published_in".into(),
                src: "paper".into(),
                dst: "venue".into(),
            },
            SynthEdgeType {
                name: "has_term".into(),
                src: "paper".into(),
                dst: "term".into(),
            },
        ],
        communities,
        p_in: 0.3,
        p_out: 0.01 * (2000.0 / scale) * (2000.0 / scale),
        signal: 2.0,
        tasks_per_community: 4,
        pos_fraction: 0.3,
        target_types: vec!["author".into(), "paper".into()],
    }
}

/// Bernoulli(p) subset of `0..total` by geometric skipping; O(hits).
fn skip_sample(rng: &mut ChaCha20Rng, total: usize, p: f64, mut emit: impl FnMut(usize)) {
    if p <= 0.0 || total == 0 {
        return;
    }
    if p >= 1.0 {
        for i in 0..total {
            emit(i);
        }
        return;
    }
    let log_q = (1.0 - p).ln();
    let mut pos: usize = 0;
    loop {
        let u: f64 = rng.random();
        let skip = ((1.0 - u).ln() / log_q).floor() as usize;
        pos = match pos.checked_add(skip) {
            Some(p) => p,
            None => return,
        };
        if pos >= total {
            return;
        }
        emit(pos);
        pos += 1;
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

const MAX_WIRING_ATTEMPTS: usize = 100;

/// Generates the full dataset: tables, tasks, and ground-truth communities.
pub fn generate(config: &SynthConfig) -> Result<DatasetTables, SynthError> {
    if !(0.0..=1.0).contains(&config.p_in)
        || !(0.0..=1.0).contains(&config.p_out)
        || config.p_in <= config.p_out
    {
        return Err(SynthError::BadProbabilities {
            p_in: config.p_in,
            p_out: config.p_out,
        });
    }
    let type_ix = |name: &str| -> Result<usize, SynthError> {
        config
            .node_types
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| SynthError::UnknownType(name.to_string()))
    };
    for t in &config.node_types {
        let needed = t.community_size * config.communities;
        if needed > t.count {
            return Err(SynthError::Infeasible {
                name: t.name.clone(),
                needed,
                count: t.count,
            });
        }
    }
    for e in &config.edge_types {
        type_ix(&e.src)?;
        type_ix(&e.dst)?;
    }
    let target_ix: Vec<usize> = config
        .target_types
        .iter()
        .map(|n| type_ix(n))
        .collect::<Result<_, _>>()?;

    let mut rng = seeds::rng_for(config.seed, &[TAG_SYNTH]);

    // Global ids: contiguous ranges per type, in declaration order.
    let mut offsets = Vec::with_capacity(config.node_types.len());
    let mut next = 0usize;
    for t in &config.node_types {
        offsets.push(next);
        next += t.count;
    }
    let total_nodes = next;

    // Community membership: shuffle each type's ids, deal out chunks.
    let mut members: Vec<Vec<Vec<NodeId>>> = Vec::new(); // [community][type] -> ids
    let mut community_of: Vec<Option<usize>> = vec![None; total_nodes];
    {
        let mut per_type_pool: Vec<Vec<NodeId>> = config
            .node_types
            .iter()
            .enumerate()
            .map(|(tix, t)| {
                let mut ids: Vec<NodeId> = (offsets[tix]..offsets[tix] + t.count).collect();
                use rand::seq::SliceRandom;
                ids.shuffle(&mut rng);
                ids
            })
            .collect();
        for c in 0..config.communities {
            let mut comm = Vec::new();
            for (tix, t) in config.node_types.iter().enumerate() {
                let take: Vec<NodeId> = per_type_pool[tix]
                    .drain(..t.community_size)
                    .collect();
                for &id in &take {
                    community_of[id] = Some(c);
                }
                comm.push(take);
            }
            members.push(comm);
        }
    }

    // Intra-community wiring with connectivity retries, per community.
    let mut edge_rows: Vec<Vec<(NodeId, NodeId)>> =
        vec![Vec::new(); config.edge_types.len()];
    for c in 0..config.communities {
        let mut all_members: Vec<NodeId> = Vec::new();
        for tm in &members[c] {
            all_members.extend_from_slice(tm);
        }
        if all_members.is_empty() {
            continue;
        }
        let local_of = |id: NodeId, all: &[NodeId]| all.iter().position(|&x| x == id).unwrap();

        let mut attempt = 0;
        let wired: Vec<Vec<(NodeId, NodeId)>> = loop {
            attempt += 1;
            let mut per_type: Vec<Vec<(NodeId, NodeId)>> =
                vec![Vec::new(); config.edge_types.len()];
            for (eix, e) in config.edge_types.iter().enumerate() {
                let s = type_ix(&e.src).unwrap();
                let t = type_ix(&e.dst).unwrap();
                let src_ids = &members[c][s];
                let dst_ids = &members[c][t];
                let pairs = src_ids.len() * dst_ids.len();
                skip_sample(&mut rng, pairs, config.p_in, |pos| {
                    let i = src_ids[pos / dst_ids.len().max(1)];
                    let j = dst_ids[pos % dst_ids.len().max(1)];
                    if i != j {
                        per_type[eix].push((i, j));
                    }
                });
            }
            let mut uf = UnionFind::new(all_members.len());
            for rows in &per_type {
                for &(a, b) in rows {
                    uf.union(local_of(a, &all_members), local_of(b, &all_members));
                }
            }
            let root = uf.find(0);
            let connected = (1..all_members.len()).all(|i| uf.find(i) == root);
            if connected {
                break per_type;
            }
            if attempt >= MAX_WIRING_ATTEMPTS {
                return Err(SynthError::Disconnected(c, MAX_WIRING_ATTEMPTS));
            }
        };
        for (eix, rows) in wired.into_iter().enumerate() {
            edge_rows[eix].extend(rows);
        }
    }

    // Cross-community and background wiring.
    for (eix, e) in config.edge_types.iter().enumerate() {
        let s = type_ix(&e.src).unwrap();
        let t = type_ix(&e.dst).unwrap();
        let (s_off, s_count) = (offsets[s], config.node_types[s].count);
        let (t_off, t_count) = (offsets[t], config.node_types[t].count);
        let pairs = s_count * t_count;
        skip_sample(&mut rng, pairs, config.p_out, |pos| {
            let i = s_off + pos / t_count.max(1);
            let j = t_off + pos % t_count.max(1);
            if i == j {
                return;
            }
            // Same planted community: covered by the p_in pass.
            if let (Some(ci), Some(cj)) = (community_of[i], community_of[j]) {
                if ci == cj {
                    return;
                }
            }
            edge_rows[eix].push((i, j));
        });
    }

    // Features: community mean (norm `signal`) plus unit noise.
    let mut comm_means: Vec<Vec<Vec<f64>>> = Vec::with_capacity(config.communities);
    for _ in 0..config.communities {
        let mut per_type = Vec::with_capacity(config.node_types.len());
        for t in &config.node_types {
            let mut v: Vec<f64> = (0..t.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in &mut v {
                    *x *= config.signal / norm;
                }
            }
            per_type.push(v);
        }
        comm_means.push(per_type);
    }
    let mut node_tables = Vec::with_capacity(config.node_types.len());
    for (tix, t) in config.node_types.iter().enumerate() {
        let mut rows = Vec::with_capacity(t.count);
        for id in offsets[tix]..offsets[tix] + t.count {
            let mut feats: Vec<f64> = (0..t.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            if let Some(c) = community_of[id] {
                for (f, m) in feats.iter_mut().zip(&comm_means[c][tix]) {
                    *f += m;
                }
            }
            rows.push((id, feats));
        }
        node_tables.push(NodeTable {
            type_name: t.name.clone(),
            rows,
        });
    }

    // Supervision tasks per community.
    let mut tasks = Vec::new();
    for c in 0..config.communities {
        let targeted: Vec<NodeId> = target_ix
            .iter()
            .flat_map(|&tix| members[c][tix].iter().copied())
            .collect();
        if targeted.is_empty() {
            return Err(SynthError::NoTargetedMembers(c));
        }
        let mut non_members: Vec<NodeId> = Vec::new();
        for &tix in &target_ix {
            let (off, count) = (offsets[tix], config.node_types[tix].count);
            non_members.extend((off..off + count).filter(|&id| community_of[id] != Some(c)));
        }
        let pos_count = ((targeted.len() as f64 * config.pos_fraction).round() as usize)
            .clamp(1, targeted.len());
        for _ in 0..config.tasks_per_community {
            let q = targeted[rng.random_range(0..targeted.len())];
            let mut pos = vec![q];
            let mut pool: Vec<NodeId> = targeted.iter().copied().filter(|&v| v != q).collect();
            for _ in 1..pos_count {
                if pool.is_empty() {
                    break;
                }
                let k = rng.random_range(0..pool.len());
                pos.push(pool.swap_remove(k));
            }
            let mut neg = Vec::with_capacity(pos.len());
            let mut neg_pool = non_members.clone();
            for _ in 0..pos.len().min(neg_pool.len()) {
                let k = rng.random_range(0..neg_pool.len());
                neg.push(neg_pool.swap_remove(k));
            }
            tasks.push(TaskSpec {
                query: q,
                pos,
                neg,
                target_types: config.target_types.clone(),
            });
        }
    }

    let communities = (0..config.communities)
        .map(|c| {
            let mut ids: Vec<NodeId> = members[c].iter().flatten().copied().collect();
            ids.sort_unstable();
            CommunityRecord {
                id: c,
                members: ids,
            }
        })
        .collect();

    let schema = SchemaDecl {
        node_types: config
            .node_types
            .iter()
            .map(|t| NodeTypeDecl {
                name: t.name.clone(),
                feature_dim: t.feature_dim,
            })
            .collect(),
        edge_types: config
            .edge_types
            .iter()
            .map(|e| EdgeTypeDecl {
                name: e.name.clone(),
                src: e.src.clone(),
                dst: e.dst.clone(),
                feature_dim: None,
            })
            .collect(),
    };
    let edge_tables = config
        .edge_types
        .iter()
        .zip(edge_rows)
        .map(|(e, rows)| EdgeTable {
            type_name: e.name.clone(),
            rows: rows
                .into_iter()
                .map(|(src, dst)| EdgeRow {
                    src,
                    dst,
                    features: None,
                })
                .collect(),
        })
        .collect();

    Ok(DatasetTables {
        schema,
        node_tables,
        edge_tables,
        tasks,
        communities,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::dataset::build_dataset;
    use crate::graph::BuildOptions;

    fn small_config(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            node_types: vec![
                SynthNodeType {
                    name: "a".into(),
                    count: 60,
                    feature_dim: 4,
                    community_size: 12,
                },
                SynthNodeType {
                    name: "b".into(),
                    count: 80,
                    feature_dim: 3,
                    community_size: 16,
                },
            ],
            edge_types: vec![SynthEdgeType {
                name: "r".into(),
                src: "a".into(),
                dst: "b".into(),
            }],
            communities: 3,
            p_in: 0.4,
            p_out: 0.01,
            signal: 2.0,
            tasks_per_community: 2,
            pos_fraction: 0.3,
            target_types: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn zero_p_out_gives_no_cross_community_edges() {
        let mut cfg = small_config(3);
        cfg.p_out = 0.0;
        let tables = generate(&cfg).unwrap();
        let ds = build_dataset(tables, &BuildOptions::default()).unwrap();
        let comm_of = |v: NodeId| {
            ds.communities
                .iter()
                .find(|c| c.members.contains(&v))
                .map(|c| c.id)
        };
        for v in 0..ds.graph.node_count() {
            for (u, _, _) in ds.graph.neighbors_unchecked(v) {
                assert_eq!(comm_of(v), comm_of(u), "cross edge {v}-{u}");
                assert!(comm_of(v).is_some());
            }
        }
    }

    #[test]
    fn emitted_counts_match_config() {
        let cfg = small_config(5);
        let tables = generate(&cfg).unwrap();
        assert_eq!(tables.node_tables[0].rows.len(), 60);
        assert_eq!(tables.node_tables[1].rows.len(), 80);
        assert_eq!(tables.tasks.len(), 6);
        assert_eq!(tables.communities.len(), 3);
        for c in &tables.communities {
            assert_eq!(c.members.len(), 12 + 16);
        }
    }

    #[test]
    fn intra_edge_count_within_four_sigma() {
        // One community pair block: 12 x 16 = 192 pairs at p_in = 0.4.
        let mut cfg = small_config(11);
        cfg.p_out = 0.0;
        cfg.communities = 1;
        let tables = generate(&cfg).unwrap();
        let count = tables.edge_tables[0].rows.len() as f64;
        let n = (12 * 16) as f64;
        let mean = n * 0.4;
        let sigma = (n * 0.4 * 0.6).sqrt();
        assert!(
            (count - mean).abs() <= 4.0 * sigma,
            "edge count {count} vs mean {mean} sigma {sigma}"
        );
    }

    #[test]
    fn planted_communities_are_connected() {
        let cfg = small_config(7);
        let tables = generate(&cfg).unwrap();
        let ds = build_dataset(tables, &BuildOptions::default()).unwrap();
        for comm in &ds.communities {
            let set: BTreeSet<NodeId> = comm.members.iter().copied().collect();
            // BFS inside the community.
            let mut seen = BTreeSet::from([comm.members[0]]);
            let mut frontier = vec![comm.members[0]];
            while let Some(v) = frontier.pop() {
                for (u, _, _) in ds.graph.neighbors_unchecked(v) {
                    if set.contains(&u) && seen.insert(u) {
                        frontier.push(u);
                    }
                }
            }
            assert_eq!(seen.len(), set.len(), "community {} disconnected", comm.id);
        }
    }

    #[test]
    fn dataset_round_trips_through_loaders() {
        let cfg = small_config(13);
        let tables = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        crate::dataset::write_tables(dir.path(), &tables).unwrap();
        let ds =
            crate::dataset::load_dataset(dir.path(), &BuildOptions::default()).unwrap();
        assert!(ds.graph.validate().is_ok());
        assert_eq!(ds.tasks.len(), 6);
        for task in &ds.tasks {
            task.validate(&ds.graph).unwrap();
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_config(21)).unwrap();
        let b = generate(&small_config(21)).unwrap();
        assert_eq!(
            serde_json::to_string(&a.tasks).unwrap(),
            serde_json::to_string(&b.tasks).unwrap()
        );
        let edges =
            |t: &DatasetTables| t.edge_tables[0].rows.iter().map(|r| (r.src, r.dst)).collect::<Vec<_>>();
        assert_eq!(edges(&a), edges(&b));
        assert_eq!(a.node_tables[0].rows, b.node_tables[0].rows);
    }

    #[test]
    fn infeasible_sizes_rejected() {
        let mut cfg = small_config(1);
        cfg.communities = 10; // 10 * 12 > 60
        assert!(matches!(
            generate(&cfg),
            Err(SynthError::Infeasible { .. })
        ));
        let mut cfg = small_config(1);
        cfg.p_out = 0.5; // >= p_in
        assert!(matches!(
            generate(&cfg),
            Err(SynthError::BadProbabilities { .. })
        ));
    }

    #[test]
    fn bibliographic_preset_scales() {
        let cfg = bibliographic(2000, 1);
        assert_eq!(cfg.communities, 8);
        assert!((cfg.p_out - 0.01).abs() < 1e-12);
        let total: usize = cfg.node_types.iter().map(|t| t.count).sum();
        assert!((1900..=2100).contains(&total), "total {total}");
        let big = bibliographic(32000, 1);
        assert!(big.p_out < 0.0001);
        assert_eq!(big.communities, 128);
    }
}
