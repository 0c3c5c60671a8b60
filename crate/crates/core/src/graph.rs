//! Typed multigraph with per-edge-type CSR adjacency over a single global
//! node-id space. Graphs are immutable once built; all mutation happens in
//! the builder.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Suffix appended to an edge-type name for its auto-added reverse companion.
pub const INVERSE_SUFFIX: &str = "\u{207b}\u{b9}"; // "⁻¹"

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeTypeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeTypeId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeTypeInfo {
    pub name: String,
    pub feature_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeTypeInfo {
    pub name: String,
    pub src: NodeTypeId,
    pub dst: NodeTypeId,
    /// Width of dataset-provided edge features; `None` selects the learned
    /// edge-type embedding path.
    pub feature_dim: Option<usize>,
    /// For an auto-added reverse type, the id of the forward type.
    pub inverse_of: Option<EdgeTypeId>,
}

/// Registry of node and edge types. Ids are dense and contiguous from 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeRegistry {
    pub node_types: Vec<NodeTypeInfo>,
    pub edge_types: Vec<EdgeTypeInfo>,
}

impl TypeRegistry {
    pub fn node_type_by_name(&self, name: &str) -> Option<NodeTypeId> {
        self.node_types
            .iter()
            .position(|t| t.name == name)
            .map(NodeTypeId)
    }

    pub fn edge_type_by_name(&self, name: &str) -> Option<EdgeTypeId> {
        self.edge_types
            .iter()
            .position(|t| t.name == name)
            .map(EdgeTypeId)
    }

    pub fn node_type(&self, id: NodeTypeId) -> &NodeTypeInfo {
        &self.node_types[id.0]
    }

    pub fn edge_type(&self, id: EdgeTypeId) -> &EdgeTypeInfo {
        &self.edge_types[id.0]
    }

    /// The paired type under symmetrization: forward -> inverse and back.
    pub fn inverse_pair(&self, id: EdgeTypeId) -> Option<EdgeTypeId> {
        if let Some(fwd) = self.edge_types[id.0].inverse_of {
            return Some(fwd);
        }
        self.edge_types
            .iter()
            .position(|t| t.inverse_of == Some(id))
            .map(EdgeTypeId)
    }

    /// Edge types present in the input data (not auto-added reverses).
    pub fn forward_edge_types(&self) -> impl Iterator<Item = EdgeTypeId> + '_ {
        self.edge_types
            .iter()
            .enumerate()
            .filter(|(_, t)| t.inverse_of.is_none())
            .map(|(i, _)| EdgeTypeId(i))
    }
}

/// CSR adjacency for one edge type: `targets[offsets[v]..offsets[v+1]]` are
/// the out-neighbors of `v`, in ingestion order.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub targets: Vec<NodeId>,
    /// Row-major `edge_count x feature_dim` when the type carries features.
    pub features: Option<Vec<f64>>,
}

impl Csr {
    pub fn edge_count(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, v: NodeId) -> &[NodeId] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }
}

/// Immutable heterogeneous graph.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    registry: TypeRegistry,
    node_type: Vec<NodeTypeId>,
    /// Per node: its row inside the feature table of its type.
    local_index: Vec<usize>,
    /// Per type: member node ids, ascending.
    type_members: Vec<Vec<NodeId>>,
    /// Per type: row-major `member_count x feature_dim` table, rows aligned
    /// with `type_members` order.
    features: Vec<Vec<f64>>,
    csr: Vec<Csr>,
}

/// One node table handed to the builder: `(type name, rows)` with each row
/// `(global node id, feature values)`.
#[derive(Debug)]
pub struct NodeTable {
    pub type_name: String,
    pub rows: Vec<(NodeId, Vec<f64>)>,
}

/// One edge table handed to the builder.
#[derive(Debug)]
pub struct EdgeTable {
    pub type_name: String,
    pub rows: Vec<EdgeRow>,
}

#[derive(Debug)]
pub struct EdgeRow {
    pub src: NodeId,
    pub dst: NodeId,
    pub features: Option<Vec<f64>>,
}

/// Declared schema for the builder; ids are assigned by declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaDecl {
    pub node_types: Vec<NodeTypeDecl>,
    pub edge_types: Vec<EdgeTypeDecl>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeTypeDecl {
    pub name: String,
    pub feature_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeTypeDecl {
    pub name: String,
    pub src: String,
    pub dst: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("schema: duplicate type name `{0}`")]
    DuplicateTypeName(String),
    #[error("schema: edge type `{etype}` references unknown node type `{node_type}`")]
    UnknownNodeType { etype: String, node_type: String },
    #[error("schema: a heterogeneous graph needs |node types| + |edge types| > 2")]
    TooFewTypes,
    #[error("node table references undeclared type `{0}`")]
    UndeclaredNodeTable(String),
    #[error("edge table references undeclared type `{0}`")]
    UndeclaredEdgeTable(String),
    #[error("duplicate node id {0}")]
    DuplicateNodeId(NodeId),
    #[error("dangling node id {id} (node count is {count})")]
    DanglingNodeId { id: NodeId, count: usize },
    #[error("node {id}: feature dim {actual} does not match declared {expected} for type `{type_name}`")]
    FeatureDimMismatch {
        id: NodeId,
        type_name: String,
        expected: usize,
        actual: usize,
    },
    #[error("edge {src}->{dst} of type `{etype}`: endpoint {endpoint} has type `{actual}`, expected `{expected}`")]
    EdgeEndpointType {
        etype: String,
        src: NodeId,
        dst: NodeId,
        endpoint: NodeId,
        expected: String,
        actual: String,
    },
    #[error("edge {src}->{dst} of type `{etype}`: feature count {actual}, expected {expected}")]
    EdgeFeatureDim {
        etype: String,
        src: NodeId,
        dst: NodeId,
        expected: usize,
        actual: usize,
    },
    #[error("node id {q} out of range (node count is {count})")]
    InvalidNode { q: NodeId, count: usize },
}

/// A single violated invariant found by [`HeteroGraph::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Report listing violated structural invariants; empty iff the graph is
/// internally consistent.
#[derive(Debug, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub struct BuildOptions {
    /// Add a reverse companion type per input edge type so neighborhoods are
    /// symmetric. Defaults to `true`.
    pub add_inverse: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { add_inverse: true }
    }
}

/// Builds and validates a graph from declared schema plus node/edge tables.
pub fn build_graph(
    schema: &SchemaDecl,
    node_tables: Vec<NodeTable>,
    edge_tables: Vec<EdgeTable>,
    options: &BuildOptions,
) -> Result<HeteroGraph, GraphError> {
    let registry = resolve_schema(schema, options.add_inverse)?;
    let forward_count = schema.edge_types.len();

    // Nodes: ids must cover 0..n-1 exactly.
    let total: usize = node_tables.iter().map(|t| t.rows.len()).sum();
    let mut node_type: Vec<Option<NodeTypeId>> = vec![None; total];
    let mut raw_features: Vec<Option<Vec<f64>>> = vec![None; total];
    for table in &node_tables {
        let tid = registry
            .node_type_by_name(&table.type_name)
            .ok_or_else(|| GraphError::UndeclaredNodeTable(table.type_name.clone()))?;
        let dim = registry.node_type(tid).feature_dim;
        for (id, feats) in &table.rows {
            if *id >= total {
                return Err(GraphError::DanglingNodeId {
                    id: *id,
                    count: total,
                });
            }
            if node_type[*id].is_some() {
                return Err(GraphError::DuplicateNodeId(*id));
            }
            if feats.len() != dim {
                return Err(GraphError::FeatureDimMismatch {
                    id: *id,
                    type_name: table.type_name.clone(),
                    expected: dim,
                    actual: feats.len(),
                });
            }
            node_type[*id] = Some(tid);
            raw_features[*id] = Some(feats.clone());
        }
    }
    // Unique ids < total and exactly `total` rows implies full coverage.
    let node_type: Vec<NodeTypeId> = node_type.into_iter().map(|t| t.unwrap()).collect();

    // Per-type member lists (ascending by construction) and feature tables.
    let n_types = registry.node_types.len();
    let mut type_members: Vec<Vec<NodeId>> = vec![Vec::new(); n_types];
    let mut local_index = vec![0usize; total];
    for (id, t) in node_type.iter().enumerate() {
        local_index[id] = type_members[t.0].len();
        type_members[t.0].push(id);
    }
    let mut features: Vec<Vec<f64>> = Vec::with_capacity(n_types);
    for members in &type_members {
        let mut table = Vec::new();
        for &id in members {
            table.extend_from_slice(raw_features[id].as_ref().unwrap());
        }
        features.push(table);
    }
    drop(raw_features);

    // Edges, grouped per declared type.
    let mut per_type_rows: Vec<Vec<EdgeRow>> = (0..forward_count).map(|_| Vec::new()).collect();
    for table in edge_tables {
        let tid = registry
            .edge_type_by_name(&table.type_name)
            .ok_or_else(|| GraphError::UndeclaredEdgeTable(table.type_name.clone()))?;
        if tid.0 >= forward_count {
            return Err(GraphError::UndeclaredEdgeTable(table.type_name.clone()));
        }
        per_type_rows[tid.0].extend(table.rows);
    }

    for (tix, rows) in per_type_rows.iter().enumerate() {
        let info = registry.edge_type(EdgeTypeId(tix));
        for row in rows {
            for &(endpoint, expected) in &[(row.src, info.src), (row.dst, info.dst)] {
                if endpoint >= total {
                    return Err(GraphError::DanglingNodeId {
                        id: endpoint,
                        count: total,
                    });
                }
                if node_type[endpoint] != expected {
                    return Err(GraphError::EdgeEndpointType {
                        etype: info.name.clone(),
                        src: row.src,
                        dst: row.dst,
                        endpoint,
                        expected: registry.node_type(expected).name.clone(),
                        actual: registry.node_type(node_type[endpoint]).name.clone(),
                    });
                }
            }
            let expected = info.feature_dim.unwrap_or(0);
            let actual = row.features.as_ref().map_or(0, |f| f.len());
            if actual != expected {
                return Err(GraphError::EdgeFeatureDim {
                    etype: info.name.clone(),
                    src: row.src,
                    dst: row.dst,
                    expected,
                    actual,
                });
            }
        }
    }

    // CSR per edge type; reverse companions reuse the forward rows flipped.
    let mut csr = Vec::with_capacity(registry.edge_types.len());
    for tix in 0..forward_count {
        let info = registry.edge_type(EdgeTypeId(tix));
        csr.push(build_csr(
            total,
            per_type_rows[tix].iter().map(|r| (r.src, r.dst)),
            info.feature_dim
                .map(|d| (d, per_type_rows[tix].iter().map(|r| r.features.as_deref()))),
        ));
    }
    if options.add_inverse {
        for tix in 0..forward_count {
            let info = registry.edge_type(EdgeTypeId(tix));
            csr.push(build_csr(
                total,
                per_type_rows[tix].iter().map(|r| (r.dst, r.src)),
                info.feature_dim
                    .map(|d| (d, per_type_rows[tix].iter().map(|r| r.features.as_deref()))),
            ));
        }
    }

    Ok(HeteroGraph {
        registry,
        node_type,
        local_index,
        type_members,
        features,
        csr,
    })
}

fn resolve_schema(schema: &SchemaDecl, add_inverse: bool) -> Result<TypeRegistry, GraphError> {
    let mut seen = BTreeSet::new();
    for t in &schema.node_types {
        if !seen.insert(t.name.clone()) {
            return Err(GraphError::DuplicateTypeName(t.name.clone()));
        }
    }
    let node_types: Vec<NodeTypeInfo> = schema
        .node_types
        .iter()
        .map(|t| NodeTypeInfo {
            name: t.name.clone(),
            feature_dim: t.feature_dim,
        })
        .collect();
    let lookup = |name: &str, etype: &str| {
        node_types
            .iter()
            .position(|t| t.name == name)
            .map(NodeTypeId)
            .ok_or_else(|| GraphError::UnknownNodeType {
                etype: etype.to_string(),
                node_type: name.to_string(),
            })
    };
    let mut seen = BTreeSet::new();
    let mut edge_types = Vec::new();
    for e in &schema.edge_types {
        if !seen.insert(e.name.clone()) {
            return Err(GraphError::DuplicateTypeName(e.name.clone()));
        }
        edge_types.push(EdgeTypeInfo {
            name: e.name.clone(),
            src: lookup(&e.src, &e.name)?,
            dst: lookup(&e.dst, &e.name)?,
            feature_dim: e.feature_dim,
            inverse_of: None,
        });
    }
    if add_inverse {
        let forward = edge_types.clone();
        for (i, e) in forward.iter().enumerate() {
            edge_types.push(EdgeTypeInfo {
                name: format!("{}{}", e.name, INVERSE_SUFFIX),
                src: e.dst,
                dst: e.src,
                feature_dim: e.feature_dim,
                inverse_of: Some(EdgeTypeId(i)),
            });
        }
    }
    if node_types.len() + edge_types.len() <= 2 {
        return Err(GraphError::TooFewTypes);
    }
    Ok(TypeRegistry {
        node_types,
        edge_types,
    })
}

fn build_csr<'a, P, F>(n: usize, pairs: P, feats: Option<(usize, F)>) -> Csr
where
    P: Iterator<Item = (NodeId, NodeId)> + Clone,
    F: Iterator<Item = Option<&'a [f64]>>,
{
    let mut offsets = vec![0usize; n + 1];
    for (src, _) in pairs.clone() {
        offsets[src + 1] += 1;
    }
    for i in 1..=n {
        offsets[i] += offsets[i - 1];
    }
    let m = offsets[n];
    let mut targets = vec![0usize; m];
    let mut cursor = offsets.clone();
    let mut slot_of_row = Vec::with_capacity(m);
    for (src, dst) in pairs {
        let slot = cursor[src];
        targets[slot] = dst;
        cursor[src] += 1;
        slot_of_row.push(slot);
    }
    let features = feats.map(|(dim, rows)| {
        let mut table = vec![0.0; m * dim];
        for (row_ix, row) in rows.enumerate() {
            let row = row.expect("validated feature row");
            let slot = slot_of_row[row_ix];
            table[slot * dim..(slot + 1) * dim].copy_from_slice(row);
        }
        table
    });
    Csr {
        offsets,
        targets,
        features,
    }
}

impl HeteroGraph {
    pub fn registry(&self) -> &TypeRegistry {
        &self.registry
    }

    pub fn node_count(&self) -> usize {
        self.node_type.len()
    }

    pub fn node_type_of(&self, v: NodeId) -> NodeTypeId {
        self.node_type[v]
    }

    /// Total directed edges over all edge types (reverse companions count).
    pub fn edge_count(&self) -> usize {
        self.csr.iter().map(Csr::edge_count).sum()
    }

    pub fn csr(&self, etype: EdgeTypeId) -> &Csr {
        &self.csr[etype.0]
    }

    pub fn type_members(&self, t: NodeTypeId) -> &[NodeId] {
        &self.type_members[t.0]
    }

    /// Raw feature row of a node, from its type's table.
    pub fn node_features(&self, v: NodeId) -> &[f64] {
        let t = self.node_type[v];
        let dim = self.registry.node_type(t).feature_dim;
        let start = self.local_index[v] * dim;
        &self.features[t.0][start..start + dim]
    }

    pub fn type_feature_table(&self, t: NodeTypeId) -> &[f64] {
        &self.features[t.0]
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.csr
            .iter()
            .map(|c| c.offsets[v + 1] - c.offsets[v])
            .sum()
    }

    /// Neighbors of `v` over all edge types: `(neighbor, edge type, edge
    /// index within that type)`. Order is edge-type id ascending, then
    /// ingestion order — the canonical order everything downstream relies on.
    pub fn neighbors(&self, v: NodeId) -> Result<Vec<(NodeId, EdgeTypeId, usize)>, GraphError> {
        if v >= self.node_count() {
            return Err(GraphError::InvalidNode {
                q: v,
                count: self.node_count(),
            });
        }
        Ok(self.neighbors_unchecked(v).collect())
    }

    /// Iterator form of [`neighbors`](Self::neighbors) without the bounds
    /// check, for hot paths that already validated `v`.
    pub fn neighbors_unchecked(
        &self,
        v: NodeId,
    ) -> impl Iterator<Item = (NodeId, EdgeTypeId, usize)> + '_ {
        self.csr.iter().enumerate().flat_map(move |(tix, csr)| {
            let (start, end) = (csr.offsets[v], csr.offsets[v + 1]);
            csr.targets[start..end]
                .iter()
                .enumerate()
                .map(move |(k, &dst)| (dst, EdgeTypeId(tix), start + k))
        })
    }

    /// Feature row of one edge, when its type carries features.
    pub fn edge_features(&self, etype: EdgeTypeId, edge_index: usize) -> Option<&[f64]> {
        let info = self.registry.edge_type(etype);
        let dim = info.feature_dim?;
        self.csr[etype.0]
            .features
            .as_ref()
            .map(|f| &f[edge_index * dim..(edge_index + 1) * dim])
    }

    /// Checks structural invariants and reports every violation found.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let n = self.node_count();
        let mut push = |msg: String| report.violations.push(Violation(msg));

        if self.registry.node_types.len() + self.registry.edge_types.len() <= 2 {
            push("|node types| + |edge types| must exceed 2".to_string());
        }
        for (tix, csr) in self.csr.iter().enumerate() {
            let info = self.registry.edge_type(EdgeTypeId(tix));
            let name = &info.name;
            if csr.offsets.len() != n + 1 {
                push(format!(
                    "edge type `{name}`: offsets length {} != node count + 1 ({})",
                    csr.offsets.len(),
                    n + 1
                ));
                continue;
            }
            if csr.offsets.windows(2).any(|w| w[0] > w[1]) {
                push(format!("edge type `{name}`: offsets are not monotone"));
            }
            if *csr.offsets.last().unwrap() != csr.targets.len() {
                push(format!(
                    "edge type `{name}`: final offset {} != target count {}",
                    csr.offsets.last().unwrap(),
                    csr.targets.len()
                ));
            }
            for src in 0..n {
                for (k, &dst) in csr.targets[csr.offsets[src]..csr.offsets[src + 1]]
                    .iter()
                    .enumerate()
                {
                    if dst >= n {
                        push(format!(
                            "edge type `{name}`: edge #{} from {src} targets {dst} >= node count {n}",
                            csr.offsets[src] + k
                        ));
                    } else {
                        if self.node_type[src] != info.src {
                            push(format!(
                                "edge type `{name}`: source {src} has type `{}`, expected `{}`",
                                self.registry.node_type(self.node_type[src]).name,
                                self.registry.node_type(info.src).name
                            ));
                        }
                        if self.node_type[dst] != info.dst {
                            push(format!(
                                "edge type `{name}`: target {dst} has type `{}`, expected `{}`",
                                self.registry.node_type(self.node_type[dst]).name,
                                self.registry.node_type(info.dst).name
                            ));
                        }
                    }
                }
            }
            if let (Some(dim), Some(f)) = (info.feature_dim, csr.features.as_ref()) {
                if f.len() != csr.targets.len() * dim {
                    push(format!(
                        "edge type `{name}`: feature buffer {} != {} edges x dim {dim}",
                        f.len(),
                        csr.targets.len()
                    ));
                }
            }
        }
        for (tix, members) in self.type_members.iter().enumerate() {
            let info = &self.registry.node_types[tix];
            let expected = members.len() * info.feature_dim;
            if self.features[tix].len() != expected {
                push(format!(
                    "node type `{}`: feature table has {} values, expected {} ({} nodes x dim {})",
                    info.name,
                    self.features[tix].len(),
                    expected,
                    members.len(),
                    info.feature_dim
                ));
            }
        }
        report
    }

    /// Assembles a graph from already-consistent parts. Used for induced
    /// subgraphs where the registry carries over unchanged; debug builds
    /// re-validate.
    pub(crate) fn from_parts(
        registry: TypeRegistry,
        node_type: Vec<NodeTypeId>,
        features: Vec<Vec<f64>>,
        csr: Vec<Csr>,
    ) -> HeteroGraph {
        let n_types = registry.node_types.len();
        let mut type_members: Vec<Vec<NodeId>> = vec![Vec::new(); n_types];
        let mut local_index = vec![0usize; node_type.len()];
        for (id, t) in node_type.iter().enumerate() {
            local_index[id] = type_members[t.0].len();
            type_members[t.0].push(id);
        }
        let g = HeteroGraph {
            registry,
            node_type,
            local_index,
            type_members,
            features,
            csr,
        };
        debug_assert!(g.validate().is_ok(), "{:?}", g.validate().violations);
        g
    }

    /// Corrupted copies for validator tests.
    #[cfg(test)]
    pub(crate) fn csr_mut(&mut self, etype: EdgeTypeId) -> &mut Csr {
        &mut self.csr[etype.0]
    }

    #[cfg(test)]
    pub(crate) fn features_mut(&mut self, t: NodeTypeId) -> &mut Vec<f64> {
        &mut self.features[t.0]
    }
}

/// Training/evaluation unit: one query with its supervision sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryTask {
    pub query: NodeId,
    pub pos: Vec<NodeId>,
    pub neg: Vec<NodeId>,
    pub target_types: Vec<NodeTypeId>,
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("task for query {query}: node id {id} out of range")]
    NodeOutOfRange { query: NodeId, id: NodeId },
    #[error("task for query {query}: query not contained in pos set")]
    QueryNotPositive { query: NodeId },
    #[error("task for query {query}: node {id} appears in both pos and neg")]
    Overlap { query: NodeId, id: NodeId },
    #[error("task for query {query}: pos node {id} has non-target type `{type_name}`")]
    PosTypeOutsideTarget {
        query: NodeId,
        id: NodeId,
        type_name: String,
    },
    #[error("task for query {query}: empty target type set")]
    EmptyTargets { query: NodeId },
}

impl QueryTask {
    pub fn validate(&self, graph: &HeteroGraph) -> Result<(), TaskError> {
        let n = graph.node_count();
        if self.target_types.is_empty() {
            return Err(TaskError::EmptyTargets { query: self.query });
        }
        for &id in [self.query]
            .iter()
            .chain(self.pos.iter())
            .chain(self.neg.iter())
        {
            if id >= n {
                return Err(TaskError::NodeOutOfRange {
                    query: self.query,
                    id,
                });
            }
        }
        if !self.pos.contains(&self.query) {
            return Err(TaskError::QueryNotPositive { query: self.query });
        }
        let pos: BTreeSet<NodeId> = self.pos.iter().copied().collect();
        for &id in &self.neg {
            if pos.contains(&id) {
                return Err(TaskError::Overlap {
                    query: self.query,
                    id,
                });
            }
        }
        let targets: BTreeSet<NodeTypeId> = self.target_types.iter().copied().collect();
        for &id in &self.pos {
            let t = graph.node_type_of(id);
            if !targets.contains(&t) {
                return Err(TaskError::PosTypeOutsideTarget {
                    query: self.query,
                    id,
                    type_name: graph.registry().node_type(t).name.clone(),
                });
            }
        }
        Ok(())
    }

    /// Labeled node ids (`pos` then `neg`, deduplicated, original order) and
    /// their binary labels.
    pub fn labeled(&self) -> (Vec<NodeId>, Vec<f64>) {
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut seen = BTreeSet::new();
        for &p in &self.pos {
            if seen.insert(p) {
                ids.push(p);
                labels.push(1.0);
            }
        }
        for &n in &self.neg {
            if seen.insert(n) {
                ids.push(n);
                labels.push(0.0);
            }
        }
        (ids, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_schema() -> SchemaDecl {
        SchemaDecl {
            node_types: vec![
                NodeTypeDecl {
                    name: "author".into(),
                    feature_dim: 2,
                },
                NodeTypeDecl {
                    name: "paper".into(),
                    feature_dim: 3,
                },
            ],
            edge_types: vec![EdgeTypeDecl {
                name: "writes".into(),
                src: "author".into(),
                dst: "paper".into(),
                feature_dim: None,
            }],
        }
    }

    fn node_tables(authors: &[NodeId], papers: &[NodeId]) -> Vec<NodeTable> {
        vec![
            NodeTable {
                type_name: "author".into(),
                rows: authors.iter().map(|&id| (id, vec![id as f64, 0.5])).collect(),
            },
            NodeTable {
                type_name: "paper".into(),
                rows: papers
                    .iter()
                    .map(|&id| (id, vec![id as f64, 1.0, -1.0]))
                    .collect(),
            },
        ]
    }

    fn edges(rows: &[(NodeId, NodeId)]) -> Vec<EdgeTable> {
        vec![EdgeTable {
            type_name: "writes".into(),
            rows: rows
                .iter()
                .map(|&(src, dst)| EdgeRow {
                    src,
                    dst,
                    features: None,
                })
                .collect(),
        }]
    }

    #[test]
    fn empty_edge_tables_give_isolated_nodes() {
        let g = build_graph(
            &toy_schema(),
            node_tables(&[0, 1], &[2]),
            edges(&[]),
            &BuildOptions::default(),
        )
        .unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edge_count(), 0);
        for v in 0..3 {
            assert!(g.neighbors(v).unwrap().is_empty());
        }
    }

    #[test]
    fn inverse_type_makes_neighborhoods_symmetric() {
        let g = build_graph(
            &toy_schema(),
            node_tables(&[0], &[1]),
            edges(&[(0, 1)]),
            &BuildOptions::default(),
        )
        .unwrap();
        let back = g.neighbors(1).unwrap();
        assert_eq!(back.len(), 1);
        let (nbr, etype, _) = back[0];
        assert_eq!(nbr, 0);
        assert_eq!(
            g.registry().edge_type(etype).name,
            format!("writes{INVERSE_SUFFIX}")
        );
        assert_eq!(g.registry().inverse_pair(etype), Some(EdgeTypeId(0)));
    }

    #[test]
    fn star_preserves_ingestion_order() {
        let g = build_graph(
            &toy_schema(),
            node_tables(&[0], &[1, 2, 3]),
            edges(&[(0, 3), (0, 1), (0, 2)]),
            &BuildOptions::default(),
        )
        .unwrap();
        let nbrs: Vec<NodeId> = g.neighbors(0).unwrap().iter().map(|&(v, _, _)| v).collect();
        assert_eq!(nbrs, vec![3, 1, 2]);
    }

    #[test]
    fn neighbors_grouped_by_ascending_edge_type() {
        // Two forward edge types; node 0 has edges of both.
        let schema = SchemaDecl {
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
            edge_types: vec![
                EdgeTypeDecl {
                    name: "r0".into(),
                    src: "a".into(),
                    dst: "b".into(),
                    feature_dim: None,
                },
                EdgeTypeDecl {
                    name: "r1".into(),
                    src: "a".into(),
                    dst: "b".into(),
                    feature_dim: None,
                },
            ],
        };
        let nodes = vec![
            NodeTable {
                type_name: "a".into(),
                rows: vec![(0, vec![0.0])],
            },
            NodeTable {
                type_name: "b".into(),
                rows: vec![(1, vec![0.0]), (2, vec![0.0])],
            },
        ];
        let edges = vec![
            EdgeTable {
                type_name: "r1".into(),
                rows: vec![EdgeRow {
                    src: 0,
                    dst: 2,
                    features: None,
                }],
            },
            EdgeTable {
                type_name: "r0".into(),
                rows: vec![EdgeRow {
                    src: 0,
                    dst: 1,
                    features: None,
                }],
            },
        ];
        let g = build_graph(&schema, nodes, edges, &BuildOptions::default()).unwrap();
        let nbrs: Vec<(NodeId, usize)> = g
            .neighbors(0)
            .unwrap()
            .iter()
            .map(|&(v, t, _)| (v, t.0))
            .collect();
        assert_eq!(nbrs, vec![(1, 0), (2, 1)]);
    }

    #[test]
    fn bibliographic_toy_counts_match_inputs() {
        // 4 node types, 3 forward edge types (6 with reverses).
        let schema = SchemaDecl {
            node_types: ["author", "paper", "venue", "term"]
                .iter()
                .map(|n| NodeTypeDecl {
                    name: n.to_string(),
                    feature_dim: 1,
                })
                .collect(),
            edge_types: vec![
                EdgeTypeDecl {
                    name: "writes".into(),
                    src: "author".into(),
                    dst: "paper".into(),
                    feature_dim: None,
                },
                EdgeTypeDecl {
                    name: "published_in".into(),
                    src: "paper".into(),
                    dst: "venue".into(),
                    feature_dim: None,
                },
                EdgeTypeDecl {
                    name: "has_term".into(),
                    src: "paper".into(),
                    dst: "term".into(),
                    feature_dim: None,
                },
            ],
        };
        let nodes = vec![
            NodeTable {
                type_name: "author".into(),
                rows: vec![(0, vec![0.0]), (1, vec![0.0])],
            },
            NodeTable {
                type_name: "paper".into(),
                rows: vec![(2, vec![0.0]), (3, vec![0.0])],
            },
            NodeTable {
                type_name: "venue".into(),
                rows: vec![(4, vec![0.0])],
            },
            NodeTable {
                type_name: "term".into(),
                rows: vec![(5, vec![0.0])],
            },
        ];
        let edge_rows: Vec<(&str, Vec<(NodeId, NodeId)>)> = vec![
            ("writes", vec![(0, 2), (0, 3), (1, 3)]),
            ("published_in", vec![(2, 4), (3, 4)]),
            ("has_term", vec![(2, 5)]),
        ];
        let input_total: usize = edge_rows.iter().map(|(_, r)| r.len()).sum();
        let tables = edge_rows
            .into_iter()
            .map(|(name, rows)| EdgeTable {
                type_name: name.into(),
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
        let g = build_graph(&schema, nodes, tables, &BuildOptions::default()).unwrap();
        assert_eq!(g.registry().node_types.len(), 4);
        assert_eq!(g.registry().edge_types.len(), 6);
        assert_eq!(g.csr(EdgeTypeId(0)).edge_count(), 3);
        assert_eq!(g.csr(EdgeTypeId(1)).edge_count(), 2);
        assert_eq!(g.csr(EdgeTypeId(2)).edge_count(), 1);
        // Total includes the reverse companions.
        assert_eq!(g.edge_count(), 2 * input_total);
        assert!(g.validate().is_ok());
    }

    #[test]
    fn symmetry_holds_on_random_graphs() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n_auth = rng.random_range(1..8);
            let n_pap = rng.random_range(1..8);
            let authors: Vec<NodeId> = (0..n_auth).collect();
            let papers: Vec<NodeId> = (n_auth..n_auth + n_pap).collect();
            let mut rows = Vec::new();
            for _ in 0..rng.random_range(0..20) {
                rows.push((
                    rng.random_range(0..n_auth),
                    n_auth + rng.random_range(0..n_pap),
                ));
            }
            let g = build_graph(
                &toy_schema(),
                node_tables(&authors, &papers),
                edges(&rows),
                &BuildOptions::default(),
            )
            .unwrap();
            for v in 0..g.node_count() {
                for (u, t, _) in g.neighbors(v).unwrap() {
                    let pair = g.registry().inverse_pair(t).unwrap();
                    let back = g.neighbors(u).unwrap();
                    assert!(
                        back.iter().any(|&(w, t2, _)| w == v && t2 == pair),
                        "edge {v}->{u} lacks a paired reverse"
                    );
                }
            }
            let input = rows.len();
            assert_eq!(g.edge_count(), 2 * input);
        }
    }

    #[test]
    fn no_inverse_flag_keeps_directed_counts() {
        let g = build_graph(
            &toy_schema(),
            node_tables(&[0], &[1]),
            edges(&[(0, 1)]),
            &BuildOptions { add_inverse: false },
        )
        .unwrap();
        assert_eq!(g.edge_count(), 1);
        assert!(g.neighbors(1).unwrap().is_empty());
    }

    #[test]
    fn build_rejects_bad_inputs() {
        // Duplicate node id.
        let err = build_graph(
            &toy_schema(),
            vec![
                NodeTable {
                    type_name: "author".into(),
                    rows: vec![(0, vec![0.0, 0.0]), (0, vec![0.0, 0.0])],
                },
                NodeTable {
                    type_name: "paper".into(),
                    rows: vec![],
                },
            ],
            edges(&[]),
            &BuildOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::DuplicateNodeId(0)));

        // Dangling edge endpoint.
        let err = build_graph(
            &toy_schema(),
            node_tables(&[0], &[1]),
            edges(&[(0, 9)]),
            &BuildOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::DanglingNodeId { id: 9, .. }));

        // Feature dim mismatch.
        let err = build_graph(
            &toy_schema(),
            vec![
                NodeTable {
                    type_name: "author".into(),
                    rows: vec![(0, vec![1.0])],
                },
                NodeTable {
                    type_name: "paper".into(),
                    rows: vec![(1, vec![0.0, 0.0, 0.0])],
                },
            ],
            edges(&[]),
            &BuildOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::FeatureDimMismatch { id: 0, .. }));

        // Wrong endpoint type (paper -> paper via `writes`).
        let err = build_graph(
            &toy_schema(),
            node_tables(&[0], &[1, 2]),
            edges(&[(1, 2)]),
            &BuildOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::EdgeEndpointType { .. }));
    }

    #[test]
    fn validate_reports_forced_violations() {
        let mut g = build_graph(
            &toy_schema(),
            node_tables(&[0], &[1]),
            edges(&[(0, 1)]),
            &BuildOptions::default(),
        )
        .unwrap();
        assert!(g.validate().is_ok());

        // Edge target out of range.
        g.csr_mut(EdgeTypeId(0)).targets[0] = 99;
        let report = g.validate();
        assert!(!report.is_ok());
        assert!(report
            .violations
            .iter()
            .any(|v| v.0.contains("targets 99")));

        // Feature table one row short.
        let mut g2 = build_graph(
            &toy_schema(),
            node_tables(&[0], &[1]),
            edges(&[(0, 1)]),
            &BuildOptions::default(),
        )
        .unwrap();
        g2.features_mut(NodeTypeId(1)).truncate(0);
        let report = g2.validate();
        assert!(report
            .violations
            .iter()
            .any(|v| v.0.contains("node type `paper`")));
    }

    #[test]
    fn query_task_validation() {
        let g = build_graph(
            &toy_schema(),
            node_tables(&[0, 1], &[2, 3]),
            edges(&[(0, 2)]),
            &BuildOptions::default(),
        )
        .unwrap();
        let ok = QueryTask {
            query: 0,
            pos: vec![0, 1],
            neg: vec![2],
            target_types: vec![NodeTypeId(0)],
        };
        assert!(ok.validate(&g).is_ok());

        let bad = QueryTask {
            query: 0,
            pos: vec![1],
            neg: vec![],
            target_types: vec![NodeTypeId(0)],
        };
        assert!(matches!(
            bad.validate(&g),
            Err(TaskError::QueryNotPositive { .. })
        ));

        let overlap = QueryTask {
            query: 0,
            pos: vec![0, 1],
            neg: vec![1],
            target_types: vec![NodeTypeId(0)],
        };
        assert!(matches!(overlap.validate(&g), Err(TaskError::Overlap { .. })));

        let wrong_type = QueryTask {
            query: 0,
            pos: vec![0, 2],
            neg: vec![],
            target_types: vec![NodeTypeId(0)],
        };
        assert!(matches!(
            wrong_type.validate(&g),
            Err(TaskError::PosTypeOutsideTarget { .. })
        ));
    }
}
