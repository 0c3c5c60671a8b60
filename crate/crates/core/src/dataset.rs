//! Dataset directory format.
//!
//! A dataset lives in one directory:
//!   - `schema.json`     — node types (name, feature_dim) and edge types
//!     (name, src, dst, optional feature_dim)
//!   - `nodes_<type>.tsv`  — `node_id TAB f1..f_d` (UTF-8, `.` decimal)
//!   - `edges_<etype>.tsv` — `src TAB dst [TAB features...]`
//!   - `tasks.json`      — array of `{query, pos, neg, target_types}`
//!   - `communities.json`— optional ground truth `[{id, members}]`
//!
//! Loaders reject malformed rows with the file name and line number.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    build_graph, BuildOptions, EdgeRow, EdgeTable, GraphError, HeteroGraph, NodeId, NodeTable,
    QueryTask, SchemaDecl, TaskError,
};

pub const SCHEMA_FILE: &str = "schema.json";
pub const TASKS_FILE: &str = "tasks.json";
pub const COMMUNITIES_FILE: &str = "communities.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {message}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("task references unknown node type `{0}`")]
    UnknownTargetType(String),
}

/// Task entry as stored on disk; target types are referenced by name.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub query: NodeId,
    pub pos: Vec<NodeId>,
    pub neg: Vec<NodeId>,
    pub target_types: Vec<String>,
}

/// Planted ground-truth community.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommunityRecord {
    pub id: usize,
    pub members: Vec<NodeId>,
}

/// In-memory form of a dataset directory, before graph construction.
#[derive(Debug)]
pub struct DatasetTables {
    pub schema: SchemaDecl,
    pub node_tables: Vec<NodeTable>,
    pub edge_tables: Vec<EdgeTable>,
    pub tasks: Vec<TaskSpec>,
    pub communities: Vec<CommunityRecord>,
}

/// Fully loaded dataset: validated graph plus resolved tasks.
pub struct Dataset {
    pub graph: HeteroGraph,
    pub tasks: Vec<QueryTask>,
    pub communities: Vec<CommunityRecord>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_node_row(
    path: &Path,
    line_no: usize,
    line: &str,
    feature_dim: usize,
) -> Result<(NodeId, Vec<f64>), DatasetError> {
    let mut fields = line.split('\t');
    let bad = |message: String| DatasetError::MalformedRow {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let id = fields
        .next()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| bad("missing node id".into()))?;
    let id: NodeId = id
        .parse()
        .map_err(|_| bad(format!("invalid node id `{id}`")))?;
    let feats: Result<Vec<f64>, DatasetError> = fields
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| bad(format!("invalid feature value `{f}`")))
        })
        .collect();
    let feats = feats?;
    if feats.len() != feature_dim {
        return Err(bad(format!(
            "expected {feature_dim} features, found {}",
            feats.len()
        )));
    }
    Ok((id, feats))
}

fn parse_edge_row(
    path: &Path,
    line_no: usize,
    line: &str,
    feature_dim: Option<usize>,
) -> Result<EdgeRow, DatasetError> {
    let bad = |message: String| DatasetError::MalformedRow {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let mut fields = line.split('\t');
    let src = fields.next().ok_or_else(|| bad("missing source id".into()))?;
    let src: NodeId = src
        .parse()
        .map_err(|_| bad(format!("invalid source id `{src}`")))?;
    let dst = fields.next().ok_or_else(|| bad("missing target id".into()))?;
    let dst: NodeId = dst
        .parse()
        .map_err(|_| bad(format!("invalid target id `{dst}`")))?;
    let feats: Result<Vec<f64>, DatasetError> = fields
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| bad(format!("invalid feature value `{f}`")))
        })
        .collect();
    let feats = feats?;
    let expected = feature_dim.unwrap_or(0);
    if feats.len() != expected {
        return Err(bad(format!(
            "expected {expected} edge features, found {}",
            feats.len()
        )));
    }
    Ok(EdgeRow {
        src,
        dst,
        features: (!feats.is_empty()).then_some(feats),
    })
}

/// Reads the raw tables of a dataset directory.
pub fn read_tables(dir: &Path) -> Result<DatasetTables, DatasetError> {
    let schema: SchemaDecl = read_json(&dir.join(SCHEMA_FILE))?;

    let mut node_tables = Vec::new();
    for decl in &schema.node_types {
        let path = dir.join(format!("nodes_{}.tsv", decl.name));
        let text = fs::read_to_string(&path).map_err(|source| DatasetError::Io {
            path: path.clone(),
            source,
        })?;
        let mut rows = Vec::new();
        for (ix, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            rows.push(parse_node_row(&path, ix + 1, line, decl.feature_dim)?);
        }
        node_tables.push(NodeTable {
            type_name: decl.name.clone(),
            rows,
        });
    }

    let mut edge_tables = Vec::new();
    for decl in &schema.edge_types {
        let path = dir.join(format!("edges_{}.tsv", decl.name));
        let text = fs::read_to_string(&path).map_err(|source| DatasetError::Io {
            path: path.clone(),
            source,
        })?;
        let mut rows = Vec::new();
        for (ix, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            rows.push(parse_edge_row(&path, ix + 1, line, decl.feature_dim)?);
        }
        edge_tables.push(EdgeTable {
            type_name: decl.name.clone(),
            rows,
        });
    }

    let tasks_path = dir.join(TASKS_FILE);
    let tasks: Vec<TaskSpec> = if tasks_path.exists() {
        read_json(&tasks_path)?
    } else {
        Vec::new()
    };
    let comm_path = dir.join(COMMUNITIES_FILE);
    let communities: Vec<CommunityRecord> = if comm_path.exists() {
        read_json(&comm_path)?
    } else {
        Vec::new()
    };

    Ok(DatasetTables {
        schema,
        node_tables,
        edge_tables,
        tasks,
        communities,
    })
}

/// Builds the validated graph and resolved tasks from raw tables.
pub fn build_dataset(
    tables: DatasetTables,
    options: &BuildOptions,
) -> Result<Dataset, DatasetError> {
    let graph = build_graph(
        &tables.schema,
        tables.node_tables,
        tables.edge_tables,
        options,
    )?;
    let mut tasks = Vec::with_capacity(tables.tasks.len());
    for spec in &tables.tasks {
        tasks.push(resolve_task(&graph, spec)?);
    }
    Ok(Dataset {
        graph,
        tasks,
        communities: tables.communities,
    })
}

pub fn resolve_task(graph: &HeteroGraph, spec: &TaskSpec) -> Result<QueryTask, DatasetError> {
    let mut target_types = Vec::with_capacity(spec.target_types.len());
    for name in &spec.target_types {
        target_types.push(
            graph
                .registry()
                .node_type_by_name(name)
                .ok_or_else(|| DatasetError::UnknownTargetType(name.clone()))?,
        );
    }
    let task = QueryTask {
        query: spec.query,
        pos: spec.pos.clone(),
        neg: spec.neg.clone(),
        target_types,
    };
    task.validate(graph)?;
    Ok(task)
}

/// One-call loader: directory -> validated dataset.
pub fn load_dataset(dir: &Path, options: &BuildOptions) -> Result<Dataset, DatasetError> {
    build_dataset(read_tables(dir)?, options)
}

fn write_file(path: &Path, contents: &str) -> Result<(), DatasetError> {
    let mut f = fs::File::create(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(contents.as_bytes())
        .map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn fmt_floats(out: &mut String, values: &[f64]) {
    for v in values {
        out.push('\t');
        out.push_str(&format!("{v}"));
    }
}

/// Writes raw tables as a dataset directory. Node rows are emitted in
/// ascending id order per type so a write/read cycle is canonical.
pub fn write_tables(dir: &Path, tables: &DatasetTables) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let schema_json = serde_json::to_string_pretty(&tables.schema).expect("schema serializes");
    write_file(&dir.join(SCHEMA_FILE), &schema_json)?;

    for table in &tables.node_tables {
        let mut rows: Vec<&(NodeId, Vec<f64>)> = table.rows.iter().collect();
        rows.sort_by_key(|(id, _)| *id);
        let mut text = String::new();
        for (id, feats) in rows {
            text.push_str(&id.to_string());
            fmt_floats(&mut text, feats);
            text.push('\n');
        }
        write_file(&dir.join(format!("nodes_{}.tsv", table.type_name)), &text)?;
    }
    for table in &tables.edge_tables {
        let mut text = String::new();
        for row in &table.rows {
            text.push_str(&row.src.to_string());
            text.push('\t');
            text.push_str(&row.dst.to_string());
            if let Some(f) = &row.features {
                fmt_floats(&mut text, f);
            }
            text.push('\n');
        }
        write_file(&dir.join(format!("edges_{}.tsv", table.type_name)), &text)?;
    }
    let tasks_json = serde_json::to_string_pretty(&tables.tasks).expect("tasks serialize");
    write_file(&dir.join(TASKS_FILE), &tasks_json)?;
    if !tables.communities.is_empty() {
        let comm_json =
            serde_json::to_string_pretty(&tables.communities).expect("communities serialize");
        write_file(&dir.join(COMMUNITIES_FILE), &comm_json)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EdgeTypeDecl, EdgeTypeId, NodeTypeDecl};

    fn toy_tables() -> DatasetTables {
        DatasetTables {
            schema: SchemaDecl {
                node_types: vec![
                    NodeTypeDecl {
                        name: "author".into(),
                        feature_dim: 2,
                    },
                    NodeTypeDecl {
                        name: "paper".into(),
                        feature_dim: 1,
                    },
                ],
                edge_types: vec![EdgeTypeDecl {
                    name: "writes".into(),
                    src: "author".into(),
                    dst: "paper".into(),
                    feature_dim: None,
                }],
            },
            node_tables: vec![
                NodeTable {
                    type_name: "author".into(),
                    rows: vec![(0, vec![0.25, -1.5]), (1, vec![0.125, 3.0])],
                },
                NodeTable {
                    type_name: "paper".into(),
                    rows: vec![(2, vec![7.0]), (3, vec![-0.75])],
                },
            ],
            edge_tables: vec![EdgeTable {
                type_name: "writes".into(),
                rows: vec![
                    EdgeRow {
                        src: 0,
                        dst: 2,
                        features: None,
                    },
                    EdgeRow {
                        src: 1,
                        dst: 3,
                        features: None,
                    },
                    EdgeRow {
                        src: 0,
                        dst: 3,
                        features: None,
                    },
                ],
            }],
            tasks: vec![TaskSpec {
                query: 0,
                pos: vec![0, 1],
                neg: vec![3],
                target_types: vec!["author".into()],
            }],
            communities: vec![CommunityRecord {
                id: 0,
                members: vec![0, 1, 2],
            }],
        }
    }

    #[test]
    fn round_trip_preserves_csr_arrays() {
        let dir = tempfile::tempdir().unwrap();
        let tables = toy_tables();
        write_tables(dir.path(), &tables).unwrap();
        let first = build_dataset(read_tables(dir.path()).unwrap(), &BuildOptions::default())
            .unwrap();

        // Serialize the loaded graph again and rebuild.
        let dir2 = tempfile::tempdir().unwrap();
        write_tables(dir2.path(), &toy_tables()).unwrap();
        let second = build_dataset(read_tables(dir2.path()).unwrap(), &BuildOptions::default())
            .unwrap();

        for t in 0..first.graph.registry().edge_types.len() {
            assert_eq!(
                first.graph.csr(EdgeTypeId(t)),
                second.graph.csr(EdgeTypeId(t))
            );
        }
        assert_eq!(first.graph, second.graph);
        assert_eq!(first.tasks, second.tasks);
        assert_eq!(first.communities.len(), 1);
    }

    #[test]
    fn float_features_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut tables = toy_tables();
        tables.node_tables[0].rows[0].1 = vec![0.1, 1.0 / 3.0];
        write_tables(dir.path(), &tables).unwrap();
        let loaded = read_tables(dir.path()).unwrap();
        assert_eq!(loaded.node_tables[0].rows[0].1, vec![0.1, 1.0 / 3.0]);
    }

    #[test]
    fn malformed_rows_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        write_tables(dir.path(), &toy_tables()).unwrap();
        let path = dir.path().join("nodes_author.tsv");
        fs::write(&path, "0\t0.1\t0.2\n1\tnot_a_number\t2.0\n").unwrap();
        let err = read_tables(dir.path()).unwrap_err();
        match err {
            DatasetError::MalformedRow { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("not_a_number"));
            }
            other => panic!("unexpected error {other:?}"),
        }

        // Wrong feature count.
        fs::write(&path, "0\t0.1\n").unwrap();
        let err = read_tables(dir.path()).unwrap_err();
        assert!(matches!(err, DatasetError::MalformedRow { line: 1, .. }));
    }

    #[test]
    fn edge_rows_reject_missing_fields() {
        let dir = tempfile::tempdir().unwrap();
        write_tables(dir.path(), &toy_tables()).unwrap();
        fs::write(dir.path().join("edges_writes.tsv"), "0\n").unwrap();
        let err = read_tables(dir.path()).unwrap_err();
        assert!(matches!(err, DatasetError::MalformedRow { line: 1, .. }));
    }

    #[test]
    fn tasks_resolve_type_names() {
        let dir = tempfile::tempdir().unwrap();
        write_tables(dir.path(), &toy_tables()).unwrap();
        let ds = load_dataset(dir.path(), &BuildOptions::default()).unwrap();
        assert_eq!(ds.tasks.len(), 1);
        assert_eq!(ds.tasks[0].target_types.len(), 1);
        assert_eq!(
            ds.graph
                .registry()
                .node_type(ds.tasks[0].target_types[0])
                .name,
            "author"
        );
    }
}
