//! Wall-clock scaling harness: epoch time per training mode and query
//! latency per search strategy, across generated graphs of increasing size.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{AdamConfig, AdamState};
use crate::dataset::{build_dataset, DatasetError};
use crate::graph::BuildOptions;
use crate::model::{predict, ModelConfig, ModelError, ModelParams, PreparedGraph};
use crate::search::{full_search, search, SearchConfig, SearchError};
use crate::synth::{bibliographic, generate, SynthError};
use crate::train::{run_epoch, TrainConfig, TrainError, TrainMode};

#[derive(Clone, Debug, Serialize)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    /// Timing repetitions per cell; the median is reported.
    pub reps: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub fanouts: Vec<usize>,
    /// Depth bound for the bounded-search timing.
    pub d_max: usize,
    /// Task steps per measured epoch.
    pub tasks_per_epoch: usize,
    /// Cells whose estimated working set exceeds this many floats are
    /// skipped with a marker instead of risking the whole run.
    pub memory_budget_floats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![2000, 8000, 32000],
            reps: 5,
            seed: 7,
            model: ModelConfig {
                layers: 2,
                hidden_dim: 32,
                heads: 4,
                unified_dim: 32,
                edge_dim: 8,
                dropout: 0.0,
                mlp_hidden: 32,
            },
            fanouts: vec![20, 10],
            d_max: 4,
            tasks_per_epoch: 4,
            memory_budget_floats: 2_000_000_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("bench: needs at least one size and one task")]
    Empty,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchCell {
    pub nodes: usize,
    pub edges: usize,
    /// Median epoch time per mode; `None` when the cell was skipped.
    pub full_epoch_ms: Option<f64>,
    pub ls_epoch_ms: Option<f64>,
    pub bounded_search_ms: f64,
    pub full_search_ms: f64,
    pub bounded_members: usize,
    pub full_members: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub cells: Vec<BenchCell>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = xs.len() / 2;
    if xs.len() % 2 == 0 {
        (xs[mid - 1] + xs[mid]) / 2.0
    } else {
        xs[mid]
    }
}

fn time_epochs(
    graph: &crate::graph::HeteroGraph,
    prepared: &PreparedGraph,
    tasks: &[crate::graph::QueryTask],
    config: &BenchConfig,
    mode: TrainMode,
) -> Result<f64, BenchError> {
    let train_config = TrainConfig {
        mode,
        fanouts: config.fanouts.clone(),
        seed: config.seed,
        log_progress: false,
        ..TrainConfig::default()
    };
    let mut params = ModelParams::init(&config.model, graph.registry(), config.seed);
    let mut adam = AdamState::new(AdamConfig::default(), &params.shapes());
    let order: Vec<usize> = (0..tasks.len()).collect();
    let mut times = Vec::with_capacity(config.reps);
    for epoch in 0..config.reps {
        let t0 = Instant::now();
        run_epoch(
            graph,
            prepared,
            tasks,
            &order,
            &mut params,
            &config.model,
            &train_config,
            &mut adam,
            epoch,
        )?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(times))
}

/// Runs the full grid. Every cell is deterministic in the seed apart from
/// the wall-clock numbers.
pub fn run(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    if config.sizes.is_empty() || config.tasks_per_epoch == 0 || config.reps == 0 {
        return Err(BenchError::Empty);
    }
    let mut cells = Vec::with_capacity(config.sizes.len());
    for &size in &config.sizes {
        let synth = bibliographic(size, config.seed);
        let tables = generate(&synth)?;
        let ds = build_dataset(tables, &BuildOptions::default())?;
        let graph = ds.graph;
        let tasks: Vec<_> = ds
            .tasks
            .iter()
            .take(config.tasks_per_epoch)
            .cloned()
            .collect();
        if tasks.is_empty() {
            return Err(BenchError::Empty);
        }
        let prepared = PreparedGraph::new(&graph);

        // Rough tape footprint for one full-graph step: per layer/encoder/
        // head, node columns plus a handful of edge columns.
        let estimate = graph.node_count()
            * config.model.hidden_dim
            * config.model.layers
            * 8
            + graph.edge_count() * config.model.heads * config.model.layers * 2 * 6;
        let (full_epoch_ms, skipped) = if estimate > config.memory_budget_floats {
            (
                None,
                Some(format!(
                    "full-mode estimate {estimate} floats exceeds budget {}",
                    config.memory_budget_floats
                )),
            )
        } else {
            (
                Some(time_epochs(
                    &graph,
                    &prepared,
                    &tasks,
                    config,
                    TrainMode::Full,
                )?),
                None,
            )
        };
        let ls_epoch_ms = Some(time_epochs(&graph, &prepared, &tasks, config, TrainMode::Ls)?);

        // Query latency: probabilities once, then timed searches.
        let params = ModelParams::init(&config.model, graph.registry(), config.seed);
        let query_task = &tasks[0];
        let probs = predict(&prepared, query_task.query, &params, &config.model)?;
        let targets: BTreeSet<_> = query_task.target_types.iter().copied().collect();
        let mut bounded_times = Vec::with_capacity(config.reps);
        let mut full_times = Vec::with_capacity(config.reps);
        let mut bounded_members = 0;
        let mut full_members = 0;
        for _ in 0..config.reps {
            let t0 = Instant::now();
            let r = search(
                &graph,
                query_task.query,
                &probs,
                &SearchConfig {
                    gamma: 0.5,
                    max_depth: Some(config.d_max),
                    target_types: targets.clone(),
                },
            )?;
            bounded_times.push(t0.elapsed().as_secs_f64() * 1e3);
            bounded_members = r.members.len();

            let t0 = Instant::now();
            let r = full_search(&graph, query_task.query, &probs, 0.5, &targets)?;
            full_times.push(t0.elapsed().as_secs_f64() * 1e3);
            full_members = r.members.len();
        }

        cells.push(BenchCell {
            nodes: graph.node_count(),
            edges: graph.edge_count(),
            full_epoch_ms,
            ls_epoch_ms,
            bounded_search_ms: median(bounded_times),
            full_search_ms: median(full_times),
            bounded_members,
            full_members,
            skipped,
        });
    }
    Ok(BenchReport {
        config: config.clone(),
        cells,
    })
}

/// Tab-separated dump, one row per cell.
pub fn report_tsv(report: &BenchReport) -> String {
    let mut out = String::from(
        "nodes\tedges\tfull_epoch_ms\tls_epoch_ms\tbounded_search_ms\tfull_search_ms\n",
    );
    for c in &report.cells {
        let fmt_opt = |v: Option<f64>| v.map_or("skipped".to_string(), |x| format!("{x:.3}"));
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\n",
            c.nodes,
            c.edges,
            fmt_opt(c.full_epoch_ms),
            fmt_opt(c.ls_epoch_ms),
            c.bounded_search_ms,
            c.full_search_ms
        ));
    }
    out
}
