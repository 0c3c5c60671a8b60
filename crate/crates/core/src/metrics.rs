//! Community quality metrics and batch evaluation over query tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::graph::{HeteroGraph, NodeId, QueryTask};
use crate::model::{predict, ModelConfig, ModelError, ModelParams, PreparedGraph};
use crate::search::{search, SearchConfig, SearchError};

/// Harmonic mean of precision and recall over node sets. Two empty sets count
/// as a perfect match.
pub fn f1(pred: &BTreeSet<NodeId>, truth: &BTreeSet<NodeId>) -> f64 {
    if pred.is_empty() && truth.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || truth.is_empty() {
        return 0.0;
    }
    let inter = pred.intersection(truth).count() as f64;
    if inter == 0.0 {
        return 0.0;
    }
    let precision = inter / pred.len() as f64;
    let recall = inter / truth.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Intersection over union; two empty sets count as 1.
pub fn jaccard(pred: &BTreeSet<NodeId>, truth: &BTreeSet<NodeId>) -> f64 {
    if pred.is_empty() && truth.is_empty() {
        return 1.0;
    }
    let inter = pred.intersection(truth).count() as f64;
    let union = pred.union(truth).count() as f64;
    inter / union
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("nmi: empty universe")]
    EmptyUniverse,
}

/// Normalized mutual information of the binary membership partitions the two
/// sets induce on `universe`, normalized by the arithmetic mean of the
/// entropies. Identical trivial partitions score 1; otherwise a zero-entropy
/// side scores 0.
pub fn nmi(
    pred: &BTreeSet<NodeId>,
    truth: &BTreeSet<NodeId>,
    universe: &BTreeSet<NodeId>,
) -> Result<f64, MetricError> {
    if universe.is_empty() {
        return Err(MetricError::EmptyUniverse);
    }
    let n = universe.len() as f64;
    let mut counts = [[0usize; 2]; 2];
    for v in universe {
        let a = usize::from(pred.contains(v));
        let b = usize::from(truth.contains(v));
        counts[a][b] += 1;
    }
    let pred_in = counts[1][0] + counts[1][1];
    let truth_in = counts[0][1] + counts[1][1];

    let entropy = |k: usize| {
        let p = k as f64 / n;
        let q = 1.0 - p;
        let mut h = 0.0;
        if p > 0.0 {
            h -= p * p.ln();
        }
        if q > 0.0 {
            h -= q * q.ln();
        }
        h
    };
    let h_pred = entropy(pred_in);
    let h_truth = entropy(truth_in);
    if h_pred == 0.0 || h_truth == 0.0 {
        // Both partitions trivial and identical, or incomparable.
        return Ok(if pred == truth { 1.0 } else { 0.0 });
    }

    let marg_pred = [universe.len() - pred_in, pred_in];
    let marg_truth = [universe.len() - truth_in, truth_in];
    let mut info = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let joint = counts[a][b] as f64 / n;
            if joint > 0.0 {
                let pa = marg_pred[a] as f64 / n;
                let pb = marg_truth[b] as f64 / n;
                info += joint * (joint / (pa * pb)).ln();
            }
        }
    }
    Ok(2.0 * info / (h_pred + h_truth))
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("evaluate: no ground-truth community contains query {0}")]
    MissingTruth(NodeId),
    #[error("evaluate: no tasks to evaluate")]
    NoTasks,
}

/// Depth policy for evaluation.
#[derive(Clone, Debug)]
pub enum DepthMode {
    /// One run at this depth (`None` = unbounded BFS).
    Fixed(Option<usize>),
    /// One run per depth in the inclusive range; best mean per metric wins.
    Sweep(usize, usize),
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskEval {
    pub query: NodeId,
    pub f1: f64,
    pub jaccard: f64,
    pub nmi: f64,
    pub members: usize,
    pub truth_size: usize,
    pub predict_ms: f64,
    pub search_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub d_max: usize,
    pub mean_f1: f64,
    pub mean_jaccard: f64,
    pub mean_nmi: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub gamma: f64,
    /// Depth the per-task numbers were produced with (`None` = unbounded).
    pub d_max: Option<usize>,
    pub per_task: Vec<TaskEval>,
    pub mean_f1: f64,
    pub mean_jaccard: f64,
    pub mean_nmi: f64,
    pub latency: LatencyStats,
    /// Filled in sweep mode: per-depth means plus the best depth per metric.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub best_f1_d_max: usize,
    pub best_jaccard_d_max: usize,
    pub best_nmi_d_max: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn latency_stats(mut ms: Vec<f64>) -> LatencyStats {
    if ms.is_empty() {
        return LatencyStats {
            mean_ms: 0.0,
            median_ms: 0.0,
            min_ms: 0.0,
            max_ms: 0.0,
        };
    }
    ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = ms.len() / 2;
    let median = if ms.len() % 2 == 0 {
        (ms[mid - 1] + ms[mid]) / 2.0
    } else {
        ms[mid]
    };
    LatencyStats {
        mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
        median_ms: median,
        min_ms: ms[0],
        max_ms: *ms.last().unwrap(),
    }
}

/// Ground truth for a task: the members of the community containing its
/// query, restricted to the task's target types.
pub fn truth_for_task(
    graph: &HeteroGraph,
    communities: &[(usize, Vec<NodeId>)],
    task: &QueryTask,
) -> Result<BTreeSet<NodeId>, EvalError> {
    let community = communities
        .iter()
        .find(|(_, members)| members.contains(&task.query))
        .ok_or(EvalError::MissingTruth(task.query))?;
    let targets: BTreeSet<_> = task.target_types.iter().copied().collect();
    Ok(community
        .1
        .iter()
        .copied()
        .filter(|&v| targets.contains(&graph.node_type_of(v)))
        .collect())
}

/// Runs predict + search + metrics per task against provided ground truth.
///
/// `truth_of_query` maps each task's query node to the exact member set to
/// score against. Metrics are computed inside the task's target-type
/// universe, so off-type query nodes are not scored.
pub fn evaluate(
    graph: &HeteroGraph,
    prepared: &PreparedGraph,
    params: &ModelParams,
    model_config: &ModelConfig,
    tasks: &[QueryTask],
    truth_of_query: &BTreeMap<NodeId, BTreeSet<NodeId>>,
    gamma: f64,
    depth: DepthMode,
) -> Result<EvalReport, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::NoTasks);
    }

    // Probabilities are depth-independent; compute once per task.
    let mut probs = Vec::with_capacity(tasks.len());
    let mut predict_ms = Vec::with_capacity(tasks.len());
    for task in tasks {
        let t0 = Instant::now();
        probs.push(predict(prepared, task.query, params, model_config)?);
        predict_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }

    let run_depth = |d_max: Option<usize>| -> Result<Vec<TaskEval>, EvalError> {
        let mut rows = Vec::with_capacity(tasks.len());
        for (ix, task) in tasks.iter().enumerate() {
            let truth = truth_of_query
                .get(&task.query)
                .ok_or(EvalError::MissingTruth(task.query))?;
            let targets: BTreeSet<_> = task.target_types.iter().copied().collect();
            let universe: BTreeSet<NodeId> = (0..graph.node_count())
                .filter(|&v| targets.contains(&graph.node_type_of(v)))
                .collect();
            let t0 = Instant::now();
            let result = search(
                graph,
                task.query,
                &probs[ix],
                &SearchConfig {
                    gamma,
                    max_depth: d_max,
                    target_types: targets,
                },
            )?;
            let search_ms = t0.elapsed().as_secs_f64() * 1e3;
            let pred: BTreeSet<NodeId> = result
                .member_set()
                .intersection(&universe)
                .copied()
                .collect();
            rows.push(TaskEval {
                query: task.query,
                f1: f1(&pred, truth),
                jaccard: jaccard(&pred, truth),
                nmi: nmi(&pred, truth, &universe)?,
                members: pred.len(),
                truth_size: truth.len(),
                predict_ms: predict_ms[ix],
                search_ms,
            });
        }
        Ok(rows)
    };

    let (per_task, d_used, sweep) = match depth {
        DepthMode::Fixed(d) => (run_depth(d)?, d, None),
        DepthMode::Sweep(lo, hi) => {
            let mut rows = Vec::new();
            let mut best: Option<(usize, Vec<TaskEval>)> = None;
            for d in lo..=hi {
                let evals = run_depth(Some(d))?;
                let row = SweepRow {
                    d_max: d,
                    mean_f1: mean(evals.iter().map(|e| e.f1)),
                    mean_jaccard: mean(evals.iter().map(|e| e.jaccard)),
                    mean_nmi: mean(evals.iter().map(|e| e.nmi)),
                };
                let better = match &best {
                    None => true,
                    Some((_, prev)) => row.mean_f1 > mean(prev.iter().map(|e| e.f1)),
                };
                if better {
                    best = Some((d, evals));
                }
                rows.push(row);
            }
            let pick = |key: fn(&SweepRow) -> f64| {
                rows.iter()
                    .max_by(|a, b| key(a).partial_cmp(&key(b)).unwrap())
                    .map(|r| r.d_max)
                    .unwrap()
            };
            let sweep = SweepReport {
                best_f1_d_max: pick(|r| r.mean_f1),
                best_jaccard_d_max: pick(|r| r.mean_jaccard),
                best_nmi_d_max: pick(|r| r.mean_nmi),
                rows,
            };
            let (d, evals) = best.unwrap();
            (evals, Some(d), Some(sweep))
        }
    };

    let latency = latency_stats(
        per_task
            .iter()
            .map(|e| e.predict_ms + e.search_ms)
            .collect(),
    );
    Ok(EvalReport {
        gamma,
        d_max: d_used,
        mean_f1: mean(per_task.iter().map(|e| e.f1)),
        mean_jaccard: mean(per_task.iter().map(|e| e.jaccard)),
        mean_nmi: mean(per_task.iter().map(|e| e.nmi)),
        per_task,
        latency,
        sweep,
    })
}

/// Tab-separated dump of an eval report, one row per task.
pub fn report_tsv(report: &EvalReport) -> String {
    let mut out = String::from("query\tf1\tjaccard\tnmi\tmembers\ttruth_size\tms\n");
    for row in &report.per_task {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            row.query,
            row.f1,
            row.jaccard,
            row.nmi,
            row.members,
            row.truth_size,
            row.predict_ms + row.search_ms
        ));
    }
    out
}
