//! Training loop: per-task optimization with binary cross entropy, optional
//! neighbor-sampled subgraphs, validation-driven threshold selection, and
//! early stopping.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamConfig, AdamState, AutodiffError, BCE_CLAMP};
use crate::graph::{HeteroGraph, NodeId, QueryTask};
use crate::metrics::f1;
use crate::model::{
    collect_gradients, forward, predict, Checkpoint, DropoutMode, ModelConfig, ModelError,
    ModelParams, PreparedGraph,
};
use crate::sampler::{sample_block, SampleError};
use crate::seeds::{self, TAG_SPLIT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Every task step runs on the whole graph.
    Full,
    /// Every task step runs on a freshly sampled subgraph.
    Ls,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// One fanout per model layer, outermost (labeled nodes) first.
    pub fanouts: Vec<usize>,
    /// Train/val/test fractions; must sum to 1.
    pub split: (f64, f64, f64),
    pub seed: u64,
    /// Emit `epoch=..` progress lines on stderr.
    pub log_progress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Ls,
            epochs: 200,
            patience: 10,
            learning_rate: 0.001,
            weight_decay: 1e-4,
            fanouts: vec![20, 10],
            split: (0.7, 0.15, 0.15),
            seed: 0,
            log_progress: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train: no tasks")]
    NoTasks,
    #[error("train: label {0} is neither 0 nor 1")]
    BadLabel(f64),
    #[error("train: empty labeled set")]
    EmptyLabeledSet,
    #[error("train: split fractions {0:?} must be positive and sum to 1")]
    BadSplit((f64, f64, f64)),
    #[error("train: patience must be >= 1")]
    BadPatience,
    #[error("train: ls mode needs one fanout per layer ({layers}), got {got}")]
    FanoutCount { layers: usize, got: usize },
    #[error(
        "train: non-finite loss at epoch {epoch}, task #{task} (query {query}); \
         largest parameter norm {max_norm:.3e} ({max_norm_name})"
    )]
    NonFiniteLoss {
        epoch: usize,
        task: usize,
        query: NodeId,
        max_norm: f64,
        max_norm_name: String,
    },
    #[error("train: empty validation split")]
    EmptyValidation,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Mean binary cross entropy over one task's labeled nodes, probabilities
/// clamped before the logs.
pub fn bce_loss(probabilities: &[f64], labels: &[f64]) -> Result<f64, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::EmptyLabeledSet);
    }
    assert_eq!(
        probabilities.len(),
        labels.len(),
        "bce_loss: {} probabilities for {} labels",
        probabilities.len(),
        labels.len()
    );
    let mut total = 0.0;
    for (&p, &y) in probabilities.iter().zip(labels) {
        if y != 0.0 && y != 1.0 {
            return Err(TrainError::BadLabel(y));
        }
        let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total += -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
    }
    Ok(total / labels.len() as f64)
}

/// Threshold selection: candidates are midpoints between consecutive values
/// of `{0} ∪ sorted distinct probabilities ∪ {1}`, pooled over all tasks; the
/// winner maximizes mean per-task F1, ties broken toward the smallest value.
///
/// Each task contributes `(probabilities, labels)` over its labeled nodes.
/// Returns `(gamma, mean_f1)`.
pub fn select_threshold(per_task: &[(Vec<f64>, Vec<f64>)]) -> Result<(f64, f64), TrainError> {
    if per_task.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let mut values: Vec<f64> = vec![0.0, 1.0];
    for (probs, labels) in per_task {
        assert_eq!(probs.len(), labels.len());
        values.extend_from_slice(probs);
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    let candidates: Vec<f64> = values.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();

    let mean_f1_at = |gamma: f64| -> f64 {
        let mut total = 0.0;
        for (probs, labels) in per_task {
            let pred: BTreeSet<NodeId> = probs
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > gamma)
                .map(|(i, _)| i)
                .collect();
            let truth: BTreeSet<NodeId> = labels
                .iter()
                .enumerate()
                .filter(|(_, &y)| y == 1.0)
                .map(|(i, _)| i)
                .collect();
            total += f1(&pred, &truth);
        }
        total / per_task.len() as f64
    };

    let mut best = (0.0, f64::NEG_INFINITY);
    for &gamma in &candidates {
        let score = mean_f1_at(gamma);
        if score > best.1 {
            best = (gamma, score);
        }
    }
    Ok(best)
}

/// Deterministic task split by shuffled indices.
pub fn split_tasks(
    count: usize,
    split: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), TrainError> {
    let (a, b, c) = split;
    if a <= 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(TrainError::BadSplit(split));
    }
    let mut rng = seeds::rng_for(seed, &[TAG_SPLIT]);
    let mut indices: Vec<usize> = (0..count).collect();
    indices.shuffle(&mut rng);
    let mut n_val = (count as f64 * b).round() as usize;
    let mut n_test = (count as f64 * c).round() as usize;
    // Keep at least one task per non-zero fraction when there are enough.
    if b > 0.0 && n_val == 0 && count >= 3 {
        n_val = 1;
    }
    if c > 0.0 && n_test == 0 && count >= 3 {
        n_test = 1;
    }
    let n_train = count.saturating_sub(n_val + n_test);
    let train = indices[..n_train].to_vec();
    let val = indices[n_train..n_train + n_val].to_vec();
    let test = indices[n_train + n_val..].to_vec();
    Ok((train, val, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_f1: f64,
    pub gamma: f64,
    pub ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub gamma: f64,
    pub train_tasks: usize,
    pub val_tasks: usize,
    pub test_tasks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<String>,
}

impl TrainReport {
    /// Everything except wall-clock noise; equal across same-seed runs.
    pub fn fingerprint(&self) -> Vec<(usize, f64, f64, f64)> {
        self.epochs
            .iter()
            .map(|e| (e.epoch, e.mean_loss, e.val_f1, e.gamma))
            .collect()
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
    pub params: ModelParams,
    pub test_task_indices: Vec<usize>,
}

/// One forward/backward/update on a prepared (sub)graph. Returns the task
/// loss, or `None` when the loss came out non-finite.
#[allow(clippy::too_many_arguments)]
pub(crate) fn task_step(
    prepared: &PreparedGraph,
    query_local: usize,
    labeled_local: &[usize],
    labels: &[f64],
    params: &mut ModelParams,
    model_config: &ModelConfig,
    adam: &mut AdamState,
    dropout_seed: u64,
) -> Result<Option<f64>, TrainError> {
    let mut rng = seeds::rng_for(dropout_seed, &[seeds::TAG_DROPOUT]);
    let result = forward(
        prepared,
        query_local,
        params,
        model_config,
        DropoutMode::Train {
            rate: model_config.dropout,
            rng: &mut rng,
        },
        false,
    )?;
    let mut tape = result.tape;
    let gathered = tape.gather_rows(result.prob, Arc::new(labeled_local.to_vec()));
    let loss_var = tape.bce_mean(gathered, Arc::new(labels.to_vec()));
    let loss = tape.value(loss_var).item();
    if !loss.is_finite() {
        return Ok(None);
    }
    let grads = tape.backward(loss_var)?;
    let grad_tensors = collect_gradients(&result.param_vars, &grads, params);

    adam.begin_step();
    let mut index = 0;
    let mut failure: Option<AutodiffError> = None;
    params.for_each_mut(&mut |name, tensor| {
        if failure.is_none() {
            if let Err(e) = adam.apply(index, &name, tensor, &grad_tensors[index]) {
                failure = Some(e);
            }
        }
        index += 1;
    });
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(Some(loss)),
    }
}

/// Runs one epoch of task steps over `order`. Returns the mean loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_epoch(
    graph: &HeteroGraph,
    full_prepared: &PreparedGraph,
    tasks: &[QueryTask],
    order: &[usize],
    params: &mut ModelParams,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    adam: &mut AdamState,
    epoch: usize,
) -> Result<f64, TrainError> {
    let mut total_loss = 0.0;
    for (pos, &tix) in order.iter().enumerate() {
        let task = &tasks[tix];
        let dropout_seed = seeds::mix(
            train_config.seed,
            &[seeds::TAG_DROPOUT, epoch as u64, pos as u64],
        );
        let loss = match train_config.mode {
            TrainMode::Full => {
                let (ids, labels) = task.labeled();
                task_step(
                    full_prepared,
                    task.query,
                    &ids,
                    &labels,
                    params,
                    model_config,
                    adam,
                    dropout_seed,
                )?
            }
            TrainMode::Ls => {
                let sample_seed = seeds::mix(
                    train_config.seed,
                    &[seeds::TAG_SAMPLE, epoch as u64, pos as u64],
                );
                let block = sample_block(graph, task, &train_config.fanouts, sample_seed)?;
                let prepared = PreparedGraph::new(&block.graph);
                let (_, labels) = task.labeled();
                task_step(
                    &prepared,
                    block.query_local,
                    &block.labeled_local,
                    &labels,
                    params,
                    model_config,
                    adam,
                    dropout_seed,
                )?
            }
        };
        match loss {
            Some(l) => total_loss += l,
            None => {
                let (max_norm_name, max_norm) = params
                    .norms()
                    .into_iter()
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap_or(("<none>".into(), 0.0));
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    task: tix,
                    query: task.query,
                    max_norm,
                    max_norm_name,
                });
            }
        }
    }
    Ok(total_loss / order.len().max(1) as f64)
}

/// Validation pass: full-graph probabilities per task, threshold selection,
/// mean F1 at the winning threshold.
pub(crate) fn validate_tasks(
    prepared: &PreparedGraph,
    tasks: &[QueryTask],
    indices: &[usize],
    params: &ModelParams,
    model_config: &ModelConfig,
) -> Result<(f64, f64), TrainError> {
    let mut per_task = Vec::with_capacity(indices.len());
    for &tix in indices {
        let task = &tasks[tix];
        let probs = predict(prepared, task.query, params, model_config)?;
        let (ids, labels) = task.labeled();
        let labeled_probs: Vec<f64> = ids.iter().map(|&v| probs[v]).collect();
        per_task.push((labeled_probs, labels));
    }
    select_threshold(&per_task)
}

/// Full training run: split, per-task Adam steps, per-epoch validation with
/// threshold selection, early stopping on validation F1.
pub fn train(
    graph: &HeteroGraph,
    tasks: &[QueryTask],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    if train_config.patience == 0 {
        return Err(TrainError::BadPatience);
    }
    model_config.validate()?;
    if train_config.mode == TrainMode::Ls && train_config.fanouts.len() != model_config.layers {
        return Err(TrainError::FanoutCount {
            layers: model_config.layers,
            got: train_config.fanouts.len(),
        });
    }
    let (train_ix, val_ix, test_ix) = split_tasks(tasks.len(), train_config.split, train_config.seed)?;
    if val_ix.is_empty() {
        return Err(TrainError::EmptyValidation);
    }

    let full_prepared = PreparedGraph::new(graph);
    let mut params = ModelParams::init(model_config, graph.registry(), train_config.seed);
    let adam_config = AdamConfig {
        learning_rate: train_config.learning_rate,
        weight_decay: train_config.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_config, &params.shapes());

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, f64, ModelParams)> = None; // epoch, f1, gamma, params
    let mut since_best = 0;
    for epoch in 0..train_config.epochs {
        let t0 = Instant::now();
        let mean_loss = run_epoch(
            graph,
            &full_prepared,
            tasks,
            &train_ix,
            &mut params,
            model_config,
            train_config,
            &mut adam,
            epoch,
        )?;
        let (gamma, val_f1) =
            validate_tasks(&full_prepared, tasks, &val_ix, &params, model_config)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        if train_config.log_progress {
            eprintln!("epoch={epoch} loss={mean_loss} valF1={val_f1} gamma={gamma} ms={ms:.1}");
        }
        epochs.push(EpochStats {
            epoch,
            mean_loss,
            val_f1,
            gamma,
            ms,
        });

        let improved = match &best {
            None => true,
            Some((_, best_f1, _, _)) => val_f1 > *best_f1,
        };
        if improved {
            best = Some((epoch, val_f1, gamma, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train_config.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_f1, gamma, best_params) = best.expect("at least one epoch ran");
    let checkpoint = Checkpoint::new(
        model_config.clone(),
        graph.registry().clone(),
        train_config.seed,
        train_config.split,
        gamma,
        &best_params,
    );
    Ok(TrainOutcome {
        report: TrainReport {
            epochs,
            best_epoch,
            best_val_f1,
            gamma,
            train_tasks: train_ix.len(),
            val_tasks: val_ix.len(),
            test_tasks: test_ix.len(),
            checkpoint_path: None,
        },
        checkpoint,
        params: best_params,
        test_task_indices: test_ix,
    })
}
