//! End-to-end pipeline checks on small planted datasets.

use std::collections::{BTreeMap, BTreeSet};

use hetcs_core::dataset::{build_dataset, load_dataset, write_tables};
use hetcs_core::graph::BuildOptions;
use hetcs_core::metrics::{evaluate, truth_for_task, DepthMode};
use hetcs_core::model::{predict, Checkpoint, ModelConfig, PreparedGraph};
use hetcs_core::synth::{generate, SynthConfig, SynthEdgeType, SynthNodeType};
use hetcs_core::train::{train, TrainConfig, TrainMode};

fn toy_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        node_types: vec![
            SynthNodeType {
                name: "a".into(),
                count: 24,
                feature_dim: 6,
                community_size: 6,
            },
            SynthNodeType {
                name: "b".into(),
                count: 16,
                feature_dim: 4,
                community_size: 4,
            },
        ],
        edge_types: vec![SynthEdgeType {
            name: "r".into(),
            src: "a".into(),
            dst: "b".into(),
        }],
        communities: 2,
        p_in: 0.8,
        p_out: 0.02,
        signal: 4.0,
        tasks_per_community: 6,
        pos_fraction: 0.4,
        target_types: vec!["a".into(), "b".into()],
    }
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden_dim: 16,
        heads: 4,
        unified_dim: 16,
        edge_dim: 8,
        dropout: 0.0,
        mlp_hidden: 16,
    }
}

fn toy_train(mode: TrainMode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 60,
        patience: 10,
        seed,
        fanouts: vec![8, 5],
        log_progress: false,
        ..TrainConfig::default()
    }
}

#[test]
fn planted_toy_trains_to_high_validation_f1() {
    let tables = generate(&toy_synth(42)).unwrap();
    let ds = build_dataset(tables, &BuildOptions::default()).unwrap();
    let outcome = train(&ds.graph, &ds.tasks, &toy_model(), &toy_train(TrainMode::Ls, 42))
        .expect("training runs");

    // Loss strictly decreases over the first epochs of the run.
    let losses: Vec<f64> = outcome.report.epochs.iter().map(|e| e.mean_loss).collect();
    assert!(losses.len() >= 5, "ran {} epochs", losses.len());
    for w in losses[..5].windows(2) {
        assert!(w[1] < w[0], "losses not decreasing: {losses:?}");
    }
    assert!(
        outcome.report.best_val_f1 >= 0.9,
        "best val F1 {}",
        outcome.report.best_val_f1
    );
}

#[test]
fn same_seed_reproduces_report_and_checkpoint() {
    let tables = generate(&toy_synth(7)).unwrap();
    let ds = build_dataset(tables, &BuildOptions::default()).unwrap();
    let cfg = toy_model();
    let tc = toy_train(TrainMode::Ls, 7);
    let a = train(&ds.graph, &ds.tasks, &cfg, &tc).unwrap();
    let b = train(&ds.graph, &ds.tasks, &cfg, &tc).unwrap();
    assert_eq!(a.report.fingerprint(), b.report.fingerprint());
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
}

#[test]
fn checkpoint_file_round_trip_reproduces_probabilities() {
    let tables = generate(&toy_synth(9)).unwrap();
    let ds = build_dataset(tables, &BuildOptions::default()).unwrap();
    let cfg = toy_model();
    let outcome = train(
        &ds.graph,
        &ds.tasks,
        &cfg,
        &TrainConfig {
            epochs: 3,
            ..toy_train(TrainMode::Full, 9)
        },
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    outcome.checkpoint.save(&path).unwrap();
    let restored = Checkpoint::load(&path).unwrap();
    assert_eq!(restored.gamma, outcome.checkpoint.gamma);
    let params = restored.to_params().unwrap();

    let prepared = PreparedGraph::new(&ds.graph);
    let q = ds.tasks[0].query;
    let before = predict(&prepared, q, &outcome.params, &cfg).unwrap();
    let after = predict(&prepared, q, &params, &restored.config).unwrap();
    assert_eq!(before, after);
}

#[test]
fn evaluate_scores_planted_truth() {
    let tables = generate(&toy_synth(11)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_tables(dir.path(), &tables).unwrap();
    let ds = load_dataset(dir.path(), &BuildOptions::default()).unwrap();

    let cfg = toy_model();
    let outcome = train(&ds.graph, &ds.tasks, &cfg, &toy_train(TrainMode::Ls, 11)).unwrap();

    let communities: Vec<(usize, Vec<usize>)> = ds
        .communities
        .iter()
        .map(|c| (c.id, c.members.clone()))
        .collect();
    let mut truth = BTreeMap::new();
    for task in &ds.tasks {
        truth.insert(
            task.query,
            truth_for_task(&ds.graph, &communities, task).unwrap(),
        );
    }
    let prepared = PreparedGraph::new(&ds.graph);
    let report = evaluate(
        &ds.graph,
        &prepared,
        &outcome.params,
        &cfg,
        &ds.tasks,
        &truth,
        outcome.report.gamma,
        DepthMode::Sweep(2, 6),
    )
    .unwrap();
    assert!(report.mean_f1 >= 0.8, "mean F1 {}", report.mean_f1);
    let sweep = report.sweep.as_ref().unwrap();
    // Best-F1 depth really is the argmax of the sweep rows.
    let best_row = sweep
        .rows
        .iter()
        .max_by(|a, b| a.mean_f1.partial_cmp(&b.mean_f1).unwrap())
        .unwrap();
    assert_eq!(sweep.best_f1_d_max, best_row.d_max);

    // Self-consistency: evaluating extracted communities against themselves
    // scores 1.0 on every metric.
    let mut self_truth = BTreeMap::new();
    for task in &ds.tasks {
        let probs = predict(&prepared, task.query, &outcome.params, &cfg).unwrap();
        let targets: BTreeSet<_> = task.target_types.iter().copied().collect();
        let result = hetcs_core::search::full_search(
            &ds.graph,
            task.query,
            &probs,
            outcome.report.gamma,
            &targets,
        )
        .unwrap();
        let universe: BTreeSet<usize> = (0..ds.graph.node_count())
            .filter(|&v| targets.contains(&ds.graph.node_type_of(v)))
            .collect();
        let pred: BTreeSet<usize> = result
            .member_set()
            .intersection(&universe)
            .copied()
            .collect();
        self_truth.insert(task.query, pred);
    }
    let self_report = evaluate(
        &ds.graph,
        &prepared,
        &outcome.params,
        &cfg,
        &ds.tasks,
        &self_truth,
        outcome.report.gamma,
        DepthMode::Fixed(None),
    )
    .unwrap();
    assert_eq!(self_report.mean_f1, 1.0);
    assert_eq!(self_report.mean_jaccard, 1.0);
    assert_eq!(self_report.mean_nmi, 1.0);
    // Mean equals the mean of per-task rows.
    let recomputed: f64 = self_report.per_task.iter().map(|e| e.f1).sum::<f64>()
        / self_report.per_task.len() as f64;
    assert!((self_report.mean_f1 - recomputed).abs() < 1e-12);
}
