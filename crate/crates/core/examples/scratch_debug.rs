use hetcs_core::dataset::build_dataset;
use hetcs_core::graph::BuildOptions;
use hetcs_core::model::{predict, ModelConfig, PreparedGraph};
use hetcs_core::synth::{generate, SynthConfig, SynthEdgeType, SynthNodeType};
use hetcs_core::train::{train, split_tasks, TrainConfig, TrainMode};

fn main() {
    let synth = SynthConfig {
        seed: 42,
        node_types: vec![
            SynthNodeType { name: "a".into(), count: 24, feature_dim: 6, community_size: 6 },
            SynthNodeType { name: "b".into(), count: 16, feature_dim: 4, community_size: 4 },
        ],
        edge_types: vec![SynthEdgeType { name: "r".into(), src: "a".into(), dst: "b".into() }],
        communities: 2,
        p_in: 0.8,
        p_out: 0.02,
        signal: 4.0,
        tasks_per_community: 6,
        pos_fraction: 0.4,
        target_types: vec!["a".into(), "b".into()],
    };
    let tables = generate(&synth).unwrap();
    let ds = build_dataset(tables, &BuildOptions::default()).unwrap();
    let cfg = ModelConfig {
        layers: 2, hidden_dim: 16, heads: 4, unified_dim: 16, edge_dim: 8,
        dropout: 0.0, mlp_hidden: 16,
    };
    let tc = TrainConfig {
        mode: TrainMode::Ls,
        epochs: 200,
        patience: 40,
        learning_rate: 0.01,
        seed: 42,
        fanouts: vec![8, 5],
        log_progress: false,
        ..TrainConfig::default()
    };
    let outcome = train(&ds.graph, &ds.tasks, &cfg, &tc).unwrap();
    for e in outcome.report.epochs.iter().step_by(10) {
        eprintln!("epoch={} loss={:.4} valF1={:.3} gamma={:.3}", e.epoch, e.mean_loss, e.val_f1, e.gamma);
    }
    eprintln!("best epoch {} val F1 {} gamma {}", outcome.report.best_epoch, outcome.report.best_val_f1, outcome.report.gamma);

    // Dump one val task's labeled probabilities.
    let (_, val_ix, _) = split_tasks(ds.tasks.len(), tc.split, tc.seed).unwrap();
    let prepared = PreparedGraph::new(&ds.graph);
    for &ix in &val_ix {
        let task = &ds.tasks[ix];
        let probs = predict(&prepared, task.query, &outcome.params, &cfg).unwrap();
        let (ids, labels) = task.labeled();
        let line: Vec<String> = ids.iter().zip(&labels)
            .map(|(&v, &y)| format!("{v}:{}={:.2}", y as u8, probs[v]))
            .collect();
        eprintln!("task q={} -> {}", task.query, line.join(" "));
    }
}
