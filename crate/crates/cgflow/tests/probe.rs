//! Temporary calibration probe (ignored by default).

use cgflow::flow::{FlowModel, ModelConfig};
use cgflow::graph::{community_small_sampler, encode_graph_dataset, Graph};
use cgflow::metrics::{evaluate_protocol, MmdConfig};
use cgflow::train::{train, AdamState, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[test]
#[ignore]
fn probe_graph_generation_mmd() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let graphs: Vec<Graph> = (0..200)
        .map(|_| community_small_sampler(&mut rng, (12, 16)).unwrap())
        .collect();
    let train_graphs = &graphs[..160];
    let test_graphs = &graphs[180..];
    let data = encode_graph_dataset(train_graphs).unwrap();

    let config = ModelConfig::graph_generation(1);
    let untrained = FlowModel::new(config.clone()).unwrap();

    let mut model = FlowModel::new(config).unwrap();
    let cfg = TrainConfig {
        lr: 2e-3,
        batch_size: 4,
        epochs: std::env::var("PROBE_EPOCHS")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(6),
        train_steps: 10,
        seed: 11,
        ..Default::default()
    };
    let mut opt = AdamState::new(model.params());
    let t0 = std::time::Instant::now();
    let report = train(&mut model, &mut opt, &data, &cfg).unwrap();
    println!(
        "trained {} epochs in {:.1}s; bits/dim first epoch {:.4} last {:.4}",
        cfg.epochs,
        t0.elapsed().as_secs_f64(),
        report.epoch_mean(0),
        report.epoch_mean(cfg.epochs - 1)
    );

    let mmd_cfg = MmdConfig::default();
    let n_gen = std::env::var("PROBE_SAMPLES")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(256);
    let t0 = std::time::Instant::now();
    let trained_report = evaluate_protocol(&model, test_graphs, n_gen, 99, &mmd_cfg).unwrap();
    let untrained_report =
        evaluate_protocol(&untrained, test_graphs, n_gen, 99, &mmd_cfg).unwrap();
    println!("protocol ({n_gen} samples x2) took {:.1}s", t0.elapsed().as_secs_f64());
    println!(
        "trained:   degree {:.4} clustering {:.4} orbit {:.4} (mean nodes {:.1}, edges {:.1})",
        trained_report.degree_mmd,
        trained_report.clustering_mmd,
        trained_report.orbit_mmd,
        trained_report.generated_mean_nodes,
        trained_report.generated_mean_edges
    );
    println!(
        "untrained: degree {:.4} clustering {:.4} orbit {:.4} (mean nodes {:.1}, edges {:.1})",
        untrained_report.degree_mmd,
        untrained_report.clustering_mmd,
        untrained_report.orbit_mmd,
        untrained_report.generated_mean_nodes,
        untrained_report.generated_mean_edges
    );
    let test_mean_edges =
        test_graphs.iter().map(|g| g.edge_count() as f64).sum::<f64>() / test_graphs.len() as f64;
    println!("test mean edges: {test_mean_edges:.1}");
}
