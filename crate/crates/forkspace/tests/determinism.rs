//! Harness determinism: identical (seed, config) pairs produce identical
//! CSV bytes once wall-clock columns are excluded.

use forkspace::harness::{
    config_hash, gen_best_of_n, replay, rows_to_csv, run_layer_bench, run_scalability,
    LayerBenchRow, MetricsRow, ScalabilityRow, Workload,
};
use forkspace::model::WorkspaceSpec;
use forkspace::{CloneStrategy, EngineConfig};

#[test]
fn replay_csv_bytes_deterministic() {
    let spec = WorkspaceSpec::small(12);
    let workload = Workload {
        seed: 42,
        workspace: spec.clone(),
        traces: vec![
            gen_best_of_n(42, 3, 2, &spec),
            forkspace::harness::gen_rollback_heavy(43, 10, &spec),
        ],
    };
    let config = EngineConfig::default();
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let rows = replay(&workload, &CloneStrategy::fast(), &config, true).unwrap();
        let table = rows_to_csv(
            MetricsRow::HEADER,
            &rows,
            MetricsRow::to_fields,
            config_hash(&config),
        );
        outputs.push(table.without_timing_columns());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(outputs[0].starts_with("# config_sha256="));
}

#[test]
fn scalability_csv_bytes_deterministic() {
    let config = EngineConfig::default();
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let rows = run_scalability(2, &config).unwrap();
        let table = rows_to_csv(
            ScalabilityRow::HEADER,
            &rows,
            ScalabilityRow::to_fields,
            config_hash(&config),
        );
        outputs.push(table.without_timing_columns());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn layer_bench_csv_bytes_deterministic() {
    let config = EngineConfig::default();
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let rows = run_layer_bench(8, &config).unwrap();
        let table = rows_to_csv(
            LayerBenchRow::HEADER,
            &rows,
            LayerBenchRow::to_fields,
            config_hash(&config),
        );
        outputs.push(table.to_string()); // no wall columns at all here
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn config_hash_tracks_config_changes() {
    let a = EngineConfig::default();
    let mut b = EngineConfig::default();
    b.cost_model.ns_setup_ms += 1.0;
    assert_ne!(config_hash(&a), config_hash(&b));
    assert_eq!(config_hash(&a), config_hash(&EngineConfig::default()));
}
