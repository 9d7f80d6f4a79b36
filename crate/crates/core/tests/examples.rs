// Every example compiled in as a module and run through its entry point.

macro_rules! example {
    ($module:ident, $file:literal) => {
        #[allow(dead_code)]
        mod $module {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", $file));
        }
    };
}

example!(autodiff_example, "autodiff.rs");
example!(synthetic_domains_example, "synthetic_domains.rs");
example!(partition_clients_example, "partition_clients.rs");
example!(aggregation_example, "aggregation.rs");
example!(checkpoint_example, "checkpoint.rs");
example!(prompt_learning_example, "prompt_learning.rs");
example!(prompt_generator_example, "prompt_generator.rs");
example!(federated_lodo_example, "federated_lodo.rs");
example!(cross_dataset_example, "cross_dataset.rs");
example!(cli_pipeline_example, "cli_pipeline.rs");
example!(desk_ordering_example, "desk_ordering.rs");

#[test]
fn autodiff_example_runs() {
    let (first, last) = autodiff_example::run_example().expect("autodiff example failed");
    assert!(last < first * 0.1, "{first} -> {last}");
}

#[test]
fn synthetic_domains_example_runs() {
    synthetic_domains_example::run_example().expect("synthetic_domains example failed");
}

#[test]
fn partition_clients_example_runs() {
    partition_clients_example::run_example().expect("partition_clients example failed");
}

#[test]
fn aggregation_example_runs() {
    let v = aggregation_example::run_example().expect("aggregation example failed");
    // Constant client value 1 from a zero start: v_t = 1 - 0.8^(t-1).
    for (t, got) in v.iter().enumerate() {
        let want = 1.0 - 0.8f64.powi(t as i32);
        assert!(
            (f64::from(*got) - want).abs() < 1e-6,
            "round {}: {got} vs {want}",
            t + 1
        );
    }
}

#[test]
fn checkpoint_example_runs() {
    checkpoint_example::run_example().expect("checkpoint example failed");
}

#[test]
fn prompt_learning_example_runs() {
    let (learned, hand) =
        prompt_learning_example::run_example().expect("prompt_learning example failed");
    assert!(learned > hand);
}

#[test]
fn prompt_generator_example_runs() {
    let rate = prompt_generator_example::run_example().expect("prompt_generator example failed");
    assert!(rate > 1.0 / 3.0);
}

#[test]
fn federated_lodo_example_runs() {
    let report = federated_lodo_example::run_example(true).expect("federated_lodo example failed");
    assert_eq!(report.rows.len(), 4);
}

#[test]
fn cross_dataset_example_runs() {
    let report = cross_dataset_example::run_example(true).expect("cross_dataset example failed");
    assert!(!report.rows.is_empty());
}

#[test]
fn cli_pipeline_example_runs() {
    let out = cli_pipeline_example::run_example().expect("cli_pipeline example failed");
    assert!(out.join("merged.csv").exists());
    std::fs::remove_dir_all(out).ok();
}

#[test]
fn desk_ordering_example_runs_quick() {
    let csv = desk_ordering_example::run_example(true).expect("desk_ordering example failed");
    // 5 variants x 3 seeds x 4 held-out domains, plus the header.
    assert_eq!(csv.lines().count(), 1 + 5 * 3 * 4);
}
