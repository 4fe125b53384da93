//! End-to-end harness runs: every objective and projector variant, the
//! structural sparsity/quantization guarantees on live training batches,
//! and the cross-run correlation between bound estimates and downstream
//! accuracy.

use projinfo_core::harness::{
    correlation_report, gen_synthetic, linear_probe, train, train_traced, EpochRow, Objective,
    SyntheticDataset, TrainConfig,
};
use projinfo_core::nn::ProjectorSpec;

fn small_data() -> SyntheticDataset {
    gen_synthetic(4, 20, 640, 1.0, 7).unwrap()
}

fn quick_config(seed: u64) -> TrainConfig {
    let mut config = TrainConfig::desk_default(seed);
    config.epochs = 3;
    config.batch_size = 64;
    config
}

#[test]
fn default_toy_run_learns_separable_features() {
    let data = gen_synthetic(4, 20, 2048, 1.0, 7).unwrap();
    let raw = linear_probe(&data.points, &data.labels, 200, 0.5).unwrap();
    assert!(raw.heldout_accuracy >= 0.95, "{}", raw.heldout_accuracy);

    let config = TrainConfig::desk_default(0);
    let log = train(&config, &data).unwrap();
    let last = log.rows.last().unwrap();
    assert!(last.probe_acc_z1 >= 0.8, "{}", last.probe_acc_z1);
    assert!(log.rows.iter().all(|r| r.probe_acc_z1 >= 0.0 && r.probe_acc_z1 <= 1.0));
}

#[test]
fn barlow_objective_trains() {
    let data = small_data();
    let mut config = quick_config(3);
    config.objective = Objective::Barlow;
    let log = train(&config, &data).unwrap();
    assert_eq!(log.rows.len(), 3);
    assert!(log.rows.last().unwrap().probe_acc_z1 > 0.5);
}

#[test]
fn supervised_objective_trains() {
    let data = small_data();
    let mut config = quick_config(4);
    config.objective = Objective::Supervised;
    let log = train(&config, &data).unwrap();
    assert!(log.rows.last().unwrap().probe_acc_z2 > 0.9);
}

#[test]
fn fsq_outputs_stay_on_the_lattice_for_every_training_batch() {
    // 50-step runs: 640 samples, batch 64 -> 10 steps/epoch, 5 epochs.
    for levels in [3usize, 30] {
        let data = small_data();
        let mut config = quick_config(11);
        config.epochs = 5;
        config.projector = ProjectorSpec::fsq(levels, 8);
        let (_, trace) = train_traced(&config, &data).unwrap();
        assert_eq!(trace.len(), 50);

        let half = (levels / 2) as f64;
        let max_distinct = 2 * (levels / 2) + 1;
        for (step, record) in trace.iter().enumerate() {
            for z2 in &record.z2_views {
                for dim in 0..z2.cols() {
                    let mut seen: Vec<f64> = Vec::new();
                    for r in 0..z2.rows() {
                        let v = z2.get(r, dim);
                        assert_eq!(v, v.floor(), "step {step}: non-integer {v}");
                        assert!(v.abs() <= half, "step {step}: {v} beyond half-range");
                        if !seen.contains(&v) {
                            seen.push(v);
                        }
                    }
                    assert!(
                        seen.len() <= max_distinct,
                        "step {step} dim {dim}: {} distinct values for L={levels}",
                        seen.len()
                    );
                }
            }
        }
    }
}

#[test]
fn sae_hidden_activations_respect_k_for_every_training_batch() {
    for k in [1usize, 16] {
        let data = small_data();
        let mut config = quick_config(13);
        config.epochs = 5;
        config.projector = ProjectorSpec::top_k_sae(32, k);
        let (_, trace) = train_traced(&config, &data).unwrap();
        assert_eq!(trace.len(), 50);

        for (step, record) in trace.iter().enumerate() {
            let hidden = record
                .hidden_views
                .as_ref()
                .expect("sae records hidden activations");
            for h in hidden {
                for r in 0..h.rows() {
                    let nnz = h.row(r).iter().filter(|v| **v != 0.0).count();
                    assert!(nnz <= k, "step {step}: {nnz} nonzeros with k={k}");
                }
            }
        }
    }
}

#[test]
fn combined_regularizers_train_together() {
    let data = small_data();
    let mut config = quick_config(17);
    config.projector = ProjectorSpec::top_k_sae(32, 8).with_lambda(1e-3);
    config.projector.quantize_levels = Some(30);
    let (log, trace) = train_traced(&config, &data).unwrap();
    assert_eq!(log.rows.len(), 3);
    // Quantized on top of the sparse decode: outputs are integers.
    let z2 = &trace[0].z2_views[0];
    assert!(z2.data().iter().all(|v| *v == v.floor()));
    assert!(log.rows.iter().all(|r| r.regularizer_value.is_finite()));
}

#[test]
fn bound_estimates_correlate_with_downstream_accuracy_across_projectors() {
    // A deliberately harder dataset so projector damage shows up in the
    // probe, then eight differently bottlenecked runs.
    let data = gen_synthetic(4, 20, 768, 2.5, 41).unwrap();
    let specs: Vec<ProjectorSpec> = vec![
        ProjectorSpec::mlp(32, 8),
        ProjectorSpec::mlp(32, 8).with_lambda(0.01),
        ProjectorSpec::mlp(32, 4),
        ProjectorSpec::mlp(8, 2),
        ProjectorSpec::fsq(30, 8),
        ProjectorSpec::fsq(2, 8),
        ProjectorSpec::top_k_sae(64, 2),
        ProjectorSpec::top_k_sae(64, 16),
    ];
    let mut finals: Vec<EpochRow> = Vec::new();
    for (i, spec) in specs.into_iter().enumerate() {
        let mut config = TrainConfig::desk_default(1000 + i as u64);
        config.epochs = 8;
        config.batch_size = 128;
        config.projector = spec;
        let log = train(&config, &data).unwrap();
        finals.push(log.rows.last().unwrap().clone());
    }
    let report = correlation_report(&finals).unwrap();
    assert!(
        report.lower_bound_vs_probe_z1 > 0.0,
        "lower-bound correlation {} not positive",
        report.lower_bound_vs_probe_z1
    );
}
