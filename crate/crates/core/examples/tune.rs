//! Scratch driver for hyperparameter sanity checks. Not part of the suite.

use projinfo_core::harness::{
    correlation_report, gen_synthetic, linear_probe, spearman, sweep, train, EpochRow, SweepAxis,
    TrainConfig,
};
use projinfo_core::nn::ProjectorSpec;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("default");
    match mode {
        "corr" => {
            let classes: usize = args.get(2).map_or(4, |s| s.parse().unwrap());
            let n: usize = args.get(3).map_or(768, |s| s.parse().unwrap());
            let spread: f64 = args.get(4).map_or(2.5, |s| s.parse().unwrap());
            let epochs: usize = args.get(5).map_or(8, |s| s.parse().unwrap());
            correlation_probe(classes, n, spread, epochs);
        }
        _ => default_probe(),
    }
}

fn correlation_probe(classes: usize, n: usize, spread: f64, epochs: usize) {
    let args: Vec<String> = std::env::args().collect();
    let sigma: f64 = args.get(6).map_or(1.0, |s| s.parse().unwrap());
    let mask: f64 = args.get(7).map_or(0.1, |s| s.parse().unwrap());
    let widths: Vec<usize> = args
        .get(8)
        .map_or(vec![64], |s| s.split('x').map(|w| w.parse().unwrap()).collect());
    let fdim: usize = args.get(9).map_or(16, |s| s.parse().unwrap());
    let base_seed: u64 = args.get(10).map_or(1000, |s| s.parse().unwrap());
    let data = gen_synthetic(classes, 20, n, spread, 41).unwrap();
    let raw = linear_probe(&data.points, &data.labels, 200, 0.5).unwrap();
    println!(
        "classes {classes} n {n} spread {spread} epochs {epochs} sigma {sigma} mask {mask} widths {widths:?} fdim {fdim} base {base_seed}: raw probe {:.4}",
        raw.heldout_accuracy
    );

    let specs: Vec<(&str, usize, ProjectorSpec)> = vec![
        ("mlp32x8", 12, ProjectorSpec::mlp(32, 8)),
        ("mlp-l3", 8, ProjectorSpec::mlp(32, 8).with_lambda(1e-3)),
        ("mlp-l1", 6, ProjectorSpec::mlp(32, 8).with_lambda(0.1)),
        ("mlp32x4", 2, ProjectorSpec::mlp(32, 4)),
        ("mlp16x8", 1, ProjectorSpec::mlp(16, 8)),
        ("mlp64x16", 10, ProjectorSpec::mlp(64, 16)),
        ("mlp8x2", 3, ProjectorSpec::mlp(8, 2)),
        ("mlp-l2", 4, ProjectorSpec::mlp(32, 8).with_lambda(0.01)),
    ];
    let mut finals: Vec<EpochRow> = Vec::new();
    for (i, (name, run_epochs, spec)) in specs.into_iter().enumerate() {
        let mut config = TrainConfig::desk_default(base_seed + i as u64);
        config.epochs = if epochs == 0 { run_epochs } else { epochs };
        config.batch_size = 128;
        config.noise_sigma = sigma;
        config.mask_prob = mask;
        config.encoder_widths = widths.clone();
        config.feature_dim = fdim;
        config.projector = spec;
        let log = train(&config, &data).unwrap();
        let last = log.rows.last().unwrap().clone();
        println!(
            "  {name:8} lower {:8.4} acc1 {:.4} acc2 {:.4} i2 {:.4} enc {:.4}",
            last.lower_bound_est, last.probe_acc_z1, last.probe_acc_z2, last.i2_z1_z2,
            last.encoder_feature_loss
        );
        finals.push(last);
    }
    let report = correlation_report(&finals).unwrap();
    println!(
        "  rho(lower,acc) {:.3} rho(upper,acc) {:.3} rho(i2,acc) {:.3}",
        report.lower_bound_vs_probe_z1,
        report.upper_bound_vs_probe_z1,
        report.i2_z1_z2_vs_probe_z1
    );
}

fn default_probe() {
    let data = gen_synthetic(4, 20, 2048, 1.0, 7).unwrap();
    let raw = linear_probe(&data.points, &data.labels, 200, 0.5).unwrap();
    println!("raw-input probe: {:.4}", raw.heldout_accuracy);

    let mut acc = Vec::new();
    let mut rho = Vec::new();
    for seed in 0..5u64 {
        let config = TrainConfig::desk_default(seed);
        let log = train(&config, &data).unwrap();
        let last = log.rows.last().unwrap();
        let half = (log.rows.len() + 1) / 2;
        let idx: Vec<f64> = (0..half).map(|e| e as f64).collect();
        let lower: Vec<f64> = log.rows[..half].iter().map(|r| r.lower_bound_est).collect();
        let r = spearman(&idx, &lower);
        println!(
            "seed {seed}: acc_z1 {:.4} rho {:.3} i2 {:.4}",
            last.probe_acc_z1, r, last.i2_z1_z2
        );
        acc.push(last.probe_acc_z1);
        rho.push(r);
    }
    acc.sort_by(|a, b| a.partial_cmp(b).unwrap());
    rho.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("median acc_z1 {:.4}  median rho {:.3}", acc[2], rho[2]);

    let base = TrainConfig::desk_default(100);
    let rows = sweep(&base, &data, SweepAxis::Lambda, &[0.0, 0.1], 5).unwrap();
    let mut i2_zero: Vec<f64> = rows[..5].iter().map(|r| r.final_row.i2_z1_z2).collect();
    let mut i2_reg: Vec<f64> = rows[5..].iter().map(|r| r.final_row.i2_z1_z2).collect();
    i2_zero.sort_by(|a, b| a.partial_cmp(b).unwrap());
    i2_reg.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("lambda sweep: median i2 at 0 = {:.4}, at 0.1 = {:.4}", i2_zero[2], i2_reg[2]);
}
