//! Temporary calibration harness (not part of the test suite proper).

use std::time::Instant;

use np_core::diagnostics::{stage_gap, Embedding};
use np_core::domains::{make_benchmark, BenchmarkSizes};
use np_core::net::{evaluate, train, NetworkConfig, StageSpec, ToyNet, TrainConfig};
use np_core::np::NpSiteConfig;
use np_core::rng::split_seed;
use np_core::stats::Kernel;

fn run_config(label: &str, stages: &[usize], epochs: usize, lr: f64, np: bool, seed: u64) {
    let bench = make_benchmark(split_seed(seed, "benchmark"), BenchmarkSizes::default()).unwrap();
    let mut cfg = NetworkConfig::default();
    cfg.stages = stages.iter().map(|&c| StageSpec::new(c, 1)).collect();
    if np {
        let mut site1 = NpSiteConfig::new(1, 0.5, np_core::np::NoiseSpec::gaussian(1.0, 0.75));
        site1.gate = np_core::np::GateGranularity::PerSample;
        let mut site2 = NpSiteConfig::new(2, 0.5, np_core::np::NoiseSpec::gaussian(1.0, 0.75));
        site2.gate = np_core::np::GateGranularity::PerSample;
        cfg.np_sites = vec![site1, site2];
    }
    let mut net = ToyNet::<f32>::new(cfg, split_seed(seed, "model")).unwrap();
    let train_cfg = TrainConfig {
        epochs,
        learning_rate: lr,
        lr_decay_epoch: Some(epochs * 3 / 4),
        lr_decay_factor: 0.1,
        seed: split_seed(seed, "train"),
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let metrics = train(&mut net, &bench.train, None, &train_cfg).unwrap();
    let train_time = t0.elapsed();
    let src = evaluate(&net, &bench.val).unwrap();
    let mut line = format!(
        "{label} seed{seed}: {train_time:.0?} | loss {:.4} tracc {:.4} | source {src:.4}",
        metrics.last().unwrap().train_loss,
        metrics.last().unwrap().train_accuracy,
    );
    for target in &bench.targets {
        let acc = evaluate(&net, target).unwrap();
        line.push_str(&format!(" | {} {acc:.4}", &target.name[7..]));
    }
    let gap = stage_gap(
        &net,
        label,
        &bench.val,
        &bench.targets[0],
        &Kernel::rbf_median(),
        Embedding::Raw,
    )
    .unwrap();
    line.push_str(&format!(" | mmd {:.5}", gap.final_stage_mmd()));
    println!("{line}");
}

#[test]
#[ignore]
fn calibrate_headline_experiment() {
    for seed in [1u64, 2] {
        run_config("base-e48-decay", &[8, 16, 32, 64], 48, 0.05, false, seed);
        run_config("np---e48-decay", &[8, 16, 32, 64], 48, 0.05, true, seed);
    }
    run_config("base-e64-decay", &[8, 16, 32, 64], 64, 0.05, false, 1);
    run_config("np---e64-decay", &[8, 16, 32, 64], 64, 0.05, true, 1);
}
