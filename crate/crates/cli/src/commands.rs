//! Subcommand implementations. Every command writes its outputs under the
//! resolved output directory and finishes with a `run.json` provenance
//! record (command, config hash, seed, version, timestamp).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use np_core::diagnostics::{sensitivity_ranking, stage_gap, stage_statistics};
use np_core::domains::{load_benchmark, make_benchmark, save_benchmark, Benchmark};
use np_core::net::{
    evaluate, load_checkpoint, read_manifest, save_checkpoint, train, write_metrics_csv,
    Precision, ToyNet,
};
use np_core::tensor::Tensor;

use crate::config::ExperimentConfig;

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_sha256: String,
    timestamp_unix: u64,
    outputs: Vec<String>,
}

fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let canonical = serde_json::to_vec(config)?;
    Ok(format!("{:x}", Sha256::digest(&canonical)))
}

fn write_run_record(
    out_dir: &Path,
    command: &str,
    config: &ExperimentConfig,
    outputs: &[PathBuf],
) -> Result<()> {
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config_sha256: config_hash(config)?,
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        outputs: outputs
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
    };
    let path = out_dir.join("run.json");
    fs::write(&path, serde_json::to_vec_pretty(&record)?)?;
    Ok(())
}

fn dataset_dir(config: &ExperimentConfig, out_dir: &Path) -> Option<PathBuf> {
    config.dataset.dir.as_ref().map(|d| {
        if d.is_absolute() {
            d.clone()
        } else {
            out_dir.join(d)
        }
    })
}

/// Load the persisted benchmark when present, otherwise build it from the
/// seed (regenerating unconditionally when asked).
fn resolve_benchmark(
    config: &ExperimentConfig,
    out_dir: &Path,
    regen: bool,
) -> Result<Benchmark> {
    let dir = dataset_dir(config, out_dir);
    if !regen && !config.dataset.regenerate {
        if let Some(dir) = &dir {
            if dir.join("benchmark.json").exists() {
                return Ok(load_benchmark(dir)?);
            }
        }
    }
    Ok(make_benchmark(config.benchmark_seed(), config.dataset.sizes)?)
}

/// Generate the benchmark and persist it under the dataset directory.
pub fn cmd_gen(config: &ExperimentConfig, out_dir: &Path, regen: bool) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let dir = dataset_dir(config, out_dir).unwrap_or_else(|| out_dir.join("dataset"));
    if dir.join("benchmark.json").exists() && !regen && !config.dataset.regenerate {
        println!("dataset already present at {}", dir.display());
        write_run_record(out_dir, "gen", config, &[dir.clone()])?;
        return Ok(dir);
    }
    let bench = make_benchmark(config.benchmark_seed(), config.dataset.sizes)?;
    save_benchmark(&dir, &bench)?;
    println!(
        "wrote {} train / {} val / {} target images to {}",
        bench.train.len(),
        bench.val.len(),
        bench.targets.iter().map(|t| t.len()).sum::<usize>(),
        dir.display()
    );
    write_run_record(out_dir, "gen", config, &[dir.clone()])?;
    Ok(dir)
}

fn train_typed<E: np_core::element::Element>(
    config: &ExperimentConfig,
    out_dir: &Path,
    bench: &Benchmark,
) -> Result<Vec<PathBuf>> {
    let net_cfg = config.network_config();
    let train_cfg = config.train_config();
    let mut net = ToyNet::<E>::new(net_cfg, config.model_seed())?;
    let metrics = train(&mut net, &bench.train, Some(&bench.val), &train_cfg)?;
    let last = metrics
        .last()
        .ok_or_else(|| anyhow!("training produced no epochs"))?;
    println!(
        "trained {} epochs: train loss {:.4}, val accuracy {:.4}",
        metrics.len(),
        last.train_loss,
        last.val_accuracy.unwrap_or(f64::NAN)
    );
    let ckpt_dir = out_dir.join("checkpoint");
    save_checkpoint(&ckpt_dir, &net, Some(&train_cfg), &metrics)?;
    let metrics_path = out_dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &metrics)?;
    Ok(vec![ckpt_dir, metrics_path])
}

/// Train on the benchmark source domain and write a checkpoint plus the
/// per-epoch metrics CSV.
pub fn cmd_train(config: &ExperimentConfig, out_dir: &Path, regen: bool) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let bench = resolve_benchmark(config, out_dir, regen)?;
    let outputs = match config.training.precision {
        Precision::F32 => train_typed::<f32>(config, out_dir, &bench)?,
        Precision::F64 => train_typed::<f64>(config, out_dir, &bench)?,
    };
    write_run_record(out_dir, "train", config, &outputs)?;
    Ok(())
}

fn eval_typed<E: np_core::element::Element>(
    ckpt: &Path,
    bench: &Benchmark,
) -> Result<Vec<(String, f64)>> {
    let (net, _) = load_checkpoint::<E>(ckpt)?;
    let mut rows = vec![(bench.val.name.clone(), evaluate(&net, &bench.val)?)];
    for target in &bench.targets {
        rows.push((target.name.clone(), evaluate(&net, target)?));
    }
    Ok(rows)
}

fn resolve_checkpoint(out_dir: &Path, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let dir = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_dir.join("checkpoint"));
    if !dir.join("manifest.json").exists() {
        bail!("no checkpoint at {}", dir.display());
    }
    Ok(dir)
}

/// Evaluate a checkpoint on the source validation set and every target.
pub fn cmd_eval(
    config: &ExperimentConfig,
    out_dir: &Path,
    checkpoint: Option<&Path>,
    regen: bool,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let ckpt = resolve_checkpoint(out_dir, checkpoint)?;
    let manifest = read_manifest(&ckpt)?;
    let bench = resolve_benchmark(config, out_dir, regen)?;
    let rows = match manifest.dtype {
        np_core::element::Dtype::F32 => eval_typed::<f32>(&ckpt, &bench)?,
        np_core::element::Dtype::F64 => eval_typed::<f64>(&ckpt, &bench)?,
    };
    let mut csv = String::from("domain,accuracy\n");
    for (name, acc) in &rows {
        println!("{name}: {acc:.4}");
        csv.push_str(&format!("{name},{acc}\n"));
    }
    let path = out_dir.join("eval.csv");
    fs::write(&path, csv)?;
    write_run_record(out_dir, "eval", config, &[path])?;
    Ok(())
}

fn diagnose_typed<E: np_core::element::Element>(
    config: &ExperimentConfig,
    out_dir: &Path,
    ckpt: &Path,
    bench: &Benchmark,
) -> Result<Vec<PathBuf>> {
    let (net, _) = load_checkpoint::<E>(ckpt)?;
    let mut outputs = Vec::new();
    let model_id = ckpt.display().to_string();
    for target in &bench.targets {
        let report = stage_gap(
            &net,
            &model_id,
            &bench.val,
            target,
            &config.diagnostics.kernel,
            config.diagnostics.embedding,
        )?;
        let path = out_dir.join(format!("gap_{}.json", target.name));
        fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
        let last = report.mmd.per_stage.last().map(|s| s.value).unwrap_or(0.0);
        println!(
            "{} vs {}: final-stage mmd {:.6}",
            bench.val.name, target.name, last
        );
        outputs.push(path);
    }
    let warm = bench
        .targets
        .iter()
        .find(|t| t.name.ends_with("warm"))
        .unwrap_or(&bench.targets[0]);
    let report = sensitivity_ranking(&net, &bench.val, warm, config.diagnostics.sensitivity_stage)?;
    println!(
        "sensitivity at stage {}: top channels {:?}, between/within {:.3}",
        report.stage,
        report.top_k(4),
        report.between_within_ratio
    );
    let path = out_dir.join("sensitivity.json");
    fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
    outputs.push(path);

    if config.diagnostics.dump_stats {
        for ds in std::iter::once(&bench.val).chain(&bench.targets) {
            for (si, stats) in stage_statistics(&net, ds)?.iter().enumerate() {
                let base = out_dir.join(format!("stats_{}_stage{}", ds.name, si + 1));
                let means = Tensor::new(
                    vec![stats.batch, stats.channels],
                    stats.mean.clone(),
                )?;
                let stds =
                    Tensor::new(vec![stats.batch, stats.channels], stats.std.clone())?;
                let mean_path = base.with_extension("mean.tsr");
                let std_path = base.with_extension("std.tsr");
                means.save_tsr(&mean_path)?;
                stds.save_tsr(&std_path)?;
                outputs.push(mean_path);
                outputs.push(std_path);
            }
        }
    }
    Ok(outputs)
}

/// Emit domain-gap and sensitivity reports for a checkpoint.
pub fn cmd_diagnose(
    config: &ExperimentConfig,
    out_dir: &Path,
    checkpoint: Option<&Path>,
    regen: bool,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let ckpt = resolve_checkpoint(out_dir, checkpoint)?;
    let manifest = read_manifest(&ckpt)?;
    let bench = resolve_benchmark(config, out_dir, regen)?;
    let outputs = match manifest.dtype {
        np_core::element::Dtype::F32 => diagnose_typed::<f32>(config, out_dir, &ckpt, &bench)?,
        np_core::element::Dtype::F64 => diagnose_typed::<f64>(config, out_dir, &ckpt, &bench)?,
    };
    write_run_record(out_dir, "diagnose", config, &outputs)?;
    Ok(())
}

/// Run the ablation sweep and write the raw, aggregated, and p-curve CSVs.
pub fn cmd_sweep(
    config: &ExperimentConfig,
    out_dir: &Path,
    jobs: Option<usize>,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let spec = config.sweep_spec(jobs);
    println!(
        "sweep: {} cells × {} seeds (jobs {})",
        spec.cells.len(),
        spec.seeds.len(),
        spec.jobs
    );
    let table = np_core::diagnostics::run_sweep(&spec)?;
    for (cell, reason) in &table.skipped {
        eprintln!("skipped {cell}: {reason}");
    }

    let rows_path = out_dir.join("sweep_rows.csv");
    fs::write(&rows_path, table.to_csv())?;
    let mean_path = out_dir.join("sweep_mean.csv");
    fs::write(&mean_path, table.aggregate_csv())?;

    // Fig-6-style probability curve: the p-grid cells only
    let mut p_curve = String::from("p,source_acc,target_mean\n");
    for agg in table.aggregate() {
        if agg.cell.starts_with('p') && agg.cell[1..].parse::<f64>().is_ok() {
            p_curve.push_str(&format!(
                "{},{},{}\n",
                agg.probability, agg.source_accuracy, agg.target_mean
            ));
        }
    }
    let p_path = out_dir.join("p_curve.csv");
    fs::write(&p_path, p_curve)?;

    let mut outputs = vec![rows_path, mean_path, p_path];
    if !table.skipped.is_empty() {
        let skipped_path = out_dir.join("skipped.json");
        fs::write(&skipped_path, serde_json::to_vec_pretty(&table.skipped)?)?;
        outputs.push(skipped_path);
    }
    for agg in table.aggregate() {
        println!(
            "{:<16} source {:.4} targets {:.4} (mmd_fog {:.5})",
            agg.cell, agg.source_accuracy, agg.target_mean, agg.final_stage_mmd_fog
        );
    }
    write_run_record(out_dir, "sweep", config, &outputs)?;
    Ok(())
}
