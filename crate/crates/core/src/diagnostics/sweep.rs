//! Ablation sweep runner: trains one model per (configuration cell, seed)
//! on the synthetic benchmark, evaluates source and target accuracy, and
//! measures the final-stage source↔fog feature-statistic gap. Cells are
//! independent; with `jobs > 1` they run on a thread pool while each cell
//! stays internally single-threaded and seed-deterministic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domains::{make_benchmark, Benchmark, BenchmarkSizes};
use crate::element::Element;
use crate::error::{CoreError, Result};
use crate::net::{evaluate, train, NetworkConfig, Precision, ToyNet, TrainConfig};
use crate::np::{GateGranularity, Granularity, NoiseSpec, NpMode, NpSiteConfig};
use crate::rng;
use crate::stats::Kernel;

use super::gap::{stage_gap, Embedding};

/// One sweep configuration: which stages carry perturbation sites and how
/// they are parameterized. An empty `sites` list (or `probability` 0) is the
/// baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub id: String,
    pub sites: Vec<usize>,
    pub probability: f64,
    #[serde(default = "default_mode")]
    pub mode: NpMode,
    pub noise: NoiseSpec,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default = "default_gate")]
    pub gate: GateGranularity,
    #[serde(default)]
    pub augment: bool,
}

fn default_mode() -> NpMode {
    NpMode::Np
}
fn default_granularity() -> Granularity {
    Granularity::Channel
}
fn default_gate() -> GateGranularity {
    GateGranularity::PerBatch
}

impl SweepCell {
    pub fn np(id: impl Into<String>, sites: &[usize], probability: f64, noise: NoiseSpec) -> Self {
        SweepCell {
            id: id.into(),
            sites: sites.to_vec(),
            probability,
            mode: NpMode::Np,
            noise,
            granularity: Granularity::Channel,
            gate: GateGranularity::PerBatch,
            augment: false,
        }
    }

    fn sites_label(&self) -> String {
        if self.sites.is_empty() {
            "-".into()
        } else {
            self.sites
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join("+")
        }
    }

    fn network_config(&self, base: &NetworkConfig) -> Result<NetworkConfig> {
        let mut cfg = base.clone();
        cfg.np_sites = self
            .sites
            .iter()
            .map(|&stage| {
                let mut site = NpSiteConfig::new(stage, self.probability, self.noise.clone());
                site.mode = self.mode;
                site.granularity = self.granularity;
                site.gate = self.gate;
                site
            })
            .collect();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub cells: Vec<SweepCell>,
    pub seeds: Vec<u64>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub sizes: BenchmarkSizes,
    pub mmd_kernel: Kernel,
    /// 1 runs cells serially; larger values size the worker pool.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: String,
    pub seed: u64,
    pub sites: String,
    pub probability: f64,
    pub mode: NpMode,
    pub noise: String,
    pub granularity: Granularity,
    pub augment: bool,
    pub source_accuracy: f64,
    pub target_accuracies: Vec<(String, f64)>,
    pub target_mean: f64,
    /// Final-stage MMD between source-val and fog-target features.
    pub final_stage_mmd_fog: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub cell: String,
    pub sites: String,
    pub probability: f64,
    pub mode: NpMode,
    pub noise: String,
    pub granularity: Granularity,
    pub augment: bool,
    pub seeds: usize,
    pub source_accuracy: f64,
    pub target_accuracies: Vec<(String, f64)>,
    pub target_mean: f64,
    pub target_mean_range: (f64, f64),
    pub final_stage_mmd_fog: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Cells that could not run, with the reason.
    pub skipped: Vec<(String, String)>,
    pub target_names: Vec<String>,
}

impl SweepTable {
    /// Mean over seeds per cell, in the order cells first appear.
    pub fn aggregate(&self) -> Vec<SweepAggregate> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<String, Vec<&SweepRow>> = BTreeMap::new();
        for row in &self.rows {
            if !groups.contains_key(&row.cell) {
                order.push(row.cell.clone());
            }
            groups.entry(row.cell.clone()).or_default().push(row);
        }
        order
            .into_iter()
            .map(|cell| {
                let rows = &groups[&cell];
                let n = rows.len() as f64;
                let mean = |f: &dyn Fn(&SweepRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
                let target_accuracies = self
                    .target_names
                    .iter()
                    .enumerate()
                    .map(|(ti, name)| {
                        (
                            name.clone(),
                            rows.iter().map(|r| r.target_accuracies[ti].1).sum::<f64>() / n,
                        )
                    })
                    .collect();
                let t_means: Vec<f64> = rows.iter().map(|r| r.target_mean).collect();
                SweepAggregate {
                    cell,
                    sites: rows[0].sites.clone(),
                    probability: rows[0].probability,
                    mode: rows[0].mode,
                    noise: rows[0].noise.clone(),
                    granularity: rows[0].granularity,
                    augment: rows[0].augment,
                    seeds: rows.len(),
                    source_accuracy: mean(&|r| r.source_accuracy),
                    target_accuracies,
                    target_mean: mean(&|r| r.target_mean),
                    target_mean_range: (
                        t_means.iter().cloned().fold(f64::INFINITY, f64::min),
                        t_means.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    ),
                    final_stage_mmd_fog: mean(&|r| r.final_stage_mmd_fog),
                }
            })
            .collect()
    }

    pub fn find_aggregate<'a>(
        aggregates: &'a [SweepAggregate],
        cell: &str,
    ) -> Option<&'a SweepAggregate> {
        aggregates.iter().find(|a| a.cell == cell)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,seed,sites,probability,mode,noise,granularity,augment,source_acc");
        for name in &self.target_names {
            let _ = write!(out, ",acc_{name}");
        }
        out.push_str(",target_mean,mmd_fog_final\n");
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.cell,
                r.seed,
                r.sites,
                r.probability,
                r.mode,
                r.noise,
                r.granularity,
                r.augment,
                r.source_accuracy
            );
            for (_, acc) in &r.target_accuracies {
                let _ = write!(out, ",{acc}");
            }
            let _ = writeln!(out, ",{},{}", r.target_mean, r.final_stage_mmd_fog);
        }
        out
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out =
            String::from("cell,sites,probability,mode,noise,granularity,augment,seeds,source_acc");
        for name in &self.target_names {
            let _ = write!(out, ",acc_{name}");
        }
        out.push_str(",target_mean,target_mean_min,target_mean_max,mmd_fog_final\n");
        for a in self.aggregate() {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                a.cell,
                a.sites,
                a.probability,
                a.mode,
                a.noise,
                a.granularity,
                a.augment,
                a.seeds,
                a.source_accuracy
            );
            for (_, acc) in &a.target_accuracies {
                let _ = write!(out, ",{acc}");
            }
            let _ = writeln!(
                out,
                ",{},{},{},{}",
                a.target_mean, a.target_mean_range.0, a.target_mean_range.1, a.final_stage_mmd_fog
            );
        }
        out
    }
}

fn run_cell<E: Element>(
    cell: &SweepCell,
    seed: u64,
    bench: &Benchmark,
    spec: &SweepSpec,
) -> Result<SweepRow> {
    let net_cfg = cell.network_config(&spec.network)?;
    let mut train_cfg = spec.train.clone();
    // the training seed must not depend on the cell, so that a p=0 cell and
    // an explicitly perturbation-free cell reproduce identical runs
    train_cfg.seed = rng::split_seed(seed, "train");
    train_cfg.photometric_augment = cell.augment;

    let mut net = ToyNet::<E>::new(net_cfg, rng::split_seed(seed, "model"))?;
    train(&mut net, &bench.train, None, &train_cfg)?;

    let source_accuracy = evaluate(&net, &bench.val)?;
    let mut target_accuracies = Vec::with_capacity(bench.targets.len());
    let mut target_sum = 0.0;
    for target in &bench.targets {
        let acc = evaluate(&net, target)?;
        target_sum += acc;
        target_accuracies.push((target.name.clone(), acc));
    }
    let gap = stage_gap(
        &net,
        &format!("{}#{}", cell.id, seed),
        &bench.val,
        &bench.targets[0],
        &spec.mmd_kernel,
        Embedding::Raw,
    )?;
    Ok(SweepRow {
        cell: cell.id.clone(),
        seed,
        sites: cell.sites_label(),
        probability: cell.probability,
        mode: cell.mode,
        noise: cell.noise.to_string(),
        granularity: cell.granularity,
        augment: cell.augment,
        source_accuracy,
        target_accuracies,
        target_mean: target_sum / bench.targets.len().max(1) as f64,
        final_stage_mmd_fog: gap.final_stage_mmd(),
    })
}

fn run_typed<E: Element>(spec: &SweepSpec) -> Result<SweepTable> {
    if spec.cells.is_empty() || spec.seeds.is_empty() {
        return Err(CoreError::InvalidArgument(
            "sweep needs at least one cell and one seed".into(),
        ));
    }
    spec.train.validate()?;

    let mut benchmarks: BTreeMap<u64, Benchmark> = BTreeMap::new();
    for &seed in &spec.seeds {
        benchmarks.insert(
            seed,
            make_benchmark(rng::split_seed(seed, "benchmark"), spec.sizes)?,
        );
    }
    let target_names = benchmarks
        .values()
        .next()
        .map(|b| b.targets.iter().map(|t| t.name.clone()).collect())
        .unwrap_or_default();

    // Validate cells upfront; invalid cells are skipped with a reason.
    let mut skipped = Vec::new();
    let mut runnable = Vec::new();
    for cell in &spec.cells {
        match cell.network_config(&spec.network) {
            Ok(_) => runnable.push(cell),
            Err(e) => skipped.push((cell.id.clone(), e.to_string())),
        }
    }

    let tasks: Vec<(usize, &SweepCell, u64)> = runnable
        .iter()
        .enumerate()
        .flat_map(|(ci, &cell)| {
            spec.seeds
                .iter()
                .enumerate()
                .map(move |(si, &seed)| (ci * spec.seeds.len() + si, cell, seed))
        })
        .collect();

    let run_one = |(_, cell, seed): &(usize, &SweepCell, u64)| -> (String, Result<SweepRow>) {
        (
            cell.id.clone(),
            run_cell::<E>(cell, *seed, &benchmarks[seed], spec),
        )
    };

    let outcomes: Vec<(String, Result<SweepRow>)> = if spec.jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.jobs)
            .build()
            .map_err(|e| CoreError::InvalidArgument(format!("worker pool: {e}")))?;
        pool.install(|| tasks.par_iter().map(run_one).collect())
    } else {
        tasks.iter().map(run_one).collect()
    };

    let mut rows = Vec::with_capacity(outcomes.len());
    for (cell_id, outcome) in outcomes {
        match outcome {
            Ok(row) => rows.push(row),
            Err(e) => skipped.push((cell_id, e.to_string())),
        }
    }
    Ok(SweepTable {
        rows,
        skipped,
        target_names,
    })
}

/// Train and evaluate every (cell, seed) pair of the sweep. The training
/// precision comes from `spec.train.precision`.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepTable> {
    match spec.train.precision {
        Precision::F32 => run_typed::<f32>(spec),
        Precision::F64 => run_typed::<f64>(spec),
    }
}
