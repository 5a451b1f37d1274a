//! Experiment configuration: one JSON file with strict schema validation
//! (unknown keys rejected) describing the dataset, network, training,
//! perturbation, and diagnostics sections. A single top-level seed drives
//! every component through named sub-streams.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use np_core::diagnostics::{Embedding, SweepCell, SweepSpec};
use np_core::domains::BenchmarkSizes;
use np_core::net::{NetworkConfig, Precision, StageSpec, TrainConfig};
use np_core::np::{GateGranularity, Granularity, NoiseSpec, NpMode, NpSiteConfig};
use np_core::rng::split_seed;
use np_core::stats::Kernel;

/// Baked-in defaults, also shipped as `default.json` at the repository root.
pub const DEFAULT_CONFIG_JSON: &str = include_str!("../../../default.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub network: NetworkSection,
    pub training: TrainingSection,
    pub np: NpSection,
    pub diagnostics: DiagnosticsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Where the benchmark is persisted; relative paths resolve against the
    /// output directory. `None` keeps the benchmark in memory.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    pub sizes: BenchmarkSizes,
    /// Regenerate from the seed even when a persisted copy exists.
    #[serde(default)]
    pub regenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub input_channels: usize,
    pub input_size: usize,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub precision: Precision,
    #[serde(default)]
    pub lr_decay_epoch: Option<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_true")]
    pub check_finite: bool,
}

fn default_true() -> bool {
    true
}

fn default_decay_factor() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpSection {
    /// Perturbation sites attached to the network for training.
    #[serde(default)]
    pub sites: Vec<NpSiteConfig>,
    /// Switch every site to the sensitivity-weighted variant.
    #[serde(default)]
    pub use_np_plus: bool,
    /// Photometric augmentation of training images.
    #[serde(default)]
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub kernel: Kernel,
    pub embedding: Embedding,
    /// Stage probed by the sensitivity ranking.
    pub sensitivity_stage: usize,
    /// Also dump per-stage statistic matrices as `.tsr` for external
    /// plotting.
    #[serde(default)]
    pub dump_stats: bool,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub seeds: Vec<u64>,
    /// Gating-probability grid; sites follow `reference_sites`.
    pub p_grid: Vec<f64>,
    /// Noise families compared at the reference probability.
    pub noise_grid: Vec<NoiseSpec>,
    /// Site placements compared at the reference probability and noise.
    pub placements: Vec<Vec<usize>>,
    /// Element- and position-level comparators.
    pub granularities: Vec<Granularity>,
    /// Add the sensitivity-weighted variant (with and without augmentation)
    /// and the augmented plain variant.
    #[serde(default = "default_true")]
    pub include_np_plus: bool,
    /// Explicit cells override the generated grid entirely when non-empty.
    #[serde(default)]
    pub cells: Vec<SweepCell>,
    /// Worker threads; 1 is serial.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    pub reference_probability: f64,
    pub reference_noise: NoiseSpec,
    pub reference_sites: Vec<usize>,
    /// Gate granularity applied to every generated cell.
    #[serde(default = "default_gate")]
    pub reference_gate: GateGranularity,
}

fn default_jobs() -> usize {
    1
}

fn default_gate() -> GateGranularity {
    GateGranularity::PerBatch
}

impl ExperimentConfig {
    /// Parse a config file, or fall back to the embedded defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let config: ExperimentConfig = match path {
            Some(p) => {
                let raw = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&raw)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => serde_json::from_str(DEFAULT_CONFIG_JSON)
                .context("parsing embedded default config")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.network_config()
            .validate()
            .context("network section")?;
        self.train_config().validate().context("training section")?;
        for noise in &self.diagnostics.sweep.noise_grid {
            noise
                .validate(np_core::np::DEFAULT_MEAN_WINDOW)
                .context("sweep noise grid")?;
        }
        Ok(())
    }

    /// Network with the perturbation sites from the np section attached.
    pub fn network_config(&self) -> NetworkConfig {
        let mut sites = self.np.sites.clone();
        if self.np.use_np_plus {
            for site in &mut sites {
                site.mode = NpMode::NpPlus;
            }
        }
        NetworkConfig {
            input_channels: self.network.input_channels,
            input_size: self.network.input_size,
            stages: self.network.stages.clone(),
            num_classes: self.network.num_classes,
            np_sites: sites,
        }
    }

    /// Training configuration with the derived seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            momentum: self.training.momentum,
            weight_decay: self.training.weight_decay,
            seed: split_seed(self.seed, "train"),
            precision: self.training.precision,
            lr_decay_epoch: self.training.lr_decay_epoch,
            lr_decay_factor: self.training.lr_decay_factor,
            photometric_augment: self.np.augment,
            check_finite: self.training.check_finite,
        }
    }

    pub fn benchmark_seed(&self) -> u64 {
        split_seed(self.seed, "benchmark")
    }

    pub fn model_seed(&self) -> u64 {
        split_seed(self.seed, "model")
    }

    /// Expand the sweep section into concrete cells (unless explicit cells
    /// are given). Duplicate configurations are dropped, keeping the first
    /// id, so e.g. the reference placement does not run twice.
    pub fn sweep_spec(&self, jobs_override: Option<usize>) -> SweepSpec {
        let s = &self.diagnostics.sweep;
        let mut cells: Vec<SweepCell> = Vec::new();
        if s.cells.is_empty() {
            for &p in &s.p_grid {
                cells.push(SweepCell::np(
                    format!("p{p:.2}"),
                    &s.reference_sites,
                    p,
                    s.reference_noise.clone(),
                ));
            }
            for noise in &s.noise_grid {
                cells.push(SweepCell::np(
                    format!("noise_{noise}"),
                    &s.reference_sites,
                    s.reference_probability,
                    noise.clone(),
                ));
            }
            for placement in &s.placements {
                let label: Vec<String> = placement.iter().map(|p| p.to_string()).collect();
                cells.push(SweepCell::np(
                    format!("stages_{}", label.join("+")),
                    placement,
                    s.reference_probability,
                    s.reference_noise.clone(),
                ));
            }
            for &granularity in &s.granularities {
                let mut cell = SweepCell::np(
                    format!("gran_{granularity}"),
                    &s.reference_sites,
                    s.reference_probability,
                    s.reference_noise.clone(),
                );
                cell.granularity = granularity;
                cells.push(cell);
            }
            if s.include_np_plus {
                let mut np_plus = SweepCell::np(
                    "np_plus",
                    &s.reference_sites,
                    s.reference_probability,
                    s.reference_noise.clone(),
                );
                np_plus.mode = NpMode::NpPlus;
                let mut np_plus_aug = np_plus.clone();
                np_plus_aug.id = "np_plus_aug".into();
                np_plus_aug.augment = true;
                let mut np_aug = SweepCell::np(
                    "np_aug",
                    &s.reference_sites,
                    s.reference_probability,
                    s.reference_noise.clone(),
                );
                np_aug.augment = true;
                cells.extend([np_plus, np_plus_aug, np_aug]);
            }
            for cell in &mut cells {
                cell.gate = s.reference_gate;
            }
            // drop config duplicates (e.g. the reference placement equals the
            // reference-probability row)
            let mut unique: Vec<SweepCell> = Vec::new();
            for cell in cells {
                let dup = unique.iter().any(|c| {
                    c.sites == cell.sites
                        && c.probability == cell.probability
                        && c.mode == cell.mode
                        && c.noise == cell.noise
                        && c.granularity == cell.granularity
                        && c.gate == cell.gate
                        && c.augment == cell.augment
                });
                if !dup {
                    unique.push(cell);
                }
            }
            cells = unique;
        } else {
            cells = s.cells.clone();
        }
        SweepSpec {
            cells,
            seeds: s.seeds.clone(),
            network: NetworkConfig {
                np_sites: Vec::new(),
                ..self.network_config()
            },
            train: self.train_config(),
            sizes: self.dataset.sizes,
            mmd_kernel: self.diagnostics.kernel.clone(),
            jobs: jobs_override.unwrap_or(s.jobs),
        }
    }
}
