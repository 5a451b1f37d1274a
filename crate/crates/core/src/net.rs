//! Staged convolutional classifier with perturbation sites after configured
//! stages, an SGD-with-momentum training loop, evaluation, and checkpoint
//! serialization (JSON manifest plus `.tsr` weight blobs).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domains::Dataset;
use crate::element::{Dtype, Element};
use crate::error::{CoreError, Result};
use crate::np::{apply_site, NpMode, NpSiteConfig, SiteRng};
use crate::rng;
use crate::stats::{batch_stat_variance, channel_mean_std, StatVariance};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Numeric precision of a training run. `f32` for throughput; gradient
/// checks require `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> Dtype {
        match self {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
}

impl StageSpec {
    pub fn new(channels: usize, blocks: usize) -> Self {
        StageSpec { channels, blocks }
    }
}

/// Architecture: each stage is `blocks` × (conv3×3 + relu) at one spatial
/// resolution, with 2× max-pool downsampling between stages, then a global
/// average pool and a linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    #[serde(default)]
    pub np_sites: Vec<NpSiteConfig>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_channels: 3,
            input_size: 32,
            stages: vec![
                StageSpec::new(16, 1),
                StageSpec::new(32, 1),
                StageSpec::new(64, 1),
                StageSpec::new(128, 1),
            ],
            num_classes: 4,
            np_sites: Vec::new(),
        }
    }
}

impl NetworkConfig {
    /// Default backbone with perturbation after stages 1 and 2,
    /// p = 0.5, gaussian(1, 0.75).
    pub fn with_default_np() -> Self {
        let mut cfg = NetworkConfig::default();
        cfg.np_sites = default_np_sites();
        cfg
    }

    pub fn total_downsample(&self) -> usize {
        1 << (self.stages.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(CoreError::InvalidArgument("network needs ≥ 1 stage".into()));
        }
        if self.input_channels == 0 || self.num_classes == 0 {
            return Err(CoreError::InvalidArgument(
                "input channels and classes must be positive".into(),
            ));
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.blocks == 0) {
            return Err(CoreError::InvalidArgument(
                "stage channels and blocks must be positive".into(),
            ));
        }
        if self.input_size % self.total_downsample() != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "input size {} is not divisible by the total downsampling {}",
                self.input_size,
                self.total_downsample()
            )));
        }
        let mut seen = vec![false; self.stages.len() + 1];
        for site in &self.np_sites {
            site.validate()?;
            if site.stage > self.stages.len() {
                return Err(CoreError::InvalidArgument(format!(
                    "site stage {} exceeds {} stages",
                    site.stage,
                    self.stages.len()
                )));
            }
            if seen[site.stage] {
                return Err(CoreError::InvalidArgument(format!(
                    "duplicate site at stage {}",
                    site.stage
                )));
            }
            seen[site.stage] = true;
        }
        Ok(())
    }

    fn uses_np_plus(&self) -> bool {
        self.np_sites.iter().any(|s| s.mode == NpMode::NpPlus)
    }
}

/// Paper-default perturbation placement: stages 1–2, p = 0.5, G(1, 0.75).
pub fn default_np_sites() -> Vec<NpSiteConfig> {
    vec![
        NpSiteConfig::new(1, 0.5, crate::np::NoiseSpec::gaussian(1.0, 0.75)),
        NpSiteConfig::new(2, 0.5, crate::np::NoiseSpec::gaussian(1.0, 0.75)),
    ]
}

struct Param<E: Element> {
    name: String,
    value: Tensor<E>,
}

pub struct ToyNet<E: Element> {
    config: NetworkConfig,
    params: Vec<Param<E>>,
}

/// Handles produced by one forward pass on a tape.
pub struct NetForward {
    pub logits: Var,
    /// Clean (pre-perturbation) output of every stage, in order.
    pub stage_features: Vec<Var>,
    /// Leaf vars of the parameters, aligned with the net's parameter order.
    pub params: Vec<Var>,
}

impl<E: Element> ToyNet<E> {
    /// Fresh network with Kaiming-uniform fan-in initialization drawn from
    /// the `init` stream of `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init");
        let mut params = Vec::new();
        let mut in_ch = config.input_channels;
        for (si, stage) in config.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let fan_in = in_ch * 9;
                let bound = (6.0 / fan_in as f64).sqrt();
                params.push(Param {
                    name: format!("stage{}.block{}.conv.weight", si + 1, bi),
                    value: uniform_tensor(
                        vec![stage.channels, in_ch, 3, 3],
                        bound,
                        &mut rng,
                    )?,
                });
                params.push(Param {
                    name: format!("stage{}.block{}.conv.bias", si + 1, bi),
                    value: Tensor::zeros(vec![stage.channels])?,
                });
                in_ch = stage.channels;
            }
        }
        let fan_in = in_ch;
        let bound = (6.0 / fan_in as f64).sqrt();
        params.push(Param {
            name: "head.fc.weight".into(),
            value: uniform_tensor(vec![config.num_classes, in_ch], bound, &mut rng)?,
        });
        params.push(Param {
            name: "head.fc.bias".into(),
            value: Tensor::zeros(vec![config.num_classes])?,
        });
        Ok(ToyNet { config, params })
    }

    /// Single-stage 3-channel network whose stage-1 features reproduce the
    /// input exactly (identity conv, zero bias, inputs assumed non-negative
    /// so the relu passes through). Used to probe image-level channel
    /// sensitivity with the same interfaces as a trained model.
    pub fn passthrough_stem() -> Result<Self> {
        let config = NetworkConfig {
            input_channels: 3,
            input_size: 32,
            stages: vec![StageSpec::new(3, 1)],
            num_classes: 4,
            np_sites: Vec::new(),
        };
        let mut params = Vec::new();
        let mut w = vec![E::zero(); 3 * 3 * 9];
        for c in 0..3 {
            w[(c * 3 + c) * 9 + 4] = E::one(); // center tap of the own channel
        }
        params.push(Param {
            name: "stage1.block0.conv.weight".into(),
            value: Tensor::new(vec![3, 3, 3, 3], w)?,
        });
        params.push(Param {
            name: "stage1.block0.conv.bias".into(),
            value: Tensor::zeros(vec![3])?,
        });
        params.push(Param {
            name: "head.fc.weight".into(),
            value: Tensor::zeros(vec![4, 3])?,
        });
        params.push(Param {
            name: "head.fc.bias".into(),
            value: Tensor::zeros(vec![4])?,
        });
        Ok(ToyNet { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replace a parameter by name (used by checkpoint loading and tests).
    pub fn set_param(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let param = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| CoreError::InvalidArgument(format!("unknown parameter {name}")))?;
        if param.value.shape() != value.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "parameter {name} has shape {:?}, got {:?}",
                param.value.shape(),
                value.shape()
            )));
        }
        param.value = value;
        Ok(())
    }

    pub fn cast<F: Element>(&self) -> ToyNet<F> {
        ToyNet {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Run the network on a tape. Stage features are recorded before any
    /// perturbation, so diagnostics see the clean representation; sites are
    /// applied only when `training` is true.
    pub fn forward_on(
        &self,
        tape: &mut Tape<E>,
        images: Var,
        training: bool,
        mut site_rng: Option<&mut SiteRng>,
    ) -> Result<NetForward> {
        let shape = tape.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.input_channels {
            return Err(CoreError::ShapeMismatch(format!(
                "expected [B,{},H,W] images, got {shape:?}",
                self.config.input_channels
            )));
        }
        let down = self.config.total_downsample();
        if shape[2] % down != 0 || shape[3] % down != 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "spatial extent {}x{} is not divisible by the downsampling {down}",
                shape[2], shape[3]
            )));
        }

        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), true))
            .collect();

        let mut cur = images;
        let mut stage_features = Vec::with_capacity(self.config.stages.len());
        let mut pi = 0;
        for (si, stage) in self.config.stages.iter().enumerate() {
            for _ in 0..stage.blocks {
                let w = param_vars[pi];
                let b = param_vars[pi + 1];
                pi += 2;
                let conv = tape.conv2d(cur, w, b, 1, 1)?;
                cur = tape.relu(conv);
            }
            stage_features.push(cur);
            if training {
                if let Some(site) = self.config.np_sites.iter().find(|s| s.stage == si + 1) {
                    let rng = site_rng.as_deref_mut().ok_or_else(|| {
                        CoreError::InvalidArgument(
                            "training forward with perturbation sites needs an RNG".into(),
                        )
                    })?;
                    let delta = if site.mode == NpMode::NpPlus {
                        Some(site_delta(tape.value(cur))?)
                    } else {
                        None
                    };
                    cur = apply_site(tape, cur, site, delta.as_ref(), rng, true)?;
                }
            }
            if si + 1 < self.config.stages.len() {
                cur = tape.maxpool2(cur)?;
            }
        }
        let pooled = tape.global_avg_pool(cur)?;
        let logits = tape.linear(pooled, param_vars[pi], param_vars[pi + 1])?;
        Ok(NetForward {
            logits,
            stage_features,
            params: param_vars,
        })
    }

    /// Evaluation-mode forward returning logits and clean stage features.
    pub fn predict_full(&self, images: &Tensor<E>) -> Result<(Tensor<E>, Vec<Tensor<E>>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone(), false);
        let out = self.forward_on(&mut tape, x, false, None)?;
        let logits = tape.value(out.logits).clone();
        let feats = out
            .stage_features
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect();
        Ok((logits, feats))
    }

    pub fn predict(&self, images: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.predict_full(images)?.0)
    }
}

/// δ of the current mini-batch, detached from differentiation.
fn site_delta<E: Element>(features: &Tensor<E>) -> Result<StatVariance> {
    let stats = channel_mean_std(features)?;
    let means = Tensor::new(vec![stats.batch, stats.channels], stats.means_f64())?;
    batch_stat_variance(&means)
}

fn uniform_tensor<E: Element>(
    shape: Vec<usize>,
    bound: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Tensor<E>> {
    use rand::Rng;
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data)
}

// ── training ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Multiply the learning rate by `lr_decay_factor` from this epoch on
    /// (1-based); `None` keeps it constant.
    #[serde(default)]
    pub lr_decay_epoch: Option<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    /// Apply the photometric augmentation chain to each training image.
    #[serde(default)]
    pub photometric_augment: bool,
    /// Abort with diagnostics when a step produces NaN/Inf.
    #[serde(default = "default_true")]
    pub check_finite: bool,
}

fn default_true() -> bool {
    true
}

fn default_decay_factor() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            precision: Precision::F32,
            lr_decay_epoch: None,
            lr_decay_factor: 0.1,
            photometric_augment: false,
            check_finite: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::InvalidArgument("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch size must be ≥ 1".into()));
        }
        if self.learning_rate < 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(CoreError::InvalidArgument(
                "learning rate, momentum and weight decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

fn stack_batch<E: Element>(images: &[&Tensor<f32>]) -> Result<Tensor<E>> {
    let shape = images[0].shape();
    let per = images[0].numel();
    let mut data = Vec::with_capacity(images.len() * per);
    for img in images {
        if img.shape() != shape {
            return Err(CoreError::ShapeMismatch(
                "all images in a batch must share one shape".into(),
            ));
        }
        data.extend(img.data().iter().map(|&v| E::from_f64(v as f64)));
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(shape);
    Tensor::new(full, data)
}

fn argmax_rows<E: Element>(logits: &Tensor<E>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// SGD with momentum and weight decay. Records per-epoch train loss/accuracy
/// and, when a validation set is given, eval-mode loss and accuracy. The run
/// is reproducible bit-for-bit from `cfg.seed` in single-threaded mode.
pub fn train<E: Element>(
    net: &mut ToyNet<E>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    net.config.validate()?;
    if train_set.images.is_empty() {
        return Err(CoreError::InvalidArgument("empty training set".into()));
    }
    if net.config.uses_np_plus() && cfg.batch_size < 2 {
        return Err(CoreError::InvalidArgument(
            "np_plus sites need batch size ≥ 2".into(),
        ));
    }

    let mut order_rng = rng::stream(cfg.seed, "order");
    let mut augment_rng = rng::stream(cfg.seed, "augment");
    let mut site_rng = SiteRng::from_seed(cfg.seed);

    let mut velocity: Vec<Vec<E>> = net
        .params
        .iter()
        .map(|p| vec![E::zero(); p.value.numel()])
        .collect();
    let momentum = E::from_f64(cfg.momentum);
    let weight_decay = E::from_f64(cfg.weight_decay);

    let mut indices: Vec<usize> = (0..train_set.images.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let lr = match cfg.lr_decay_epoch {
            Some(at) if epoch >= at => {
                E::from_f64(cfg.learning_rate * cfg.lr_decay_factor)
            }
            _ => E::from_f64(cfg.learning_rate),
        };
        indices.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;

        for (step, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            // a lone remainder sample cannot define batch statistics
            if chunk.len() < 2 && net.config.uses_np_plus() {
                continue;
            }
            let mut owned: Vec<Tensor<f32>> = Vec::new();
            let mut refs: Vec<&Tensor<f32>> = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let img = &train_set.images[i];
                labels.push(img.label);
                if cfg.photometric_augment {
                    owned.push(crate::domains::photometric_augment(
                        &img.pixels,
                        &mut augment_rng,
                    )?);
                } else {
                    refs.push(&img.pixels);
                }
            }
            if cfg.photometric_augment {
                refs = owned.iter().collect();
            }
            let batch = stack_batch::<E>(&refs)?;

            let mut tape = Tape::new();
            let images = tape.leaf(batch, false);
            let out = net.forward_on(&mut tape, images, true, Some(&mut site_rng))?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            let loss_value = tape.value(loss).scalar_value()?.to_f64();
            tape.backward(loss)?;

            if cfg.check_finite {
                if !loss_value.is_finite() {
                    return Err(CoreError::NonFinite(format!(
                        "training diverged: loss {loss_value} at epoch {epoch} step {step}"
                    )));
                }
                for (pv, p) in out.params.iter().zip(&net.params) {
                    if let Some(g) = tape.grad_slice(*pv) {
                        if g.iter().any(|v| !v.is_finite()) {
                            return Err(CoreError::NonFinite(format!(
                                "gradient of {} is non-finite at epoch {epoch} step {step}",
                                p.name
                            )));
                        }
                    }
                }
            }

            let preds = argmax_rows(tape.value(out.logits));
            correct += preds
                .iter()
                .zip(&labels)
                .filter(|(p, l)| *p == *l)
                .count();
            seen += labels.len();
            loss_sum += loss_value * labels.len() as f64;

            for ((pv, param), vel) in out
                .params
                .iter()
                .zip(net.params.iter_mut())
                .zip(velocity.iter_mut())
            {
                let Some(grad) = tape.grad_slice(*pv) else {
                    continue;
                };
                let data = param.value.data_mut();
                for ((w, &g), v) in data.iter_mut().zip(grad).zip(vel.iter_mut()) {
                    *v = momentum * *v + g + weight_decay * *w;
                    *w -= lr * *v;
                }
            }
        }

        let train_loss = loss_sum / seen.max(1) as f64;
        let train_accuracy = correct as f64 / seen.max(1) as f64;
        let (val_loss, val_accuracy) = match val_set {
            Some(ds) => {
                let (l, a) = evaluate_with_loss(net, ds)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
        });
    }
    Ok(metrics)
}

const EVAL_BATCH: usize = 64;

/// Eval-mode accuracy over a dataset.
pub fn evaluate<E: Element>(net: &ToyNet<E>, dataset: &Dataset) -> Result<f64> {
    Ok(evaluate_with_loss(net, dataset)?.1)
}

/// Eval-mode (mean loss, accuracy) over a dataset.
pub fn evaluate_with_loss<E: Element>(net: &ToyNet<E>, dataset: &Dataset) -> Result<(f64, f64)> {
    if dataset.images.is_empty() {
        return Err(CoreError::InvalidArgument(format!(
            "empty dataset {}",
            dataset.name
        )));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for chunk in dataset.images.chunks(EVAL_BATCH) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().map(|img| &img.pixels).collect();
        let labels: Vec<usize> = chunk.iter().map(|img| img.label).collect();
        let batch = stack_batch::<E>(&refs)?;
        let mut tape = Tape::new();
        let images = tape.leaf(batch, false);
        let out = net.forward_on(&mut tape, images, false, None)?;
        let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
        loss_sum += tape.value(loss).scalar_value()?.to_f64() * labels.len() as f64;
        let preds = argmax_rows(tape.value(out.logits));
        correct += preds
            .iter()
            .zip(&labels)
            .filter(|(p, l)| *p == *l)
            .count();
    }
    let n = dataset.images.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

// ── checkpoints and metrics files ───────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: Dtype,
    pub epochs_trained: usize,
    pub network: NetworkConfig,
    pub train: Option<TrainConfig>,
    pub metrics: Vec<EpochMetrics>,
    pub params: Vec<ParamEntry>,
}

pub const CHECKPOINT_FORMAT: &str = "toynet-checkpoint-v1";

/// Write `manifest.json` plus one `.tsr` blob per parameter under
/// `dir/weights/`.
pub fn save_checkpoint<E: Element>(
    dir: impl AsRef<Path>,
    net: &ToyNet<E>,
    train: Option<&TrainConfig>,
    metrics: &[EpochMetrics],
) -> Result<()> {
    let dir = dir.as_ref();
    let weights = dir.join("weights");
    fs::create_dir_all(&weights)?;
    let mut entries = Vec::new();
    for (name, tensor) in net.params() {
        let file = format!("{}.tsr", name.replace('.', "_"));
        tensor.save_tsr(weights.join(&file))?;
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        dtype: E::DTYPE,
        epochs_trained: metrics.len(),
        network: net.config().clone(),
        train: train.cloned(),
        metrics: metrics.to_vec(),
        params: entries,
    };
    let mut file = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut file, &manifest)?;
    file.write_all(b"\n")?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let raw = fs::read(dir.as_ref().join("manifest.json"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&raw)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(CoreError::Format(format!(
            "unsupported checkpoint format {}",
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Rebuild a network from a checkpoint directory. The stored dtype must
/// match `E`.
pub fn load_checkpoint<E: Element>(
    dir: impl AsRef<Path>,
) -> Result<(ToyNet<E>, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.dtype != E::DTYPE {
        return Err(CoreError::Format(format!(
            "checkpoint dtype {} does not match requested {}",
            manifest.dtype,
            E::DTYPE
        )));
    }
    let mut net = ToyNet::<E>::new(manifest.network.clone(), 0)?;
    for entry in &manifest.params {
        let tensor = Tensor::<E>::load_tsr(dir.join("weights").join(&entry.file))?;
        net.set_param(&entry.name, tensor)?;
    }
    Ok((net, manifest))
}

/// Metrics CSV with one row per (epoch, split): `epoch,split,loss,accuracy`.
pub fn write_metrics_csv(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let mut out = String::from("epoch,split,loss,accuracy\n");
    for m in metrics {
        out.push_str(&format!(
            "{},train,{},{}\n",
            m.epoch, m.train_loss, m.train_accuracy
        ));
        if let (Some(l), Some(a)) = (m.val_loss, m.val_accuracy) {
            out.push_str(&format!("{},val,{},{}\n", m.epoch, l, a));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::LabeledImage;

    fn color_blob_dataset(n: usize, seed: u64) -> Dataset {
        // two classes linearly separable by mean color: class 0 red-heavy,
        // class 1 blue-heavy, small seeded jitter
        use rand::Rng;
        let mut rng = rng::stream(seed, "sanity");
        let mut images = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            let (r, b) = if label == 0 { (0.8, 0.2) } else { (0.2, 0.8) };
            let mut data = vec![0.0f32; 3 * 8 * 8];
            for (ci, base) in [(0usize, r), (1, 0.5), (2, b)] {
                for px in 0..64 {
                    let jitter: f64 = rng.gen_range(-0.05..0.05);
                    data[ci * 64 + px] = (base + jitter).clamp(0.0, 1.0) as f32;
                }
            }
            images.push(LabeledImage {
                pixels: Tensor::new(vec![3, 8, 8], data).unwrap(),
                label,
                domain: "sanity".into(),
                content_id: i as u64,
            });
        }
        Dataset {
            name: "sanity".into(),
            images,
        }
    }

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            input_channels: 3,
            input_size: 8,
            stages: vec![StageSpec::new(8, 1), StageSpec::new(16, 1)],
            num_classes: 2,
            np_sites: Vec::new(),
        }
    }

    #[test]
    fn separable_color_task_reaches_high_train_accuracy() {
        let ds = color_blob_dataset(200, 41);
        let mut net = ToyNet::<f32>::new(tiny_config(), 7).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let metrics = train(&mut net, &ds, None, &cfg).unwrap();
        let acc = evaluate(&net, &ds).unwrap();
        assert!(acc >= 0.95, "train-set accuracy {acc}");
        assert!(
            metrics.last().unwrap().train_loss < metrics[0].train_loss,
            "loss should decrease"
        );
    }

    #[test]
    fn loss_decreases_across_seeds() {
        for seed in [1u64, 2, 3] {
            let ds = color_blob_dataset(128, 50 + seed);
            let mut net = ToyNet::<f32>::new(tiny_config(), seed).unwrap();
            let cfg = TrainConfig {
                epochs: 10,
                batch_size: 16,
                seed,
                ..TrainConfig::default()
            };
            let metrics = train(&mut net, &ds, None, &cfg).unwrap();
            assert!(
                metrics[9].train_loss < metrics[0].train_loss,
                "seed {seed}: loss {} → {}",
                metrics[0].train_loss,
                metrics[9].train_loss
            );
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let ds = color_blob_dataset(32, 42);
        let mut net = ToyNet::<f64>::new(tiny_config(), 3).unwrap();
        let before: Vec<Vec<f64>> = net.params().map(|(_, t)| t.data().to_vec()).collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.0,
            precision: Precision::F64,
            ..TrainConfig::default()
        };
        let metrics = train(&mut net, &ds, None, &cfg).unwrap();
        let after: Vec<Vec<f64>> = net.params().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
        assert!((metrics[0].train_loss - metrics[1].train_loss).abs() < 1e-12);
    }

    #[test]
    fn same_seed_reproduces_identical_weights() {
        let ds = color_blob_dataset(48, 43);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            precision: Precision::F64,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = ToyNet::<f64>::new(tiny_config(), 5).unwrap();
            train(&mut net, &ds, None, &cfg).unwrap();
            net.params()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn eval_is_transparent_to_perturbation_sites() {
        let ds = color_blob_dataset(16, 44);
        let plain = ToyNet::<f64>::new(tiny_config(), 11).unwrap();
        let mut with_sites_cfg = tiny_config();
        with_sites_cfg.np_sites = vec![NpSiteConfig::new(
            1,
            1.0,
            crate::np::NoiseSpec::gaussian(1.0, 0.75),
        )];
        let with_sites = ToyNet::<f64>::new(with_sites_cfg, 11).unwrap();
        let refs: Vec<&Tensor<f32>> = ds.images.iter().map(|i| &i.pixels).collect();
        let batch = stack_batch::<f64>(&refs).unwrap();
        let a = plain.predict(&batch).unwrap();
        let b = with_sites.predict(&batch).unwrap();
        assert_eq!(a, b, "identical seeds must give bit-identical eval logits");
    }

    #[test]
    fn training_forward_is_deterministic_under_cloned_rng() {
        let ds = color_blob_dataset(8, 45);
        let mut cfg = tiny_config();
        cfg.np_sites = vec![NpSiteConfig::new(
            1,
            1.0,
            crate::np::NoiseSpec::gaussian(1.0, 0.75),
        )];
        let net = ToyNet::<f64>::new(cfg, 13).unwrap();
        let refs: Vec<&Tensor<f32>> = ds.images.iter().map(|i| &i.pixels).collect();
        let batch = stack_batch::<f64>(&refs).unwrap();
        let rng = SiteRng::from_seed(99);
        let run = |mut r: SiteRng| {
            let mut tape = Tape::new();
            let x = tape.leaf(batch.clone(), false);
            let out = net.forward_on(&mut tape, x, true, Some(&mut r)).unwrap();
            tape.value(out.logits).clone()
        };
        assert_eq!(run(rng.clone()), run(rng.clone()));
        // eval-mode forward must ignore the rng entirely
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), false);
        let eval_a = net.forward_on(&mut tape, x, false, None).unwrap();
        let eval_b = net.predict(&batch).unwrap();
        assert_eq!(tape.value(eval_a.logits), &eval_b);
    }

    #[test]
    fn random_net_on_balanced_classes_is_near_chance() {
        let ds = color_blob_dataset(400, 46);
        let net = ToyNet::<f32>::new(tiny_config(), 77).unwrap();
        let acc = evaluate(&net, &ds).unwrap();
        // binomial 3σ band around 1/K for K=2, n=400
        let k = 2.0f64;
        let tol = 3.0 * ((1.0 / k) * (1.0 - 1.0 / k) / 400.0).sqrt();
        assert!(
            (acc - 1.0 / k).abs() <= tol + 0.25,
            "accuracy {acc} too far from chance"
        );
    }

    #[test]
    fn single_sample_dataset_evaluates_to_zero_or_one() {
        let ds = color_blob_dataset(1, 47);
        let net = ToyNet::<f32>::new(tiny_config(), 1).unwrap();
        let acc = evaluate(&net, &ds).unwrap();
        assert!(acc == 0.0 || acc == 1.0);
        let empty = Dataset {
            name: "empty".into(),
            images: Vec::new(),
        };
        assert!(evaluate(&net, &empty).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_weights_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let net = ToyNet::<f32>::new(tiny_config(), 21).unwrap();
        save_checkpoint(dir.path(), &net, None, &[]).unwrap();
        let (back, manifest) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(manifest.dtype, Dtype::F32);
        for ((_, a), (_, b)) in net.params().zip(back.params()) {
            assert_eq!(a, b);
        }
        assert!(load_checkpoint::<f64>(dir.path()).is_err());
    }

    #[test]
    fn passthrough_stem_reproduces_inputs_at_stage_one() {
        let net = ToyNet::<f64>::passthrough_stem().unwrap();
        let img = Tensor::new(
            vec![1, 3, 4, 4],
            (0..48).map(|i| i as f64 / 48.0).collect(),
        )
        .unwrap();
        let (_, feats) = net.predict_full(&img).unwrap();
        assert_eq!(&feats[0], &img);
    }
}
