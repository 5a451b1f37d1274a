//! Feature channel statistics: per-sample instance statistics (μ_c, σ_c),
//! cross-batch statistic variance with its normalized form δ, the AdaIN
//! transform for channel-subset style probing, and maximum mean discrepancy
//! between statistic samples. All operations are pure functions.

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Per-sample, per-channel spatial mean and standard deviation of a feature
/// map; row-major `B×C`. The standard deviation uses the population estimator
/// (divide by H·W), matching instance-normalization convention.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats<E: Element> {
    pub batch: usize,
    pub channels: usize,
    pub mean: Vec<E>,
    pub std: Vec<E>,
}

/// Channel statistics estimated from style images; same layout as
/// [`ChannelStats`].
pub type StyleStats<E> = ChannelStats<E>;

impl<E: Element> ChannelStats<E> {
    pub fn new(batch: usize, channels: usize, mean: Vec<E>, std: Vec<E>) -> Result<Self> {
        if mean.len() != batch * channels || std.len() != batch * channels {
            return Err(CoreError::ShapeMismatch(format!(
                "channel stats for {batch}×{channels} need {} values, got mean {} / std {}",
                batch * channels,
                mean.len(),
                std.len()
            )));
        }
        if let Some(s) = std.iter().find(|s| **s < E::zero()) {
            return Err(CoreError::InvalidArgument(format!(
                "negative standard deviation {s}"
            )));
        }
        Ok(ChannelStats {
            batch,
            channels,
            mean,
            std,
        })
    }

    #[inline]
    pub fn mean_at(&self, b: usize, c: usize) -> E {
        self.mean[b * self.channels + c]
    }

    #[inline]
    pub fn std_at(&self, b: usize, c: usize) -> E {
        self.std[b * self.channels + c]
    }

    pub fn means_f64(&self) -> Vec<f64> {
        self.mean.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<F: Element>(&self) -> ChannelStats<F> {
        ChannelStats {
            batch: self.batch,
            channels: self.channels,
            mean: self.mean.iter().map(|v| F::from_f64(v.to_f64())).collect(),
            std: self.std.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Instance statistics of `x[B,C,H,W]` over the spatial axes.
pub fn channel_mean_std<E: Element>(x: &Tensor<E>) -> Result<ChannelStats<E>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(CoreError::ShapeMismatch(format!(
            "channel_mean_std expects [B,C,H,W], got {s:?}"
        )));
    }
    let (batch, channels, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    if plane == 0 {
        return Err(CoreError::InvalidArgument(
            "channel_mean_std needs a non-empty spatial extent".into(),
        ));
    }
    let inv = E::from_f64(1.0 / plane as f64);
    let data = x.data();
    let mut mean = vec![E::zero(); batch * channels];
    let mut std = vec![E::zero(); batch * channels];
    for bc in 0..batch * channels {
        let slice = &data[bc * plane..(bc + 1) * plane];
        let mut mu = E::zero();
        for &v in slice {
            mu += v;
        }
        mu *= inv;
        let mut var = E::zero();
        for &v in slice {
            let d = v - mu;
            var += d * d;
        }
        var *= inv;
        mean[bc] = mu;
        // guard tiny negative rounding before the square root
        std[bc] = var.max_of(E::zero()).sqrt();
    }
    ChannelStats::new(batch, channels, mean, std)
}

/// Cross-batch variance of channel means and its max-normalized form δ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatVariance {
    /// Δ: per-channel variance of means across the batch.
    pub delta_raw: Vec<f64>,
    /// μ̄_c: per-channel mean of means.
    pub mean_of_means: Vec<f64>,
    /// δ = Δ / max(Δ) ∈ [0,1]; all zeros when max(Δ) == 0.
    pub delta: Vec<f64>,
}

/// Variance of per-sample channel means across a batch (population form),
/// normalized per channel by the maximum. Needs at least two samples.
pub fn batch_stat_variance(means: &Tensor<f64>) -> Result<StatVariance> {
    let s = means.shape();
    if s.len() != 2 {
        return Err(CoreError::ShapeMismatch(format!(
            "batch_stat_variance expects [B,C] means, got {s:?}"
        )));
    }
    let (batch, channels) = (s[0], s[1]);
    if batch < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "batch_stat_variance needs B ≥ 2, got {batch}"
        )));
    }
    let data = means.data();
    let mut mean_of_means = vec![0.0; channels];
    for row in data.chunks_exact(channels) {
        for (m, &v) in mean_of_means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean_of_means {
        *m /= batch as f64;
    }
    let mut delta_raw = vec![0.0; channels];
    for row in data.chunks_exact(channels) {
        for ((d, &v), &m) in delta_raw.iter_mut().zip(row).zip(&mean_of_means) {
            let dev = v - m;
            *d += dev * dev;
        }
    }
    for d in &mut delta_raw {
        *d /= batch as f64;
    }
    let max = delta_raw.iter().cloned().fold(0.0f64, f64::max);
    let delta = if max > 0.0 {
        delta_raw.iter().map(|&d| d / max).collect()
    } else {
        vec![0.0; channels]
    };
    Ok(StatVariance {
        delta_raw,
        mean_of_means,
        delta,
    })
}

/// AdaIN restricted to a channel mask: for masked channels
/// `y = σ_s·(x−μ_c)/(σ_c+eps) + μ_s`; unmasked channels pass through.
pub fn adain_transfer(
    x: &Tensor<f64>,
    content: &ChannelStats<f64>,
    style: &StyleStats<f64>,
    mask: &[bool],
    eps: f64,
) -> Result<Tensor<f64>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(CoreError::ShapeMismatch(format!(
            "adain_transfer expects [B,C,H,W], got {s:?}"
        )));
    }
    let (batch, channels, h, w) = (s[0], s[1], s[2], s[3]);
    if content.batch != batch
        || content.channels != channels
        || style.batch != batch
        || style.channels != channels
    {
        return Err(CoreError::ShapeMismatch(format!(
            "stats {}×{} / {}×{} do not match features {batch}×{channels}",
            content.batch, content.channels, style.batch, style.channels
        )));
    }
    if mask.len() != channels {
        return Err(CoreError::ShapeMismatch(format!(
            "mask has {} entries for {channels} channels",
            mask.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "adain_transfer needs eps > 0, got {eps}"
        )));
    }
    let plane = h * w;
    let mut out = x.data().to_vec();
    for bi in 0..batch {
        for (ci, &on) in mask.iter().enumerate() {
            if !on {
                continue;
            }
            let mu_c = content.mean_at(bi, ci);
            let sd_c = content.std_at(bi, ci);
            let mu_s = style.mean_at(bi, ci);
            let sd_s = style.std_at(bi, ci);
            let denom = sd_c + eps;
            let base = (bi * channels + ci) * plane;
            for v in &mut out[base..base + plane] {
                *v = sd_s * (*v - mu_c) / denom + mu_s;
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Kernel for the MMD estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    /// `k(x,y) = exp(−‖x−y‖² / (2σ²))`; `bandwidth: None` selects σ by the
    /// median pairwise distance over X∪Y (1.0 when all points coincide).
    Rbf { bandwidth: Option<f64> },
}

impl Kernel {
    pub fn rbf_median() -> Self {
        Kernel::Rbf { bandwidth: None }
    }
}

/// Median of pairwise Euclidean distances over the pooled sample; falls back
/// to 1.0 when every pair coincides.
pub fn rbf_median_bandwidth(points: &[Vec<f64>]) -> f64 {
    let mut dists = Vec::with_capacity(points.len() * (points.len().saturating_sub(1)) / 2);
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            dists.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let n = dists.len();
    let median = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Biased empirical MMD² estimate:
/// `mean k(X,X) + mean k(Y,Y) − 2 mean k(X,Y)` over all pairs including
/// self-pairs. Non-negative for PSD kernels up to rounding.
pub fn mmd(x: &[Vec<f64>], y: &[Vec<f64>], kernel: &Kernel) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(CoreError::InvalidArgument(
            "mmd needs at least one sample on each side".into(),
        ));
    }
    let dim = x[0].len();
    if x.iter().chain(y).any(|v| v.len() != dim) {
        return Err(CoreError::ShapeMismatch(
            "mmd samples must share one dimension".into(),
        ));
    }
    let eval: Box<dyn Fn(&[f64], &[f64]) -> f64> = match kernel {
        Kernel::Linear => Box::new(dot),
        Kernel::Rbf { bandwidth } => {
            let sigma = match bandwidth {
                Some(s) => {
                    if !(*s > 0.0) {
                        return Err(CoreError::InvalidArgument(format!(
                            "rbf bandwidth must be positive, got {s}"
                        )));
                    }
                    *s
                }
                None => {
                    let pooled: Vec<Vec<f64>> = x.iter().chain(y).cloned().collect();
                    rbf_median_bandwidth(&pooled)
                }
            };
            let denom = 2.0 * sigma * sigma;
            Box::new(move |a: &[f64], b: &[f64]| (-sq_dist(a, b) / denom).exp())
        }
    };
    let mean_kernel = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        let mut acc = 0.0;
        for va in a {
            for vb in b {
                acc += eval(va, vb);
            }
        }
        acc / (a.len() * b.len()) as f64
    };
    Ok(mean_kernel(x, x) + mean_kernel(y, y) - 2.0 * mean_kernel(x, y))
}

/// Per-sample embedding fed to MMD: concatenation of the mean row and the
/// std row, one 2C-dim vector per image.
pub fn stats_to_vectors<E: Element>(stats: &ChannelStats<E>) -> Vec<Vec<f64>> {
    let c = stats.channels;
    (0..stats.batch)
        .map(|b| {
            let mut v = Vec::with_capacity(2 * c);
            v.extend(stats.mean[b * c..(b + 1) * c].iter().map(|m| m.to_f64()));
            v.extend(stats.std[b * c..(b + 1) * c].iter().map(|s| s.to_f64()));
            v
        })
        .collect()
}

/// Kernel identity plus the bandwidth that was actually used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelInfo {
    pub family: String,
    pub bandwidth: Option<f64>,
}

impl KernelInfo {
    pub fn describe(kernel: &Kernel, resolved_bandwidth: Option<f64>) -> Self {
        match kernel {
            Kernel::Linear => KernelInfo {
                family: "linear".into(),
                bandwidth: None,
            },
            Kernel::Rbf { .. } => KernelInfo {
                family: "rbf".into(),
                bandwidth: resolved_bandwidth,
            },
        }
    }
}

/// Per-stage MMD values under one kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    pub kernel: KernelInfo,
    pub per_stage: Vec<StageMmd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMmd {
    pub stage: usize,
    pub value: f64,
    /// Bandwidth resolved for this stage when the kernel is RBF with the
    /// median heuristic.
    pub bandwidth: Option<f64>,
}

impl MmdReport {
    /// MMD values must be non-negative within numerical tolerance.
    pub fn validate(&self) -> Result<()> {
        for s in &self.per_stage {
            if s.value < -1e-12 {
                return Err(CoreError::InvalidArgument(format!(
                    "stage {} MMD {} is negative beyond tolerance",
                    s.stage, s.value
                )));
            }
        }
        Ok(())
    }
}
