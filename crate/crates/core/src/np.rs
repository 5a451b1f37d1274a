//! Normalization perturbation: draw per-(sample, channel) noise pairs
//! (α, β) centered at one and rescale each channel as
//! `y = α·x + (β−α)·μ_c`, which realizes the perturbed affine parameters
//! σ* = α·σ_c and μ* = β·μ_c without touching spatial structure. Sites are
//! gated by a Bernoulli draw per mini-batch and are the identity outside
//! training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{CoreError, Result};
use crate::stats::{channel_mean_std, StatVariance};
use crate::tape::{FieldLayout, PerturbField, Tape, Var};
use crate::tensor::Tensor;

/// Acceptable window for the noise mean; the perturbed affine parameters
/// should stay around the input statistics, so the noise is generated
/// around one.
pub const DEFAULT_MEAN_WINDOW: (f64, f64) = (0.9, 1.1);

/// Noise family for the perturbation coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NoiseSpec {
    Gaussian { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Beta(a, b) sample scaled by 2 onto [0, 2], so Beta(0.75, 0.75) has
    /// mean 1.
    BetaScaled { a: f64, b: f64 },
}

impl NoiseSpec {
    pub fn gaussian(mean: f64, std: f64) -> Self {
        NoiseSpec::Gaussian { mean, std }
    }

    /// Mean of the induced distribution.
    pub fn analytic_mean(&self) -> f64 {
        match *self {
            NoiseSpec::Gaussian { mean, .. } => mean,
            NoiseSpec::Uniform { lo, hi } => 0.5 * (lo + hi),
            NoiseSpec::BetaScaled { a, b } => 2.0 * a / (a + b),
        }
    }

    /// Check parameters and that the induced mean falls inside `window`.
    pub fn validate(&self, window: (f64, f64)) -> Result<()> {
        match *self {
            NoiseSpec::Gaussian { mean, std } => {
                if !mean.is_finite() || !std.is_finite() || std < 0.0 {
                    return Err(CoreError::InvalidArgument(format!(
                        "gaussian noise needs finite mean and std ≥ 0, got ({mean}, {std})"
                    )));
                }
            }
            NoiseSpec::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo > hi {
                    return Err(CoreError::InvalidArgument(format!(
                        "uniform noise needs lo ≤ hi, got ({lo}, {hi})"
                    )));
                }
            }
            NoiseSpec::BetaScaled { a, b } => {
                if !(a > 0.0) || !(b > 0.0) {
                    return Err(CoreError::InvalidArgument(format!(
                        "beta noise needs a, b > 0, got ({a}, {b})"
                    )));
                }
            }
        }
        let mean = self.analytic_mean();
        if mean < window.0 || mean > window.1 {
            return Err(CoreError::InvalidArgument(format!(
                "noise mean {mean} outside window [{}, {}]",
                window.0, window.1
            )));
        }
        Ok(())
    }

    /// Fill `out` with i.i.d. samples. Draws happen in f64 regardless of the
    /// training precision so that sequences agree across precisions.
    pub fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) -> Result<()> {
        match *self {
            NoiseSpec::Gaussian { mean, std } => {
                let dist = Normal::new(mean, std).map_err(|e| {
                    CoreError::InvalidArgument(format!("gaussian noise: {e}"))
                })?;
                for v in out {
                    *v = dist.sample(rng);
                }
            }
            NoiseSpec::Uniform { lo, hi } => {
                if lo == hi {
                    out.fill(lo);
                } else {
                    let dist = Uniform::new(lo, hi);
                    for v in out {
                        *v = dist.sample(rng);
                    }
                }
            }
            NoiseSpec::BetaScaled { a, b } => {
                let dist = Beta::new(a, b)
                    .map_err(|e| CoreError::InvalidArgument(format!("beta noise: {e}")))?;
                for v in out {
                    *v = 2.0 * dist.sample(rng);
                }
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseSpec::Gaussian { mean, std } => write!(f, "G({mean};{std})"),
            NoiseSpec::Uniform { lo, hi } => write!(f, "U({lo};{hi})"),
            NoiseSpec::BetaScaled { a, b } => write!(f, "2B({a};{b})"),
        }
    }
}

/// One sampled pair of perturbation coefficients, `B×C` row-major. The
/// implied affine parameters are σ* = α·σ_c and μ* = β·μ_c.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<E: Element> {
    pub batch: usize,
    pub channels: usize,
    pub alpha: Vec<E>,
    pub beta: Vec<E>,
}

impl<E: Element> NoiseDraw<E> {
    pub fn new(batch: usize, channels: usize, alpha: Vec<E>, beta: Vec<E>) -> Result<Self> {
        if alpha.len() != batch * channels || beta.len() != batch * channels {
            return Err(CoreError::ShapeMismatch(format!(
                "noise draw for {batch}×{channels} needs {} values, got α {} / β {}",
                batch * channels,
                alpha.len(),
                beta.len()
            )));
        }
        Ok(NoiseDraw {
            batch,
            channels,
            alpha,
            beta,
        })
    }

    /// Identity draw: α = β = 1.
    pub fn identity(batch: usize, channels: usize) -> Self {
        NoiseDraw {
            batch,
            channels,
            alpha: vec![E::one(); batch * channels],
            beta: vec![E::one(); batch * channels],
        }
    }

    /// Clamp both coefficient arrays to [0, ∞). Off by default; the formulas
    /// are otherwise applied literally, negatives included.
    pub fn clamp_non_negative(&mut self) {
        for v in self.alpha.iter_mut().chain(self.beta.iter_mut()) {
            *v = v.max_of(E::zero());
        }
    }

    /// Reorder the rows of both coefficient arrays by `perm`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.batch {
            return Err(CoreError::InvalidArgument(format!(
                "permutation of length {} for batch {}",
                perm.len(),
                self.batch
            )));
        }
        let c = self.channels;
        let pick = |src: &[E]| -> Vec<E> {
            perm.iter()
                .flat_map(|&p| src[p * c..(p + 1) * c].iter().copied())
                .collect()
        };
        NoiseDraw::new(self.batch, c, pick(&self.alpha), pick(&self.beta))
    }
}

/// Draw α and β i.i.d. per (sample, channel), independently of each other:
/// α is filled first, then β, each row-major. Values are not clamped.
pub fn sample_noise<E: Element>(
    spec: &NoiseSpec,
    batch: usize,
    channels: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NoiseDraw<E>> {
    if batch == 0 || channels == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "sample_noise needs B, C ≥ 1, got {batch}×{channels}"
        )));
    }
    spec.validate(DEFAULT_MEAN_WINDOW)?;
    let n = batch * channels;
    let mut alpha = vec![0.0f64; n];
    let mut beta = vec![0.0f64; n];
    spec.sample_into(rng, &mut alpha)?;
    spec.sample_into(rng, &mut beta)?;
    NoiseDraw::new(
        batch,
        channels,
        alpha.into_iter().map(E::from_f64).collect(),
        beta.into_iter().map(E::from_f64).collect(),
    )
}

fn check_draw_shape<E: Element>(x: &Tensor<E>, draw: &NoiseDraw<E>) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(CoreError::ShapeMismatch(format!(
            "perturbation expects [B,C,H,W], got {s:?}"
        )));
    }
    if draw.batch != s[0] || draw.channels != s[1] {
        return Err(CoreError::ShapeMismatch(format!(
            "noise draw {}×{} does not match features {}×{}",
            draw.batch, draw.channels, s[0], s[1]
        )));
    }
    Ok((s[0], s[1], s[2] * s[3]))
}

/// Production form of the perturbation: `y = α·x + (β−α)·μ_c` per
/// (sample, channel). Division-free and exactly equivalent to
/// [`np_reference`] as eps → 0.
pub fn np_forward<E: Element>(x: &Tensor<E>, draw: &NoiseDraw<E>) -> Result<Tensor<E>> {
    let (batch, channels, plane) = check_draw_shape(x, draw)?;
    let stats = channel_mean_std(x)?;
    let xd = x.data();
    let mut out = vec![E::zero(); xd.len()];
    for bc in 0..batch * channels {
        let a = draw.alpha[bc];
        let shift = (draw.beta[bc] - a) * stats.mean[bc];
        let base = bc * plane;
        for (o, &v) in out[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
            *o = a * v + shift;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Literal normalize-then-transform form used as the equivalence oracle:
/// `y = (α·σ_c)·(x−μ_c)/(σ_c+eps) + β·μ_c`. The numerator carries σ_c, so
/// constant channels degrade gracefully to β·μ_c.
pub fn np_reference<E: Element>(x: &Tensor<E>, draw: &NoiseDraw<E>, eps: f64) -> Result<Tensor<E>> {
    if !(eps > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "np_reference needs eps > 0, got {eps}"
        )));
    }
    let (batch, channels, plane) = check_draw_shape(x, draw)?;
    let stats = channel_mean_std(x)?;
    let eps = E::from_f64(eps);
    let xd = x.data();
    let mut out = vec![E::zero(); xd.len()];
    for bc in 0..batch * channels {
        let mu = stats.mean[bc];
        let sigma = stats.std[bc];
        let gain = draw.alpha[bc] * sigma / (sigma + eps);
        let shift = draw.beta[bc] * mu;
        let base = bc * plane;
        for (o, &v) in out[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
            *o = gain * (v - mu) + shift;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Sensitivity-weighted form: `y = α·x + δ_c·(β−α)·μ_c`, with δ taken from
/// the current mini-batch's channel means and treated as a constant.
pub fn np_plus_forward<E: Element>(
    x: &Tensor<E>,
    draw: &NoiseDraw<E>,
    delta: &StatVariance,
) -> Result<Tensor<E>> {
    let (batch, channels, plane) = check_draw_shape(x, draw)?;
    if batch < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "np_plus_forward needs B ≥ 2 for a defined δ, got {batch}"
        )));
    }
    if delta.delta.len() != channels {
        return Err(CoreError::ShapeMismatch(format!(
            "δ has {} channels, features have {channels}",
            delta.delta.len()
        )));
    }
    let stats = channel_mean_std(x)?;
    let xd = x.data();
    let mut out = vec![E::zero(); xd.len()];
    for bc in 0..batch * channels {
        let a = draw.alpha[bc];
        let d = E::from_f64(delta.delta[bc % channels]);
        let shift = d * (draw.beta[bc] - a) * stats.mean[bc];
        let base = bc * plane;
        for (o, &v) in out[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
            *o = a * v + shift;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Perturbation mode of a site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NpMode {
    Np,
    NpPlus,
}

impl std::fmt::Display for NpMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NpMode::Np => "np",
            NpMode::NpPlus => "np_plus",
        })
    }
}

/// Which axes the coefficients vary over. `Channel` is the supported method;
/// the element- and position-level variants exist for ablation sweeps only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Channel,
    Activation,
    Spatial,
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Granularity::Channel => "channel",
            Granularity::Activation => "activation",
            Granularity::Spatial => "spatial",
        })
    }
}

/// Whether one Bernoulli gate covers the whole mini-batch or each sample
/// draws its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateGranularity {
    PerBatch,
    PerSample,
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

/// A perturbation site attached after one backbone stage. Sites act only in
/// training; in evaluation they are the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpSiteConfig {
    /// Stage after which the perturbation applies (1-based).
    pub stage: usize,
    pub probability: f64,
    #[serde(default = "default_mode")]
    pub mode: NpMode,
    pub noise: NoiseSpec,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default = "default_gate")]
    pub gate: GateGranularity,
    #[serde(default)]
    pub clamp_non_negative: bool,
}

impl NpSiteConfig {
    pub fn new(stage: usize, probability: f64, noise: NoiseSpec) -> Self {
        NpSiteConfig {
            stage,
            probability,
            mode: NpMode::Np,
            noise,
            granularity: Granularity::Channel,
            gate: GateGranularity::PerBatch,
            clamp_non_negative: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(CoreError::InvalidArgument(format!(
                "site probability {} outside [0,1]",
                self.probability
            )));
        }
        if self.stage == 0 {
            return Err(CoreError::InvalidArgument(
                "site stages are 1-based".into(),
            ));
        }
        self.noise.validate(DEFAULT_MEAN_WINDOW)
    }
}

/// Gate and noise streams; kept separate so that gate draws never shift the
/// noise sequence.
pub struct SiteRng {
    pub gates: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

impl SiteRng {
    pub fn from_seed(root: u64) -> Self {
        SiteRng {
            gates: crate::rng::stream(root, "gates"),
            noise: crate::rng::stream(root, "noise"),
        }
    }
}

impl Clone for SiteRng {
    fn clone(&self) -> Self {
        SiteRng {
            gates: self.gates.clone(),
            noise: self.noise.clone(),
        }
    }
}

fn sample_field_values(
    spec: &NoiseSpec,
    len: usize,
    rng: &mut ChaCha8Rng,
    clamp: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut alpha = vec![0.0f64; len];
    let mut beta = vec![0.0f64; len];
    spec.sample_into(rng, &mut alpha)?;
    spec.sample_into(rng, &mut beta)?;
    if clamp {
        for v in alpha.iter_mut().chain(beta.iter_mut()) {
            *v = v.max(0.0);
        }
    }
    Ok((alpha, beta))
}

/// Apply one gated perturbation site to a tape node. Outside training, or
/// when the gate stays closed, the input var is returned untouched; `p = 0`
/// consumes no randomness at all. A fresh noise draw is taken on every gated
/// pass.
pub fn apply_site<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    cfg: &NpSiteConfig,
    batch_delta: Option<&StatVariance>,
    rng: &mut SiteRng,
    training: bool,
) -> Result<Var> {
    cfg.validate()?;
    if !training || cfg.probability == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(CoreError::ShapeMismatch(format!(
            "perturbation site expects [B,C,H,W], got {shape:?}"
        )));
    }
    let (batch, channels, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;

    let delta = match cfg.mode {
        NpMode::Np => None,
        NpMode::NpPlus => {
            let Some(d) = batch_delta else {
                return Err(CoreError::InvalidArgument(
                    "np_plus site needs the batch statistic variance".into(),
                ));
            };
            if batch < 2 {
                return Err(CoreError::InvalidArgument(format!(
                    "np_plus site needs B ≥ 2, got {batch}"
                )));
            }
            if d.delta.len() != channels {
                return Err(CoreError::ShapeMismatch(format!(
                    "δ has {} channels, features have {channels}",
                    d.delta.len()
                )));
            }
            Some(d)
        }
    };

    // Gate draws: one per mini-batch, or one per sample.
    let sample_on: Vec<bool> = match cfg.gate {
        GateGranularity::PerBatch => {
            let on = rng.gates.gen::<f64>() < cfg.probability;
            if !on {
                return Ok(x);
            }
            vec![true; batch]
        }
        GateGranularity::PerSample => {
            let gates: Vec<bool> = (0..batch)
                .map(|_| rng.gates.gen::<f64>() < cfg.probability)
                .collect();
            if gates.iter().all(|&g| !g) {
                return Ok(x);
            }
            gates
        }
    };

    let (layout, field_len, row_len) = match cfg.granularity {
        Granularity::Channel => (FieldLayout::PerChannel, batch * channels, channels),
        Granularity::Activation => (
            FieldLayout::PerActivation,
            batch * channels * plane,
            channels * plane,
        ),
        Granularity::Spatial => (FieldLayout::PerPosition, batch * plane, plane),
    };
    let (alpha, beta) =
        sample_field_values(&cfg.noise, field_len, &mut rng.noise, cfg.clamp_non_negative)?;

    let mut scale = vec![E::one(); field_len];
    let mut coeff = vec![E::zero(); field_len];
    for bi in 0..batch {
        if !sample_on[bi] {
            continue; // gated-off samples keep scale 1, coeff 0
        }
        for j in 0..row_len {
            let idx = bi * row_len + j;
            let weight = match (&delta, cfg.granularity) {
                (None, _) => 1.0,
                (Some(d), Granularity::Channel) => d.delta[j],
                (Some(d), Granularity::Activation) => d.delta[j / plane],
                // position-level coefficients are shared across channels, so
                // a per-channel weight has no single slot; weight 1 keeps the
                // ablation comparator well-defined
                (Some(_), Granularity::Spatial) => 1.0,
            };
            scale[idx] = E::from_f64(alpha[idx]);
            coeff[idx] = E::from_f64(weight * (beta[idx] - alpha[idx]));
        }
    }
    tape.mean_perturb(
        x,
        PerturbField {
            layout,
            scale,
            coeff,
        },
    )
}
