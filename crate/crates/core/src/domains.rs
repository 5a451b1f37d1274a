//! Synthetic multi-domain benchmark: a shared shape-classification content
//! generator plus parametric photometric styles (gain/bias, contrast, fog,
//! gamma, texture noise) standing in for real-world shifts like fog, night
//! and color casts. The same canvases are rendered under every domain style,
//! so source/target validation sets are content-paired index for index.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 4;
pub const SHAPE_NAMES: [&str; NUM_CLASSES] = ["disk", "square", "triangle", "cross"];

/// Parametric photometric style. Identity: gains 1, biases 0, contrast 1,
/// fog 0, noise 0, gamma 1. Pipeline order is fixed:
/// gamma → contrast (about mid-gray 0.5) → per-channel gain/bias →
/// fog blend toward white → additive gaussian noise → clip to [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleParams {
    pub channel_gain: [f64; 3],
    pub channel_bias: [f64; 3],
    pub contrast: f64,
    pub fog_strength: f64,
    pub noise_std: f64,
    pub gamma: f64,
}

impl StyleParams {
    pub fn identity() -> Self {
        StyleParams {
            channel_gain: [1.0; 3],
            channel_bias: [0.0; 3],
            contrast: 1.0,
            fog_strength: 0.0,
            noise_std: 0.0,
            gamma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_gain.iter().any(|&g| !(g > 0.0)) || !(self.contrast > 0.0) {
            return Err(CoreError::InvalidArgument(
                "style gains and contrast must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.fog_strength) {
            return Err(CoreError::InvalidArgument(format!(
                "fog strength {} outside [0,1]",
                self.fog_strength
            )));
        }
        if self.noise_std < 0.0 || !(self.gamma > 0.0) {
            return Err(CoreError::InvalidArgument(
                "noise std must be ≥ 0 and gamma > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-field half-widths for per-image uniform jitter around a style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleJitter {
    pub gain: f64,
    pub bias: f64,
    pub contrast: f64,
    pub fog: f64,
    pub noise: f64,
    pub gamma: f64,
}

impl Default for StyleJitter {
    fn default() -> Self {
        StyleJitter {
            gain: 0.0,
            bias: 0.0,
            contrast: 0.0,
            fog: 0.0,
            noise: 0.0,
            gamma: 0.0,
        }
    }
}

impl StyleJitter {
    pub fn mild() -> Self {
        StyleJitter {
            gain: 0.05,
            bias: 0.02,
            contrast: 0.05,
            fog: 0.02,
            noise: 0.005,
            gamma: 0.05,
        }
    }

    /// Barely-there jitter for the source domain: enough for the set not to
    /// be a point mass, small enough that the baseline stays style-naive.
    pub fn faint() -> Self {
        StyleJitter {
            gain: 0.02,
            bias: 0.01,
            contrast: 0.02,
            fog: 0.0,
            noise: 0.003,
            gamma: 0.02,
        }
    }
}

/// A named synthetic domain: a base style plus per-image jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub style: StyleParams,
    #[serde(default)]
    pub style_jitter: StyleJitter,
}

impl DomainSpec {
    /// Sample a jittered style. Fields with zero half-width consume no
    /// randomness, so disabling jitter keeps other draws stable.
    pub fn sample_style(&self, rng: &mut ChaCha8Rng) -> StyleParams {
        let mut jittered = self.style.clone();
        let draw = |center: f64, half: f64, rng: &mut ChaCha8Rng| -> f64 {
            if half > 0.0 {
                rng.gen_range(center - half..center + half)
            } else {
                center
            }
        };
        for c in 0..3 {
            jittered.channel_gain[c] =
                draw(self.style.channel_gain[c], self.style_jitter.gain, rng).max(0.01);
        }
        for c in 0..3 {
            jittered.channel_bias[c] = draw(self.style.channel_bias[c], self.style_jitter.bias, rng);
        }
        jittered.contrast = draw(self.style.contrast, self.style_jitter.contrast, rng).max(0.01);
        jittered.fog_strength =
            draw(self.style.fog_strength, self.style_jitter.fog, rng).clamp(0.0, 1.0);
        jittered.noise_std = draw(self.style.noise_std, self.style_jitter.noise, rng).max(0.0);
        jittered.gamma = draw(self.style.gamma, self.style_jitter.gamma, rng).max(0.01);
        jittered
    }
}

/// One RGB image with its class label, source domain, and the id of the
/// canvas it was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[3,H,W]`, values in [0,1].
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub domain: String,
    pub content_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn mean_brightness(&self) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for img in &self.images {
            acc += img.pixels.data().iter().map(|&v| v as f64).sum::<f64>();
            n += img.pixels.numel();
        }
        acc / n.max(1) as f64
    }
}

// ── content generation ──────────────────────────────────────────────

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn inside_shape(label: usize, dx: f64, dy: f64, r: f64) -> bool {
    match label {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.78 * r && dy.abs() <= 0.78 * r,
        2 => {
            // upward triangle with apex (0, −r), base y = 0.8r, half-width 0.95r
            if dy < -r || dy > 0.8 * r {
                return false;
            }
            let t = (dy + r) / (1.8 * r);
            dx.abs() <= 0.95 * r * t
        }
        3 => (dx.abs() <= 0.35 * r && dy.abs() <= r) || (dy.abs() <= 0.35 * r && dx.abs() <= r),
        _ => false,
    }
}

/// Render one canvas: textured background plus one shape whose class is the
/// label. Deterministic for a given (seed, id).
fn render_canvas(seed: u64, id: u64, label: usize) -> Tensor<f32> {
    let size = IMAGE_SIZE;
    let mut rng = rng::stream_indexed(seed, "content", id);

    let bg_luma: f64 = rng.gen_range(0.38..0.68);
    let mut bg = [0.0f64; 3];
    for c in bg.iter_mut() {
        *c = (bg_luma + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0);
    }

    // three low-frequency waves as background texture, each with its own
    // channel mix so the clutter is chromatic rather than pure luminance
    let mut waves = Vec::with_capacity(3);
    for _ in 0..3 {
        let amp: f64 = rng.gen_range(0.03..0.10);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let freq: f64 = rng.gen_range(0.5..2.5);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let mix = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        waves.push((amp, angle.cos(), angle.sin(), freq, phase, mix));
    }

    let cx: f64 = rng.gen_range(10.0..22.0);
    let cy: f64 = rng.gen_range(10.0..22.0);
    let radius: f64 = rng.gen_range(5.0..9.0);
    // shape color: random chroma at a controlled luminance gap to the
    // background. Chroma is drawn mostly along the R/B axes, so the color
    // part of the signal lives in the channels that photometric shifts move
    // hardest.
    let mut color = [0.0f64; 3];
    {
        let chroma = [
            rng.gen_range(-0.55..0.55),
            rng.gen_range(-0.25..0.25),
            rng.gen_range(-0.55..0.55),
        ];
        let chroma_luma = luma(chroma[0], chroma[1], chroma[2]);
        let gap: f64 = rng.gen_range(0.15..0.4);
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let target_luma = (bg_luma + sign * gap).clamp(0.08, 0.92);
        for (c, &ch) in color.iter_mut().zip(&chroma) {
            *c = (target_luma + (ch - chroma_luma)).clamp(0.0, 1.0);
        }
    }

    let mut data = vec![0.0f32; 3 * size * size];
    let noise = Normal::new(0.0, 0.02).expect("fixed std");
    for y in 0..size {
        for x in 0..size {
            let mut tex = [0.0f64; 3];
            for &(amp, ca, sa, freq, phase, mix) in &waves {
                let u = (ca * x as f64 + sa * y as f64) / size as f64;
                let v = amp * (std::f64::consts::TAU * freq * u + phase).sin();
                for (t, &m) in tex.iter_mut().zip(&mix) {
                    *t += v * m;
                }
            }
            let on_shape = inside_shape(label, x as f64 - cx, y as f64 - cy, radius);
            let grain: f64 = noise.sample(&mut rng);
            for c in 0..3 {
                let base = if on_shape { color[c] } else { bg[c] + tex[c] };
                data[(c * size + y) * size + x] = ((base + grain).clamp(0.0, 1.0)) as f32;
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("canvas shape")
}

/// Generate `n` canvases with round-robin labels (balanced within ±1).
pub fn generate_content(n: usize, seed: u64) -> Result<Vec<(Tensor<f32>, usize)>> {
    if n == 0 {
        return Err(CoreError::InvalidArgument("generate_content needs n ≥ 1".into()));
    }
    Ok((0..n)
        .map(|i| {
            let label = i % NUM_CLASSES;
            (render_canvas(seed, i as u64, label), label)
        })
        .collect())
}

// ── style application ───────────────────────────────────────────────

/// Render a canvas under a photometric style. Each stage of the pipeline is
/// skipped when it is exactly the identity, so identity styles are bit-exact
/// no-ops and consume no randomness unless noise is enabled.
pub fn apply_style(
    image: &Tensor<f32>,
    params: &StyleParams,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    params.validate()?;
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(CoreError::ShapeMismatch(format!(
            "apply_style expects [3,H,W], got {s:?}"
        )));
    }
    let plane = s[1] * s[2];
    let mut work: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();

    if params.gamma != 1.0 {
        for v in &mut work {
            *v = v.max(0.0).powf(params.gamma);
        }
    }
    if params.contrast != 1.0 {
        for v in &mut work {
            *v = 0.5 + (*v - 0.5) * params.contrast;
        }
    }
    if params.channel_gain != [1.0; 3] || params.channel_bias != [0.0; 3] {
        for c in 0..3 {
            let (gain, bias) = (params.channel_gain[c], params.channel_bias[c]);
            for v in &mut work[c * plane..(c + 1) * plane] {
                *v = *v * gain + bias;
            }
        }
    }
    if params.fog_strength > 0.0 {
        let f = params.fog_strength;
        for v in &mut work {
            *v = (1.0 - f) * *v + f;
        }
    }
    if params.noise_std > 0.0 {
        let noise = Normal::new(0.0, params.noise_std)
            .map_err(|e| CoreError::InvalidArgument(format!("style noise: {e}")))?;
        for v in &mut work {
            *v += noise.sample(rng);
        }
    }
    let data = work.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor::new(s.to_vec(), data)
}

// ── photometric augmentation ────────────────────────────────────────

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn clamp_all(work: &mut [f64]) {
    for v in work {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Apply the augmentation chain with fixed gates; parameter draws only
/// happen for enabled transforms. Gate order: color jitter, grayscale,
/// gaussian blur, solarize.
pub fn augment_with_gates(
    image: &Tensor<f32>,
    gates: [bool; 4],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(CoreError::ShapeMismatch(format!(
            "augmentation expects [3,H,W], got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut work: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();

    if gates[0] {
        // color jitter: brightness, contrast, saturation in [0.6, 1.4],
        // hue shift ±0.1 turns — applied in that order
        let brightness: f64 = rng.gen_range(0.6..1.4);
        let contrast: f64 = rng.gen_range(0.6..1.4);
        let saturation: f64 = rng.gen_range(0.6..1.4);
        let hue: f64 = rng.gen_range(-0.1..0.1);
        for v in &mut work {
            *v *= brightness;
        }
        for v in &mut work {
            *v = 0.5 + (*v - 0.5) * contrast;
        }
        clamp_all(&mut work);
        for px in 0..plane {
            let (r, g, b) = (work[px], work[plane + px], work[2 * plane + px]);
            let l = luma(r, g, b);
            work[px] = l + (r - l) * saturation;
            work[plane + px] = l + (g - l) * saturation;
            work[2 * plane + px] = l + (b - l) * saturation;
        }
        clamp_all(&mut work);
        for px in 0..plane {
            let (r, g, b) = (work[px], work[plane + px], work[2 * plane + px]);
            let (hh, ss, vv) = rgb_to_hsv(r, g, b);
            let (r, g, b) = hsv_to_rgb(hh + hue, ss, vv);
            work[px] = r;
            work[plane + px] = g;
            work[2 * plane + px] = b;
        }
    }
    if gates[1] {
        // grayscale by luma replication
        for px in 0..plane {
            let l = luma(work[px], work[plane + px], work[2 * plane + px]);
            work[px] = l;
            work[plane + px] = l;
            work[2 * plane + px] = l;
        }
    }
    if gates[2] {
        // 3×3 gaussian blur, clamp-to-edge borders
        let sigma: f64 = rng.gen_range(0.1..1.0);
        let mut kernel = [0.0f64; 9];
        let mut norm = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let wgt = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                kernel[((dy + 1) * 3 + dx + 1) as usize] = wgt;
                norm += wgt;
            }
        }
        for k in &mut kernel {
            *k /= norm;
        }
        let src = work.clone();
        for c in 0..3 {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let mut acc = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let sy = (y + dy).clamp(0, h as i64 - 1) as usize;
                            let sx = (x + dx).clamp(0, w as i64 - 1) as usize;
                            acc += kernel[((dy + 1) * 3 + dx + 1) as usize]
                                * src[c * plane + sy * w + sx];
                        }
                    }
                    work[c * plane + y as usize * w + x as usize] = acc;
                }
            }
        }
    }
    if gates[3] {
        // solarize: invert pixels above 0.5
        for v in &mut work {
            if *v > 0.5 {
                *v = 1.0 - *v;
            }
        }
    }
    clamp_all(&mut work);
    Tensor::new(s.to_vec(), work.iter().map(|&v| v as f32).collect())
}

/// Photometric augmentation chain: color jitter, grayscale, gaussian blur
/// and solarize, each independently applied with probability 0.5.
pub fn photometric_augment(image: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let gates = [
        rng.gen::<f64>() < 0.5,
        rng.gen::<f64>() < 0.5,
        rng.gen::<f64>() < 0.5,
        rng.gen::<f64>() < 0.5,
    ];
    augment_with_gates(image, gates, rng)
}

// ── benchmark assembly ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSizes {
    pub train: usize,
    pub val: usize,
}

impl Default for BenchmarkSizes {
    fn default() -> Self {
        BenchmarkSizes {
            train: 2000,
            val: 400,
        }
    }
}

/// Source domain plus the three photometric targets, with target validation
/// sets content-paired to the source validation set.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub seed: u64,
    pub sizes: BenchmarkSizes,
    pub train: Dataset,
    pub val: Dataset,
    pub targets: Vec<Dataset>,
}

impl Benchmark {
    pub fn target(&self, name: &str) -> Option<&Dataset> {
        self.targets.iter().find(|d| d.name == name)
    }
}

/// The benchmark's domain lineup: a mildly jittered identity source and
/// fog / night / warm-shift targets.
pub fn benchmark_domains() -> Vec<DomainSpec> {
    let base_noise = 0.01;
    let mut source = StyleParams::identity();
    source.noise_std = base_noise;
    let mut fog = StyleParams::identity();
    fog.fog_strength = 0.5;
    fog.noise_std = base_noise;
    let mut night = StyleParams::identity();
    night.channel_gain = [0.3, 0.3, 0.45];
    night.gamma = 1.8;
    night.noise_std = base_noise;
    let mut warm = StyleParams::identity();
    warm.channel_gain = [1.3, 1.0, 0.7];
    warm.noise_std = base_noise;
    vec![
        DomainSpec {
            name: "source".into(),
            style: source,
            style_jitter: StyleJitter::faint(),
        },
        DomainSpec {
            name: "fog".into(),
            style: fog,
            style_jitter: StyleJitter {
                fog: 0.05,
                ..StyleJitter::mild()
            },
        },
        DomainSpec {
            name: "night".into(),
            style: night,
            style_jitter: StyleJitter::mild(),
        },
        DomainSpec {
            name: "warm".into(),
            style: warm,
            style_jitter: StyleJitter {
                gain: 0.08,
                ..StyleJitter::mild()
            },
        },
    ]
}

fn render_domain(
    contents: &[(Tensor<f32>, usize)],
    first_id: u64,
    spec: &DomainSpec,
    seed: u64,
    dataset_name: &str,
) -> Result<Dataset> {
    let mut images = Vec::with_capacity(contents.len());
    for (offset, (canvas, label)) in contents.iter().enumerate() {
        let content_id = first_id + offset as u64;
        let mut style_rng =
            rng::stream_indexed(seed, &format!("style/{}", spec.name), content_id);
        let params = spec.sample_style(&mut style_rng);
        let pixels = apply_style(canvas, &params, &mut style_rng)?;
        images.push(LabeledImage {
            pixels,
            label: *label,
            domain: spec.name.clone(),
            content_id,
        });
    }
    Ok(Dataset {
        name: dataset_name.into(),
        images,
    })
}

/// Build the full benchmark from one seed: `train + val` source images and
/// one content-paired validation set per target domain.
pub fn make_benchmark(seed: u64, sizes: BenchmarkSizes) -> Result<Benchmark> {
    if sizes.train == 0 || sizes.val == 0 {
        return Err(CoreError::InvalidArgument(
            "benchmark sizes must be positive".into(),
        ));
    }
    let contents = generate_content(sizes.train + sizes.val, seed)?;
    let (train_contents, val_contents) = contents.split_at(sizes.train);
    let domains = benchmark_domains();
    let source = &domains[0];

    let train = render_domain(train_contents, 0, source, seed, "source_train")?;
    let val = render_domain(val_contents, sizes.train as u64, source, seed, "source_val")?;
    let mut targets = Vec::new();
    for spec in &domains[1..] {
        targets.push(render_domain(
            val_contents,
            sizes.train as u64,
            spec,
            seed,
            &format!("target_{}", spec.name),
        )?);
    }
    Ok(Benchmark {
        seed,
        sizes,
        train,
        val,
        targets,
    })
}

// ── persistence ─────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    label: usize,
    domain: String,
    content_id: u64,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    name: String,
    images: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct BenchmarkIndex {
    seed: u64,
    sizes: BenchmarkSizes,
    splits: Vec<String>,
}

/// Persist a dataset as a directory of `.tsr` blobs plus `index.json`.
pub fn save_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(dataset.images.len());
    for (i, img) in dataset.images.iter().enumerate() {
        let file = format!("img_{i:05}.tsr");
        img.pixels.save_tsr(dir.join(&file))?;
        entries.push(IndexEntry {
            file,
            label: img.label,
            domain: img.domain.clone(),
            content_id: img.content_id,
        });
    }
    let index = DatasetIndex {
        name: dataset.name.clone(),
        images: entries,
    };
    fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let raw = fs::read(dir.join("index.json"))?;
    let index: DatasetIndex = serde_json::from_slice(&raw)?;
    let mut images = Vec::with_capacity(index.images.len());
    for entry in index.images {
        images.push(LabeledImage {
            pixels: Tensor::<f32>::load_tsr(dir.join(&entry.file))?,
            label: entry.label,
            domain: entry.domain,
            content_id: entry.content_id,
        });
    }
    Ok(Dataset {
        name: index.name,
        images,
    })
}

pub fn save_benchmark(dir: impl AsRef<Path>, benchmark: &Benchmark) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut splits = Vec::new();
    for ds in std::iter::once(&benchmark.train)
        .chain(std::iter::once(&benchmark.val))
        .chain(&benchmark.targets)
    {
        save_dataset(dir.join(&ds.name), ds)?;
        splits.push(ds.name.clone());
    }
    let index = BenchmarkIndex {
        seed: benchmark.seed,
        sizes: benchmark.sizes,
        splits,
    };
    fs::write(dir.join("benchmark.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

pub fn load_benchmark(dir: impl AsRef<Path>) -> Result<Benchmark> {
    let dir = dir.as_ref();
    let raw = fs::read(dir.join("benchmark.json"))?;
    let index: BenchmarkIndex = serde_json::from_slice(&raw)?;
    let mut datasets = Vec::new();
    for split in &index.splits {
        datasets.push(load_dataset(dir.join(split))?);
    }
    if datasets.len() < 2 {
        return Err(CoreError::Format(
            "benchmark needs at least train and val splits".into(),
        ));
    }
    let train = datasets.remove(0);
    let val = datasets.remove(0);
    Ok(Benchmark {
        seed: index.seed,
        sizes: index.sizes,
        train,
        val,
        targets: datasets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_is_deterministic_and_balanced() {
        let a = generate_content(8, 5).unwrap();
        let b = generate_content(8, 5).unwrap();
        assert_eq!(a, b);
        let mut counts = [0usize; NUM_CLASSES];
        for (_, label) in &a {
            counts[*label] += 1;
        }
        assert_eq!(counts, [2, 2, 2, 2]);
        for (img, _) in &a {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn single_content_image_is_valid() {
        let imgs = generate_content(1, 9).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].0.shape(), &[3, IMAGE_SIZE, IMAGE_SIZE]);
    }

    #[test]
    fn identity_style_is_exact_identity() {
        let (img, _) = generate_content(1, 1).unwrap().remove(0);
        let mut rng = rng::stream(0, "style");
        let out = apply_style(&img, &StyleParams::identity(), &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn full_fog_is_pure_white_before_noise() {
        let (img, _) = generate_content(1, 2).unwrap().remove(0);
        let mut params = StyleParams::identity();
        params.fog_strength = 1.0;
        let mut rng = rng::stream(0, "style");
        let out = apply_style(&img, &params, &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn contrast_pivots_at_mid_gray() {
        let gray = Tensor::full(vec![3, 4, 4], 0.5f32).unwrap();
        let mut params = StyleParams::identity();
        params.contrast = 2.0;
        let mut rng = rng::stream(0, "style");
        let out = apply_style(&gray, &params, &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn augment_gates_off_is_identity() {
        let (img, _) = generate_content(1, 3).unwrap().remove(0);
        let mut rng = rng::stream(0, "augment");
        let out = augment_with_gates(&img, [false; 4], &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn grayscale_makes_channels_equal() {
        let (img, _) = generate_content(1, 4).unwrap().remove(0);
        let mut rng = rng::stream(0, "augment");
        let out = augment_with_gates(&img, [false, true, false, false], &mut rng).unwrap();
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let d = out.data();
        for px in 0..plane {
            assert_eq!(d[px], d[plane + px]);
            assert_eq!(d[px], d[2 * plane + px]);
        }
    }

    #[test]
    fn solarize_leaves_dark_images_unchanged() {
        let dark = Tensor::zeros(vec![3, 4, 4]).unwrap();
        let mut rng = rng::stream(0, "augment");
        let out = augment_with_gates(&dark, [false, false, false, true], &mut rng).unwrap();
        assert_eq!(out, dark);
    }

    #[test]
    fn benchmark_is_paired_and_reproducible() {
        let sizes = BenchmarkSizes { train: 16, val: 8 };
        let a = make_benchmark(11, sizes).unwrap();
        let b = make_benchmark(11, sizes).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.targets[0], b.targets[0]);

        assert_eq!(a.targets.len(), 3);
        for target in &a.targets {
            assert_eq!(target.len(), sizes.val);
            for (s, t) in a.val.images.iter().zip(&target.images) {
                assert_eq!(s.label, t.label);
                assert_eq!(s.content_id, t.content_id);
            }
        }
    }

    #[test]
    fn night_target_is_darker_than_source() {
        let sizes = BenchmarkSizes { train: 8, val: 32 };
        let bench = make_benchmark(13, sizes).unwrap();
        let night = bench.target("target_night").unwrap();
        assert!(
            night.mean_brightness() < bench.val.mean_brightness() - 0.05,
            "night {} vs source {}",
            night.mean_brightness(),
            bench.val.mean_brightness()
        );
    }

    #[test]
    fn warm_target_perturbs_r_and_b_more_than_g() {
        let sizes = BenchmarkSizes { train: 8, val: 32 };
        let bench = make_benchmark(17, sizes).unwrap();
        let warm = bench.target("target_warm").unwrap();
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let mut shift = [0.0f64; 3];
        for (s, t) in bench.val.images.iter().zip(&warm.images) {
            for c in 0..3 {
                let sm: f64 = s.pixels.data()[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / plane as f64;
                let tm: f64 = t.pixels.data()[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / plane as f64;
                shift[c] += (tm - sm).abs();
            }
        }
        assert!(shift[0] > shift[1], "R shift {} vs G {}", shift[0], shift[1]);
        assert!(shift[2] > shift[1], "B shift {} vs G {}", shift[2], shift[1]);
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let bench = make_benchmark(3, BenchmarkSizes { train: 4, val: 2 }).unwrap();
        save_benchmark(dir.path(), &bench).unwrap();
        let back = load_benchmark(dir.path()).unwrap();
        assert_eq!(bench.train, back.train);
        assert_eq!(bench.val, back.val);
        assert_eq!(bench.targets.len(), back.targets.len());
        assert_eq!(bench.targets[2], back.targets[2]);
    }
}
