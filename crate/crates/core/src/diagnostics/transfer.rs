//! Channel-subset style transfer probing: apply AdaIN restricted to the
//! most- or least-style-sensitive fraction of channels and score how well
//! the result matches the style statistics while retaining content order.

use serde::{Deserialize, Serialize};

use crate::domains::Dataset;
use crate::element::Element;
use crate::error::{CoreError, Result};
use crate::net::ToyNet;
use crate::stats::{
    adain_transfer, batch_stat_variance, channel_mean_std, mmd, stats_to_vectors, Kernel,
};
use crate::tensor::Tensor;

use super::{argsort_desc, collect_stage_features};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskDirection {
    MostSensitive,
    LeastSensitive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub stage: usize,
    pub fraction: f64,
    pub direction: MaskDirection,
    pub masked_channels: Vec<usize>,
    /// MMD between the statistic vectors of the transferred features and the
    /// style features.
    pub style_match_mmd: f64,
    /// Mean within-channel Spearman correlation of spatial activations
    /// before vs after the transfer; 1.0 means content ordering untouched.
    pub content_retention: f64,
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 && vb == 0.0 {
        1.0 // both constant: ordering trivially preserved
    } else if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Transfer the style batch's statistics onto the content batch at one
/// stage, restricted to a δ-ranked channel subset, and report a style-match
/// and content-retention score. The two batches must be index-aligned.
pub fn channel_subset_transfer<E: Element>(
    net: &ToyNet<E>,
    content_batch: &Dataset,
    style_batch: &Dataset,
    stage: usize,
    fraction: f64,
    direction: MaskDirection,
    kernel: &Kernel,
) -> Result<TransferReport> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CoreError::InvalidArgument(format!(
            "fraction {fraction} outside [0,1]"
        )));
    }
    if content_batch.images.len() != style_batch.images.len() {
        return Err(CoreError::InvalidArgument(format!(
            "content batch has {} images, style batch {}",
            content_batch.images.len(),
            style_batch.images.len()
        )));
    }
    let content = collect_stage_features(net, content_batch, stage)?;
    let style = collect_stage_features(net, style_batch, stage)?;
    let content_stats = channel_mean_std(&content)?;
    let style_stats = channel_mean_std(&style)?;
    let channels = content_stats.channels;

    // δ over the concatenated means of both batches, as in the ranking
    let mut combined = Vec::with_capacity(2 * content_stats.batch * channels);
    combined.extend_from_slice(&content_stats.mean);
    combined.extend_from_slice(&style_stats.mean);
    let delta = batch_stat_variance(&Tensor::new(
        vec![2 * content_stats.batch, channels],
        combined,
    )?)?;
    let ranking = argsort_desc(&delta.delta);

    let count = ((fraction * channels as f64).round() as usize).min(channels);
    let mut masked_channels: Vec<usize> = match direction {
        MaskDirection::MostSensitive => ranking[..count].to_vec(),
        MaskDirection::LeastSensitive => ranking[channels - count..].to_vec(),
    };
    masked_channels.sort_unstable();
    let mut mask = vec![false; channels];
    for &ch in &masked_channels {
        mask[ch] = true;
    }

    let transferred = adain_transfer(&content, &content_stats, &style_stats, &mask, 1e-5)?;
    let transferred_stats = channel_mean_std(&transferred)?;
    let style_match_mmd = mmd(
        &stats_to_vectors(&transferred_stats),
        &stats_to_vectors(&style_stats),
        kernel,
    )?;

    let shape = content.shape();
    let plane = shape[2] * shape[3];
    let mut retention = 0.0;
    let cells = shape[0] * shape[1];
    for bc in 0..cells {
        retention += spearman(
            &content.data()[bc * plane..(bc + 1) * plane],
            &transferred.data()[bc * plane..(bc + 1) * plane],
        );
    }
    retention /= cells as f64;

    Ok(TransferReport {
        stage,
        fraction,
        direction,
        masked_channels,
        style_match_mmd,
        content_retention: retention,
    })
}
