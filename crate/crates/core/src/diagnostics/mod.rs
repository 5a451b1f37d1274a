//! Analysis machinery: per-stage MMD domain-gap reports, style-sensitive
//! channel ranking, channel-subset style transfer probing, and ablation
//! sweeps over perturbation configurations.

mod gap;
mod sensitivity;
mod sweep;
mod transfer;

pub use gap::{stage_gap, Embedding, GapReport, StageSummary};
pub use sensitivity::{sensitivity_ranking, SensitivityReport};
pub use sweep::{run_sweep, SweepAggregate, SweepCell, SweepRow, SweepSpec, SweepTable};
pub use transfer::{channel_subset_transfer, MaskDirection, TransferReport};

use crate::domains::Dataset;
use crate::element::Element;
use crate::error::{CoreError, Result};
use crate::net::ToyNet;
use crate::stats::{channel_mean_std, ChannelStats};
use crate::tensor::Tensor;

const FEATURE_BATCH: usize = 64;

/// Eval-mode per-image channel statistics at every stage, accumulated over
/// the whole dataset: one `ChannelStats` per stage with `batch == |dataset|`.
/// Useful for exporting statistic matrices to external plotting.
pub fn stage_statistics<E: Element>(
    net: &ToyNet<E>,
    dataset: &Dataset,
) -> Result<Vec<ChannelStats<f64>>> {
    collect_stage_stats(net, dataset)
}

pub(crate) fn collect_stage_stats<E: Element>(
    net: &ToyNet<E>,
    dataset: &Dataset,
) -> Result<Vec<ChannelStats<f64>>> {
    if dataset.images.is_empty() {
        return Err(CoreError::InvalidArgument(format!(
            "empty dataset {}",
            dataset.name
        )));
    }
    let stages = net.config().stages.len();
    let mut acc: Vec<(usize, Vec<f64>, Vec<f64>)> = vec![(0, Vec::new(), Vec::new()); stages];
    for chunk in dataset.images.chunks(FEATURE_BATCH) {
        let batch = stack_images::<E>(chunk.iter().map(|i| &i.pixels))?;
        let (_, feats) = net.predict_full(&batch)?;
        for (si, feat) in feats.iter().enumerate() {
            let stats = channel_mean_std(feat)?;
            let slot = &mut acc[si];
            slot.0 = stats.channels;
            slot.1.extend(stats.mean.iter().map(|v| v.to_f64()));
            slot.2.extend(stats.std.iter().map(|v| v.to_f64()));
        }
    }
    let n = dataset.images.len();
    acc.into_iter()
        .map(|(channels, mean, std)| ChannelStats::new(n, channels, mean, std))
        .collect()
}

/// Eval-mode stage features of a dataset, concatenated over the batch axis.
pub(crate) fn collect_stage_features<E: Element>(
    net: &ToyNet<E>,
    dataset: &Dataset,
    stage: usize,
) -> Result<Tensor<f64>> {
    if dataset.images.is_empty() {
        return Err(CoreError::InvalidArgument(format!(
            "empty dataset {}",
            dataset.name
        )));
    }
    let stages = net.config().stages.len();
    if stage == 0 || stage > stages {
        return Err(CoreError::InvalidArgument(format!(
            "stage {stage} outside 1..={stages}"
        )));
    }
    let mut pieces: Vec<Tensor<f64>> = Vec::new();
    for chunk in dataset.images.chunks(FEATURE_BATCH) {
        let batch = stack_images::<E>(chunk.iter().map(|i| &i.pixels))?;
        let (_, feats) = net.predict_full(&batch)?;
        pieces.push(feats[stage - 1].cast::<f64>());
    }
    concat_batch(pieces)
}

pub(crate) fn stack_images<'a, E: Element>(
    images: impl Iterator<Item = &'a Tensor<f32>>,
) -> Result<Tensor<E>> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut count = 0usize;
    for img in images {
        match &shape {
            None => shape = Some(img.shape().to_vec()),
            Some(s) if s.as_slice() != img.shape() => {
                return Err(CoreError::ShapeMismatch(
                    "images in a batch must share one shape".into(),
                ))
            }
            _ => {}
        }
        data.extend(img.data().iter().map(|&v| E::from_f64(v as f64)));
        count += 1;
    }
    let shape = shape.ok_or_else(|| CoreError::InvalidArgument("empty image batch".into()))?;
    let mut full = vec![count];
    full.extend(shape);
    Tensor::new(full, data)
}

fn concat_batch(pieces: Vec<Tensor<f64>>) -> Result<Tensor<f64>> {
    let first = pieces
        .first()
        .ok_or_else(|| CoreError::InvalidArgument("nothing to concatenate".into()))?;
    let tail = first.shape()[1..].to_vec();
    let mut total = 0;
    let mut data = Vec::new();
    for piece in &pieces {
        if piece.shape()[1..] != tail[..] {
            return Err(CoreError::ShapeMismatch(
                "stage feature shapes differ across batches".into(),
            ));
        }
        total += piece.shape()[0];
        data.extend_from_slice(piece.data());
    }
    let mut shape = vec![total];
    shape.extend(tail);
    Tensor::new(shape, data)
}

/// Indices of `values` sorted by value descending; ties break by lower index.
pub(crate) fn argsort_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}
