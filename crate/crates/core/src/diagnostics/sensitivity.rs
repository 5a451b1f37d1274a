//! Style-sensitive channel ranking: the normalized variance δ of per-image
//! channel means across a content-paired pair of styles, with a control
//! ratio separating style-driven variance from content variance.

use serde::{Deserialize, Serialize};

use crate::domains::Dataset;
use crate::element::Element;
use crate::error::{CoreError, Result};
use crate::net::ToyNet;
use crate::stats::{batch_stat_variance, StatVariance};
use crate::tensor::Tensor;

use super::{argsort_desc, collect_stage_stats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub stage: usize,
    /// δ computed over the concatenated per-image channel means of both sets.
    pub delta: StatVariance,
    /// Channels sorted by δ descending; ties break by channel index.
    pub ranking: Vec<usize>,
    /// Between-styles variance per channel: mean over content pairs of the
    /// within-pair spread `((a_i − b_i)/2)²`. Exactly zero when the two sets
    /// carry the same style.
    pub between_styles: Vec<f64>,
    /// Within-style variance per channel: content-driven variance inside
    /// each style group, averaged over the two groups.
    pub within_style: Vec<f64>,
    /// `max(between_styles) / max(within_style)`.
    pub between_within_ratio: f64,
    /// False when the between/within ratio stays under 2: the variation is
    /// then dominated by content, not style.
    pub has_style_signal: bool,
}

impl SensitivityReport {
    /// Leading `k` entries of the ranking (a permutation prefix of
    /// argsort δ).
    pub fn top_k(&self, k: usize) -> &[usize] {
        &self.ranking[..k.min(self.ranking.len())]
    }
}

fn check_paired(a: &Dataset, b: &Dataset) -> Result<()> {
    if a.images.len() != b.images.len() {
        return Err(CoreError::InvalidArgument(format!(
            "unpaired sets: {} has {} images, {} has {}",
            a.name,
            a.images.len(),
            b.name,
            b.images.len()
        )));
    }
    for (ia, ib) in a.images.iter().zip(&b.images) {
        if ia.content_id != ib.content_id || ia.label != ib.label {
            return Err(CoreError::InvalidArgument(format!(
                "unpaired sets: content {} / label {} vs content {} / label {}",
                ia.content_id, ia.label, ib.content_id, ib.label
            )));
        }
    }
    Ok(())
}

/// Rank channels at one stage by how strongly their mean statistic varies
/// across the two styles of a content-paired dataset pair.
pub fn sensitivity_ranking<E: Element>(
    net: &ToyNet<E>,
    set_a: &Dataset,
    set_b: &Dataset,
    stage: usize,
) -> Result<SensitivityReport> {
    check_paired(set_a, set_b)?;
    let stages = net.config().stages.len();
    if stage == 0 || stage > stages {
        return Err(CoreError::InvalidArgument(format!(
            "stage {stage} outside 1..={stages}"
        )));
    }
    let stats_a = collect_stage_stats(net, set_a)?.swap_remove(stage - 1);
    let stats_b = collect_stage_stats(net, set_b)?.swap_remove(stage - 1);
    let c = stats_a.channels;
    let n = stats_a.batch;

    let mut combined = Vec::with_capacity(2 * n * c);
    combined.extend_from_slice(&stats_a.mean);
    combined.extend_from_slice(&stats_b.mean);
    let total = batch_stat_variance(&Tensor::new(vec![2 * n, c], combined)?)?;

    // content-paired split of the total variance: the style effect is the
    // within-pair spread, the content effect the variance inside each group
    let within_a = batch_stat_variance(&Tensor::new(vec![n, c], stats_a.mean.clone())?)?;
    let within_b = batch_stat_variance(&Tensor::new(vec![n, c], stats_b.mean.clone())?)?;
    let mut between_styles = vec![0.0f64; c];
    for i in 0..n {
        for ch in 0..c {
            let d = 0.5 * (stats_a.mean[i * c + ch] - stats_b.mean[i * c + ch]);
            between_styles[ch] += d * d;
        }
    }
    for b in &mut between_styles {
        *b /= n as f64;
    }
    let within_style: Vec<f64> = (0..c)
        .map(|ch| 0.5 * (within_a.delta_raw[ch] + within_b.delta_raw[ch]))
        .collect();
    let max_within = within_style.iter().cloned().fold(0.0f64, f64::max);
    let max_between = between_styles.iter().cloned().fold(0.0f64, f64::max);
    let between_within_ratio = if max_within > 0.0 {
        max_between / max_within
    } else if max_between > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };

    let ranking = argsort_desc(&total.delta);
    Ok(SensitivityReport {
        stage,
        delta: total,
        ranking,
        between_styles,
        within_style,
        between_within_ratio,
        has_style_signal: between_within_ratio >= 2.0,
    })
}
