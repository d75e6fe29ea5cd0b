use std::collections::BTreeMap;

use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;

use super::metrics::{auc, median, quantile_sorted};
use super::{EvalError, Result};
use crate::interpret::{integrated_gradients, IgTarget};
use crate::mil::{predict, MilModel};
use crate::rng::stream;
use crate::store::FeatureBag;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankShiftRow {
    pub sample_id: String,
    pub instance: usize,
    /// 1-based rank by raw IG (descending) within the whole bag.
    pub full_rank: usize,
    pub full_size: usize,
    /// 1-based rank within the sampled sub-bag.
    pub sub_rank: usize,
    pub sub_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartialVolumeResult {
    pub fraction: f64,
    pub whole_auc: f64,
    pub aucs: Vec<f64>,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    /// Share of iterations whose AUC is below the whole-volume AUC.
    pub fraction_below_whole: f64,
    pub rank_table: Vec<RankShiftRow>,
}

/// Descending ranks (1-based), ties broken by index.
fn descending_ranks(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// Instances drawn for sample `s` in iteration `it`, ascending.
fn draw(bag_len: usize, fraction: f64, seed: u64, it: usize, s: usize) -> Vec<usize> {
    let take = ((fraction * bag_len as f64).ceil() as usize).min(bag_len);
    if take == bag_len {
        return (0..bag_len).collect();
    }
    let mut rng = stream(seed, ((it as u64) << 32) | s as u64);
    let mut idx = index::sample(&mut rng, bag_len, take).into_vec();
    idx.sort_unstable();
    idx
}

/// Predict on random sub-bags of `ceil(fraction * J)` instances per sample,
/// `iterations` times. `models[i]` scores sample `i`. IG rank shifts are
/// reported for the first iteration, on the first `rank_samples` samples.
#[allow(clippy::too_many_arguments)]
pub fn partial_volume_experiment(
    models: &[&MilModel],
    bags: &[FeatureBag],
    labels: &[u8],
    fraction: f64,
    iterations: usize,
    seed: u64,
    ig_steps: usize,
    rank_samples: usize,
) -> Result<PartialVolumeResult> {
    if models.len() != bags.len() || labels.len() != bags.len() {
        return Err(EvalError::LengthMismatch(models.len(), bags.len()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EvalError::InvalidInput(format!("fraction {fraction} is outside (0, 1]")));
    }
    if let Some(b) = bags.iter().find(|b| (fraction * b.len() as f64).ceil() as usize == 0) {
        return Err(EvalError::InvalidInput(format!("fraction {fraction} leaves no instances of {}", b.sample_id())));
    }
    let whole: Vec<f64> =
        bags.iter().zip(models).map(|(b, m)| Ok(predict(m, b)?.p)).collect::<Result<_>>()?;
    let whole_auc = auc(&whole, labels)?;
    let aucs: Vec<f64> = (0..iterations)
        .into_par_iter()
        .map(|it| {
            let scores = bags
                .iter()
                .zip(models)
                .enumerate()
                .map(|(s, (b, m))| Ok(predict(m, &b.select(&draw(b.len(), fraction, seed, it, s))?)?.p))
                .collect::<Result<Vec<f64>>>()?;
            auc(&scores, labels)
        })
        .collect::<Result<_>>()?;
    let mut rank_table = Vec::new();
    if iterations > 0 {
        for (s, (b, m)) in bags.iter().zip(models).enumerate().take(rank_samples) {
            let keep = draw(b.len(), fraction, seed, 0, s);
            let full = integrated_gradients(m, b.to_matrix().view(), ig_steps, IgTarget::Probability)?;
            let sub_bag = b.select(&keep)?;
            let sub = integrated_gradients(m, sub_bag.to_matrix().view(), ig_steps, IgTarget::Probability)?;
            let full_ranks = descending_ranks(&full.raw);
            let sub_ranks = descending_ranks(&sub.raw);
            for (pos, &j) in keep.iter().enumerate() {
                rank_table.push(RankShiftRow {
                    sample_id: b.sample_id().to_string(),
                    instance: j,
                    full_rank: full_ranks[j],
                    full_size: b.len(),
                    sub_rank: sub_ranks[pos],
                    sub_size: keep.len(),
                });
            }
        }
    }
    let mut sorted = aucs.clone();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted.first().copied().unwrap_or(f64::NAN), sorted.last().copied().unwrap_or(f64::NAN));
    let med = if aucs.is_empty() { f64::NAN } else { median(&aucs) };
    let below = aucs.iter().filter(|&&a| a < whole_auc).count() as f64 / aucs.len().max(1) as f64;
    Ok(PartialVolumeResult {
        fraction,
        whole_auc,
        aucs,
        min,
        median: med,
        max,
        fraction_below_whole: below,
        rank_table,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaneVariability {
    pub sample_id: String,
    /// `(plane index, risk)` in depth order.
    pub trace: Vec<(usize, f64)>,
    pub p5: f64,
    pub p95: f64,
    pub gap: f64,
    pub crosses_threshold: bool,
    pub single_plane: bool,
}

/// Risk of each plane of a 2D bag, planes keyed by patch depth origin.
pub fn per_plane_predictions(model: &MilModel, bag: &FeatureBag) -> Result<Vec<(usize, f64)>> {
    let mut planes: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (j, c) in bag.coords().iter().enumerate() {
        planes.entry(c.origin[0]).or_default().push(j);
    }
    planes
        .into_iter()
        .map(|(z, idx)| Ok((z as usize, predict(model, &bag.select(&idx)?)?.p)))
        .collect()
}

/// Spread of per-plane risks: 5th and 95th percentiles (linear
/// interpolation), their gap, and whether `threshold` lies between them.
pub fn plane_variability(sample_id: &str, trace: Vec<(usize, f64)>, threshold: f64) -> Result<PlaneVariability> {
    if trace.is_empty() {
        return Err(EvalError::InvalidInput(format!("sample {sample_id} has no planes")));
    }
    let mut risks: Vec<f64> = trace.iter().map(|t| t.1).collect();
    risks.sort_by(f64::total_cmp);
    let p5 = quantile_sorted(&risks, 0.05);
    let p95 = quantile_sorted(&risks, 0.95);
    let single_plane = trace.len() == 1;
    Ok(PlaneVariability {
        sample_id: sample_id.to_string(),
        trace,
        p5,
        p95,
        gap: p95 - p5,
        crosses_threshold: !single_plane && p5 <= threshold && threshold <= p95 && p95 > p5,
        single_plane,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_risks_no_gap() {
        let v = plane_variability("a", (0..10).map(|z| (z, 0.3)).collect(), 0.5).unwrap();
        assert_eq!(v.gap, 0.0);
        assert!(!v.crosses_threshold);
    }

    #[test]
    fn spread_risks_cross_threshold() {
        let trace: Vec<(usize, f64)> = (0..61).map(|z| (z, 0.2 + 0.6 * z as f64 / 60.0)).collect();
        let v = plane_variability("a", trace, 0.5).unwrap();
        assert!(v.crosses_threshold);
        assert!((v.p5 - 0.23).abs() < 1e-12 && (v.p95 - 0.77).abs() < 1e-12);
    }

    #[test]
    fn single_plane_flagged() {
        let v = plane_variability("a", vec![(4, 0.7)], 0.5).unwrap();
        assert!(v.single_plane && v.gap == 0.0 && !v.crosses_threshold);
    }

    #[test]
    fn ranks_descending() {
        assert_eq!(descending_ranks(&[0.1, 0.5, -0.2, 0.5]), vec![3, 1, 4, 2]);
    }
}
