//! Independent oracles and random instance generators shared by the
//! integration tests and the acceptance target.

#![allow(dead_code)]

use probeseg::feature_store::{FeatureMap, ImageSample};
use probeseg::labels::{LabelMask, Provenance, IGNORE_INDEX};
use probeseg::probe::{self, LossHead, Normalization, ProbeParams, Standardizer};
use probeseg::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const HEADS: [LossHead; 2] = [LossHead::Softmax, LossHead::PerClassSigmoid];
pub const NORMALIZATIONS: [Normalization; 2] = [Normalization::LabeledCount, Normalization::ImageArea];

/// Per-class IoU by literal set intersection and union over the non-ignored
/// pixels, and the mean over classes with a non-empty union.
pub fn brute_force_iou(pred: &[u8], gt: &[u8], num_classes: usize) -> (Vec<Option<f64>>, Option<f64>) {
    let per_class: Vec<Option<f64>> = (0..num_classes as u8)
        .map(|k| {
            let counted = || pred.iter().zip(gt).filter(|(_, &g)| g != IGNORE_INDEX);
            let inter = counted().filter(|(&p, &g)| p == k && g == k).count();
            let union = counted().filter(|(&p, &g)| p == k || g == k).count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (per_class, mean)
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&n| c2(n)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(a.len() as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, num_classes: usize, ignore_p: f64) -> LabelMask {
    let values = (0..h * w)
        .map(|_| {
            if rng.gen_bool(ignore_p) {
                IGNORE_INDEX
            } else {
                rng.gen_range(0..num_classes) as u8
            }
        })
        .collect();
    LabelMask::new(h, w, values, num_classes).unwrap()
}

/// A mask of blocky regions, more like real segmentation than i.i.d. noise.
pub fn random_region_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, num_classes: usize) -> LabelMask {
    let sites: Vec<(f64, f64, u8)> = (0..rng.gen_range(2..8))
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0..num_classes) as u8,
            )
        })
        .collect();
    let values = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - y).powi(2) + (a.1 - x).powi(2);
                    let db = (b.0 - y).powi(2) + (b.1 - x).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap()
                .2
        })
        .collect();
    LabelMask::new(h, w, values, num_classes).unwrap()
}

pub struct GradInstance {
    pub params: ProbeParams<f64>,
    pub batch: Vec<ImageSample>,
}

/// Small random probe problem: grid at most 4x4, Z at most 16, C at most 5,
/// one to three samples with partially ignored labels.
pub fn random_grad_instance(rng: &mut ChaCha8Rng) -> GradInstance {
    let z = rng.gen_range(1..=16);
    let c = rng.gen_range(1..=5);
    let weight: Vec<f64> = (0..z * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bias: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut params = ProbeParams::new(Tensor::new(vec![z, c], weight).unwrap(), bias).unwrap();
    if rng.gen_bool(0.3) {
        params.standardizer = Some(Standardizer {
            mean: (0..z).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            inv_std: (0..z).map(|_| rng.gen_range(0.5..2.0)).collect(),
        });
    }
    let batch = (0..rng.gen_range(1..=3))
        .map(|i| {
            let (gh, gw) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let (h, w) = (gh * rng.gen_range(1..=3) + rng.gen_range(0..2), gw * rng.gen_range(1..=3) + rng.gen_range(0..2));
            let data: Vec<f32> = (0..gh * gw * z).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            let features = FeatureMap::new(format!("g{i}"), Tensor::new(vec![gh, gw, z], data).unwrap(), h, w).unwrap();
            let labels = random_mask(rng, h, w, c, 0.4);
            ImageSample::new(features, Some(labels), Provenance::Gt).unwrap()
        })
        .collect();
    GradInstance { params, batch }
}

/// Batch loss evaluated through the full-resolution forward pass and the
/// masked loss on upsampled logits, independent of the gradient code path.
pub fn reference_loss(
    params: &ProbeParams<f64>,
    batch: &[ImageSample],
    normalization: Normalization,
    head: LossHead,
) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|s| {
            let out = probe::forward(&s.features, params).unwrap();
            probe::masked_ce_loss(&out, s.labels.as_ref().unwrap(), normalization, head)
                .unwrap()
                .loss
        })
        .sum();
    total / batch.len() as f64
}

/// Central differences over every weight and bias coordinate; returns
/// (weight gradient, bias gradient).
pub fn finite_difference(
    params: &ProbeParams<f64>,
    batch: &[ImageSample],
    normalization: Normalization,
    head: LossHead,
    step: f64,
) -> (Vec<f64>, Vec<f64>) {
    let eval = |p: &ProbeParams<f64>| reference_loss(p, batch, normalization, head);
    let mut gw = Vec::new();
    for i in 0..params.weight.len() {
        let mut plus = params.clone();
        plus.weight.data_mut()[i] += step;
        let mut minus = params.clone();
        minus.weight.data_mut()[i] -= step;
        gw.push((eval(&plus) - eval(&minus)) / (2.0 * step));
    }
    let mut gb = Vec::new();
    for k in 0..params.bias.len() {
        let mut plus = params.clone();
        plus.bias[k] += step;
        let mut minus = params.clone();
        minus.bias[k] -= step;
        gb.push((eval(&plus) - eval(&minus)) / (2.0 * step));
    }
    (gw, gb)
}

/// Relative error with a small absolute floor so that coordinates whose true
/// gradient is zero are judged on absolute terms.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn mean_iou(pred: &LabelMask, gt: &LabelMask) -> f64 {
    let mut r = probeseg::eval::MetricReport::new(gt.num_classes());
    r.accumulate(pred, gt).unwrap();
    r.miou().unwrap().miou
}
