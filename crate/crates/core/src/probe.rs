//! Linear segmentation head over frozen patch features.
//!
//! Each patch token is mapped to `C` class logits by one affine layer, the
//! logit grid is bilinearly upsampled to pixel resolution and the masked
//! pixel-wise cross-entropy is minimized with mini-batch SGD. Only
//! [`ProbeParams`] change during training; features are borrowed immutably.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::error::{Error, Result};
use crate::feature_store::{FeatureMap, ImageSample, SampleSource};
use crate::labels::LabelMask;
use crate::rng::{self, Purpose};
use crate::tensor::{self, AxisSampler, Scalar, Tensor};

/// Denominator of the masked loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Divide by the number of supervised pixels.
    #[default]
    LabeledCount,
    /// Divide by `H * W` whatever the number of supervised pixels.
    ImageArea,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossHead {
    /// Softmax over classes, negative log-likelihood of the labeled class.
    #[default]
    Softmax,
    /// Independent sigmoid per class with one-vs-rest binary cross-entropy.
    PerClassSigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub crop_pixels: usize,
    pub flip_prob: f64,
    pub normalization: Normalization,
    pub loss_head: LossHead,
    /// Standardize every feature channel with training-set statistics before the affine map.
    pub standardize_features: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            iterations: 20_000,
            batch_size: 10,
            momentum: 0.9,
            weight_decay: 0.0,
            crop_pixels: 448,
            flip_prob: 0.5,
            normalization: Normalization::LabeledCount,
            loss_head: LossHead::Softmax,
            standardize_features: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.iterations < 1 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("flip_prob must be in [0, 1]"));
        }
        if patch_size == 0 || self.crop_pixels == 0 || !self.crop_pixels.is_multiple_of(patch_size) {
            return Err(Error::invalid(format!(
                "crop_pixels {} must be a positive multiple of the patch size {patch_size}",
                self.crop_pixels
            )));
        }
        Ok(())
    }
}

/// Per-channel affine standardization `(x - mean) * inv_std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer<T = f32> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

impl<T: Scalar> Standardizer<T> {
    /// Channel statistics over every token of `maps`.
    pub fn fit<'a>(maps: impl IntoIterator<Item = &'a FeatureMap>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for m in maps {
            if sum.is_empty() {
                sum = vec![0.0; m.dim()];
                sq = vec![0.0; m.dim()];
            }
            if m.dim() != sum.len() {
                return Err(Error::invalid("feature maps disagree on dim"));
            }
            for tok in m.tensor().data().chunks(m.dim()) {
                for (k, &v) in tok.iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::invalid("no tokens to fit standardization"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let inv_std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n as f64 - m * m).max(0.0);
                if var.sqrt() > 1e-12 {
                    T::of_f64(1.0 / var.sqrt())
                } else {
                    T::one()
                }
            })
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(T::of_f64).collect(),
            inv_std,
        })
    }
}

/// The trainable head: `weight` is `Z x C`, `bias` has `C` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub standardizer: Option<Standardizer<T>>,
}

impl<T: Scalar> ProbeParams<T> {
    pub fn zeros(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![feature_dim, num_classes]),
            bias: vec![T::zero(); num_classes],
            standardizer: None,
        }
    }

    pub fn new(weight: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        match weight.shape() {
            [_, c] if *c == bias.len() && *c > 0 => {}
            s => {
                return Err(Error::invalid(format!(
                    "weight {s:?} does not match bias of {}",
                    bias.len()
                )))
            }
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("bias must be finite"));
        }
        Ok(Self {
            weight,
            bias,
            standardizer: None,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ProbeParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of_f64(x.as_f64())).collect::<Vec<U>>();
        ProbeParams {
            weight: self.weight.cast(),
            bias: conv(&self.bias),
            standardizer: self.standardizer.as_ref().map(|s| Standardizer {
                mean: conv(&s.mean),
                inv_std: conv(&s.inv_std),
            }),
        }
    }

    fn check_features(&self, features: &FeatureMap) -> Result<()> {
        if features.dim() != self.feature_dim() {
            return Err(Error::invalid(format!(
                "features of {:?} have dim {}, probe expects {}",
                features.image_id(),
                features.dim(),
                self.feature_dim()
            )));
        }
        Ok(())
    }

    /// The token as seen by the affine map (standardized when configured).
    fn input_token(&self, raw: &[f32], out: &mut [T]) {
        match &self.standardizer {
            Some(s) => {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = (T::of_f64(raw[k] as f64) - s.mean[k]) * s.inv_std[k];
                }
            }
            None => {
                for (o, &r) in out.iter_mut().zip(raw) {
                    *o = T::of_f64(r as f64);
                }
            }
        }
    }

    /// Logits on the patch grid, `grid_h x grid_w x C`.
    pub fn patch_logits(&self, features: &FeatureMap) -> Result<Tensor<T>> {
        self.check_features(features)?;
        let (z, c) = (self.feature_dim(), self.num_classes());
        let w = self.weight.data();
        let mut token = vec![T::zero(); z];
        let mut out = Vec::with_capacity(features.num_tokens() * c);
        for raw in features.tensor().data().chunks(z) {
            self.input_token(raw, &mut token);
            for k in 0..c {
                let mut acc = self.bias[k];
                for (j, &x) in token.iter().enumerate() {
                    acc = acc + x * w[j * c + k];
                }
                out.push(acc);
            }
        }
        Tensor::new(vec![features.grid_h(), features.grid_w(), c], out)
    }
}

/// Pixel-resolution prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutput<T = f32> {
    pub logits: Tensor<T>,
    pub argmax_map: LabelMask,
}

impl<T: Scalar> SegmentationOutput<T> {
    pub fn from_logits(logits: Tensor<T>) -> Result<Self> {
        let (h, w, c) = match logits.shape() {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::invalid(format!("logits must be H x W x C, got {s:?}"))),
        };
        let argmax = logits
            .data()
            .chunks(c)
            .map(|px| tensor::argmax(px) as u8)
            .collect();
        let argmax_map = LabelMask::new(h, w, argmax, c)?;
        Ok(Self { logits, argmax_map })
    }
}

/// Affine head on every token, then align-corners upsampling to the image size.
pub fn forward<T: Scalar>(
    features: &FeatureMap,
    params: &ProbeParams<T>,
) -> Result<SegmentationOutput<T>> {
    let patch = params.patch_logits(features)?;
    let logits = patch.bilinear_resize(features.image_h(), features.image_w())?;
    SegmentationOutput::from_logits(logits)
}

/// Loss value and how it was normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue<T = f32> {
    pub loss: T,
    pub supervised_pixels: usize,
    /// No pixel carried a label; the loss is defined as zero.
    pub empty_supervision: bool,
}

fn pixel_loss<T: Scalar>(logits: &[T], class: usize, head: LossHead, grad: Option<&mut [T]>) -> f64 {
    match head {
        LossHead::Softmax => {
            let Some(g) = grad else {
                return (tensor::logsumexp(logits) - logits[class]).as_f64();
            };
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (gk, &z) in g.iter_mut().zip(logits) {
                *gk = (z - max).exp();
                sum = sum + *gk;
            }
            let inv = T::one() / sum;
            for gk in g.iter_mut() {
                *gk = *gk * inv;
            }
            g[class] = g[class] - T::one();
            (max + sum.ln() - logits[class]).as_f64()
        }
        LossHead::PerClassSigmoid => {
            let mut loss = 0.0;
            let mut g = grad;
            for (k, &z) in logits.iter().enumerate() {
                let target = if k == class { T::one() } else { T::zero() };
                loss += (tensor::softplus(z) - target * z).as_f64();
                if let Some(g) = g.as_deref_mut() {
                    g[k] = tensor::sigmoid(z) - target;
                }
            }
            loss
        }
    }
}

fn normalizer(labels: &LabelMask, supervised: usize, mode: Normalization) -> usize {
    match mode {
        Normalization::LabeledCount => supervised,
        Normalization::ImageArea => labels.height() * labels.width(),
    }
}

/// Masked pixel-wise cross-entropy of a pixel-resolution prediction.
///
/// Pixels equal to the ignore index contribute nothing. With
/// [`Normalization::LabeledCount`] and no labeled pixel the result is zero with
/// `empty_supervision` set.
pub fn masked_ce_loss<T: Scalar>(
    out: &SegmentationOutput<T>,
    labels: &LabelMask,
    normalization: Normalization,
    head: LossHead,
) -> Result<LossValue<T>> {
    let (h, w, c) = match out.logits.shape() {
        [h, w, c] => (*h, *w, *c),
        _ => unreachable!("SegmentationOutput holds 3-d logits"),
    };
    if labels.dims() != (h, w) {
        return Err(Error::invalid(format!(
            "labels {:?} vs logits {h}x{w}",
            labels.dims()
        )));
    }
    if labels.num_classes() != c {
        return Err(Error::invalid("label class count differs from logits"));
    }
    let mut total = 0.0;
    let mut supervised = 0;
    for (i, px) in out.logits.data().chunks(c).enumerate() {
        if labels.is_labeled(i) {
            total += pixel_loss(px, labels.values()[i] as usize, head, None);
            supervised += 1;
        }
    }
    let n = normalizer(labels, supervised, normalization);
    let empty = supervised == 0;
    if empty {
        warn!("loss evaluated on a mask without labeled pixels");
    }
    Ok(LossValue {
        loss: if n == 0 { T::zero() } else { T::of_f64(total / n as f64) },
        supervised_pixels: supervised,
        empty_supervision: empty,
    })
}

/// Batch loss with gradients for weight (`Z x C`) and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub loss: T,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// One sample's contribution, already divided by its normalizer.
struct SampleGrad<T> {
    loss: f64,
    weight: Vec<T>,
    bias: Vec<T>,
}

/// Loss and gradient of one sample, computed pixel by pixel over supervised
/// pixels only. Each pixel's logits are the bilinear blend of four patch
/// logits, so its gradient flows back to those four patches with the same
/// weights (the transpose of the upsampling).
fn sample_grad<T: Scalar>(
    params: &ProbeParams<T>,
    features: &FeatureMap,
    labels: &LabelMask,
    normalization: Normalization,
    head: LossHead,
) -> Result<SampleGrad<T>> {
    let (z, c) = (params.feature_dim(), params.num_classes());
    if labels.dims() != (features.image_h(), features.image_w()) {
        return Err(Error::invalid(format!(
            "labels of {:?} are {:?}, image is {}x{}",
            features.image_id(),
            labels.dims(),
            features.image_h(),
            features.image_w()
        )));
    }
    if labels.num_classes() != c {
        return Err(Error::invalid("label class count differs from probe"));
    }
    let patch = params.patch_logits(features)?;
    let p = patch.data();
    let (gh, gw) = (features.grid_h(), features.grid_w());
    let (h, w) = labels.dims();
    let rows = AxisSampler::new(gh, h);
    let cols = AxisSampler::new(gw, w);

    let mut patch_grad = vec![T::zero(); gh * gw * c];
    let mut logits = vec![T::zero(); c];
    let mut g = vec![T::zero(); c];
    let mut total = 0.0;
    let mut supervised = 0usize;
    let col_w: Vec<T> = cols.taps().iter().map(|t| T::of_f64(t.frac)).collect();
    for (row, ry) in labels.values().chunks(w).zip(rows.taps()) {
        let wy = T::of_f64(ry.frac);
        for ((&y, rx), &wx) in row.iter().zip(cols.taps()).zip(&col_w) {
            if y == labels.ignore_index() {
                continue;
            }
            supervised += 1;
            let corners = [
                (ry.lo * gw + rx.lo, (T::one() - wy) * (T::one() - wx)),
                (ry.lo * gw + rx.hi, (T::one() - wy) * wx),
                (ry.hi * gw + rx.lo, wy * (T::one() - wx)),
                (ry.hi * gw + rx.hi, wy * wx),
            ];
            logits.iter_mut().for_each(|v| *v = T::zero());
            for &(cell, weight) in &corners {
                for (l, &v) in logits.iter_mut().zip(&p[cell * c..(cell + 1) * c]) {
                    *l = *l + weight * v;
                }
            }
            total += pixel_loss(&logits, y as usize, head, Some(&mut g));
            for &(cell, weight) in &corners {
                for (pg, &gk) in patch_grad[cell * c..(cell + 1) * c].iter_mut().zip(&g) {
                    *pg = *pg + weight * gk;
                }
            }
        }
    }

    let n = normalizer(labels, supervised, normalization);
    let mut weight = vec![T::zero(); z * c];
    let mut bias = vec![T::zero(); c];
    if n == 0 || supervised == 0 {
        return Ok(SampleGrad {
            loss: 0.0,
            weight,
            bias,
        });
    }
    let scale = T::of_f64(1.0 / n as f64);
    let mut token = vec![T::zero(); z];
    for (cell, raw) in features.tensor().data().chunks(z).enumerate() {
        let gc = &patch_grad[cell * c..(cell + 1) * c];
        if gc.iter().all(|v| v.is_zero()) {
            continue;
        }
        params.input_token(raw, &mut token);
        for (j, &x) in token.iter().enumerate() {
            for k in 0..c {
                weight[j * c + k] = weight[j * c + k] + x * gc[k];
            }
        }
        for k in 0..c {
            bias[k] = bias[k] + gc[k];
        }
    }
    weight.iter_mut().for_each(|v| *v = *v * scale);
    bias.iter_mut().for_each(|v| *v = *v * scale);
    Ok(SampleGrad {
        loss: total / n as f64,
        weight,
        bias,
    })
}

fn mean_of<T: Scalar>(params: &ProbeParams<T>, parts: Vec<SampleGrad<T>>) -> Gradients<T> {
    let (z, c) = (params.feature_dim(), params.num_classes());
    let count = parts.len().max(1) as f64;
    let inv = T::of_f64(1.0 / count);
    let mut weight = vec![T::zero(); z * c];
    let mut bias = vec![T::zero(); c];
    let mut loss = 0.0;
    for part in parts {
        loss += part.loss;
        for (a, b) in weight.iter_mut().zip(part.weight) {
            *a = *a + b;
        }
        for (a, b) in bias.iter_mut().zip(part.bias) {
            *a = *a + b;
        }
    }
    weight.iter_mut().for_each(|v| *v = *v * inv);
    bias.iter_mut().for_each(|v| *v = *v * inv);
    Gradients {
        loss: T::of_f64(loss / count),
        weight: Tensor::new(vec![z, c], weight).expect("finite gradient"),
        bias,
    }
}

/// Mean over the batch of each sample's masked loss, with analytic gradients.
pub fn loss_and_grad<T: Scalar>(
    params: &ProbeParams<T>,
    batch: &[ImageSample],
    normalization: Normalization,
    head: LossHead,
) -> Result<Gradients<T>> {
    if batch.is_empty() {
        return Err(Error::invalid("batch is empty"));
    }
    let parts = batch
        .iter()
        .map(|s| {
            let labels = s
                .labels
                .as_ref()
                .ok_or_else(|| Error::MissingLabels(s.image_id().to_string()))?;
            sample_grad(params, &s.features, labels, normalization, head)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_of(params, parts))
}

/// What [`augment`] did to a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentReport {
    pub cropped: bool,
    pub flipped: bool,
    /// The requested crop exceeded the grid on at least one axis; that axis was kept whole.
    pub crop_clamped: bool,
}

/// Random crop of `crop_pixels / patch_size` patches on the feature grid
/// (with the matching pixel window of the mask), then a horizontal flip with
/// probability `flip_prob`. Photometric jitter has no meaning on stored
/// features and is not applied here.
pub fn augment(
    sample: &ImageSample,
    config: &TrainConfig,
    patch_size: usize,
    seed: u64,
) -> Result<(ImageSample, AugmentReport)> {
    if patch_size == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = &sample.features;
    let want = (config.crop_pixels / patch_size).max(1);
    let mut report = AugmentReport::default();

    let mut window = |grid: usize, image: usize, rng: &mut ChaCha8Rng| {
        let n = want.min(grid);
        if want > grid {
            report.crop_clamped = true;
        }
        let off = if n < grid { rng.gen_range(0..=grid - n) } else { 0 };
        let px0 = (off * image + grid / 2) / grid;
        let px1 = ((off + n) * image + grid / 2) / grid;
        (off, n, px0, px1 - px0)
    };
    let (r0, gh, py0, ph) = window(f.grid_h(), f.image_h(), &mut rng);
    let (c0, gw, px0, pw) = window(f.grid_w(), f.image_w(), &mut rng);

    let mut features = f.clone();
    let mut labels = sample.labels.clone();
    if (gh, gw) != (f.grid_h(), f.grid_w()) {
        report.cropped = true;
        features = f.crop_grid(r0, c0, gh, gw, ph, pw)?;
        labels = labels.map(|l| l.crop(py0, px0, ph, pw)).transpose()?;
    }
    if rng.gen::<f64>() < config.flip_prob {
        report.flipped = true;
        features = features.flip_horizontal();
        labels = labels.map(|l| l.flip_horizontal());
    }
    Ok((
        ImageSample::new(features, labels, sample.provenance)?,
        report,
    ))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ProbeParams<f32>,
    /// Batch loss before each update.
    pub history: Vec<f64>,
    /// Samples whose crop had to be clamped to the grid.
    pub crop_clamped: usize,
    /// Batches with no supervised pixel at all.
    pub empty_batches: usize,
}

/// Mini-batch SGD with momentum from zero-initialized parameters.
///
/// The sample order is a seeded permutation, redrawn every epoch. Batches are
/// assembled and differentiated in parallel, but the per-sample gradients are
/// summed in batch order, so results do not depend on the thread count.
pub fn train(
    source: &impl SampleSource,
    sample_ids: &[String],
    config: &TrainConfig,
) -> Result<TrainOutput> {
    let manifest = source.manifest();
    config.validate(manifest.patch_size)?;
    if sample_ids.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    for id in sample_ids {
        if !source.has_labels(id)? {
            return Err(Error::MissingLabels(id.clone()));
        }
    }
    let mut params = ProbeParams::<f32>::zeros(manifest.feature_dim, manifest.num_classes);
    if config.standardize_features {
        let maps = sample_ids
            .iter()
            .map(|id| source.load_sample(id).map(|s| s.features))
            .collect::<Result<Vec<_>>>()?;
        params.standardizer = Some(Standardizer::fit(&maps)?);
    }

    let n = sample_ids.len();
    let batch = config.batch_size;
    let lr = config.learning_rate as f32;
    let mu = config.momentum as f32;
    let wd = config.weight_decay as f32;
    let mut velocity_w = vec![0f32; params.weight.len()];
    let mut velocity_b = vec![0f32; params.bias.len()];
    let mut perms: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut history = Vec::with_capacity(config.iterations);
    let mut crop_clamped = 0;
    let mut empty_batches = 0;

    for iteration in 0..config.iterations {
        let positions: Vec<usize> = (iteration * batch..(iteration + 1) * batch).collect();
        for epoch in positions.iter().map(|p| p / n) {
            perms.entry(epoch).or_insert_with(|| {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng::stream(config.seed, Purpose::Shuffle, epoch as u64));
                order
            });
        }
        let first_epoch = positions[0] / n;
        perms.retain(|&e, _| e >= first_epoch);

        let parts = positions
            .par_iter()
            .map(|&pos| {
                let id = &sample_ids[perms[&(pos / n)][pos % n]];
                let sample = source.load_sample(id)?;
                let aug_seed = rng::child_seed(config.seed, Purpose::Augment, pos as u64);
                let (sample, report) = augment(&sample, config, manifest.patch_size, aug_seed)?;
                let labels = sample
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::MissingLabels(id.clone()))?;
                let g = sample_grad(
                    &params,
                    &sample.features,
                    labels,
                    config.normalization,
                    config.loss_head,
                )?;
                Ok((g, report.crop_clamped, labels.labeled_count() == 0))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grads = Vec::with_capacity(parts.len());
        let mut supervised_any = false;
        for (g, clamped, empty) in parts {
            crop_clamped += clamped as usize;
            supervised_any |= !empty;
            grads.push(g);
        }
        if !supervised_any {
            empty_batches += 1;
        }
        let g = mean_of(&params, grads);
        history.push(g.loss as f64);

        let w = params.weight.data_mut();
        for ((wi, vi), &gi) in w.iter_mut().zip(&mut velocity_w).zip(g.weight.data()) {
            *vi = mu * *vi + gi + wd * *wi;
            *wi -= lr * *vi;
        }
        for ((bi, vi), &gi) in params.bias.iter_mut().zip(&mut velocity_b).zip(&g.bias) {
            *vi = mu * *vi + gi + wd * *bi;
            *bi -= lr * *vi;
        }
        if !params.is_finite() {
            return Err(Error::invalid(format!(
                "parameters diverged at iteration {iteration}; lower the learning rate"
            )));
        }
        if (iteration + 1) % 1000 == 0 {
            info!(iteration = iteration + 1, loss = g.loss, "training");
        }
    }
    if crop_clamped > 0 {
        warn!(
            "crop of {} px exceeded the feature grid for {crop_clamped} samples; those axes were kept whole",
            config.crop_pixels
        );
    }
    if empty_batches > 0 {
        warn!("{empty_batches} batches had no supervised pixels");
    }
    Ok(TrainOutput {
        params,
        history,
        crop_clamped,
        empty_batches,
    })
}
