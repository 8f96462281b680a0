//! Correlation tensor, raw and conditioned attention, attended features and
//! attention-threshold segmentation.

use serde::{Deserialize, Serialize};

use crate::error::{OsopError, Result};
use crate::features::{FeatureExtractor, FeatureMap};
use crate::image::{ColorImage, Grid, Mask, ScalarMap};
use crate::template_db::TemplateDatabase;

/// Sum of squared deviations below which a vector counts as constant.
const VARIANCE_FLOOR: f64 = 1e-20;

/// Centered copy of `v` scaled to unit norm, or `None` for a constant vector.
pub fn centered_unit(v: &[f64]) -> Option<Vec<f64>> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let ss: f64 = c.iter().map(|x| x * x).sum();
    if ss <= VARIANCE_FLOOR {
        return None;
    }
    let inv = 1.0 / ss.sqrt();
    Some(c.into_iter().map(|x| x * inv).collect())
}

/// Pearson correlation of two equally long vectors.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(OsopError::DepthMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    if u.len() < 2 {
        return Err(OsopError::InvalidConfig("pearson needs at least 2 entries".into()));
    }
    let a = centered_unit(u).ok_or(OsopError::ZeroVariance)?;
    let b = centered_unit(v).ok_or(OsopError::ZeroVariance)?;
    Ok(dot(&a, &b).clamp(-1.0, 1.0))
}

/// Pearson correlation with constant vectors mapped to 0.
pub fn pearson_or_zero(u: &[f64], v: &[f64]) -> f64 {
    match pearson(u, v) {
        Ok(c) => c,
        Err(OsopError::ZeroVariance) => 0.0,
        Err(e) => panic!("pearson on mismatched inputs: {e}"),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-pixel centered unit vectors of a feature map; constant pixels are zero.
pub fn normalized_pixels(f: &FeatureMap) -> Vec<f64> {
    let d = f.depth();
    let mut out = vec![0.0; f.data().len()];
    for (px, dst) in f.pixels().zip(out.chunks_exact_mut(d)) {
        if let Some(n) = centered_unit(px) {
            dst.copy_from_slice(&n);
        }
    }
    out
}

/// Descriptor tensor o^k of shape `X × Y × Z × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorTensor {
    pub dims: [usize; 3],
    pub depth: usize,
    data: Vec<f64>,
}

impl DescriptorTensor {
    pub fn new(dims: [usize; 3], depth: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] * depth {
            return Err(OsopError::Format(format!(
                "descriptor data length {} does not match {dims:?}x{depth}",
                data.len()
            )));
        }
        Ok(Self { dims, depth, data })
    }

    pub fn entries(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Flat row-major index, x slowest.
    pub fn flat_index(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    pub fn entry(&self, j: usize) -> &[f64] {
        &self.data[j * self.depth..(j + 1) * self.depth]
    }

    pub fn at(&self, idx: [usize; 3]) -> &[f64] {
        self.entry(self.flat_index(idx))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Same entries in a different flat order (for permutation checks).
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &j in order {
            data.extend_from_slice(self.entry(j));
        }
        Self {
            dims: [order.len(), 1, 1],
            depth: self.depth,
            data,
        }
    }
}

/// Per-pixel correlations against every descriptor entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTensor {
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub entries: usize,
    data: Vec<f64>,
}

impl CorrelationTensor {
    pub fn at(&self, u: usize, v: usize, j: usize) -> f64 {
        self.data[(v * self.width + u) * self.entries + j]
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let i = (v * self.width + u) * self.entries;
        &self.data[i..i + self.entries]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn check_depth(f: &FeatureMap, o: &DescriptorTensor) -> Result<()> {
    if f.depth() != o.depth {
        return Err(OsopError::DepthMismatch {
            expected: o.depth,
            found: f.depth(),
        });
    }
    Ok(())
}

fn normalized_entries(o: &DescriptorTensor) -> Vec<Vec<f64>> {
    (0..o.entries())
        .map(|j| centered_unit(o.entry(j)).unwrap_or_else(|| vec![0.0; o.depth]))
        .collect()
}

/// Materializes the full correlation tensor.
pub fn correlate(f: &FeatureMap, o: &DescriptorTensor) -> Result<CorrelationTensor> {
    check_depth(f, o)?;
    let d = f.depth();
    let entries = normalized_entries(o);
    let fp = normalized_pixels(f);
    let mut data = Vec::with_capacity(f.width() * f.height() * entries.len());
    for px in fp.chunks_exact(d) {
        for e in &entries {
            data.push(dot(px, e).clamp(-1.0, 1.0));
        }
    }
    Ok(CorrelationTensor {
        level: f.level,
        width: f.width(),
        height: f.height(),
        entries: entries.len(),
        data,
    })
}

/// Clamped per-pixel sum of correlations.
pub fn raw_attention(c: &CorrelationTensor) -> ScalarMap {
    Grid::from_fn(c.width, c.height, |u, v| c.pixel(u, v).iter().sum::<f64>().max(0.0))
}

/// Same as `raw_attention(correlate(f, o))` without the tensor: the sum of
/// Pearson correlations is one dot product with the summed unit entries.
pub fn raw_attention_fused(f: &FeatureMap, o: &DescriptorTensor) -> Result<ScalarMap> {
    check_depth(f, o)?;
    let d = f.depth();
    let mut total = vec![0.0; d];
    for e in normalized_entries(o) {
        for (t, x) in total.iter_mut().zip(&e) {
            *t += x;
        }
    }
    let fp = normalized_pixels(f);
    let vals = fp.chunks_exact(d).map(|px| dot(px, &total).max(0.0)).collect();
    Ok(Grid::from_vec(f.width(), f.height(), vals))
}

/// Zeroes entries not above the spatial mean, then divides by the max.
pub fn threshold_and_scale(map: &ScalarMap) -> ScalarMap {
    let mean = map.mean();
    let max = map.max_value();
    // Values equal to the mean up to summation round-off count as "at" it.
    let cut = mean + 1e-12 * max.abs();
    let kept = map.map(|&x| if x > cut { x } else { 0.0 });
    let m = kept.max_value();
    if m > 0.0 {
        kept.map(|&x| x / m)
    } else {
        kept
    }
}

/// Conditions `a_k` on the (already thresholded) last-level map.
pub fn condition_attention(a_k: &ScalarMap, a_last: &ScalarMap) -> ScalarMap {
    let up = a_last.resize_bilinear(a_k.width(), a_k.height());
    let product = Grid::from_vec(
        a_k.width(),
        a_k.height(),
        a_k.data().iter().zip(up.data()).map(|(a, b)| a * b).collect(),
    );
    threshold_and_scale(&product)
}

/// Â^k for every level; the last level is thresholded but not conditioned.
pub fn attention_maps(features: &[FeatureMap], descriptors: &[DescriptorTensor]) -> Result<Vec<ScalarMap>> {
    if features.len() != descriptors.len() || features.len() < 2 {
        return Err(OsopError::ConfigMismatch(format!(
            "{} feature levels vs {} descriptor levels",
            features.len(),
            descriptors.len()
        )));
    }
    let raw: Vec<ScalarMap> = features
        .iter()
        .zip(descriptors)
        .map(|(f, o)| raw_attention_fused(f, o))
        .collect::<Result<_>>()?;
    let last = threshold_and_scale(raw.last().unwrap());
    let mut out: Vec<ScalarMap> = raw[..raw.len() - 1].iter().map(|a| condition_attention(a, &last)).collect();
    out.push(last);
    Ok(out)
}

/// f̂ = Â·f − (1 − Â)·f.
pub fn attend_features(f: &FeatureMap, a: &ScalarMap) -> Result<FeatureMap> {
    if a.dims() != (f.width(), f.height()) {
        return Err(OsopError::ResolutionMismatch(format!(
            "attention {:?} vs features {}x{}",
            a.dims(),
            f.width(),
            f.height()
        )));
    }
    let d = f.depth();
    let mut data = Vec::with_capacity(f.data().len());
    for (px, &w) in f.pixels().zip(a.data()) {
        let s = 2.0 * w - 1.0;
        data.extend(px.iter().take(d).map(|x| s * x));
    }
    Ok(FeatureMap::new(f.level, f.width(), f.height(), d, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    /// Foreground iff probability ≥ this fraction of the map's max.
    pub threshold_fraction: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            threshold_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    pub probability: ScalarMap,
    pub mask: Mask,
}

impl SegmentationMask {
    pub fn from_probability(probability: ScalarMap, threshold_fraction: f64) -> Self {
        let mask = binarize(&probability, threshold_fraction);
        Self { probability, mask }
    }
}

/// Foreground iff `p ≥ fraction·max(p)`; an all-zero map gives an empty mask.
pub fn binarize(p: &ScalarMap, fraction: f64) -> Mask {
    let max = p.max_value();
    if !(max > 0.0) {
        return Grid::filled(p.width(), p.height(), false);
    }
    let t = fraction * max;
    p.map(|&x| x > 0.0 && x >= t)
}

/// Segmentation from precomputed features and descriptors.
pub fn segment_features(
    features: &[FeatureMap],
    descriptors: &[DescriptorTensor],
    width: usize,
    height: usize,
    cfg: &SegmentationConfig,
) -> Result<SegmentationMask> {
    let maps = attention_maps(features, descriptors)?;
    let mut prob = vec![0.0; width * height];
    for m in &maps {
        let up = m.resize_bilinear(width, height);
        for (p, x) in prob.iter_mut().zip(up.data()) {
            *p += x;
        }
    }
    let n = maps.len() as f64;
    let prob = Grid::from_vec(width, height, prob.into_iter().map(|x| x / n).collect());
    Ok(SegmentationMask::from_probability(prob, cfg.threshold_fraction))
}

/// Multi-level averaged attention segmentation of a full image.
pub fn segment(
    image: &ColorImage,
    db: &TemplateDatabase,
    extractor: &dyn FeatureExtractor,
    cfg: &SegmentationConfig,
) -> Result<SegmentationMask> {
    db.check_extractor(extractor.config())?;
    let features = extractor.extract(image)?;
    segment_features(&features, db.descriptors(), image.width(), image.height(), cfg)
}

/// 1 − (2·Σ p·g + ε)/(Σ p + Σ g + ε), ε = 1.
pub fn dice_loss(pred: &ScalarMap, gt: &Mask) -> Result<f64> {
    let (i, s) = dice_sums(pred, gt)?;
    Ok(1.0 - (2.0 * i + DICE_EPS) / (s + DICE_EPS))
}

/// Gradient of [`dice_loss`] with respect to `pred`.
pub fn dice_loss_grad(pred: &ScalarMap, gt: &Mask) -> Result<Vec<f64>> {
    let (i, s) = dice_sums(pred, gt)?;
    let den = s + DICE_EPS;
    let num = 2.0 * i + DICE_EPS;
    Ok(gt
        .data()
        .iter()
        .map(|&g| {
            let g = if g { 1.0 } else { 0.0 };
            -(2.0 * g * den - num) / (den * den)
        })
        .collect())
}

const DICE_EPS: f64 = 1.0;

fn dice_sums(pred: &ScalarMap, gt: &Mask) -> Result<(f64, f64)> {
    if pred.dims() != gt.dims() {
        return Err(OsopError::ResolutionMismatch(format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let mut inter = 0.0;
    let mut sum = 0.0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let g = if g { 1.0 } else { 0.0 };
        inter += p * g;
        sum += p + g;
    }
    Ok((inter, sum))
}
