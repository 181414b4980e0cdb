//! Feature-map importance from heat maps and receptive-field masks, and the
//! rank-correlation study tying those statistics to kernel statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{kernel_entropy, kernel_sparsity, knn_distance_matrix, DEFAULT_K_NEIGHBORS};
use crate::engine::forward_observed;
use crate::error::{KseError, Result};
use crate::model::{ConvKind, Layer, ModelGraph, Payload};
use crate::tensor::{bilinear_upscale, FeatureStack, Plane};

pub const DEFAULT_QUANTILE: f64 = 0.005;

/// Pixel importance at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub values: Plane,
}

/// Binary receptive field at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceptiveMask {
    height: usize,
    width: usize,
    mask: Vec<bool>,
    pub quantile: f64,
}

impl ReceptiveMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn from_bits(height: usize, width: usize, mask: Vec<bool>, quantile: f64) -> Result<Self> {
        if mask.len() != height * width {
            return Err(KseError::Shape(format!("mask has {} entries for {height}x{width}", mask.len())));
        }
        Ok(Self {
            height,
            width,
            mask,
            quantile,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Importance {
    /// `sum H * M`.
    pub score: f64,
    /// Number of mask pixels set.
    pub area: usize,
    /// Mean heat over the mask, zero for an empty mask.
    pub richness: f64,
}

fn last_conv(m: &ModelGraph) -> Option<usize> {
    m.layers()
        .iter()
        .rposition(|l| matches!(l, Layer::Conv(c) if c.kind == ConvKind::Conv))
}

fn sum_channels(fm: &FeatureStack) -> Plane {
    let len = fm.plane_len();
    let mut acc = vec![0.0f64; len];
    for c in 0..fm.channels() {
        for (a, v) in acc.iter_mut().zip(fm.channel(c)) {
            *a += *v as f64;
        }
    }
    Plane::new(fm.height(), fm.width(), acc.into_iter().map(|v| v as f32).collect()).expect("finite sums")
}

/// Index of the layer whose output feeds the heat map: the last spatial
/// convolution, or the ReLU right after it.
fn heat_source(m: &ModelGraph) -> Result<usize> {
    let conv = last_conv(m).ok_or_else(|| KseError::Shape("model has no convolutional layer".into()))?;
    Ok(match m.layers().get(conv + 1) {
        Some(Layer::Relu) => conv + 1,
        _ => conv,
    })
}

fn require_dense(m: &ModelGraph) -> Result<()> {
    if m.has_compressed_payloads() {
        return Err(KseError::Stage("interpretation runs on the dense model".into()));
    }
    Ok(())
}

/// Channel-summed output of the last convolution, upscaled to the image.
pub fn heat_map(m: &ModelGraph, image: &FeatureStack) -> Result<HeatMap> {
    require_dense(m)?;
    let source = heat_source(m)?;
    let mut captured = None;
    forward_observed(m, image, &mut |i, _, out| {
        if i == source {
            captured = Some(sum_channels(out));
        }
    })?;
    let summed = captured.expect("source layer ran");
    Ok(HeatMap {
        values: bilinear_upscale(&summed, image.height(), image.width())?,
    })
}

fn quantile_threshold(values: &[f32], quantile: f64) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let m = sorted.len();
    let rank = ((1.0 - quantile) * m as f64).ceil() as usize;
    sorted[rank.clamp(1, m) - 1]
}

/// Upscales `fm` and keeps the pixels strictly above its top-`quantile` level.
pub fn receptive_mask(fm: &Plane, input_h: usize, input_w: usize, quantile: f64) -> Result<ReceptiveMask> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(KseError::Config(format!("quantile must lie in (0, 1), got {quantile}")));
    }
    let up = bilinear_upscale(fm, input_h, input_w)?;
    let t = quantile_threshold(up.data(), quantile);
    Ok(ReceptiveMask {
        height: input_h,
        width: input_w,
        mask: up.data().iter().map(|&v| v > t).collect(),
        quantile,
    })
}

/// Overlap of a mask with a heat map.
pub fn feature_importance(mask: &ReceptiveMask, h: &HeatMap) -> Result<Importance> {
    if mask.height != h.values.height() || mask.width != h.values.width() {
        return Err(KseError::Shape(format!(
            "mask is {}x{}, heat map is {}x{}",
            mask.height,
            mask.width,
            h.values.height(),
            h.values.width()
        )));
    }
    let mut score = 0.0f64;
    let mut area = 0usize;
    for (&m, &v) in mask.mask.iter().zip(h.values.data()) {
        if m {
            score += v as f64;
            area += 1;
        }
    }
    let richness = if area > 0 { score / area as f64 } else { 0.0 };
    Ok(Importance { score, area, richness })
}

/// One-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: the product-moment correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(KseError::Shape(format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(KseError::UndefinedCorrelation("need at least two observations".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(KseError::UndefinedCorrelation("an argument is constant".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyConfig {
    pub quantile: f64,
    pub k_neighbors: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            quantile: DEFAULT_QUANTILE,
            k_neighbors: DEFAULT_K_NEIGHBORS,
        }
    }
}

/// Per-channel statistics and the two rank correlations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStudy {
    pub layer: usize,
    pub quantile: f64,
    pub images: usize,
    pub kernel_sparsity: Vec<f64>,
    pub kernel_entropy: Vec<f64>,
    pub mean_area: Vec<f64>,
    pub mean_richness: Vec<f64>,
    pub rho_sparsity: f64,
    pub rho_richness: f64,
}

/// Per-image, per-channel `(area, richness)` of the layer's input maps.
fn image_statistics(m: &ModelGraph, image: &FeatureStack, layer: usize, heat_src: usize, quantile: f64) -> Result<Vec<(f64, f64)>> {
    let mut inputs = None;
    let mut heat = None;
    forward_observed(m, image, &mut |i, input, out| {
        if i == layer {
            inputs = Some(input.clone());
        }
        if i == heat_src {
            heat = Some(sum_channels(out));
        }
    })?;
    let inputs = inputs.expect("target layer ran");
    let heat = HeatMap {
        values: bilinear_upscale(&heat.expect("heat source ran"), image.height(), image.width())?,
    };
    (0..inputs.channels())
        .map(|c| {
            let mask = receptive_mask(&inputs.plane(c)?, image.height(), image.width(), quantile)?;
            let imp = feature_importance(&mask, &heat)?;
            Ok((imp.area as f64, imp.richness))
        })
        .collect()
}

/// Correlates kernel sparsity with mean receptive-field area and kernel
/// entropy with mean richness over every input channel of `layer`.
pub fn correlation_study(m: &ModelGraph, images: &[FeatureStack], layer: usize, cfg: &StudyConfig) -> Result<CorrelationStudy> {
    require_dense(m)?;
    if images.is_empty() {
        return Err(KseError::EmptyDataset);
    }
    let conv = m
        .conv(layer)
        .ok_or_else(|| KseError::Index(format!("layer {layer} is not weight-bearing")))?;
    let Payload::Dense(w) = &conv.payload else {
        unreachable!("dense model checked above")
    };
    let heat_src = heat_source(m)?;
    let per_image: Vec<Vec<(f64, f64)>> = images
        .par_iter()
        .map(|img| image_statistics(m, img, layer, heat_src, cfg.quantile))
        .collect::<Result<_>>()?;
    let channels = w.in_channels();
    let count = images.len() as f64;
    let mut mean_area = vec![0.0; channels];
    let mut mean_richness = vec![0.0; channels];
    for stats in &per_image {
        for (c, &(a, r)) in stats.iter().enumerate() {
            mean_area[c] += a;
            mean_richness[c] += r;
        }
    }
    mean_area.iter_mut().for_each(|v| *v /= count);
    mean_richness.iter_mut().for_each(|v| *v /= count);
    let sparsity = (0..channels).map(|c| kernel_sparsity(w, c)).collect::<Result<Vec<_>>>()?;
    let entropy = (0..channels)
        .map(|c| knn_distance_matrix(w, c, cfg.k_neighbors).map(|a| kernel_entropy(&a)))
        .collect::<Result<Vec<_>>>()?;
    let rho_sparsity = spearman(&sparsity, &mean_area)?;
    let rho_richness = spearman(&entropy, &mean_richness)?;
    Ok(CorrelationStudy {
        layer,
        quantile: cfg.quantile,
        images: images.len(),
        kernel_sparsity: sparsity,
        kernel_entropy: entropy,
        mean_area,
        mean_richness,
        rho_sparsity,
        rho_richness,
    })
}
