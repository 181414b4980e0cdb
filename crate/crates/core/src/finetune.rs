//! Centroid fine-tuning with momentum SGD.
//!
//! Training runs entirely in double precision: parameters are copied out of
//! the model into `f64` buffers, updated, and written back as `f32` when
//! training ends. Index tables and budgets are never touched.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{KseError, Result};
use crate::model::{CompressedLayer, Layer, ModelGraph, Payload};
use crate::tensor::{self, ConvGeometry, FeatureStack, Scalar, WeightTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Also update dense (e.g. compression-exempt) layers. Off for
    /// fine-tuning, on for training a baseline from scratch.
    pub train_dense_layers: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 5,
            batch_size: 32,
            seed: 0,
            weight_decay: 0.0,
            train_dense_layers: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(KseError::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(KseError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(KseError::Config("batch size must be >= 1".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(KseError::Config("weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Trainable values of one weight-bearing layer.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvParams {
    /// `N*C*Kh*Kw` weights in tensor order.
    Dense(Vec<f64>),
    /// `centroids[c]` holds the `q_c` centroids of channel `c`.
    Centroids(Vec<Vec<f64>>),
}

impl ConvParams {
    fn zeros_like(&self) -> Self {
        match self {
            ConvParams::Dense(w) => ConvParams::Dense(vec![0.0; w.len()]),
            ConvParams::Centroids(c) => ConvParams::Centroids(c.iter().map(|v| vec![0.0; v.len()]).collect()),
        }
    }

    fn values(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match self {
            ConvParams::Dense(w) => Box::new(w.iter()),
            ConvParams::Centroids(c) => Box::new(c.iter().flatten()),
        }
    }

    fn values_mut(&mut self) -> Box<dyn Iterator<Item = &mut f64> + '_> {
        match self {
            ConvParams::Dense(w) => Box::new(w.iter_mut()),
            ConvParams::Centroids(c) => Box::new(c.iter_mut().flatten()),
        }
    }

    fn add_assign(&mut self, other: &ConvParams) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += *b;
        }
    }

    fn scale(&mut self, s: f64) {
        for a in self.values_mut() {
            *a *= s;
        }
    }
}

/// Gradients aligned with a [`TrainableModel`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Option<ConvParams>>,
}

impl Gradients {
    pub fn layer(&self, i: usize) -> Option<&ConvParams> {
        self.layers.get(i).and_then(Option::as_ref)
    }

    /// Gradient of centroid value `j` (flattened over the channel's
    /// centroids) of channel `c` in layer `layer`.
    pub fn centroid(&self, layer: usize, c: usize, j: usize) -> Option<f64> {
        match self.layer(layer)? {
            ConvParams::Centroids(v) => v.get(c)?.get(j).copied(),
            ConvParams::Dense(_) => None,
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.add_assign(b);
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for p in self.layers.iter_mut().flatten() {
            p.scale(s);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().flatten().all(|p| p.values().all(|&v| v == 0.0))
    }
}

/// A model together with double-precision copies of its weights.
#[derive(Debug, Clone)]
pub struct TrainableModel {
    graph: ModelGraph,
    params: Vec<Option<ConvParams>>,
}

fn f64_stack<T: Scalar>(x: &FeatureStack<T>) -> FeatureStack<f64> {
    x.cast()
}

/// Double-precision copies of every centroid of `layer`.
pub fn centroids_f64(layer: &CompressedLayer) -> Vec<Vec<f64>> {
    (0..layer.in_channels())
        .map(|c| layer.channel_centroids(c).iter().map(|&v| v as f64).collect())
        .collect()
}

fn conv_dense_f64(x: &FeatureStack<f64>, w: &[f64], dims: (usize, usize, usize, usize), g: &ConvGeometry, bias: Option<&[f32]>) -> Result<FeatureStack<f64>> {
    let (n, c, kh, kw) = dims;
    let (oh, ow) = g.output_size(x.height(), x.width(), kh, kw)?;
    let klen = kh * kw;
    let plane = oh * ow;
    let data: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|f| {
            let mut acc = vec![bias.map_or(0.0, |b| b[f] as f64); plane];
            let mut scratch = vec![0.0; plane];
            for ch in 0..c {
                let k = &w[(f * c + ch) * klen..(f * c + ch + 1) * klen];
                tensor::correlate_plane(x.channel(ch), (x.height(), x.width()), k, (kh, kw), g, &mut scratch, (oh, ow));
                for (a, s) in acc.iter_mut().zip(&scratch) {
                    *a += *s;
                }
            }
            acc
        })
        .collect();
    Ok(FeatureStack::from_raw(n, oh, ow, data))
}

fn conv_compressed_f64(
    x: &FeatureStack<f64>,
    layer: &CompressedLayer,
    centroids: &[Vec<f64>],
    g: &ConvGeometry,
    bias: Option<&[f32]>,
) -> Result<FeatureStack<f64>> {
    let (kh, kw) = (layer.kernel_h(), layer.kernel_w());
    let klen = kh * kw;
    let (oh, ow) = g.output_size(x.height(), x.width(), kh, kw)?;
    let plane = oh * ow;
    let shared: Vec<Vec<f64>> = (0..layer.in_channels())
        .into_par_iter()
        .map(|c| {
            let q = layer.budget(c);
            let mut maps = vec![0.0; q * plane];
            for i in 0..q {
                tensor::correlate_plane(
                    x.channel(c),
                    (x.height(), x.width()),
                    &centroids[c][i * klen..(i + 1) * klen],
                    (kh, kw),
                    g,
                    &mut maps[i * plane..(i + 1) * plane],
                    (oh, ow),
                );
            }
            maps
        })
        .collect();
    let mut data = Vec::with_capacity(layer.n_filters() * plane);
    for f in 0..layer.n_filters() {
        let mut acc = vec![bias.map_or(0.0, |b| b[f] as f64); plane];
        for (c, maps) in shared.iter().enumerate() {
            if let Some(i) = layer.index(f, c) {
                for (a, z) in acc.iter_mut().zip(&maps[i * plane..(i + 1) * plane]) {
                    *a += *z;
                }
            }
        }
        data.extend(acc);
    }
    Ok(FeatureStack::from_raw(layer.n_filters(), oh, ow, data))
}

/// Backward pass of a clustered convolution.
///
/// The gradient of centroid `B[i, c]` is the valid correlation of `X_c`
/// with the sum of `dL/dY_n` over every filter `n` with `I(n, c) = i`; the
/// input gradient is the transposed correlation with the expanded kernels.
pub fn backward_compressed_layer(
    x: &FeatureStack<f64>,
    layer: &CompressedLayer,
    centroids: &[Vec<f64>],
    geometry: &ConvGeometry,
    grad_out: &FeatureStack<f64>,
) -> Result<(Vec<Vec<f64>>, FeatureStack<f64>)> {
    let (kh, kw) = (layer.kernel_h(), layer.kernel_w());
    let klen = kh * kw;
    if x.channels() != layer.in_channels() || centroids.len() != layer.in_channels() {
        return Err(KseError::Shape("input or centroids do not match the layer".into()));
    }
    let (oh, ow) = geometry.output_size(x.height(), x.width(), kh, kw)?;
    if grad_out.shape() != tensor::Shape::new(layer.n_filters(), oh, ow) {
        return Err(KseError::Shape(format!(
            "output gradient is {}, layer produces {}x{oh}x{ow}",
            grad_out.shape(),
            layer.n_filters()
        )));
    }
    let plane = oh * ow;
    let in_hw = (x.height(), x.width());
    let per_channel: Vec<(Vec<f64>, Vec<f64>)> = (0..layer.in_channels())
        .into_par_iter()
        .map(|c| {
            let q = layer.budget(c);
            let mut grad_c = vec![0.0; q * klen];
            let mut grad_x = vec![0.0; x.plane_len()];
            if q == 0 {
                return (grad_c, grad_x);
            }
            let mut pooled = vec![0.0; q * plane];
            for f in 0..layer.n_filters() {
                let i = layer.index(f, c).expect("budget >= 1");
                for (p, g) in pooled[i * plane..(i + 1) * plane].iter_mut().zip(grad_out.channel(f)) {
                    *p += *g;
                }
            }
            for i in 0..q {
                let g = &pooled[i * plane..(i + 1) * plane];
                tensor::accumulate_kernel_grad(x.channel(c), in_hw, g, (oh, ow), (kh, kw), geometry, &mut grad_c[i * klen..(i + 1) * klen]);
                tensor::accumulate_input_grad(&centroids[c][i * klen..(i + 1) * klen], (kh, kw), g, (oh, ow), geometry, &mut grad_x, in_hw);
            }
            (grad_c, grad_x)
        })
        .collect();
    let mut grads = Vec::with_capacity(per_channel.len());
    let mut gin = Vec::with_capacity(x.data().len());
    for (g, gx) in per_channel {
        grads.push(g);
        gin.extend(gx);
    }
    Ok((grads, FeatureStack::from_raw(x.channels(), x.height(), x.width(), gin)))
}

#[allow(clippy::type_complexity)]
fn backward_dense_f64(
    x: &FeatureStack<f64>,
    w: &[f64],
    dims: (usize, usize, usize, usize),
    g: &ConvGeometry,
    grad_out: &FeatureStack<f64>,
    want_weights: bool,
) -> (Option<Vec<f64>>, FeatureStack<f64>) {
    let (n, c, kh, kw) = dims;
    let klen = kh * kw;
    let (oh, ow) = (grad_out.height(), grad_out.width());
    let in_hw = (x.height(), x.width());
    let per_channel: Vec<(Vec<f64>, Vec<f64>)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut gw = if want_weights { vec![0.0; n * klen] } else { Vec::new() };
            let mut gx = vec![0.0; x.plane_len()];
            for f in 0..n {
                let k = &w[(f * c + ch) * klen..(f * c + ch + 1) * klen];
                let go = grad_out.channel(f);
                if want_weights {
                    tensor::accumulate_kernel_grad(x.channel(ch), in_hw, go, (oh, ow), (kh, kw), g, &mut gw[f * klen..(f + 1) * klen]);
                }
                tensor::accumulate_input_grad(k, (kh, kw), go, (oh, ow), g, &mut gx, in_hw);
            }
            (gw, gx)
        })
        .collect();
    let mut gin = Vec::with_capacity(x.data().len());
    let mut weights = if want_weights { Some(vec![0.0; n * c * klen]) } else { None };
    for (ch, (gw, gx)) in per_channel.into_iter().enumerate() {
        if let Some(wg) = weights.as_mut() {
            for f in 0..n {
                wg[(f * c + ch) * klen..(f * c + ch + 1) * klen].copy_from_slice(&gw[f * klen..(f + 1) * klen]);
            }
        }
        gin.extend(gx);
    }
    (weights, FeatureStack::from_raw(x.channels(), x.height(), x.width(), gin))
}

/// Numerically stable softmax cross-entropy and its logit gradient.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(KseError::Index(format!("label {label} with {} classes", logits.len())));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

impl TrainableModel {
    pub fn new(graph: &ModelGraph) -> Self {
        let params = graph
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Conv(conv) => Some(match &conv.payload {
                    Payload::Dense(w) => ConvParams::Dense(w.data().iter().map(|&v| v as f64).collect()),
                    Payload::Compressed(c) => ConvParams::Centroids(centroids_f64(c)),
                }),
                _ => None,
            })
            .collect();
        Self {
            graph: graph.clone(),
            params,
        }
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn params(&self, layer: usize) -> Option<&ConvParams> {
        self.params.get(layer).and_then(Option::as_ref)
    }

    /// Mutable access to centroid value `j` of channel `c` in `layer`.
    pub fn centroid_mut(&mut self, layer: usize, c: usize, j: usize) -> Option<&mut f64> {
        match self.params.get_mut(layer)?.as_mut()? {
            ConvParams::Centroids(v) => v.get_mut(c)?.get_mut(j),
            ConvParams::Dense(_) => None,
        }
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self.params.iter().map(|p| p.as_ref().map(ConvParams::zeros_like)).collect(),
        }
    }

    fn forward_cached(&self, x: &FeatureStack<f64>) -> Result<Vec<FeatureStack<f64>>> {
        let mut acts = Vec::with_capacity(self.graph.layers().len() + 1);
        acts.push(x.clone());
        for (i, layer) in self.graph.layers().iter().enumerate() {
            let input = acts.last().expect("non-empty");
            let out = match (layer, &self.params[i]) {
                (Layer::Conv(conv), Some(ConvParams::Dense(w))) => {
                    let (kh, kw) = conv.payload.kernel_dims();
                    let dims = (conv.payload.n_filters(), conv.payload.in_channels(), kh, kw);
                    conv_dense_f64(input, w, dims, &conv.geometry, conv.bias.as_deref())
                }
                (Layer::Conv(conv), Some(ConvParams::Centroids(cents))) => match &conv.payload {
                    Payload::Compressed(l) => conv_compressed_f64(input, l, cents, &conv.geometry, conv.bias.as_deref()),
                    Payload::Dense(_) => unreachable!("centroid params come from compressed payloads"),
                },
                (Layer::Relu, _) => Ok(FeatureStack::from_raw(
                    input.channels(),
                    input.height(),
                    input.width(),
                    input.data().iter().map(|v| v.max(0.0)).collect(),
                )),
                (Layer::AvgPool { size, stride }, _) => Ok(avg_pool_f64(input, *size, *stride)),
                (Layer::Flatten, _) => Ok(FeatureStack::from_raw(input.data().len(), 1, 1, input.data().to_vec())),
                (Layer::ResidualAdd { from }, _) => {
                    let other = &acts[*from];
                    Ok(FeatureStack::from_raw(
                        input.channels(),
                        input.height(),
                        input.width(),
                        input.data().iter().zip(other.data()).map(|(a, b)| a + b).collect(),
                    ))
                }
                (Layer::Conv(_), None) => unreachable!("conv layers always carry params"),
            }
            .map_err(|e| e.at_layer(i))?;
            acts.push(out);
        }
        Ok(acts)
    }

    /// Logits for one image.
    pub fn forward(&self, x: &FeatureStack) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_cached(&f64_stack(x))?.pop().expect("non-empty").into_data())
    }

    fn check_input(&self, x: &FeatureStack) -> Result<()> {
        if x.shape() != self.graph.input_shape() {
            return Err(KseError::Shape(format!(
                "input is {}, model expects {}",
                x.shape(),
                self.graph.input_shape()
            )));
        }
        Ok(())
    }

    pub fn loss(&self, x: &FeatureStack, label: usize) -> Result<f64> {
        Ok(softmax_cross_entropy(&self.forward(x)?, label)?.0)
    }

    /// Loss and gradients for one labelled image. Dense-layer weight
    /// gradients are computed only when `dense_grads` is set.
    pub fn loss_and_grad(&self, x: &FeatureStack, label: usize, dense_grads: bool) -> Result<(f64, Gradients)> {
        self.check_input(x)?;
        let acts = self.forward_cached(&f64_stack(x))?;
        let logits = acts.last().expect("non-empty");
        let (loss, dlogits) = softmax_cross_entropy(logits.data(), label)?;
        let mut grads: Vec<FeatureStack<f64>> = acts
            .iter()
            .map(|a| FeatureStack::from_raw(a.channels(), a.height(), a.width(), vec![0.0; a.data().len()]))
            .collect();
        grads.last_mut().expect("non-empty").data_mut().copy_from_slice(&dlogits);
        let mut out = self.zero_gradients();
        for (i, layer) in self.graph.layers().iter().enumerate().rev() {
            let g_out = std::mem::replace(&mut grads[i + 1], FeatureStack::from_raw(1, 1, 1, vec![0.0]));
            let input = &acts[i];
            let g_in: FeatureStack<f64> = match (layer, &self.params[i]) {
                (Layer::Conv(conv), Some(ConvParams::Dense(w))) => {
                    let (kh, kw) = conv.payload.kernel_dims();
                    let dims = (conv.payload.n_filters(), conv.payload.in_channels(), kh, kw);
                    let (gw, gx) = backward_dense_f64(input, w, dims, &conv.geometry, &g_out, dense_grads);
                    if let Some(gw) = gw {
                        out.layers[i] = Some(ConvParams::Dense(gw));
                    }
                    gx
                }
                (Layer::Conv(conv), Some(ConvParams::Centroids(cents))) => {
                    let Payload::Compressed(l) = &conv.payload else {
                        unreachable!("centroid params come from compressed payloads")
                    };
                    let (gc, gx) = backward_compressed_layer(input, l, cents, &conv.geometry, &g_out).map_err(|e| e.at_layer(i))?;
                    out.layers[i] = Some(ConvParams::Centroids(gc));
                    gx
                }
                (Layer::Relu, _) => FeatureStack::from_raw(
                    input.channels(),
                    input.height(),
                    input.width(),
                    input.data().iter().zip(g_out.data()).map(|(x, g)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                ),
                (Layer::AvgPool { size, stride }, _) => avg_pool_backward(input, *size, *stride, &g_out),
                (Layer::Flatten, _) => FeatureStack::from_raw(input.channels(), input.height(), input.width(), g_out.data().to_vec()),
                (Layer::ResidualAdd { from }, _) => {
                    for (a, b) in grads[*from].data_mut().iter_mut().zip(g_out.data()) {
                        *a += *b;
                    }
                    g_out
                }
                (Layer::Conv(_), None) => unreachable!("conv layers always carry params"),
            };
            for (a, b) in grads[i].data_mut().iter_mut().zip(g_in.data()) {
                *a += *b;
            }
        }
        Ok((loss, out))
    }

    /// Writes the trained values back into a [`ModelGraph`].
    pub fn to_model(&self) -> Result<ModelGraph> {
        let mut m = self.graph.clone();
        for (i, p) in self.params.iter().enumerate() {
            let Some(p) = p else { continue };
            let conv = m.layers_mut()[i].as_conv_mut().expect("params only on conv layers");
            match (p, &mut conv.payload) {
                (ConvParams::Dense(w), Payload::Dense(old)) => {
                    *old = WeightTensor::new(
                        old.n_filters(),
                        old.in_channels(),
                        old.kernel_h(),
                        old.kernel_w(),
                        w.iter().map(|&v| v as f32).collect(),
                    )
                    .map_err(|e| e.at_layer(i))?;
                }
                (ConvParams::Centroids(c), Payload::Compressed(l)) => {
                    for (dst, src) in l.centroids_mut().iter_mut().zip(c) {
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *s as f32;
                        }
                    }
                    l.validate().map_err(|e| e.at_layer(i))?;
                }
                _ => unreachable!("params mirror payload kinds"),
            }
        }
        Ok(m)
    }
}

fn avg_pool_f64(x: &FeatureStack<f64>, size: usize, stride: usize) -> FeatureStack<f64> {
    let oh = (x.height() - size) / stride + 1;
    let ow = (x.width() - size) / stride + 1;
    let area = (size * size) as f64;
    let mut data = Vec::with_capacity(x.channels() * oh * ow);
    for c in 0..x.channels() {
        let ch = x.channel(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..size {
                    let row = (oy * stride + dy) * x.width() + ox * stride;
                    s += ch[row..row + size].iter().sum::<f64>();
                }
                data.push(s / area);
            }
        }
    }
    FeatureStack::from_raw(x.channels(), oh, ow, data)
}

fn avg_pool_backward(x: &FeatureStack<f64>, size: usize, stride: usize, g: &FeatureStack<f64>) -> FeatureStack<f64> {
    let (oh, ow) = (g.height(), g.width());
    let area = (size * size) as f64;
    let mut out = vec![0.0; x.data().len()];
    let plane = x.plane_len();
    for c in 0..x.channels() {
        let gc = g.channel(c);
        let dst = &mut out[c * plane..(c + 1) * plane];
        for oy in 0..oh {
            for ox in 0..ow {
                let share = gc[oy * ow + ox] / area;
                for dy in 0..size {
                    let row = (oy * stride + dy) * x.width() + ox * stride;
                    for v in &mut dst[row..row + size] {
                        *v += share;
                    }
                }
            }
        }
    }
    FeatureStack::from_raw(x.channels(), x.height(), x.width(), out)
}

/// Momentum SGD over centroids (and, if enabled, dense weights).
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: TrainConfig,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, velocity: None })
    }

    /// `v = momentum v + g + wd p; p -= lr v` for every trainable value.
    pub fn step(&mut self, model: &mut TrainableModel, grads: &Gradients) {
        let velocity = self.velocity.get_or_insert_with(|| model.zero_gradients());
        let cfg = &self.cfg;
        for ((p, g), v) in model.params.iter_mut().zip(&grads.layers).zip(velocity.layers.iter_mut()) {
            let (Some(p), Some(g), Some(v)) = (p.as_mut(), g.as_ref(), v.as_mut()) else {
                continue;
            };
            if matches!(p, ConvParams::Dense(_)) && !cfg.train_dense_layers {
                continue;
            }
            for ((pv, gv), vv) in p.values_mut().zip(g.values()).zip(v.values_mut()) {
                *vv = cfg.momentum * *vv + *gv + cfg.weight_decay * *pv;
                *pv -= cfg.learning_rate * *vv;
            }
        }
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: ModelGraph,
    /// Mean training loss per epoch, measured during the epoch.
    pub loss_trace: Vec<f64>,
}

/// Mini-batch SGD over labelled samples. Examples of a batch are processed
/// in parallel and their gradients reduced in batch order.
pub fn train(model: &ModelGraph, data: &[(&FeatureStack, usize)], cfg: &TrainConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(KseError::EmptyDataset);
    }
    let mut net = TrainableModel::new(model);
    let mut opt = Sgd::new(cfg.clone())?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut losses = vec![0.0; data.len()];
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|&i| net.loss_and_grad(data[i].0, data[i].1, cfg.train_dense_layers))
                .collect::<Result<_>>()?;
            let mut total = net.zero_gradients();
            for (&i, (loss, g)) in batch.iter().zip(&results) {
                losses[i] = *loss;
                total.add_assign(g);
            }
            total.scale(1.0 / batch.len() as f64);
            opt.step(&mut net, &total);
        }
        trace.push(losses.iter().sum::<f64>() / data.len() as f64);
    }
    Ok(FinetuneOutcome {
        model: net.to_model()?,
        loss_trace: trace,
    })
}

/// Fine-tunes a compressed model, updating its centroids only unless
/// `cfg.train_dense_layers` is set.
pub fn finetune(model: &ModelGraph, data: &[(&FeatureStack, usize)], cfg: &TrainConfig) -> Result<FinetuneOutcome> {
    if !model.has_compressed_payloads() && !cfg.train_dense_layers {
        return Err(KseError::Stage("fine-tuning needs a compressed model".into()));
    }
    train(model, data, cfg)
}

/// Index of the largest logit.
pub fn predict(logits: &[f32]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Fraction of samples whose arg-max prediction matches the label.
pub fn accuracy(model: &ModelGraph, data: &[(&FeatureStack, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Err(KseError::EmptyDataset);
    }
    let hits: Vec<bool> = data
        .par_iter()
        .map(|(x, y)| crate::engine::forward_compressed(model, x).map(|out| predict(out.data()) == *y))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}
