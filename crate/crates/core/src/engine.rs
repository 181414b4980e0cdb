//! Forward passes and multiply-add accounting.
//!
//! A compressed convolution runs in two stages. Stage one correlates each
//! input channel with each of its centroids once, producing shared
//! activation maps. Stage two assembles every output channel by summing,
//! per input channel, the map its index selects. Shared maps for a layer
//! occupy `sum(q_c) * Hout * Wout` doubles and are dropped once the layer
//! finishes.

use rayon::prelude::*;

use crate::error::{KseError, Result};
use crate::model::{CompressedLayer, ConvLayer, Layer, ModelGraph, Payload};
use crate::tensor::{self, ConvGeometry, FeatureStack, Shape};

fn finish(planes: Vec<Vec<f64>>, bias: Option<&[f32]>, (oh, ow): (usize, usize)) -> FeatureStack {
    let n = planes.len();
    let mut data = Vec::with_capacity(n * oh * ow);
    for (f, plane) in planes.into_iter().enumerate() {
        let b = bias.map_or(0.0, |b| b[f] as f64);
        data.extend(plane.into_iter().map(|v| (v + b) as f32));
    }
    FeatureStack::from_raw(n, oh, ow, data)
}

/// Two-stage convolution with a clustered payload.
pub fn conv_compressed(
    x: &FeatureStack,
    layer: &CompressedLayer,
    g: &ConvGeometry,
    bias: Option<&[f32]>,
) -> Result<FeatureStack> {
    if x.channels() != layer.in_channels() {
        return Err(KseError::Shape(format!(
            "input has {} channels, layer expects {}",
            x.channels(),
            layer.in_channels()
        )));
    }
    let (kh, kw) = (layer.kernel_h(), layer.kernel_w());
    let (oh, ow) = g.output_size(x.height(), x.width(), kh, kw)?;
    let in_hw = (x.height(), x.width());
    let plane = oh * ow;

    let shared: Vec<Vec<f64>> = (0..layer.in_channels())
        .into_par_iter()
        .map(|c| {
            let q = layer.budget(c);
            let mut maps = vec![0.0f64; q * plane];
            for i in 0..q {
                tensor::correlate_plane(
                    x.channel(c),
                    in_hw,
                    layer.centroid(c, i),
                    (kh, kw),
                    g,
                    &mut maps[i * plane..(i + 1) * plane],
                    (oh, ow),
                );
            }
            maps
        })
        .collect();

    if layer.total_kernels() == 0 {
        log::warn!("every input channel of this layer is pruned; output is bias only");
    }

    let planes: Vec<Vec<f64>> = (0..layer.n_filters())
        .into_par_iter()
        .map(|n| {
            let mut acc = vec![0.0f64; plane];
            for (c, maps) in shared.iter().enumerate() {
                if let Some(i) = layer.index(n, c) {
                    for (a, z) in acc.iter_mut().zip(&maps[i * plane..(i + 1) * plane]) {
                        *a += *z;
                    }
                }
            }
            acc
        })
        .collect();
    Ok(finish(planes, bias, (oh, ow)))
}

/// One convolution layer, dispatching on its payload.
pub fn conv_layer_forward(x: &FeatureStack, conv: &ConvLayer) -> Result<FeatureStack> {
    match &conv.payload {
        Payload::Dense(w) => {
            let (planes, hw) = tensor::dense_accumulate(x, w, &conv.geometry)?;
            Ok(finish(planes, conv.bias.as_deref(), hw))
        }
        Payload::Compressed(l) => conv_compressed(x, l, &conv.geometry, conv.bias.as_deref()),
    }
}

fn avg_pool(x: &FeatureStack, size: usize, stride: usize) -> Result<FeatureStack> {
    if size == 0 || stride == 0 || x.height() < size || x.width() < size {
        return Err(KseError::Geometry(format!("pool {size}/{stride} on {}", x.shape())));
    }
    let oh = (x.height() - size) / stride + 1;
    let ow = (x.width() - size) / stride + 1;
    let area = (size * size) as f64;
    let mut data = Vec::with_capacity(x.channels() * oh * ow);
    for c in 0..x.channels() {
        let ch = x.channel(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0f64;
                for dy in 0..size {
                    let row = (oy * stride + dy) * x.width() + ox * stride;
                    s += ch[row..row + size].iter().map(|&v| v as f64).sum::<f64>();
                }
                data.push((s / area) as f32);
            }
        }
    }
    Ok(FeatureStack::from_raw(x.channels(), oh, ow, data))
}

/// Per-layer callback: layer index, its input, its output.
pub type Observer<'a> = dyn FnMut(usize, &FeatureStack, &FeatureStack) + 'a;

fn run(
    m: &ModelGraph,
    x: &FeatureStack,
    allow_compressed: bool,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<FeatureStack> {
    if x.shape() != m.input_shape() {
        return Err(KseError::Shape(format!(
            "input is {}, model expects {}",
            x.shape(),
            m.input_shape()
        )));
    }
    let mut acts: Vec<FeatureStack> = Vec::with_capacity(m.layers().len() + 1);
    acts.push(x.clone());
    for (i, layer) in m.layers().iter().enumerate() {
        let input = acts.last().expect("non-empty");
        let out = match layer {
            Layer::Conv(conv) => {
                if conv.payload.is_compressed() && !allow_compressed {
                    return Err(KseError::Stage("dense forward met a compressed payload".into()).at_layer(i));
                }
                conv_layer_forward(input, conv)
            }
            Layer::Relu => {
                let data = input.data().iter().map(|&v| v.max(0.0)).collect();
                Ok(FeatureStack::from_raw(input.channels(), input.height(), input.width(), data))
            }
            Layer::AvgPool { size, stride } => avg_pool(input, *size, *stride),
            Layer::Flatten => Ok(FeatureStack::from_raw(input.data().len(), 1, 1, input.data().to_vec())),
            Layer::ResidualAdd { from } => match acts.get(*from) {
                Some(other) if other.shape() == input.shape() => {
                    let data = input.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
                    Ok(FeatureStack::from_raw(input.channels(), input.height(), input.width(), data))
                }
                Some(other) => Err(KseError::Shape(format!(
                    "residual source is {}, current is {}",
                    other.shape(),
                    input.shape()
                ))),
                None => Err(KseError::Shape(format!("residual source {from} does not exist"))),
            },
        }
        .map_err(|e| e.at_layer(i))?;
        if let Some(obs) = observer.as_deref_mut() {
            obs(i, input, &out);
        }
        acts.push(out);
    }
    Ok(acts.pop().expect("non-empty"))
}

/// Forward pass over dense payloads only.
pub fn forward_dense(m: &ModelGraph, x: &FeatureStack) -> Result<FeatureStack> {
    run(m, x, false, None)
}

/// Forward pass that runs compressed payloads in two stages (dense ones,
/// such as exempt layers, run densely).
pub fn forward_compressed(m: &ModelGraph, x: &FeatureStack) -> Result<FeatureStack> {
    run(m, x, true, None)
}

/// [`forward_compressed`] that reports every layer's input and output.
pub fn forward_observed(m: &ModelGraph, x: &FeatureStack, observer: &mut Observer<'_>) -> Result<FeatureStack> {
    run(m, x, true, Some(observer))
}

/// Multiply-add counts for one weight-bearing layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerFlops {
    pub layer: usize,
    /// `N C Hout Wout Kh Kw`: the uncompressed cost.
    pub dense: u64,
    /// `sum(q_c) Hout Wout Kh Kw` for compressed payloads, `dense` otherwise.
    pub compressed: u64,
    /// Stage-two additions (`N * active channels * Hout * Wout`), zero for dense payloads.
    pub fusion_adds: u64,
}

impl LayerFlops {
    /// Stage-one multiply-adds plus stage-two additions.
    pub fn strict(&self) -> u64 {
        self.compressed + self.fusion_adds
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopCount {
    pub layers: Vec<LayerFlops>,
}

impl FlopCount {
    pub fn total_dense(&self) -> u64 {
        self.layers.iter().map(|l| l.dense).sum()
    }

    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.compressed).sum()
    }

    pub fn total_strict(&self) -> u64 {
        self.layers.iter().map(LayerFlops::strict).sum()
    }

    pub fn layer(&self, i: usize) -> Option<&LayerFlops> {
        self.layers.iter().find(|l| l.layer == i)
    }
}

/// Counts multiply-adds of every weight-bearing layer for `input_shape`.
pub fn count_flops(m: &ModelGraph, input_shape: Shape) -> Result<FlopCount> {
    let resized = ModelGraph::from_parts(input_shape, m.layers().to_vec(), Default::default())?;
    let shapes = resized.activation_shapes()?;
    let mut layers = Vec::new();
    for (i, layer) in m.layers().iter().enumerate() {
        let Layer::Conv(conv) = layer else { continue };
        let out = shapes[i + 1];
        let area = (out.height * out.width) as u64;
        let (kh, kw) = conv.payload.kernel_dims();
        let k = (kh * kw) as u64;
        let n = conv.payload.n_filters() as u64;
        let c = conv.payload.in_channels() as u64;
        let dense = n * c * area * k;
        let (compressed, fusion_adds) = match &conv.payload {
            Payload::Dense(_) => (dense, 0),
            Payload::Compressed(l) => {
                let active = l.budgets().iter().filter(|&&q| q > 0).count() as u64;
                (l.total_kernels() as u64 * area * k, n * active * area)
            }
        };
        layers.push(LayerFlops {
            layer: i,
            dense,
            compressed,
            fusion_adds,
        });
    }
    Ok(FlopCount { layers })
}
