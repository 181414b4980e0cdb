#![allow(dead_code)]

use std::collections::BTreeMap;

use kse::tensor::Shape;
use kse::{CompressedLayer, ConvGeometry, ConvLayer, FeatureStack, Layer, ModelGraph, Payload, WeightTensor};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn rand_stack(rng: &mut impl Rng, s: Shape) -> FeatureStack {
    FeatureStack::new(s.channels, s.height, s.width, (0..s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rand_weights(rng: &mut impl Rng, n: usize, c: usize, kh: usize, kw: usize) -> WeightTensor {
    WeightTensor::from_fn(n, c, kh, kw, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap()
}

/// Random clustering of an `n x c` layer: budgets anywhere in `0..=n`,
/// random centroids, and index tables that use every centroid.
pub fn rand_compressed(rng: &mut impl Rng, n: usize, c: usize, kh: usize, kw: usize) -> CompressedLayer {
    let k = kh * kw;
    let mut budgets: Vec<usize> = (0..c).map(|_| rng.gen_range(0..=n)).collect();
    if budgets.iter().all(|&q| q == 0) {
        budgets[0] = 1;
    }
    let centroids = budgets.iter().map(|&q| (0..q * k).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let indices = budgets
        .iter()
        .map(|&q| {
            if q <= 1 {
                return vec![];
            }
            let mut idx: Vec<u32> = (0..n).map(|f| if f < q { f as u32 } else { rng.gen_range(0..q as u32) }).collect();
            idx.shuffle(rng);
            idx
        })
        .collect();
    CompressedLayer::new(n, c, (kh, kw), budgets, centroids, indices).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flavor {
    /// Every layer dense and compressible.
    Dense,
    /// Every weight-bearing layer either clustered or dense and exempt.
    Compressed,
}

/// A random small network with at most four weight-bearing layers, up to
/// eight filters and channels, and spatial size at most 16.
pub fn random_model(rng: &mut impl Rng, flavor: Flavor, min_filters: usize) -> ModelGraph {
    let input = Shape::new(rng.gen_range(1..=8), rng.gen_range(4..=16), rng.gen_range(4..=16));
    let n_convs = rng.gen_range(1..=4);
    let with_head = rng.gen_bool(0.4);
    let mut layers = Vec::new();
    let mut shape = input;
    let mut act = 0usize;
    for i in 0..n_convs {
        if with_head && i == n_convs - 1 && n_convs > 1 {
            break;
        }
        let n = rng.gen_range(min_filters.max(1)..=8);
        let (kh, kw) = (rng.gen_range(1..=3.min(shape.height)), rng.gen_range(1..=3.min(shape.width)));
        let stride = (rng.gen_range(1..=2), rng.gen_range(1..=2));
        let pad = (rng.gen_range(0..=1).min(kh - 1), rng.gen_range(0..=1).min(kw - 1));
        let g = ConvGeometry::new(stride, pad).unwrap();
        let (oh, ow) = g.output_size(shape.height, shape.width, kh, kw).unwrap();
        let mut conv = ConvLayer::conv(rand_weights(rng, n, shape.channels, kh, kw), g);
        if rng.gen_bool(0.3) {
            conv = conv.with_bias((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect());
        }
        let before = act;
        let in_shape = shape;
        layers.push(Layer::Conv(conv));
        act += 1;
        shape = Shape::new(n, oh, ow);
        if shape == in_shape && rng.gen_bool(0.5) {
            layers.push(Layer::ResidualAdd { from: before });
            act += 1;
        }
        if rng.gen_bool(0.6) {
            layers.push(Layer::Relu);
            act += 1;
        }
    }
    if with_head {
        layers.push(Layer::AvgPool {
            size: shape.height.min(shape.width),
            stride: 1,
        });
        let pooled = (shape.height - shape.height.min(shape.width) + 1) * (shape.width - shape.height.min(shape.width) + 1);
        layers.push(Layer::Flatten);
        let classes = rng.gen_range(min_filters.max(2)..=8);
        layers.push(Layer::Conv(ConvLayer::fully_connected(rand_weights(rng, classes, shape.channels * pooled, 1, 1)).unwrap()));
    }
    let mut meta = BTreeMap::new();
    meta.insert("origin".to_string(), format!("random-{}", rng.gen::<u32>()));
    let mut m = ModelGraph::from_parts(input, layers, meta).unwrap();
    if flavor == Flavor::Compressed {
        for i in m.weighted_layers() {
            let conv = m.conv(i).unwrap();
            let (kh, kw) = conv.payload.kernel_dims();
            let (n, c) = (conv.payload.n_filters(), conv.payload.in_channels());
            if rng.gen_bool(0.75) {
                let layer = rand_compressed(rng, n, c, kh, kw);
                m.set_payload(i, Payload::Compressed(layer)).unwrap();
            } else {
                m.set_exempt(i, true).unwrap();
            }
        }
    }
    m
}

/// `|a - b| <= tol * max(|a|, |b|)` elementwise.
pub fn max_rel_err(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            if x == y {
                0.0
            } else {
                (x - y).abs() / x.abs().max(y.abs())
            }
        })
        .fold(0.0, f64::max)
}
