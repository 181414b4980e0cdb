//! Desk-scale fixtures: a synthetic 4-class image task and a small
//! three-convolution classifier for it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Dataset, Sample};
use crate::error::Result;
use crate::finetune::{accuracy, train, FinetuneOutcome, TrainConfig};
use crate::model::{ConvLayer, Layer, ModelGraph};
use crate::tensor::{ConvGeometry, FeatureStack, Shape, WeightTensor};

pub const TOY_CLASSES: usize = 4;
pub const TOY_SIDE: usize = 12;

pub fn toy_shape() -> Shape {
    Shape::new(1, TOY_SIDE, TOY_SIDE)
}

/// One image of class `label`: a bar that is horizontal (0), vertical (1),
/// diagonal (2) or anti-diagonal (3), placed at a random offset on a noisy
/// background.
pub fn toy_image(label: usize, rng: &mut impl Rng) -> FeatureStack {
    let s = TOY_SIDE as isize;
    let noise = Normal::new(0.0, 0.15).expect("valid sigma");
    let mut img = vec![0.0f32; TOY_SIDE * TOY_SIDE];
    for v in img.iter_mut() {
        *v = noise.sample(rng) as f32;
    }
    let len = rng.gen_range(6..=9) as isize;
    let thick = rng.gen_range(1..=2) as isize;
    let amp = rng.gen_range(0.8..1.2) as f32;
    let (dy, dx) = match label % TOY_CLASSES {
        0 => (0, 1),
        1 => (1, 0),
        2 => (1, 1),
        _ => (1, -1),
    };
    let y0 = rng.gen_range(1..s - 1 - if dy != 0 { len - 1 } else { thick });
    let x0 = if dx < 0 {
        rng.gen_range(len - 1..s - 1)
    } else {
        rng.gen_range(1..s - 1 - if dx != 0 { len - 1 } else { thick })
    };
    for t in 0..len {
        for w in 0..thick {
            let (oy, ox) = if dy == 0 { (w, 0) } else { (0, w) };
            let y = y0 + t * dy + oy;
            let x = x0 + t * dx + ox;
            if (0..s).contains(&y) && (0..s).contains(&x) {
                img[(y * s + x) as usize] += amp;
            }
        }
    }
    FeatureStack::new(1, TOY_SIDE, TOY_SIDE, img).expect("finite image")
}

/// `per_class` samples of every class, interleaved by label.
pub fn toy_dataset(per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..per_class * TOY_CLASSES)
        .map(|i| {
            let label = i % TOY_CLASSES;
            Sample {
                image: toy_image(label, &mut rng),
                label: Some(label),
            }
        })
        .collect();
    Dataset::new(toy_shape(), samples).expect("consistent shapes")
}

fn he_init(n: usize, c: usize, k: usize, rng: &mut impl Rng) -> WeightTensor {
    let std = (2.0 / (c * k * k) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid sigma");
    WeightTensor::from_fn(n, c, k, k, |_, _, _, _| dist.sample(rng) as f32).expect("finite weights")
}

/// Untrained classifier: conv 1->8, conv 8->16 (stride 2), conv 16->16,
/// global average pooling and a 16->4 fully connected head.
pub fn toy_model(seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let same = ConvGeometry::uniform(1, 1).expect("valid geometry");
    let down = ConvGeometry::uniform(2, 1).expect("valid geometry");
    let pooled = TOY_SIDE.div_ceil(2);
    let layers = vec![
        Layer::Conv(ConvLayer::conv(he_init(8, 1, 3, &mut rng), same)),
        Layer::Relu,
        Layer::Conv(ConvLayer::conv(he_init(16, 8, 3, &mut rng), down)),
        Layer::Relu,
        Layer::Conv(ConvLayer::conv(he_init(16, 16, 3, &mut rng), same)),
        Layer::Relu,
        Layer::AvgPool {
            size: pooled,
            stride: pooled,
        },
        Layer::Flatten,
        Layer::Conv(ConvLayer::fully_connected(he_init(TOY_CLASSES, 16, 1, &mut rng)).expect("1x1 kernel")),
    ];
    let mut m = ModelGraph::new(toy_shape(), layers).expect("valid toy graph");
    m.metadata.insert("model".into(), "toy-3conv".into());
    m
}

pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        epochs: 12,
        batch_size: 16,
        seed: 11,
        weight_decay: 5e-4,
        train_dense_layers: true,
    }
}

/// Trains [`toy_model`] on `data` from scratch.
pub fn train_toy(data: &Dataset, seed: u64, cfg: &TrainConfig) -> Result<FinetuneOutcome> {
    let labeled = data.labeled()?;
    train(&toy_model(seed), &labeled, cfg)
}

/// Accuracy of `m` on a labelled dataset.
pub fn dataset_accuracy(m: &ModelGraph, data: &Dataset) -> Result<f64> {
    accuracy(m, &data.labeled()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_balanced() {
        let a = toy_dataset(5, 3);
        let b = toy_dataset(5, 3);
        assert_eq!(a.len(), 20);
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.label, y.label);
        }
        let counts = a.samples().iter().fold([0; 4], |mut acc, s| {
            acc[s.label.unwrap()] += 1;
            acc
        });
        assert_eq!(counts, [5; 4]);
    }

    #[test]
    fn toy_model_shapes() {
        let m = toy_model(0);
        assert_eq!(m.output_shape(), Shape::new(TOY_CLASSES, 1, 1));
        assert_eq!(m.compressible_layers(), vec![2, 4]);
    }
}
