//! Channel-wise kernel clustering for convolutional networks.
//!
//! Each input channel of a convolution is scored by the sparsity and the
//! k-nearest-neighbour entropy of its 2D kernels. The score fixes how many
//! centroid kernels the channel keeps; its kernels are then clustered with
//! k-means and the model runs through a two-stage shared-map convolution.

pub mod analysis;
pub mod cluster;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod finetune;
pub mod interpret;
pub mod io;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod toy;

pub use analysis::{analyze_layer, analyze_model, AnalysisConfig, KseReport};
pub use cluster::{compress_layer, compress_model, kernel_count, kmeans_kernels, CompressionConfig};
pub use engine::{count_flops, forward_compressed, forward_dense};
pub use error::{KseError, Result};
pub use finetune::{finetune, TrainConfig};
pub use interpret::{correlation_study, heat_map, StudyConfig};
pub use io::{load_model, save_model, Stage};
pub use metrics::{acceleration_ratio, compression_ratio, model_report, RatioReport};
pub use model::{CompressedLayer, ConvLayer, Layer, ModelGraph, Payload};
pub use tensor::{ConvGeometry, FeatureStack, Plane, Shape, WeightTensor};

/// Runs `f` on a dedicated rayon pool with `workers` threads; `0` uses the
/// global pool.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| KseError::Config(format!("cannot start {workers} worker threads: {e}")))?;
    Ok(pool.install(f))
}
