//! Compression and acceleration ratios per layer and model-wide.
//!
//! Parameter storage counts 32 bits per weight or centroid value plus
//! `log2(q_c)` bits per index, evaluated as an exact real; channels with
//! `q_c <= 1` need no index. The whole-bit packing used on disk is
//! reported separately. Biases appear on neither side of the ratio.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::count_flops;
use crate::error::{KseError, Result};
use crate::io::index_bits;
use crate::model::{CompressedLayer, ModelGraph, Payload};

fn log2_budget(q: usize) -> f64 {
    if q <= 1 {
        0.0
    } else {
        (q as f64).log2()
    }
}

/// Storage of a clustered layer in equivalent 32-bit parameters:
/// `sum_c (q_c Kh Kw + N log2(q_c) / 32)`.
pub fn compressed_params(layer: &CompressedLayer) -> f64 {
    let k = layer.kernel_len() as f64;
    let n = layer.n_filters() as f64;
    layer
        .budgets()
        .iter()
        .map(|&q| if q == 0 { 0.0 } else { q as f64 * k + n * log2_budget(q) / 32.0 })
        .sum()
}

/// Bits the on-disk format spends on centroids and packed indices.
pub fn on_disk_bits(layer: &CompressedLayer) -> u64 {
    let k = layer.kernel_len() as u64;
    let n = layer.n_filters() as u64;
    layer
        .budgets()
        .iter()
        .map(|&q| q as u64 * k * 32 + n * index_bits(q) as u64)
        .sum()
}

fn dense_params(layer: &CompressedLayer) -> u64 {
    (layer.n_filters() * layer.in_channels() * layer.kernel_len()) as u64
}

/// `N C Kh Kw / sum_c (q_c Kh Kw + N log2(q_c) / 32)`; infinite when
/// every channel is pruned.
pub fn compression_ratio(layer: &CompressedLayer) -> f64 {
    let denom = compressed_params(layer);
    if denom == 0.0 {
        log::warn!("all channels pruned; compression ratio is infinite");
        return f64::INFINITY;
    }
    dense_params(layer) as f64 / denom
}

/// `N C / sum_c q_c`; infinite when every channel is pruned.
pub fn acceleration_ratio(layer: &CompressedLayer) -> f64 {
    let total = layer.total_kernels();
    if total == 0 {
        log::warn!("all channels pruned; acceleration ratio is infinite");
        return f64::INFINITY;
    }
    (layer.n_filters() * layer.in_channels()) as f64 / total as f64
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRatios {
    pub layer: usize,
    pub kind: String,
    pub compressed: bool,
    pub params_dense: u64,
    /// Exact-real storage in bits.
    pub params_compressed_bits: f64,
    /// `params_compressed_bits / 32`.
    pub params_compressed: f64,
    pub on_disk_bits: u64,
    pub r_comp: f64,
    pub flops_dense: u64,
    pub flops_compressed: u64,
    /// Compressed multiply-adds plus channel-fusion additions.
    pub flops_strict: u64,
    pub r_acce: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub granularity: Option<String>,
    pub shift: Option<String>,
    pub alpha: Option<String>,
    pub k_neighbors: Option<String>,
    pub seed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub layers: Vec<LayerRatios>,
    pub params_dense: u64,
    pub params_compressed: f64,
    pub r_comp: f64,
    pub flops_dense: u64,
    pub flops_compressed: u64,
    pub r_acce: f64,
    pub config: ConfigEcho,
}

/// Aggregates per-layer ratios; model totals divide summed numerators by
/// summed denominators. Exempt layers count at their dense size on both
/// sides.
pub fn model_report(dense: &ModelGraph, compressed: &ModelGraph) -> Result<RatioReport> {
    dense.same_architecture(compressed)?;
    if dense.has_compressed_payloads() {
        return Err(KseError::Stage("reference model must be dense".into()));
    }
    let input = dense.input_shape();
    let fd = count_flops(dense, input)?;
    let fc = count_flops(compressed, input)?;
    let mut layers = Vec::new();
    for (d, c) in fd.layers.iter().zip(&fc.layers) {
        let conv = compressed.conv(c.layer).expect("weight-bearing");
        let (params_dense, params_compressed, on_disk, is_compressed) = match &conv.payload {
            Payload::Dense(w) => {
                let p = w.data().len() as u64;
                (p, p as f64, p * 32, false)
            }
            Payload::Compressed(l) => (dense_params(l), compressed_params(l), on_disk_bits(l), true),
        };
        layers.push(LayerRatios {
            layer: c.layer,
            kind: compressed.layers()[c.layer].kind_name().to_string(),
            compressed: is_compressed,
            params_dense,
            params_compressed_bits: params_compressed * 32.0,
            params_compressed,
            on_disk_bits: on_disk,
            r_comp: ratio(params_dense as f64, params_compressed),
            flops_dense: d.dense,
            flops_compressed: c.compressed,
            flops_strict: c.strict(),
            r_acce: ratio(d.dense as f64, c.compressed as f64),
        });
    }
    let params_dense: u64 = layers.iter().map(|l| l.params_dense).sum();
    let params_compressed: f64 = layers.iter().map(|l| l.params_compressed).sum();
    let flops_dense = fd.total_dense();
    let flops_compressed = fc.total();
    let meta = |k: &str| compressed.metadata.get(&format!("compression.{k}")).cloned();
    Ok(RatioReport {
        layers,
        params_dense,
        params_compressed,
        r_comp: ratio(params_dense as f64, params_compressed),
        flops_dense,
        flops_compressed,
        r_acce: ratio(flops_dense as f64, flops_compressed as f64),
        config: ConfigEcho {
            granularity: meta("granularity"),
            shift: meta("shift"),
            alpha: meta("alpha"),
            k_neighbors: meta("k_neighbors"),
            seed: meta("seed"),
        },
    })
}

fn human(v: f64) -> String {
    if v >= 1e9 {
        format!("{:.2}G", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.2}K", v / 1e3)
    } else {
        format!("{v:.2}")
    }
}

impl RatioReport {
    /// Table with `FLOPs (r_acce)` and `#Param (r_comp)` columns.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let show = |v: &Option<String>| v.clone().unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "config: G={} T={} alpha={} k={} seed={}",
            show(&c.granularity),
            show(&c.shift),
            show(&c.alpha),
            show(&c.k_neighbors),
            show(&c.seed)
        );
        let _ = writeln!(s, "{:<6} {:<16} {:<10} {:>24} {:>24}", "layer", "kind", "stage", "FLOPs (r_acce)", "#Param (r_comp)");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<6} {:<16} {:<10} {:>24} {:>24}",
                l.layer,
                l.kind,
                if l.compressed { "clustered" } else { "dense" },
                format!("{} ({:.3}x)", human(l.flops_compressed as f64), l.r_acce),
                format!("{} ({:.3}x)", human(l.params_compressed), l.r_comp),
            );
        }
        let _ = writeln!(
            s,
            "{:<6} {:<16} {:<10} {:>24} {:>24}",
            "total",
            "",
            "",
            format!("{} ({:.3}x)", human(self.flops_compressed as f64), self.r_acce),
            format!("{} ({:.3}x)", human(self.params_compressed), self.r_comp),
        );
        let disk: u64 = self.layers.iter().map(|l| l.on_disk_bits).sum();
        let _ = writeln!(s, "on-disk weight storage: {disk} bits; biases excluded from ratios");
        s
    }

    /// One JSON object per layer followed by a totals record.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            s.push_str(&serde_json::to_string(l).expect("serializes"));
            s.push('\n');
        }
        let totals = serde_json::json!({
            "layer": "total",
            "params_dense": self.params_dense,
            "params_compressed": self.params_compressed,
            "r_comp": self.r_comp,
            "flops_dense": self.flops_dense,
            "flops_compressed": self.flops_compressed,
            "r_acce": self.r_acce,
            "config": self.config,
        });
        s.push_str(&totals.to_string());
        s.push('\n');
        s
    }
}
