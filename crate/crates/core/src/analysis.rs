//! Kernel sparsity, kernel entropy and the KSE indicator.
//!
//! Everything here reads weights only; no data passes through the network.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KseError, Result};
use crate::model::{ModelGraph, Payload};
use crate::tensor::WeightTensor;

pub const DEFAULT_K_NEIGHBORS: usize = 5;
pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisConfig {
    pub k_neighbors: usize,
    pub alpha: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            k_neighbors: DEFAULT_K_NEIGHBORS,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 {
            return Err(KseError::Config("k_neighbors must be >= 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(KseError::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Per-channel statistics for one weight-bearing layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KseReport {
    pub layer_id: usize,
    pub n_filters: usize,
    pub sparsity_raw: Vec<f64>,
    pub entropy_raw: Vec<f64>,
    pub sparsity_norm: Vec<f64>,
    pub entropy_norm: Vec<f64>,
    pub indicator: Vec<f64>,
    pub alpha: f64,
    pub k_neighbors: usize,
}

impl KseReport {
    pub fn channels(&self) -> usize {
        self.indicator.len()
    }
}

/// `N x N` kNN distance matrix for one channel's kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborMatrix {
    size: usize,
    k: usize,
    values: Vec<f64>,
}

impl NeighborMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    /// Effective neighbour count, `min(k, N - 1)`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.size..(i + 1) * self.size]
    }
}

/// `s_c`: the l1 norm of every kernel attached to input channel `c`.
pub fn kernel_sparsity(w: &WeightTensor, c: usize) -> Result<f64> {
    if c >= w.in_channels() {
        return Err(KseError::Index(format!("channel {c} of {}", w.in_channels())));
    }
    Ok((0..w.n_filters())
        .flat_map(|n| w.kernel(n, c).iter())
        .map(|v| (*v as f64).abs())
        .sum())
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Builds `A_c`: row `i` holds the distances to the `k` nearest kernels of
/// kernel `i` (itself excluded), zero elsewhere. Ties go to the lower index.
pub fn knn_distance_matrix(w: &WeightTensor, c: usize, k: usize) -> Result<NeighborMatrix> {
    if c >= w.in_channels() {
        return Err(KseError::Index(format!("channel {c} of {}", w.in_channels())));
    }
    let n = w.n_filters();
    if n < 2 {
        return Err(KseError::DegenerateLayer(format!(
            "kernel entropy needs at least 2 filters, layer has {n}"
        )));
    }
    if k == 0 {
        return Err(KseError::Config("k must be >= 1".into()));
    }
    let k = k.min(n - 1);
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(w.kernel(i, c), w.kernel(j, c));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut values = vec![0.0f64; n * n];
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        // stable sort keeps ascending index order among equal distances
        order.sort_by(|&a, &b| dist[i * n + a].total_cmp(&dist[i * n + b]));
        for &j in &order[..k] {
            values[i * n + j] = dist[i * n + j];
        }
    }
    Ok(NeighborMatrix { size: n, k, values })
}

fn sorted_sum(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// `dm(W_i) = sum_j A[i][j]`, added in ascending order so the result does
/// not depend on filter order.
pub fn density_metric(a: &NeighborMatrix) -> Vec<f64> {
    (0..a.size).map(|i| sorted_sum(&mut a.row(i).to_vec())).collect()
}

/// Base-2 Shannon entropy of a non-negative weight vector normalised to sum
/// one. A zero total yields `log2(len)`.
pub fn entropy_of(weights: &[f64]) -> f64 {
    let mut sorted = weights.to_vec();
    let total = sorted_sum(&mut sorted);
    if total <= 0.0 {
        return (weights.len() as f64).log2();
    }
    let mut terms: Vec<f64> = sorted
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.log2()
        })
        .collect();
    sorted_sum(&mut terms)
}

/// `e_c` from the density metrics of `A_c`.
pub fn kernel_entropy(a: &NeighborMatrix) -> f64 {
    entropy_of(&density_metric(a))
}

/// Min-max rescaling into `[0, 1]`; a constant vector maps to all ones.
pub fn minmax_normalize(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !matches!(hi.partial_cmp(&lo), Some(std::cmp::Ordering::Greater)) {
        return vec![1.0; v.len()];
    }
    let span = hi - lo;
    v.iter().map(|&x| ((x - lo) / span).clamp(0.0, 1.0)).collect()
}

/// `v = sqrt(s / (1 + alpha e))` on normalised sparsity and entropy.
pub fn kse_indicator(s_norm: f64, e_norm: f64, alpha: f64) -> f64 {
    (s_norm / (1.0 + alpha * e_norm)).sqrt()
}

fn analyze_weights(layer_id: usize, w: &WeightTensor, cfg: &AnalysisConfig) -> Result<KseReport> {
    cfg.validate()?;
    let channels = w.in_channels();
    let mut sparsity_raw = Vec::with_capacity(channels);
    let mut entropy_raw = Vec::with_capacity(channels);
    for c in 0..channels {
        sparsity_raw.push(kernel_sparsity(w, c)?);
        entropy_raw.push(kernel_entropy(&knn_distance_matrix(w, c, cfg.k_neighbors)?));
    }
    let sparsity_norm = minmax_normalize(&sparsity_raw);
    let entropy_norm = minmax_normalize(&entropy_raw);
    let raw_indicator: Vec<f64> = sparsity_norm
        .iter()
        .zip(&entropy_norm)
        .map(|(&s, &e)| kse_indicator(s, e, cfg.alpha))
        .collect();
    Ok(KseReport {
        layer_id,
        n_filters: w.n_filters(),
        sparsity_raw,
        entropy_raw,
        sparsity_norm,
        entropy_norm,
        indicator: minmax_normalize(&raw_indicator),
        alpha: cfg.alpha,
        k_neighbors: cfg.k_neighbors,
    })
}

/// Report for a single weight tensor, tagged with layer id 0.
pub fn analyze_layer(w: &WeightTensor, cfg: &AnalysisConfig) -> Result<KseReport> {
    analyze_weights(0, w, cfg)
}

/// One report per non-exempt weight-bearing layer, in layer order.
///
/// Layers are analysed in parallel on the current rayon pool.
pub fn analyze_model(m: &ModelGraph, cfg: &AnalysisConfig) -> Result<Vec<KseReport>> {
    cfg.validate()?;
    let targets = m.compressible_layers();
    let mut weights = Vec::with_capacity(targets.len());
    for &i in &targets {
        match &m.conv(i).expect("weight-bearing").payload {
            Payload::Dense(w) => weights.push((i, w)),
            Payload::Compressed(_) => {
                return Err(KseError::Stage("analysis needs dense weights".into()).at_layer(i));
            }
        }
    }
    weights
        .par_iter()
        .map(|&(i, w)| analyze_weights(i, w, cfg).map_err(|e| e.at_layer(i)))
        .collect()
}

/// Writes one JSON record per line.
pub fn write_reports(reports: &[KseReport], mut out: impl Write) -> std::io::Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_reports(input: impl BufRead) -> std::result::Result<Vec<KseReport>, String> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", lineno + 1))?);
    }
    Ok(out)
}

pub fn save_reports(reports: &[KseReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| KseError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_reports(reports, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| KseError::io(path, e))
}

pub fn load_reports(path: impl AsRef<Path>) -> Result<Vec<KseReport>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| KseError::io(path, e))?;
    read_reports(std::io::BufReader::new(file)).map_err(|reason| KseError::Manifest {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvLayer, Layer};
    use crate::tensor::{ConvGeometry, Shape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalars(values: &[f32]) -> WeightTensor {
        WeightTensor::new(values.len(), 1, 1, 1, values.to_vec()).unwrap()
    }

    fn random_weights(seed: u64, n: usize, c: usize, k: usize) -> WeightTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WeightTensor::from_fn(n, c, k, k, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(kernel_sparsity(&WeightTensor::zeros(3, 2, 2, 2).unwrap(), 1).unwrap(), 0.0);
        assert_eq!(kernel_sparsity(&scalars(&[3.0, -4.0]), 0).unwrap(), 7.0);
        let w = random_weights(2, 4, 3, 3);
        let doubled = WeightTensor::new(4, 3, 3, 3, w.data().iter().map(|v| v * 2.0).collect()).unwrap();
        for c in 0..3 {
            let a = kernel_sparsity(&w, c).unwrap();
            let b = kernel_sparsity(&doubled, c).unwrap();
            assert!((b - 2.0 * a).abs() < 1e-12 * b);
        }
        assert!(kernel_sparsity(&w, 3).is_err());
    }

    #[test]
    fn two_filters_have_one_neighbour() {
        let a = knn_distance_matrix(&scalars(&[1.0, 4.0]), 0, 5).unwrap();
        assert_eq!(a.k(), 1);
        assert_eq!(a.row(0), &[0.0, 3.0]);
        assert_eq!(a.row(1), &[3.0, 0.0]);
    }

    #[test]
    fn collinear_nearest_neighbours() {
        let a = knn_distance_matrix(&scalars(&[0.0, 1.0, 10.0]), 0, 1).unwrap();
        assert_eq!(a.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(a.row(1), &[1.0, 0.0, 0.0]);
        assert_eq!(a.row(2), &[0.0, 9.0, 0.0]);
        assert_eq!(density_metric(&a), vec![1.0, 1.0, 9.0]);
    }

    #[test]
    fn knn_is_asymmetric() {
        let a = knn_distance_matrix(&scalars(&[0.0, 1.0, 3.0]), 0, 1).unwrap();
        assert_eq!(a.get(2, 1), 2.0);
        assert_eq!(a.get(1, 2), 0.0);
    }

    #[test]
    fn ties_prefer_lower_index() {
        // kernel 1 is equidistant from 0 and 2
        let a = knn_distance_matrix(&scalars(&[0.0, 1.0, 2.0]), 0, 1).unwrap();
        assert_eq!(a.row(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_layer() {
        assert!(matches!(
            knn_distance_matrix(&scalars(&[1.0]), 0, 5),
            Err(KseError::DegenerateLayer(_))
        ));
        assert!(analyze_layer(&scalars(&[1.0]), &AnalysisConfig::default()).is_err());
    }

    #[test]
    fn entropy_examples() {
        let a = knn_distance_matrix(&scalars(&[0.0, 1.0, 10.0]), 0, 1).unwrap();
        // -(2/11) log2(1/11) - (9/11) log2(9/11)
        assert!((kernel_entropy(&a) - 0.865_856_617_457_223_5).abs() < 1e-12);
        assert_eq!(entropy_of(&[1.0, 0.0, 0.0, 0.0]), 0.0);
        assert!((entropy_of(&[2.5; 8]) - 3.0).abs() < 1e-15);
        let same = knn_distance_matrix(&scalars(&[0.5; 4]), 0, 5).unwrap();
        assert_eq!(density_metric(&same), vec![0.0; 4]);
        assert_eq!(kernel_entropy(&same), 2.0);
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[0.0, 5.0, 10.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[3.0, 3.0, 3.0]), vec![1.0, 1.0, 1.0]);
        let v = minmax_normalize(&[4.0, -2.0, 7.5, 1.0]);
        assert_eq!(v.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(v.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }

    #[test]
    fn indicator_examples() {
        assert_eq!(kse_indicator(1.0, 0.0, 1.0), 1.0);
        assert_eq!(kse_indicator(0.0, 0.7, 1.0), 0.0);
        assert!((kse_indicator(1.0, 1.0, 1.0) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identical_channels_get_full_indicator() {
        let w = WeightTensor::from_fn(4, 3, 2, 2, |n, _, y, x| (n * 4 + y * 2 + x) as f32 * 0.1).unwrap();
        let r = analyze_layer(&w, &AnalysisConfig::default()).unwrap();
        assert_eq!(r.indicator, vec![1.0; 3]);
    }

    #[test]
    fn zero_channel_is_least_sparse() {
        let mut w = random_weights(9, 6, 4, 3);
        for n in 0..6 {
            w.kernel_mut(n, 2).fill(0.0);
        }
        let r = analyze_layer(&w, &AnalysisConfig::default()).unwrap();
        assert_eq!(r.sparsity_raw[2], 0.0);
        assert_eq!(r.sparsity_norm[2], 0.0);
        assert_eq!(r.indicator[2], 0.0);
    }

    #[test]
    fn channel_permutation_permutes_report() {
        let w = random_weights(4, 6, 4, 3);
        let perm = [2usize, 0, 3, 1];
        let permuted = WeightTensor::from_fn(6, 4, 3, 3, |n, c, y, x| w.kernel(n, perm[c])[y * 3 + x]).unwrap();
        let a = analyze_layer(&w, &AnalysisConfig::default()).unwrap();
        let b = analyze_layer(&permuted, &AnalysisConfig::default()).unwrap();
        for (c, &p) in perm.iter().enumerate() {
            assert_eq!(b.sparsity_raw[c], a.sparsity_raw[p]);
            assert_eq!(b.entropy_raw[c], a.entropy_raw[p]);
            assert_eq!(b.indicator[c], a.indicator[p]);
        }
    }

    fn model_with(widths: &[usize]) -> ModelGraph {
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let w = random_weights(i as u64 + 100, pair[1], pair[0], 3);
            layers.push(Layer::Conv(ConvLayer::conv(w, ConvGeometry::uniform(1, 1).unwrap())));
            layers.push(Layer::Relu);
        }
        ModelGraph::new(Shape::new(widths[0], 6, 6), layers).unwrap()
    }

    #[test]
    fn exempt_only_model_has_no_reports() {
        let m = model_with(&[2, 4, 3]);
        assert!(analyze_model(&m, &AnalysisConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn model_reports_follow_layer_order_and_are_deterministic() {
        let m = model_with(&[2, 6, 8, 7, 5, 3]);
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let wide = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = serial.install(|| analyze_model(&m, &AnalysisConfig::default())).unwrap();
        let b = wide.install(|| analyze_model(&m, &AnalysisConfig::default())).unwrap();
        assert_eq!(a.iter().map(|r| r.layer_id).collect::<Vec<_>>(), vec![2, 4, 6]);
        assert_eq!(a, b);
        let mut buf = Vec::new();
        write_reports(&a, &mut buf).unwrap();
        assert_eq!(read_reports(&buf[..]).unwrap(), a);
    }

    proptest! {
        #[test]
        fn entropy_bounds_and_permutation(seed in any::<u64>(), n in 2usize..12, k in 1usize..7) {
            let w = random_weights(seed, n, 1, 2);
            let a = knn_distance_matrix(&w, 0, k).unwrap();
            let e = kernel_entropy(&a);
            prop_assert!(e >= 0.0 && e <= (n as f64).log2() + 1e-12);
            for i in 0..n {
                prop_assert_eq!(a.get(i, i), 0.0);
                prop_assert!(a.row(i).iter().filter(|v| **v > 0.0).count() <= a.k());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.sort_by_key(|_| rng.gen::<u32>());
            let shuffled = WeightTensor::from_fn(n, 1, 2, 2, |f, _, y, x| w.kernel(perm[f], 0)[y * 2 + x]).unwrap();
            let dm = density_metric(&a);
            let dm_p = density_metric(&knn_distance_matrix(&shuffled, 0, k).unwrap());
            for f in 0..n {
                prop_assert!((dm_p[f] - dm[perm[f]]).abs() <= 1e-12 * dm[perm[f]].max(1.0));
            }
        }

        #[test]
        fn normalized_sparsity_is_scale_invariant(seed in any::<u64>(), t in 0.1f32..10.0) {
            let w = random_weights(seed, 5, 4, 3);
            let scaled = WeightTensor::new(5, 4, 3, 3, w.data().iter().map(|v| v * t).collect()).unwrap();
            let a = analyze_layer(&w, &AnalysisConfig::default()).unwrap();
            let b = analyze_layer(&scaled, &AnalysisConfig::default()).unwrap();
            for (x, y) in a.sparsity_norm.iter().zip(&b.sparsity_norm) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn indicator_monotone(s1 in 0.0f64..=1.0, s2 in 0.0f64..=1.0, e1 in 0.0f64..=1.0, e2 in 0.0f64..=1.0, alpha in 0.0f64..4.0) {
            let (slo, shi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let (elo, ehi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            prop_assert!(kse_indicator(slo, e1, alpha) <= kse_indicator(shi, e1, alpha));
            prop_assert!(kse_indicator(s1, ehi, alpha) <= kse_indicator(s1, elo, alpha));
        }
    }
}
