//! Per-channel kernel budgets and k-means clustering of 2D kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::{AnalysisConfig, KseReport};
use crate::error::{KseError, Result};
use crate::model::{CompressedLayer, ModelGraph, Payload};
use crate::tensor::WeightTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionConfig {
    /// Granularity `G` of the budget rule.
    pub granularity: u32,
    /// Shift `T` added to the budget exponent.
    pub shift: i32,
    pub k_neighbors: usize,
    pub alpha: f64,
    pub kmeans_seed: u64,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            granularity: 4,
            shift: 0,
            k_neighbors: crate::analysis::DEFAULT_K_NEIGHBORS,
            alpha: crate::analysis::DEFAULT_ALPHA,
            kmeans_seed: 0,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.granularity < 2 {
            return Err(KseError::Config(format!("granularity must be >= 2, got {}", self.granularity)));
        }
        if self.kmeans_max_iters == 0 {
            return Err(KseError::Config("kmeans_max_iters must be >= 1".into()));
        }
        if !(self.kmeans_tol.is_finite() && self.kmeans_tol > 0.0) {
            return Err(KseError::Config(format!("kmeans_tol must be > 0, got {}", self.kmeans_tol)));
        }
        self.analysis().validate()
    }

    pub fn analysis(&self) -> AnalysisConfig {
        AnalysisConfig {
            k_neighbors: self.k_neighbors,
            alpha: self.alpha,
        }
    }
}

/// Number of kernels kept for a channel with indicator `v`.
///
/// Cases are tried in order: `floor(vG) = 0` prunes the channel,
/// `ceil(vG) = G` keeps all `N`, anything else keeps
/// `ceil(N / 2^(G - ceil(vG) + T))`, clamped to `[0, N]`.
pub fn kernel_count(v: f64, n_filters: usize, cfg: &CompressionConfig) -> Result<usize> {
    if cfg.granularity < 2 {
        return Err(KseError::Config(format!("granularity must be >= 2, got {}", cfg.granularity)));
    }
    if !(0.0..=1.0).contains(&v) {
        return Err(KseError::Config(format!("indicator {v} outside [0, 1]")));
    }
    let g = cfg.granularity as f64;
    let scaled = v * g;
    if scaled.floor() == 0.0 {
        return Ok(0);
    }
    let level = scaled.ceil() as i64;
    if level == cfg.granularity as i64 {
        return Ok(n_filters);
    }
    let exponent = cfg.granularity as i64 - level + cfg.shift as i64;
    if exponent <= 0 {
        return Ok(n_filters);
    }
    if exponent >= 64 {
        return Ok(n_filters.min(1));
    }
    let divisor = 1u64 << exponent;
    let q = (n_filters as u64).div_ceil(divisor);
    Ok((q as usize).min(n_filters))
}

/// Outcome of clustering one channel's kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// `q` centroids, each `dim` long, back to back.
    pub centroids: Vec<f64>,
    pub dim: usize,
    /// Zero-based cluster of every input point.
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    /// Inertia after every Lloyd iteration.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl ClusterResult {
    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn clusters(&self) -> usize {
        self.centroids.len() / self.dim.max(1)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distance-weighted (k-means++) seeding.
fn seed_centroids(points: &[Vec<f64>], q: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < q {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                acc += d;
                if acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| nearest.iter().rposition(|&d| d > 0.0).expect("positive total"))
        } else {
            chosen.iter().position(|c| !c).expect("q <= n")
        };
        chosen[pick] = true;
        let c = points[pick].clone();
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Nearest centroid, lower index on ties.
fn nearest_centroid(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Gives every empty cluster the point farthest from its own centroid,
/// taken from a cluster that has more than one member.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assign: &mut [usize]) {
    let q = centroids.len();
    loop {
        let mut counts = vec![0usize; q];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut donor = None;
        let mut far = -1.0;
        for (i, p) in points.iter().enumerate() {
            if counts[assign[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[assign[i]]);
            if d > far {
                far = d;
                donor = Some(i);
            }
        }
        let i = donor.expect("q <= n leaves a cluster with spare points");
        assign[i] = empty;
        centroids[empty] = points[i].clone();
    }
}

fn means(points: &[Vec<f64>], assign: &[usize], q: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0f64; dim]; q];
    let mut counts = vec![0usize; q];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= c as f64;
        }
    }
    sums
}

fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], assign: &[usize]) -> f64 {
    points.iter().zip(assign).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

/// Lloyd's k-means over `points` with `q` clusters.
///
/// Seeding uses `cfg.kmeans_seed`; iterations stop when no centroid moves
/// more than `cfg.kmeans_tol` or after `cfg.kmeans_max_iters` rounds.
pub fn kmeans_kernels(points: &[Vec<f64>], q: usize, cfg: &CompressionConfig) -> Result<ClusterResult> {
    let n = points.len();
    if q > n {
        return Err(KseError::Budget { budget: q, available: n });
    }
    if q == 0 {
        return Err(KseError::Config("k-means needs at least one cluster".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(KseError::Shape("k-means points differ in length".into()));
    }
    if cfg.kmeans_max_iters == 0 || !(cfg.kmeans_tol.is_finite() && cfg.kmeans_tol > 0.0) {
        return Err(KseError::Config("k-means needs max_iters >= 1 and tol > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.kmeans_seed);
    let mut centroids = seed_centroids(points, q, &mut rng);
    let mut assign = vec![0usize; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.kmeans_max_iters {
        iterations += 1;
        for (a, p) in assign.iter_mut().zip(points) {
            *a = nearest_centroid(p, &centroids).0;
        }
        repair_empty(points, &mut centroids, &mut assign);
        let updated = means(points, &assign, q, dim);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        trace.push(inertia(points, &centroids, &assign));
        if shift < cfg.kmeans_tol {
            break;
        }
    }
    // Final assignment against the converged centroids, kept only if it
    // does not leave a cluster empty.
    let mut last = assign.clone();
    for (a, p) in last.iter_mut().zip(points) {
        *a = nearest_centroid(p, &centroids).0;
    }
    let mut counts = vec![0usize; q];
    for &a in &last {
        counts[a] += 1;
    }
    if counts.iter().all(|&c| c > 0) && inertia(points, &centroids, &last) <= *trace.last().expect("ran") {
        assign = last;
    }
    let final_inertia = inertia(points, &centroids, &assign);
    Ok(ClusterResult {
        centroids: centroids.into_iter().flatten().collect(),
        dim,
        assignments: assign,
        inertia: final_inertia,
        inertia_trace: trace,
        iterations,
    })
}

fn channel_seed(base: u64, layer: usize, channel: usize) -> u64 {
    base ^ ((layer as u64) << 32) ^ (channel as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn compress_weights(layer_id: usize, w: &WeightTensor, report: &KseReport, cfg: &CompressionConfig) -> Result<CompressedLayer> {
    cfg.validate()?;
    if report.channels() != w.in_channels() {
        return Err(KseError::Shape(format!(
            "report covers {} channels, layer has {}",
            report.channels(),
            w.in_channels()
        )));
    }
    let n = w.n_filters();
    let klen = w.kernel_len();
    let channels: Vec<(usize, Vec<f32>, Vec<u32>)> = (0..w.in_channels())
        .into_par_iter()
        .map(|c| -> Result<_> {
            let q = kernel_count(report.indicator[c], n, cfg)?;
            if q == 0 {
                return Ok((0, Vec::new(), Vec::new()));
            }
            if q == n {
                let centroids = (0..n).flat_map(|f| w.kernel(f, c).iter().copied()).collect();
                let idx = if n >= 2 { (0..n as u32).collect() } else { Vec::new() };
                return Ok((n, centroids, idx));
            }
            let points: Vec<Vec<f64>> = (0..n)
                .map(|f| w.kernel(f, c).iter().map(|&v| v as f64).collect())
                .collect();
            let mut local = cfg.clone();
            local.kmeans_seed = channel_seed(cfg.kmeans_seed, layer_id, c);
            let res = kmeans_kernels(&points, q, &local)?;
            let centroids: Vec<f32> = res.centroids.iter().map(|&v| v as f32).collect();
            debug_assert_eq!(centroids.len(), q * klen);
            let idx = if q >= 2 {
                res.assignments.iter().map(|&a| a as u32).collect()
            } else {
                Vec::new()
            };
            Ok((q, centroids, idx))
        })
        .collect::<Result<_>>()?;
    let mut budgets = Vec::with_capacity(channels.len());
    let mut centroids = Vec::with_capacity(channels.len());
    let mut indices = Vec::with_capacity(channels.len());
    for (q, cent, idx) in channels {
        budgets.push(q);
        centroids.push(cent);
        indices.push(idx);
    }
    CompressedLayer::new(n, w.in_channels(), (w.kernel_h(), w.kernel_w()), budgets, centroids, indices)
}

/// Clusters one layer's kernels channel by channel according to `report`.
pub fn compress_layer(w: &WeightTensor, report: &KseReport, cfg: &CompressionConfig) -> Result<CompressedLayer> {
    compress_weights(report.layer_id, w, report, cfg)
}

/// Replaces every non-exempt weight-bearing layer with its clustered form.
pub fn compress_model(m: &ModelGraph, reports: &[KseReport], cfg: &CompressionConfig) -> Result<ModelGraph> {
    cfg.validate()?;
    let targets = m.compressible_layers();
    for r in reports {
        if !targets.contains(&r.layer_id) {
            return Err(KseError::Architecture(format!(
                "report for layer {} has no compressible layer",
                r.layer_id
            )));
        }
    }
    let mut out = m.clone();
    for &i in &targets {
        let conv = m.conv(i).expect("weight-bearing");
        let w = match &conv.payload {
            Payload::Dense(w) => w,
            Payload::Compressed(_) => {
                return Err(KseError::Stage("layer is already compressed".into()).at_layer(i));
            }
        };
        let report = reports
            .iter()
            .find(|r| r.layer_id == i)
            .ok_or_else(|| KseError::Architecture("no analysis report".into()).at_layer(i))?;
        let layer = compress_weights(i, w, report, cfg).map_err(|e| e.at_layer(i))?;
        out.set_payload(i, Payload::Compressed(layer)).map_err(|e| e.at_layer(i))?;
    }
    let meta = &mut out.metadata;
    meta.insert("compression.granularity".into(), cfg.granularity.to_string());
    meta.insert("compression.shift".into(), cfg.shift.to_string());
    meta.insert("compression.alpha".into(), cfg.alpha.to_string());
    meta.insert("compression.k_neighbors".into(), cfg.k_neighbors.to_string());
    meta.insert("compression.seed".into(), cfg.kmeans_seed.to_string());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::analyze_layer;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(g: u32, t: i32) -> CompressionConfig {
        CompressionConfig {
            granularity: g,
            shift: t,
            ..Default::default()
        }
    }

    fn report_with(indicator: Vec<f64>, n: usize) -> KseReport {
        let c = indicator.len();
        KseReport {
            layer_id: 0,
            n_filters: n,
            sparsity_raw: vec![0.0; c],
            entropy_raw: vec![0.0; c],
            sparsity_norm: vec![0.0; c],
            entropy_norm: vec![0.0; c],
            indicator,
            alpha: 1.0,
            k_neighbors: 5,
        }
    }

    #[test]
    fn kernel_count_examples() {
        for g in 2..7 {
            for t in [-1, 0, 2] {
                assert_eq!(kernel_count(0.0, 16, &cfg(g, t)).unwrap(), 0);
                assert_eq!(kernel_count(1.0, 16, &cfg(g, t)).unwrap(), 16);
            }
        }
        assert_eq!(kernel_count(0.6, 16, &cfg(4, 0)).unwrap(), 8);
        assert_eq!(kernel_count(0.3, 16, &cfg(4, 1)).unwrap(), 2);
        assert!(matches!(kernel_count(0.5, 16, &cfg(1, 0)), Err(KseError::Config(_))));
        assert!(kernel_count(1.5, 16, &cfg(4, 0)).is_err());
    }

    #[test]
    fn kmeans_trivial_budgets() {
        let pts: Vec<Vec<f64>> = [0.5, -1.0, 3.0, 2.0].iter().map(|&v| vec![v, v * 2.0]).collect();
        let full = kmeans_kernels(&pts, 4, &cfg(4, 0)).unwrap();
        assert_eq!(full.inertia, 0.0);
        let mut sorted = full.assignments.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        let one = kmeans_kernels(&pts, 1, &cfg(4, 0)).unwrap();
        assert_eq!(one.centroid(0), &[1.125, 2.25]);
        assert!(matches!(kmeans_kernels(&pts, 5, &cfg(4, 0)), Err(KseError::Budget { .. })));
    }

    #[test]
    fn kmeans_four_point_fixture() {
        let pts: Vec<Vec<f64>> = [0.0, 0.1, 10.0, 10.1].iter().map(|&v| vec![v]).collect();
        for seed in 0..20 {
            let mut c = cfg(4, 0);
            c.kmeans_seed = seed;
            let r = kmeans_kernels(&pts, 2, &c).unwrap();
            let mut cents = [r.centroid(0)[0], r.centroid(1)[0]];
            cents.sort_by(f64::total_cmp);
            assert!((cents[0] - 0.05).abs() < 1e-12 && (cents[1] - 10.05).abs() < 1e-12);
            assert!((r.inertia - 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_points_fill_every_cluster() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let r = kmeans_kernels(&pts, 3, &cfg(4, 0)).unwrap();
        for k in 0..3 {
            assert!(r.assignments.contains(&k));
        }
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn all_ones_report_is_lossless() {
        let w = WeightTensor::from_fn(5, 3, 3, 3, |n, c, y, x| ((n * 31 + c * 7 + y * 3 + x) % 11) as f32 - 5.0).unwrap();
        let l = compress_layer(&w, &report_with(vec![1.0; 3], 5), &cfg(4, 0)).unwrap();
        assert_eq!(l.budgets(), &[5, 5, 5]);
        assert_eq!(l.expand(), w);
    }

    #[test]
    fn all_zero_report_prunes_everything() {
        let w = WeightTensor::from_fn(4, 2, 1, 1, |n, c, _, _| (n + c) as f32).unwrap();
        let l = compress_layer(&w, &report_with(vec![0.0; 2], 4), &cfg(4, 0)).unwrap();
        assert_eq!(l.total_kernels(), 0);
        assert!(l.expand().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixed_report_spans_budget_cases() {
        let w = WeightTensor::from_fn(8, 4, 2, 2, |n, c, y, x| ((n * 13 + c * 5 + y * 2 + x) % 7) as f32).unwrap();
        let l = compress_layer(&w, &report_with(vec![0.0, 0.4, 0.7, 1.0], 8), &cfg(4, 0)).unwrap();
        assert_eq!(l.budgets(), &[0, 2, 4, 8]);
        let total = l.total_kernels();
        assert!(total > 0 && total < 8 * 4);
        l.validate().unwrap();
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let w = WeightTensor::from_fn(12, 3, 3, 3, |n, c, y, x| (((n * 7 + c * 3 + y * 5 + x) * 2654435761usize) % 1000) as f32 / 500.0 - 1.0).unwrap();
        let rep = analyze_layer(&w, &AnalysisConfig::default()).unwrap();
        let a = compress_layer(&w, &rep, &cfg(5, 0)).unwrap();
        let b = compress_layer(&w, &rep, &cfg(5, 0)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn kernel_count_monotone_in_v(a in 0.0f64..=1.0, b in 0.0f64..=1.0, g in 2u32..7, t in 0i32..3, n in 1usize..70) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let c = cfg(g, t);
            prop_assert!(kernel_count(lo, n, &c).unwrap() <= kernel_count(hi, n, &c).unwrap());
            let q = kernel_count(hi, n, &c).unwrap();
            prop_assert!(q <= n);
        }

        #[test]
        fn kernel_count_non_increasing_in_shift(v in 0.0f64..=1.0, g in 2u32..7, n in 1usize..70) {
            prop_assert!(kernel_count(v, n, &cfg(g, 1)).unwrap() <= kernel_count(v, n, &cfg(g, 0)).unwrap());
        }

        #[test]
        fn kmeans_inertia_never_increases(seed in any::<u64>(), n in 2usize..30, dim in 1usize..6, q_frac in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let q = 1 + ((n - 1) as f64 * q_frac) as usize;
            let mut c = cfg(4, 0);
            c.kmeans_seed = seed;
            let r = kmeans_kernels(&pts, q, &c).unwrap();
            for w in r.inertia_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0));
            }
            prop_assert!(r.inertia <= *r.inertia_trace.last().unwrap() + 1e-12);
            for k in 0..q {
                prop_assert!(r.assignments.contains(&k));
            }
        }
    }
}
