//! Layer graph, dense and compressed payloads, and shape propagation.

use std::collections::BTreeMap;

use crate::error::{KseError, Result};
use crate::tensor::{ConvGeometry, Shape, WeightTensor};

/// Whether a weight-bearing layer is a spatial convolution or a
/// fully-connected layer stored as a 1x1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Conv,
    FullyConnected,
}

/// Kernel sets that replace the `N` original kernels of each input channel.
///
/// Channel `c` keeps `budget(c)` centroids. Indices are zero-based: filter
/// `n` reads centroid `index(n, c)` of channel `c`. Channels with budget 1
/// store no index table (every filter reads centroid 0); channels with
/// budget 0 are pruned.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    n_filters: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    budgets: Vec<usize>,
    centroids: Vec<Vec<f32>>,
    indices: Vec<Vec<u32>>,
}

impl CompressedLayer {
    /// `centroids[c]` holds `budgets[c]` kernels back to back;
    /// `indices[c]` is empty when `budgets[c] <= 1`, else has `n_filters` entries.
    pub fn new(
        n_filters: usize,
        in_channels: usize,
        (kernel_h, kernel_w): (usize, usize),
        budgets: Vec<usize>,
        centroids: Vec<Vec<f32>>,
        indices: Vec<Vec<u32>>,
    ) -> Result<Self> {
        let layer = Self {
            n_filters,
            in_channels,
            kernel_h,
            kernel_w,
            budgets,
            centroids,
            indices,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Identity clustering: every kernel is its own centroid.
    pub fn identity(w: &WeightTensor) -> Self {
        let n = w.n_filters();
        let budgets = vec![n; w.in_channels()];
        let centroids = (0..w.in_channels())
            .map(|c| (0..n).flat_map(|f| w.kernel(f, c).iter().copied()).collect())
            .collect();
        let indices = (0..w.in_channels())
            .map(|_| if n >= 2 { (0..n as u32).collect() } else { Vec::new() })
            .collect();
        Self {
            n_filters: n,
            in_channels: w.in_channels(),
            kernel_h: w.kernel_h(),
            kernel_w: w.kernel_w(),
            budgets,
            centroids,
            indices,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_filters == 0 || self.in_channels == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(KseError::Shape("compressed layer dims must be >= 1".into()));
        }
        if self.budgets.len() != self.in_channels
            || self.centroids.len() != self.in_channels
            || self.indices.len() != self.in_channels
        {
            return Err(KseError::Shape(format!(
                "compressed layer needs {} budgets, centroid sets and index sets",
                self.in_channels
            )));
        }
        let klen = self.kernel_len();
        for c in 0..self.in_channels {
            let q = self.budgets[c];
            if q > self.n_filters {
                return Err(KseError::Corrupt(format!(
                    "channel {c} budget {q} exceeds {} filters",
                    self.n_filters
                )));
            }
            if self.centroids[c].len() != q * klen {
                return Err(KseError::Corrupt(format!(
                    "channel {c} has {} centroid values, budget {q} needs {}",
                    self.centroids[c].len(),
                    q * klen
                )));
            }
            if self.centroids[c].iter().any(|v| !v.is_finite()) {
                return Err(KseError::NonFinite("centroid"));
            }
            let idx = &self.indices[c];
            if q <= 1 {
                if !idx.is_empty() {
                    return Err(KseError::Corrupt(format!(
                        "channel {c} with budget {q} must not carry an index table"
                    )));
                }
                continue;
            }
            if idx.len() != self.n_filters {
                return Err(KseError::Corrupt(format!(
                    "channel {c} index table has {} entries, expected {}",
                    idx.len(),
                    self.n_filters
                )));
            }
            let mut used = vec![false; q];
            for (n, &i) in idx.iter().enumerate() {
                let i = i as usize;
                if i >= q {
                    return Err(KseError::Corrupt(format!(
                        "index ({n}, {c}) = {i} outside [0, {q})"
                    )));
                }
                used[i] = true;
            }
            if let Some(dead) = used.iter().position(|u| !u) {
                return Err(KseError::Corrupt(format!(
                    "channel {c} centroid {dead} is never referenced"
                )));
            }
        }
        Ok(())
    }

    pub fn n_filters(&self) -> usize {
        self.n_filters
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_h(&self) -> usize {
        self.kernel_h
    }

    pub fn kernel_w(&self) -> usize {
        self.kernel_w
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }

    pub fn budget(&self, c: usize) -> usize {
        self.budgets[c]
    }

    pub fn total_kernels(&self) -> usize {
        self.budgets.iter().sum()
    }

    /// All centroid values for channel `c`.
    pub fn channel_centroids(&self, c: usize) -> &[f32] {
        &self.centroids[c]
    }

    pub fn centroid(&self, c: usize, i: usize) -> &[f32] {
        let k = self.kernel_len();
        &self.centroids[c][i * k..(i + 1) * k]
    }

    pub(crate) fn centroids_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.centroids
    }

    /// The raw index table for channel `c` (empty for budgets 0 and 1).
    pub fn channel_indices(&self, c: usize) -> &[u32] {
        &self.indices[c]
    }

    /// Centroid used by filter `n` on channel `c`; `None` when pruned.
    #[inline]
    pub fn index(&self, n: usize, c: usize) -> Option<usize> {
        match self.budgets[c] {
            0 => None,
            1 => Some(0),
            _ => Some(self.indices[c][n] as usize),
        }
    }

    /// The dense tensor `W'[n, c] = B[I(n, c), c]`, zero for pruned channels.
    pub fn expand(&self) -> WeightTensor {
        let mut w = WeightTensor::zeros(self.n_filters, self.in_channels, self.kernel_h, self.kernel_w)
            .expect("validated dims");
        for n in 0..self.n_filters {
            for c in 0..self.in_channels {
                if let Some(i) = self.index(n, c) {
                    w.kernel_mut(n, c).copy_from_slice(self.centroid(c, i));
                }
            }
        }
        w
    }
}

/// Weights behind a convolution: the original tensor or its clustered form.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense(WeightTensor),
    Compressed(CompressedLayer),
}

impl Payload {
    pub fn n_filters(&self) -> usize {
        match self {
            Payload::Dense(w) => w.n_filters(),
            Payload::Compressed(l) => l.n_filters(),
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Payload::Dense(w) => w.in_channels(),
            Payload::Compressed(l) => l.in_channels(),
        }
    }

    pub fn kernel_dims(&self) -> (usize, usize) {
        match self {
            Payload::Dense(w) => (w.kernel_h(), w.kernel_w()),
            Payload::Compressed(l) => (l.kernel_h(), l.kernel_w()),
        }
    }

    pub fn is_compressed(&self) -> bool {
        matches!(self, Payload::Compressed(_))
    }

    /// Dense weights, expanding a compressed payload if needed.
    pub fn to_dense(&self) -> WeightTensor {
        match self {
            Payload::Dense(w) => w.clone(),
            Payload::Compressed(l) => l.expand(),
        }
    }
}

/// A convolution or fully-connected (1x1) layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kind: ConvKind,
    pub geometry: ConvGeometry,
    pub payload: Payload,
    /// Dense per-filter biases; never clustered.
    pub bias: Option<Vec<f32>>,
    pub compress_exempt: bool,
}

impl ConvLayer {
    pub fn conv(weights: WeightTensor, geometry: ConvGeometry) -> Self {
        Self {
            kind: ConvKind::Conv,
            geometry,
            payload: Payload::Dense(weights),
            bias: None,
            compress_exempt: false,
        }
    }

    /// `weights` must be `outputs x inputs x 1 x 1`.
    pub fn fully_connected(weights: WeightTensor) -> Result<Self> {
        if weights.kernel_h() != 1 || weights.kernel_w() != 1 {
            return Err(KseError::Shape("fully-connected weights must be 1x1 kernels".into()));
        }
        Ok(Self {
            kind: ConvKind::FullyConnected,
            geometry: ConvGeometry::default(),
            payload: Payload::Dense(weights),
            bias: None,
            compress_exempt: false,
        })
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn exempt(mut self, exempt: bool) -> Self {
        self.compress_exempt = exempt;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    /// Average pooling without padding.
    AvgPool { size: usize, stride: usize },
    /// Reshapes `C x H x W` into `(C H W) x 1 x 1`.
    Flatten,
    /// Adds the current activation and activation `from`. Activation 0 is
    /// the model input and activation `i + 1` is the output of layer `i`.
    ResidualAdd { from: usize },
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(c) if c.kind == ConvKind::FullyConnected => "fully_connected",
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::AvgPool { .. } => "avg_pool",
            Layer::Flatten => "flatten",
            Layer::ResidualAdd { .. } => "residual_add",
        }
    }

    pub fn as_conv(&self) -> Option<&ConvLayer> {
        match self {
            Layer::Conv(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_conv_mut(&mut self) -> Option<&mut ConvLayer> {
        match self {
            Layer::Conv(c) => Some(c),
            _ => None,
        }
    }
}

/// Output shape of `layer` given its input and the activations so far.
pub(crate) fn layer_output_shape(layer: &Layer, input: Shape, activations: &[Shape]) -> Result<Shape> {
    match layer {
        Layer::Conv(conv) => {
            let p = &conv.payload;
            if input.channels != p.in_channels() {
                return Err(KseError::Shape(format!(
                    "input has {} channels, layer expects {}",
                    input.channels,
                    p.in_channels()
                )));
            }
            if let Some(b) = &conv.bias {
                if b.len() != p.n_filters() {
                    return Err(KseError::Shape(format!(
                        "bias has {} entries for {} filters",
                        b.len(),
                        p.n_filters()
                    )));
                }
            }
            if conv.kind == ConvKind::FullyConnected && p.kernel_dims() != (1, 1) {
                return Err(KseError::Shape("fully-connected layer with non-1x1 kernels".into()));
            }
            let (kh, kw) = p.kernel_dims();
            let (oh, ow) = conv.geometry.output_size(input.height, input.width, kh, kw)?;
            Ok(Shape::new(p.n_filters(), oh, ow))
        }
        Layer::Relu => Ok(input),
        Layer::AvgPool { size, stride } => {
            if *size == 0 || *stride == 0 {
                return Err(KseError::Geometry("pooling size and stride must be >= 1".into()));
            }
            if input.height < *size || input.width < *size {
                return Err(KseError::Geometry(format!("pool {size} larger than input {input}")));
            }
            Ok(Shape::new(
                input.channels,
                (input.height - size) / stride + 1,
                (input.width - size) / stride + 1,
            ))
        }
        Layer::Flatten => Ok(Shape::new(input.len(), 1, 1)),
        Layer::ResidualAdd { from } => {
            let other = activations.get(*from).ok_or_else(|| {
                KseError::Shape(format!("residual source {from} is not an earlier activation"))
            })?;
            if *other != input {
                return Err(KseError::Shape(format!(
                    "residual source shape {other} differs from {input}"
                )));
            }
            Ok(input)
        }
    }
}

/// An ordered layer list with an input shape and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: Shape,
    layers: Vec<Layer>,
    pub metadata: BTreeMap<String, String>,
}

impl ModelGraph {
    /// Validates shapes and exempts the first and last weight-bearing
    /// layers from compression.
    pub fn new(input_shape: Shape, layers: Vec<Layer>) -> Result<Self> {
        let mut m = Self::from_parts(input_shape, layers, BTreeMap::new())?;
        m.apply_default_exemptions();
        Ok(m)
    }

    /// Validates shapes but keeps every exemption flag as given.
    pub fn from_parts(input_shape: Shape, layers: Vec<Layer>, metadata: BTreeMap<String, String>) -> Result<Self> {
        let m = Self {
            input_shape,
            layers,
            metadata,
        };
        m.activation_shapes()?;
        Ok(m)
    }

    pub fn apply_default_exemptions(&mut self) {
        let weighted = self.weighted_layers();
        for (pos, &i) in weighted.iter().enumerate() {
            let exempt = pos == 0 || pos + 1 == weighted.len();
            if let Some(conv) = self.layers[i].as_conv_mut() {
                conv.compress_exempt = exempt;
            }
        }
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> Option<&Layer> {
        self.layers.get(i)
    }

    pub fn conv(&self, i: usize) -> Option<&ConvLayer> {
        self.layers.get(i).and_then(Layer::as_conv)
    }

    /// Overrides the compression exemption of a weight-bearing layer.
    pub fn set_exempt(&mut self, layer: usize, exempt: bool) -> Result<()> {
        match self.layers.get_mut(layer).and_then(Layer::as_conv_mut) {
            Some(conv) => {
                conv.compress_exempt = exempt;
                Ok(())
            }
            None => Err(KseError::Index(format!("layer {layer} is not weight-bearing"))),
        }
    }

    /// Replaces a layer's payload, re-checking shapes.
    pub fn set_payload(&mut self, layer: usize, payload: Payload) -> Result<()> {
        let conv = self
            .layers
            .get_mut(layer)
            .and_then(Layer::as_conv_mut)
            .ok_or_else(|| KseError::Index(format!("layer {layer} is not weight-bearing")))?;
        let old = std::mem::replace(&mut conv.payload, payload);
        if let Err(e) = self.activation_shapes() {
            if let Some(conv) = self.layers[layer].as_conv_mut() {
                conv.payload = old;
            }
            return Err(e);
        }
        Ok(())
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Indices of conv and fully-connected layers, in order.
    pub fn weighted_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.as_conv().map(|_| i))
            .collect()
    }

    /// Indices of weight-bearing layers eligible for compression.
    pub fn compressible_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.as_conv().filter(|c| !c.compress_exempt).map(|_| i))
            .collect()
    }

    pub fn has_compressed_payloads(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.as_conv().is_some_and(|c| c.payload.is_compressed()))
    }

    /// `shapes[0]` is the input, `shapes[i + 1]` the output of layer `i`.
    pub fn activation_shapes(&self) -> Result<Vec<Shape>> {
        if self.input_shape.is_empty() {
            return Err(KseError::Shape("input shape must be non-empty".into()));
        }
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(self.input_shape);
        for (i, layer) in self.layers.iter().enumerate() {
            let input = shapes[i];
            let out = layer_output_shape(layer, input, &shapes).map_err(|e| e.at_layer(i))?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Shape {
        *self.activation_shapes().expect("validated graph").last().expect("non-empty")
    }

    /// The same graph with every compressed payload expanded to dense weights.
    pub fn expanded(&self) -> ModelGraph {
        let mut m = self.clone();
        for layer in m.layers_mut() {
            if let Layer::Conv(conv) = layer {
                if let Payload::Compressed(c) = &conv.payload {
                    conv.payload = Payload::Dense(c.expand());
                }
            }
        }
        m
    }

    /// Layer kinds and dimensions agree (payload contents may differ).
    pub fn same_architecture(&self, other: &ModelGraph) -> Result<()> {
        if self.input_shape != other.input_shape {
            return Err(KseError::Architecture(format!(
                "input shapes {} and {}",
                self.input_shape, other.input_shape
            )));
        }
        if self.layers.len() != other.layers.len() {
            return Err(KseError::Architecture(format!(
                "{} layers vs {}",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            let same = match (a, b) {
                (Layer::Conv(x), Layer::Conv(y)) => {
                    x.kind == y.kind
                        && x.geometry == y.geometry
                        && x.payload.n_filters() == y.payload.n_filters()
                        && x.payload.in_channels() == y.payload.in_channels()
                        && x.payload.kernel_dims() == y.payload.kernel_dims()
                }
                _ => a.kind_name() == b.kind_name() && (a.as_conv().is_some() || a == b),
            };
            if !same {
                return Err(KseError::Architecture(format!("layer {i} differs")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(n: usize, c: usize, k: usize, pad: usize) -> Layer {
        Layer::Conv(ConvLayer::conv(
            WeightTensor::zeros(n, c, k, k).unwrap(),
            ConvGeometry::uniform(1, pad).unwrap(),
        ))
    }

    #[test]
    fn default_exemptions_cover_first_and_last() {
        let fc = ConvLayer::fully_connected(WeightTensor::zeros(3, 4 * 4 * 4, 1, 1).unwrap()).unwrap();
        let m = ModelGraph::new(
            Shape::new(2, 4, 4),
            vec![conv(4, 2, 3, 1), Layer::Relu, conv(4, 4, 3, 1), Layer::Relu, Layer::Flatten, Layer::Conv(fc)],
        )
        .unwrap();
        assert_eq!(m.weighted_layers(), vec![0, 2, 5]);
        assert_eq!(m.compressible_layers(), vec![2]);
        assert_eq!(m.output_shape(), Shape::new(3, 1, 1));
    }

    #[test]
    fn exemption_is_overridable() {
        let mut m = ModelGraph::new(Shape::new(1, 4, 4), vec![conv(2, 1, 3, 1), conv(2, 2, 3, 1)]).unwrap();
        assert!(m.compressible_layers().is_empty());
        m.set_exempt(1, false).unwrap();
        assert_eq!(m.compressible_layers(), vec![1]);
        assert!(m.set_exempt(5, true).is_err());
    }

    #[test]
    fn incompatible_shapes_are_rejected() {
        let err = ModelGraph::new(Shape::new(1, 4, 4), vec![conv(2, 1, 3, 1), conv(2, 3, 3, 1)]).unwrap_err();
        assert!(matches!(err, KseError::Layer { layer: 1, .. }));
        let err = ModelGraph::new(Shape::new(1, 4, 4), vec![conv(2, 1, 3, 0), Layer::ResidualAdd { from: 0 }]);
        assert!(err.is_err());
    }

    #[test]
    fn identity_layer_expands_to_original() {
        let w = WeightTensor::from_fn(3, 2, 2, 2, |n, c, y, x| (n * 8 + c * 4 + y * 2 + x) as f32).unwrap();
        let l = CompressedLayer::identity(&w);
        l.validate().unwrap();
        assert_eq!(l.expand(), w);
    }

    #[test]
    fn compressed_invariants() {
        let ok = CompressedLayer::new(
            3,
            2,
            (1, 1),
            vec![0, 2],
            vec![vec![], vec![1.0, 2.0]],
            vec![vec![], vec![0, 1, 1]],
        );
        assert!(ok.is_ok());
        let l = ok.unwrap();
        assert_eq!(l.index(0, 0), None);
        assert_eq!(l.index(2, 1), Some(1));
        let dead = CompressedLayer::new(3, 1, (1, 1), vec![2], vec![vec![1.0, 2.0]], vec![vec![0, 0, 0]]);
        assert!(matches!(dead, Err(KseError::Corrupt(_))));
        let out_of_range = CompressedLayer::new(2, 1, (1, 1), vec![2], vec![vec![1.0, 2.0]], vec![vec![0, 2]]);
        assert!(matches!(out_of_range, Err(KseError::Corrupt(_))));
        let single_with_table = CompressedLayer::new(2, 1, (1, 1), vec![1], vec![vec![1.0]], vec![vec![0, 0]]);
        assert!(single_with_table.is_err());
        let over_budget = CompressedLayer::new(1, 1, (1, 1), vec![2], vec![vec![1.0, 2.0]], vec![vec![0]]);
        assert!(over_budget.is_err());
    }
}
