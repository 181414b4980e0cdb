//! Dense containers and the cross-correlation primitives.
//!
//! Storage is 32-bit; every sliding-window sum is accumulated in 64-bit.
//! "Convolution" follows the deep-learning convention and is implemented as
//! cross-correlation with zero padding.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KseError, Result};

/// Floating element types a [`FeatureStack`] can hold.
pub trait Scalar: Copy + Default + Send + Sync + PartialEq + std::fmt::Debug + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

fn check_finite<T: Scalar>(data: &[T], what: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(KseError::NonFinite(what))
    }
}

/// Convolution weights laid out as `N x C x Kh x Kw`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    n_filters: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(
        n_filters: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if n_filters == 0 || in_channels == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(KseError::Shape(format!(
                "weight dims must be >= 1, got {n_filters}x{in_channels}x{kernel_h}x{kernel_w}"
            )));
        }
        let expected = n_filters * in_channels * kernel_h * kernel_w;
        if data.len() != expected {
            return Err(KseError::Shape(format!(
                "weight data has {} elements, dims require {expected}",
                data.len()
            )));
        }
        check_finite(&data, "weight tensor")?;
        Ok(Self {
            n_filters,
            in_channels,
            kernel_h,
            kernel_w,
            data,
        })
    }

    pub fn zeros(n_filters: usize, in_channels: usize, kernel_h: usize, kernel_w: usize) -> Result<Self> {
        Self::new(
            n_filters,
            in_channels,
            kernel_h,
            kernel_w,
            vec![0.0; n_filters * in_channels * kernel_h * kernel_w],
        )
    }

    /// Builds a tensor from a generator called with `(n, c, ky, kx)`.
    pub fn from_fn(
        n_filters: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(n_filters * in_channels * kernel_h * kernel_w);
        for n in 0..n_filters {
            for c in 0..in_channels {
                for ky in 0..kernel_h {
                    for kx in 0..kernel_w {
                        data.push(f(n, c, ky, kx));
                    }
                }
            }
        }
        Self::new(n_filters, in_channels, kernel_h, kernel_w, data)
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The 2D kernel connecting input channel `c` to filter `n`, row-major.
    ///
    /// Panics when out of range; see [`flatten_kernel`] for the checked form.
    pub fn kernel(&self, n: usize, c: usize) -> &[f32] {
        let len = self.kernel_len();
        let start = (n * self.in_channels + c) * len;
        &self.data[start..start + len]
    }

    pub fn kernel_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let len = self.kernel_len();
        let start = (n * self.in_channels + c) * len;
        &mut self.data[start..start + len]
    }

    /// Overwrites one kernel; used to rebuild tensors from kernel lists.
    pub fn set_kernel(&mut self, n: usize, c: usize, values: &[f32]) -> Result<()> {
        if n >= self.n_filters || c >= self.in_channels {
            return Err(KseError::Index(format!(
                "kernel ({n}, {c}) outside {}x{}",
                self.n_filters, self.in_channels
            )));
        }
        if values.len() != self.kernel_len() {
            return Err(KseError::Shape(format!(
                "kernel needs {} values, got {}",
                self.kernel_len(),
                values.len()
            )));
        }
        check_finite(values, "kernel")?;
        self.kernel_mut(n, c).copy_from_slice(values);
        Ok(())
    }
}

/// Row-major flattening of the kernel `W[n, c]`.
pub fn flatten_kernel(w: &WeightTensor, n: usize, c: usize) -> Result<Vec<f32>> {
    if n >= w.n_filters || c >= w.in_channels {
        return Err(KseError::Index(format!(
            "kernel ({n}, {c}) outside {}x{}",
            w.n_filters, w.in_channels
        )));
    }
    Ok(w.kernel(n, c).to_vec())
}

/// Inverse of [`flatten_kernel`].
pub fn unflatten_kernel(values: &[f32], kernel_h: usize, kernel_w: usize) -> Result<Plane> {
    Plane::new(kernel_h, kernel_w, values.to_vec())
}

/// A single 2D map: a kernel, one channel, an activation map, a heat map.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(KseError::Shape(format!("plane dims must be >= 1, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(KseError::Shape(format!(
                "plane data has {} elements, {height}x{width} requires {}",
                data.len(),
                height * width
            )));
        }
        check_finite(&data, "plane")?;
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// A `channels x height x width` stack of feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack<T: Scalar = f32> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureStack<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(KseError::Shape(format!(
                "feature dims must be >= 1, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(KseError::Shape(format!(
                "feature data has {} elements, {channels}x{height}x{width} requires {}",
                data.len(),
                channels * height * width
            )));
        }
        check_finite(&data, "feature stack")?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(channels, height, width, vec![T::default(); channels * height * width])
    }

    /// Skips the finiteness scan; callers guarantee the invariants.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let len = self.plane_len();
        &self.data[c * len..(c + 1) * len]
    }

    /// Element-type conversion (storage precision changes only).
    pub fn cast<U: Scalar>(&self) -> FeatureStack<U> {
        FeatureStack {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

impl FeatureStack<f32> {
    /// Copies one channel out as a [`Plane`].
    pub fn plane(&self, c: usize) -> Result<Plane> {
        if c >= self.channels {
            return Err(KseError::Index(format!("channel {c} of {}", self.channels)));
        }
        Ok(Plane {
            height: self.height,
            width: self.width,
            data: self.channel(c).to_vec(),
        })
    }

    pub fn from_plane(p: &Plane) -> Self {
        Self::from_raw(1, p.height, p.width, p.data.clone())
    }
}

/// Channel/height/width triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Stride and zero padding per axis, `(vertical, horizontal)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        let g = Self { stride, padding };
        g.validate()?;
        Ok(g)
    }

    pub fn uniform(stride: usize, padding: usize) -> Result<Self> {
        Self::new((stride, stride), (padding, padding))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(KseError::Geometry(format!("stride must be >= 1, got {:?}", self.stride)));
        }
        Ok(())
    }

    /// `floor((in + 2 pad - k) / stride) + 1` per axis.
    pub fn output_size(&self, in_h: usize, in_w: usize, kernel_h: usize, kernel_w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |inp: usize, pad: usize, k: usize, s: usize| -> Result<usize> {
            let padded = inp + 2 * pad;
            if k == 0 || padded < k {
                return Err(KseError::Geometry(format!(
                    "kernel {k} does not fit padded input {padded}"
                )));
            }
            Ok((padded - k) / s + 1)
        };
        Ok((
            axis(in_h, self.padding.0, kernel_h, self.stride.0)?,
            axis(in_w, self.padding.1, kernel_w, self.stride.1)?,
        ))
    }
}

/// Output positions `o` whose input coordinate `o*stride + offset - pad`
/// falls inside `[0, in_len)`.
#[inline]
fn valid_outputs(out_len: usize, in_len: usize, stride: usize, pad: usize, offset: usize) -> Range<usize> {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let reach = in_len + pad;
    let hi = if reach > offset {
        ((reach - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Cross-correlates one input plane with one kernel, overwriting `out`.
///
/// Per output pixel the taps are summed in row-major kernel order starting
/// from zero, so every caller that goes through here rounds identically.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate_plane<T: Scalar, K: Scalar>(
    input: &[T],
    (in_h, in_w): (usize, usize),
    kernel: &[K],
    (kh, kw): (usize, usize),
    g: &ConvGeometry,
    out: &mut [f64],
    (out_h, out_w): (usize, usize),
) {
    out.fill(0.0);
    let (sy, sx) = g.stride;
    let (py, px) = g.padding;
    for ky in 0..kh {
        let rows = valid_outputs(out_h, in_h, sy, py, ky);
        for kx in 0..kw {
            let wv = kernel[ky * kw + kx].to_f64();
            if wv == 0.0 {
                continue;
            }
            let cols = valid_outputs(out_w, in_w, sx, px, kx);
            for oy in rows.clone() {
                let iy = oy * sy + ky - py;
                let in_row = &input[iy * in_w..(iy + 1) * in_w];
                let out_row = &mut out[oy * out_w..(oy + 1) * out_w];
                for ox in cols.clone() {
                    out_row[ox] += wv * in_row[ox * sx + kx - px].to_f64();
                }
            }
        }
    }
}

/// Accumulates `d out / d kernel` contracted with `grad_out` into `grad_kernel`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_kernel_grad<T: Scalar>(
    input: &[T],
    (in_h, in_w): (usize, usize),
    grad_out: &[f64],
    (out_h, out_w): (usize, usize),
    (kh, kw): (usize, usize),
    g: &ConvGeometry,
    grad_kernel: &mut [f64],
) {
    let (sy, sx) = g.stride;
    let (py, px) = g.padding;
    for ky in 0..kh {
        let rows = valid_outputs(out_h, in_h, sy, py, ky);
        for kx in 0..kw {
            let cols = valid_outputs(out_w, in_w, sx, px, kx);
            let mut acc = 0.0;
            for oy in rows.clone() {
                let iy = oy * sy + ky - py;
                for ox in cols.clone() {
                    acc += input[iy * in_w + ox * sx + kx - px].to_f64() * grad_out[oy * out_w + ox];
                }
            }
            grad_kernel[ky * kw + kx] += acc;
        }
    }
}

/// Accumulates the transposed (full) correlation of `grad_out` with `kernel`
/// into `grad_in`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_input_grad<K: Scalar>(
    kernel: &[K],
    (kh, kw): (usize, usize),
    grad_out: &[f64],
    (out_h, out_w): (usize, usize),
    g: &ConvGeometry,
    grad_in: &mut [f64],
    (in_h, in_w): (usize, usize),
) {
    let (sy, sx) = g.stride;
    let (py, px) = g.padding;
    for ky in 0..kh {
        let rows = valid_outputs(out_h, in_h, sy, py, ky);
        for kx in 0..kw {
            let wv = kernel[ky * kw + kx].to_f64();
            if wv == 0.0 {
                continue;
            }
            let cols = valid_outputs(out_w, in_w, sx, px, kx);
            for oy in rows.clone() {
                let iy = oy * sy + ky - py;
                for ox in cols.clone() {
                    grad_in[iy * in_w + ox * sx + kx - px] += wv * grad_out[oy * out_w + ox];
                }
            }
        }
    }
}

/// 2D cross-correlation of a single plane with a single kernel.
pub fn conv2d_single(x: &Plane, k: &Plane, g: &ConvGeometry) -> Result<Plane> {
    let (oh, ow) = g.output_size(x.height, x.width, k.height, k.width)?;
    let mut acc = vec![0.0f64; oh * ow];
    correlate_plane(
        &x.data,
        (x.height, x.width),
        &k.data,
        (k.height, k.width),
        g,
        &mut acc,
        (oh, ow),
    );
    Ok(Plane {
        height: oh,
        width: ow,
        data: acc.into_iter().map(|v| v as f32).collect(),
    })
}

/// Per-filter accumulator planes and their `(height, width)`.
pub(crate) type Accumulated = (Vec<Vec<f64>>, (usize, usize));

/// Dense correlation kept in 64-bit: one accumulator plane per filter.
///
/// Each filter's plane is the channel-ordered sum of per-channel planes.
pub(crate) fn dense_accumulate(
    x: &FeatureStack,
    w: &WeightTensor,
    g: &ConvGeometry,
) -> Result<Accumulated> {
    if x.channels != w.in_channels {
        return Err(KseError::Shape(format!(
            "input has {} channels, weights expect {}",
            x.channels, w.in_channels
        )));
    }
    let (oh, ow) = g.output_size(x.height, x.width, w.kernel_h, w.kernel_w)?;
    let in_hw = (x.height, x.width);
    let k_hw = (w.kernel_h, w.kernel_w);
    let planes = (0..w.n_filters)
        .into_par_iter()
        .map(|n| {
            let mut acc = vec![0.0f64; oh * ow];
            let mut scratch = vec![0.0f64; oh * ow];
            for c in 0..w.in_channels {
                correlate_plane(x.channel(c), in_hw, w.kernel(n, c), k_hw, g, &mut scratch, (oh, ow));
                for (a, s) in acc.iter_mut().zip(&scratch) {
                    *a += *s;
                }
            }
            acc
        })
        .collect();
    Ok((planes, (oh, ow)))
}

/// `Y_n = sum_c W[n, c] (*) X_c`, biases omitted.
pub fn conv2d_dense(x: &FeatureStack, w: &WeightTensor, g: &ConvGeometry) -> Result<FeatureStack> {
    let (planes, (oh, ow)) = dense_accumulate(x, w, g)?;
    let data = planes.into_iter().flatten().map(|v| v as f32).collect();
    Ok(FeatureStack::from_raw(w.n_filters, oh, ow, data))
}

/// Bilinear resize with aligned corners.
pub fn bilinear_upscale(m: &Plane, out_h: usize, out_w: usize) -> Result<Plane> {
    if out_h == 0 || out_w == 0 {
        return Err(KseError::Shape(format!("target dims must be >= 1, got {out_h}x{out_w}")));
    }
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let pos = if out > 1 {
                    o as f64 * (inp - 1) as f64 / (out - 1) as f64
                } else {
                    0.0
                };
                let lo = (pos.floor() as usize).min(inp - 1);
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = coords(out_h, m.height);
    let xs = coords(out_w, m.width);
    let mut data = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = m.get(y0, x0) as f64 * (1.0 - fx) + m.get(y0, x1) as f64 * fx;
            let bottom = m.get(y1, x0) as f64 * (1.0 - fx) + m.get(y1, x1) as f64 * fx;
            data.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Ok(Plane {
        height: out_h,
        width: out_w,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &FeatureStack, w: &WeightTensor, g: &ConvGeometry) -> Vec<f64> {
        let (oh, ow) = g.output_size(x.height(), x.width(), w.kernel_h(), w.kernel_w()).unwrap();
        let mut out = vec![0.0; w.n_filters() * oh * ow];
        for n in 0..w.n_filters() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0f64;
                    for c in 0..w.in_channels() {
                        for ky in 0..w.kernel_h() {
                            for kx in 0..w.kernel_w() {
                                let iy = (oy * g.stride.0 + ky) as isize - g.padding.0 as isize;
                                let ix = (ox * g.stride.1 + kx) as isize - g.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= x.height() as isize || ix >= x.width() as isize {
                                    continue;
                                }
                                let xv = x.channel(c)[iy as usize * x.width() + ix as usize] as f64;
                                s += xv * w.kernel(n, c)[ky * w.kernel_w() + kx] as f64;
                            }
                        }
                    }
                    out[(n * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    fn random_stack(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureStack {
        FeatureStack::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_weights(rng: &mut ChaCha8Rng, n: usize, c: usize, kh: usize, kw: usize) -> WeightTensor {
        WeightTensor::from_fn(n, c, kh, kw, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn scalar_product_case() {
        let x = Plane::new(1, 1, vec![2.0]).unwrap();
        let k = Plane::new(1, 1, vec![3.0]).unwrap();
        let y = conv2d_single(&x, &k, &ConvGeometry::default()).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn zero_kernel_gives_zero_map() {
        let x = Plane::new(3, 4, (0..12).map(|v| v as f32).collect()).unwrap();
        let k = Plane::filled(2, 2, 0.0).unwrap();
        let y = conv2d_single(&x, &k, &ConvGeometry::uniform(1, 1).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_with_padding() {
        let x = Plane::filled(3, 3, 1.0).unwrap();
        let k = Plane::filled(3, 3, 1.0).unwrap();
        let y = conv2d_single(&x, &k, &ConvGeometry::uniform(1, 1).unwrap()).unwrap();
        assert_eq!((y.height(), y.width()), (3, 3));
        assert_eq!(y.get(1, 1), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.get(r, c), 4.0);
        }
        assert_eq!(y.get(0, 1), 6.0);
    }

    #[test]
    fn non_positive_output_is_rejected() {
        let x = Plane::filled(2, 2, 1.0).unwrap();
        let k = Plane::filled(3, 3, 1.0).unwrap();
        let err = conv2d_single(&x, &k, &ConvGeometry::default()).unwrap_err();
        assert!(matches!(err, KseError::Geometry(_)));
        assert!(ConvGeometry::uniform(0, 0).is_err());
    }

    #[test]
    fn single_channel_dense_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_stack(&mut rng, 1, 6, 5);
        let w = random_weights(&mut rng, 1, 1, 3, 2);
        let g = ConvGeometry::new((2, 1), (1, 0)).unwrap();
        let dense = conv2d_dense(&x, &w, &g).unwrap();
        let k = Plane::new(3, 2, w.data().to_vec()).unwrap();
        let single = conv2d_single(&x.plane(0).unwrap(), &k, &g).unwrap();
        assert_eq!(dense.data(), single.data());
    }

    #[test]
    fn dense_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_stack(&mut rng, 2, 5, 5);
        let w = random_weights(&mut rng, 2, 2, 3, 3);
        let g = ConvGeometry::uniform(1, 1).unwrap();
        let got = conv2d_dense(&x, &w, &g).unwrap();
        let want = naive_conv(&x, &w, &g);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() <= 1e-6 * b.abs().max(1e-6), "{a} vs {b}");
        }
    }

    #[test]
    fn identity_kernels_reproduce_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_stack(&mut rng, 3, 4, 4);
        let w = WeightTensor::from_fn(3, 3, 1, 1, |n, c, _, _| if n == c { 1.0 } else { 0.0 }).unwrap();
        let y = conv2d_dense(&x, &w, &ConvGeometry::default()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = FeatureStack::<f32>::zeros(2, 3, 3).unwrap();
        let w = WeightTensor::zeros(1, 3, 1, 1).unwrap();
        assert!(matches!(conv2d_dense(&x, &w, &ConvGeometry::default()), Err(KseError::Shape(_))));
    }

    #[test]
    fn flatten_kernel_is_row_major() {
        let w = WeightTensor::new(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(flatten_kernel(&w, 0, 0).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let w1 = WeightTensor::new(1, 1, 1, 1, vec![7.0]).unwrap();
        assert_eq!(flatten_kernel(&w1, 0, 0).unwrap(), vec![7.0]);
        assert!(matches!(flatten_kernel(&w, 1, 0), Err(KseError::Index(_))));
        assert!(matches!(flatten_kernel(&w, 0, 1), Err(KseError::Index(_))));
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_weights(&mut rng, 3, 2, 2, 3);
        let mut rebuilt = WeightTensor::zeros(3, 2, 2, 3).unwrap();
        for n in 0..3 {
            for c in 0..2 {
                let flat = flatten_kernel(&w, n, c).unwrap();
                let plane = unflatten_kernel(&flat, 2, 3).unwrap();
                rebuilt.set_kernel(n, c, plane.data()).unwrap();
            }
        }
        assert_eq!(rebuilt, w);
    }

    #[test]
    fn weight_invariants() {
        assert!(WeightTensor::new(0, 1, 1, 1, vec![]).is_err());
        assert!(WeightTensor::new(1, 1, 1, 2, vec![1.0]).is_err());
        assert!(matches!(
            WeightTensor::new(1, 1, 1, 1, vec![f32::NAN]),
            Err(KseError::NonFinite(_))
        ));
        assert!(FeatureStack::new(1, 1, 1, vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn upscale_constant_and_identity() {
        let c = Plane::filled(2, 3, 2.5).unwrap();
        let up = bilinear_upscale(&c, 7, 5).unwrap();
        assert!(up.data().iter().all(|&v| (v - 2.5).abs() < 1e-7));
        let p = Plane::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bilinear_upscale(&p, 2, 2).unwrap(), p);
        assert!(bilinear_upscale(&p, 0, 2).is_err());
    }

    #[test]
    fn upscale_half_column() {
        let p = Plane::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = bilinear_upscale(&p, 2, 3).unwrap();
        assert_eq!(up.data(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn strided_output_size_floor() {
        let g = ConvGeometry::new((2, 3), (1, 0)).unwrap();
        assert_eq!(g.output_size(7, 8, 3, 2).unwrap(), ((7 + 2 - 3) / 2 + 1, (8 - 2) / 3 + 1));
    }

    proptest! {
        #[test]
        fn dense_equals_naive_on_random_instances(
            seed in any::<u64>(),
            n in 1usize..=4, c in 1usize..=4,
            h in 1usize..=8, w in 1usize..=8,
            kh in 1usize..=3, kw in 1usize..=3,
            sy in 1usize..=2, sx in 1usize..=2,
            py in 0usize..=1, px in 0usize..=1,
        ) {
            let g = ConvGeometry::new((sy, sx), (py, px)).unwrap();
            prop_assume!(h + 2 * py >= kh && w + 2 * px >= kw);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_stack(&mut rng, c, h, w);
            let wt = random_weights(&mut rng, n, c, kh, kw);
            let got = conv2d_dense(&x, &wt, &g).unwrap();
            let (oh, ow) = g.output_size(h, w, kh, kw).unwrap();
            prop_assert_eq!((got.height(), got.width()), (oh, ow));
            prop_assert_eq!(oh, (h + 2 * py - kh) / sy + 1);
            let want = naive_conv(&x, &wt, &g);
            let (acc, _) = dense_accumulate(&x, &wt, &g).unwrap();
            for (i, b) in want.iter().enumerate() {
                let a64 = acc[i / (oh * ow)][i % (oh * ow)];
                prop_assert!((a64 - b).abs() <= 1e-12 * b.abs().max(1.0));
                let a = got.data()[i] as f64;
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3));
            }
        }

        #[test]
        fn dense_is_linear_in_input(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x1 = random_stack(&mut rng, 3, 6, 6);
            let x2 = random_stack(&mut rng, 3, 6, 6);
            let wt = random_weights(&mut rng, 2, 3, 3, 3);
            let g = ConvGeometry::uniform(1, 1).unwrap();
            let sum = FeatureStack::new(3, 6, 6, x1.data().iter().zip(x2.data()).map(|(a, b)| a + b).collect()).unwrap();
            let ys = conv2d_dense(&sum, &wt, &g).unwrap();
            let y1 = conv2d_dense(&x1, &wt, &g).unwrap();
            let y2 = conv2d_dense(&x2, &wt, &g).unwrap();
            for ((s, a), b) in ys.data().iter().zip(y1.data()).zip(y2.data()) {
                let want = a + b;
                prop_assert!((s - want).abs() <= 1e-5 * want.abs().max(1.0));
            }
        }

        #[test]
        fn dense_is_linear_in_weights(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_stack(&mut rng, 2, 5, 5);
            let w1 = random_weights(&mut rng, 2, 2, 3, 3);
            let w2 = random_weights(&mut rng, 2, 2, 3, 3);
            let ws = WeightTensor::new(2, 2, 3, 3, w1.data().iter().zip(w2.data()).map(|(a, b)| a + b).collect()).unwrap();
            let g = ConvGeometry::default();
            let ys = conv2d_dense(&x, &ws, &g).unwrap();
            let y1 = conv2d_dense(&x, &w1, &g).unwrap();
            let y2 = conv2d_dense(&x, &w2, &g).unwrap();
            for ((s, a), b) in ys.data().iter().zip(y1.data()).zip(y2.data()) {
                let want = a + b;
                prop_assert!((s - want).abs() <= 1e-5 * want.abs().max(1.0));
            }
        }
    }
}
