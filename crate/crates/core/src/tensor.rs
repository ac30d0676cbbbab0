//! Dense FP32 tensors and the full-precision direct convolution.
//!
//! Everything in the quantized path is checked against [`fp_conv_reference`],
//! so it stays a plain nested loop: no im2col, no FFT, no Winograd.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Extents of a 4-D tensor in row-major `(d0, d1, d2, d3)` order.
///
/// Weights use `(C_o, C_i, K_h, K_w)`; activations use `(1, C, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    dims: [usize; 4],
}

impl Shape4 {
    pub fn new(d0: usize, d1: usize, d2: usize, d3: usize) -> Result<Self> {
        let dims = [d0, d1, d2, d3];
        if dims.contains(&0) {
            return Err(Error::shape(format!("all extents must be >= 1, got {dims:?}")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::shape(format!("element count of {dims:?} overflows")))?;
        Ok(Shape4 { dims })
    }

    pub fn from_dims(dims: [usize; 4]) -> Result<Self> {
        Self::new(dims[0], dims[1], dims[2], dims[3])
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major linear offset of `(i0, i1, i2, i3)`. Indices are not bounds-checked.
    #[inline]
    pub fn offset(&self, i0: usize, i1: usize, i2: usize, i3: usize) -> usize {
        let [_, d1, d2, d3] = self.dims;
        ((i0 * d1 + i1) * d2 + i2) * d3 + i3
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [a, b, c, d] = self.dims;
        write!(f, "{a}x{b}x{c}x{d}")
    }
}

/// Dense, immutable FP32 tensor. Every element is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4D {
    shape: Shape4,
    data: Vec<f32>,
}

impl Tensor4D {
    pub fn new(shape: Shape4, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::value(format!("non-finite value {} at element {pos}", data[pos])));
        }
        Ok(Tensor4D { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Tensor4D {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    /// Construct without the finiteness scan. Callers guarantee finite data.
    pub(crate) fn from_parts_unchecked(shape: Shape4, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor4D { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i0: usize, i1: usize, i2: usize, i3: usize) -> f32 {
        self.data[self.shape.offset(i0, i1, i2, i3)]
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&self) -> Tensor4D {
        let data = self.data.iter().map(|&v| v.max(0.0)).collect();
        Tensor4D::from_parts_unchecked(self.shape, data)
    }

    /// Absolute maximum over a depth slice; see [`DepthSlice`].
    pub fn max_abs(&self, slice: DepthSlice) -> Result<f32> {
        max_abs(self, slice)
    }
}

/// A run of consecutive elements along `d1` at fixed `(d0, d2, d3)`.
///
/// This is the `(1, B, 1, 1)` block shape shared by weight scales and
/// activation exponents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthSlice {
    pub outer: usize,
    pub start: usize,
    pub len: usize,
    pub row: usize,
    pub col: usize,
}

impl DepthSlice {
    pub(crate) fn check(&self, shape: Shape4) -> Result<()> {
        let [d0, d1, d2, d3] = shape.dims();
        let end = self.start.checked_add(self.len);
        let in_bounds =
            self.len >= 1 && self.outer < d0 && end.is_some_and(|e| e <= d1) && self.row < d2 && self.col < d3;
        if in_bounds {
            Ok(())
        } else {
            Err(Error::shape(format!("slice {self:?} out of bounds for {shape}")))
        }
    }
}

/// Largest magnitude in the slice. An all-zero slice yields `0.0`.
pub fn max_abs(t: &Tensor4D, slice: DepthSlice) -> Result<f32> {
    slice.check(t.shape)?;
    let m = (slice.start..slice.start + slice.len)
        .map(|c| t.get(slice.outer, c, slice.row, slice.col).abs())
        .fold(0.0f32, f32::max);
    Ok(m)
}

/// Stride and zero-padding for a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvParams {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams {
            stride: (1, 1),
            padding: (0, 0),
        }
    }
}

impl ConvParams {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::config(format!("stride must be positive, got {stride:?}")));
        }
        Ok(ConvParams { stride, padding })
    }

    /// Output spatial extents for an `h x w` input and `kh x kw` kernel.
    pub fn output_extent(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::config("stride must be positive"));
        }
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ph < kh || pw < kw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - kh) / self.stride.0 + 1, (pw - kw) / self.stride.1 + 1))
    }

    /// Input coordinate read by output position `o` at kernel tap `k`, or
    /// `None` if it falls in the zero padding.
    #[inline]
    pub(crate) fn input_coord(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }
}

/// Validated geometry of one convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub(crate) fn new(input: Shape4, weights: Shape4, params: &ConvParams) -> Result<Self> {
        let [n, c, h, w] = input.dims();
        let [c_out, c_in, kh, kw] = weights.dims();
        if n != 1 {
            return Err(Error::shape(format!("batch must be 1, input is {input}")));
        }
        if c != c_in {
            return Err(Error::shape(format!(
                "input has {c} channels but weights expect {c_in}"
            )));
        }
        let (out_h, out_w) = params.output_extent(h, w, kh, kw)?;
        Ok(ConvGeometry {
            c_out,
            c_in,
            kh,
            kw,
            h,
            w,
            out_h,
            out_w,
        })
    }

    pub(crate) fn output_shape(&self) -> Shape4 {
        Shape4 {
            dims: [1, self.c_out, self.out_h, self.out_w],
        }
    }
}

/// Full-precision direct cross-correlation (no kernel flip) with per-channel bias.
///
/// Each output element is accumulated in `f64` in a fixed order: input
/// channel, then kernel row, then kernel column, with the bias added last and
/// a single rounding to `f32`. Output channels run in parallel; since every
/// element has its own accumulator the bytes do not depend on thread count.
pub fn fp_conv_reference(input: &Tensor4D, weights: &Tensor4D, bias: &[f32], params: &ConvParams) -> Result<Tensor4D> {
    let g = ConvGeometry::new(input.shape(), weights.shape(), params)?;
    if bias.len() != g.c_out {
        return Err(Error::shape(format!(
            "bias has {} entries, expected {}",
            bias.len(),
            g.c_out
        )));
    }
    if bias.iter().any(|b| !b.is_finite()) {
        return Err(Error::value("non-finite bias"));
    }
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0f32; g.c_out * plane];
    let (sh, sw) = params.stride;
    let (ph, pw) = params.padding;

    out.par_chunks_mut(plane).enumerate().for_each(|(o, chunk)| {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = 0.0f64;
                for c in 0..g.c_in {
                    for ky in 0..g.kh {
                        let Some(iy) = ConvParams::input_coord(oy, ky, sh, ph, g.h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let Some(ix) = ConvParams::input_coord(ox, kx, sw, pw, g.w) else {
                                continue;
                            };
                            acc += f64::from(input.get(0, c, iy, ix)) * f64::from(weights.get(o, c, ky, kx));
                        }
                    }
                }
                chunk[oy * g.out_w + ox] = (acc + f64::from(bias[o])) as f32;
            }
        }
    });

    Tensor4D::new(g.output_shape(), out)
}
