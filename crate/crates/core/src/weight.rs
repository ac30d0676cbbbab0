//! Weight quantization: split an FP weight tensor into an integer kernel
//! (`Vqk`) and one FP scale per depth block (`Kds`).
//!
//! Each `(1, B, 1, 1)` slice of the weights is stretched so its largest
//! magnitude lands on `2^(b-1) - 1`, rounded half away from zero, and then
//! given the scale that minimizes the L2 reconstruction error,
//! `xi = sum(w * wq) / sum(wq^2)`. A KL-divergence fit is also provided.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4D};

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// Bit width `b` and block size `B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantConfig {
    bits: u8,
    block: usize,
}

impl QuantConfig {
    pub fn new(bits: u8, block: usize) -> Result<Self> {
        check_bits(bits)?;
        if block == 0 {
            return Err(Error::config("B must be >= 1"));
        }
        Ok(QuantConfig { bits, block })
    }

    #[inline]
    pub fn bits(&self) -> u8 {
        self.bits
    }

    #[inline]
    pub fn block(&self) -> usize {
        self.block
    }

    /// Largest representable magnitude, `2^(b-1) - 1`.
    #[inline]
    pub fn max_level(&self) -> i32 {
        max_level(self.bits)
    }

    /// Number of depth blocks for `c_in` channels, `ceil(c_in / B)`.
    #[inline]
    pub fn num_blocks(&self, c_in: usize) -> usize {
        c_in.div_ceil(self.block)
    }

    /// Accumulator guard for the integer engine: `2b + ceil(log2(min(B, c_in))) <= 31`.
    pub fn check_accumulator(&self, c_in: usize) -> Result<()> {
        let need = 2 * u32::from(self.bits) + ceil_log2(self.block.min(c_in));
        if need > 31 {
            return Err(Error::config(format!(
                "b={} with block {} over {c_in} channels needs {need} accumulator bits (max 31)",
                self.bits, self.block
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::config(format!(
            "b must be in {MIN_BITS}..={MAX_BITS}, got {bits}"
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn max_level(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

pub(crate) fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

/// `(start, len)` of each depth block over `c` channels; the last one may be short.
pub(crate) fn depth_blocks(c: usize, block: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..c.div_ceil(block)).map(move |k| {
        let start = k * block;
        (start, block.min(c - start))
    })
}

/// Integer kernel, same shape as the source weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vqk {
    shape: Shape4,
    bits: u8,
    data: Vec<i8>,
}

impl Vqk {
    /// Checks every value against `-2^(b-1) <= v <= 2^(b-1) - 1`.
    pub fn new(shape: Shape4, bits: u8, data: Vec<i8>) -> Result<Self> {
        check_bits(bits)?;
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "VQK has {} values but shape {shape} needs {}",
                data.len(),
                shape.numel()
            )));
        }
        let hi = max_level(bits);
        let lo = -hi - 1;
        if let Some(pos) = data.iter().position(|&v| !(lo..=hi).contains(&i32::from(v))) {
            return Err(Error::value(format!(
                "VQK value {} at {pos} outside [{lo}, {hi}] for b={bits}",
                data[pos]
            )));
        }
        Ok(Vqk { shape, bits, data })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, o: usize, c: usize, y: usize, x: usize) -> i8 {
        self.data[self.shape.offset(o, c, y, x)]
    }
}

/// Per-block scales, shape `(C_o, ceil(C_i/B), K_h, K_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kds {
    shape: Shape4,
    data: Vec<f32>,
}

impl Kds {
    pub fn new(shape: Shape4, data: Vec<f32>) -> Result<Self> {
        let t = Tensor4D::new(shape, data)?;
        Ok(Kds {
            shape,
            data: t.into_data(),
        })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, o: usize, k: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.offset(o, k, y, x)]
    }

    /// Multiply every scale of filter `o` by `factor[o]`.
    pub(crate) fn scale_filters(&self, factor: &[f64]) -> Result<Kds> {
        let [c_out, nb, kh, kw] = self.shape.dims();
        debug_assert_eq!(factor.len(), c_out);
        let per = nb * kh * kw;
        let data = self
            .data
            .chunks(per)
            .zip(factor)
            .flat_map(|(chunk, &f)| chunk.iter().map(move |&xi| (f64::from(xi) * f) as f32))
            .collect();
        Kds::new(self.shape, data)
    }

    /// Checks this KDS against an integer kernel and block size.
    pub fn check_against(&self, vqk: &Vqk, cfg: &QuantConfig) -> Result<()> {
        let [c_out, c_in, kh, kw] = vqk.shape().dims();
        let want = [c_out, cfg.num_blocks(c_in), kh, kw];
        if self.shape.dims() != want {
            return Err(Error::shape(format!(
                "KDS shape {} does not match expected {want:?} for VQK {} and B={}",
                self.shape,
                vqk.shape(),
                cfg.block()
            )));
        }
        Ok(())
    }
}

/// How the per-block scale is fit once the integer kernel is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleFit {
    /// Closed-form least squares.
    #[default]
    L2,
    /// Minimize KL divergence between softmax(w) and softmax(xi * wq).
    Kl,
}

/// Quantize one depth block.
///
/// Returns the integer values and the least-squares scale. An all-zero
/// block maps to all-zero integers and a zero scale.
pub fn quantize_block(w: &[f32], bits: u8) -> Result<(Vec<i8>, f32)> {
    check_bits(bits)?;
    if w.is_empty() {
        return Err(Error::shape("empty block"));
    }
    if let Some(v) = w.iter().find(|v| !v.is_finite()) {
        return Err(Error::value(format!("non-finite weight {v}")));
    }
    let wq = stretch_round(w, bits);
    let xi = l2_scale(w, &wq);
    Ok((wq, xi))
}

fn stretch_round(w: &[f32], bits: u8) -> Vec<i8> {
    let w_max = w.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if w_max == 0.0 {
        return vec![0; w.len()];
    }
    let m = f64::from(max_level(bits));
    let s = m / f64::from(w_max);
    // f64::round is half away from zero; |w * s| <= m so the cast cannot saturate.
    w.iter()
        .map(|&v| (f64::from(v) * s).round().clamp(-m, m) as i8)
        .collect()
}

/// `sum(w * wq) / sum(wq^2)`, or 0 for an all-zero integer block.
pub fn l2_scale(w: &[f32], wq: &[i8]) -> f32 {
    let (num, den) = w.iter().zip(wq).fold((0.0f64, 0.0f64), |(n, d), (&v, &q)| {
        let q = f64::from(q);
        (n + f64::from(v) * q, d + q * q)
    });
    if den == 0.0 {
        0.0
    } else {
        (num / den) as f32
    }
}

const KL_TOL: f64 = 1e-7;

/// Scale minimizing `KL(softmax(w) || softmax(xi * wq))` over `xi >= 0`.
///
/// The objective is convex in `xi`. Golden-section search over
/// `[0, 4 * xi_l2]` narrows the bracket to `1e-7`, then a few Newton steps on
/// the gradient polish the result. When every `wq` is equal the objective is
/// flat and the lower endpoint `0` is returned.
pub fn kl_fit_scale(w: &[f32], wq: &[i8]) -> Result<f32> {
    if w.len() != wq.len() {
        return Err(Error::shape(format!(
            "block has {} weights but {} integers",
            w.len(),
            wq.len()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::value("non-finite weight"));
    }
    if wq.iter().all(|&q| q == 0) {
        return Err(Error::DegenerateBlock);
    }
    if wq.iter().all(|&q| q == wq[0]) {
        return Ok(0.0);
    }

    let target = softmax(w.iter().map(|&v| f64::from(v)));
    let q: Vec<f64> = wq.iter().map(|&v| f64::from(v)).collect();
    let hi = 4.0 * f64::from(l2_scale(w, wq)).abs();
    if hi == 0.0 {
        return Ok(0.0);
    }

    let kl = |xi: f64| -> f64 {
        let logits: Vec<f64> = q.iter().map(|&v| xi * v).collect();
        let lse = log_sum_exp(&logits);
        target
            .iter()
            .zip(&logits)
            .filter(|(&t, _)| t > 0.0)
            .map(|(&t, &z)| t * (t.ln() - (z - lse)))
            .sum()
    };

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0f64, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (kl(c), kl(d));
    while b - a > KL_TOL {
        // Ties keep the lower half so flat stretches drift toward 0.
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = kl(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = kl(d);
        }
    }
    let mut xi = 0.5 * (a + b);

    // Newton on d/dxi KL = E_I[wq] - E_T[wq], with second derivative Var_I[wq].
    let mean_t: f64 = target.iter().zip(&q).map(|(t, v)| t * v).sum();
    for _ in 0..4 {
        let model = softmax(q.iter().map(|&v| xi * v));
        let mean_i: f64 = model.iter().zip(&q).map(|(p, v)| p * v).sum();
        let var_i: f64 = model.iter().zip(&q).map(|(p, v)| p * (v - mean_i).powi(2)).sum();
        if var_i <= f64::EPSILON {
            break;
        }
        let next = (xi - (mean_i - mean_t) / var_i).clamp(0.0, hi);
        if (next - xi).abs() > 10.0 * KL_TOL || kl(next) > kl(xi) {
            break;
        }
        xi = next;
    }
    Ok(xi as f32)
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: impl Iterator<Item = f64>) -> Vec<f64> {
    let z: Vec<f64> = z.collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Quantize a `(C_o, C_i, K_h, K_w)` weight tensor with the L2 scale fit.
pub fn quantize_weights(w: &Tensor4D, cfg: &QuantConfig) -> Result<(Vqk, Kds)> {
    quantize_weights_with(w, cfg, ScaleFit::L2)
}

/// Quantize a weight tensor with the chosen scale fit.
///
/// Blocks run along `C_i`; when `B` does not divide `C_i` the trailing block
/// of each filter is shorter and is fit over its actual length.
pub fn quantize_weights_with(w: &Tensor4D, cfg: &QuantConfig, fit: ScaleFit) -> Result<(Vqk, Kds)> {
    let shape = w.shape();
    let [c_out, c_in, kh, kw] = shape.dims();
    let nb = cfg.num_blocks(c_in);
    let kds_shape = Shape4::new(c_out, nb, kh, kw)?;
    let filter_len = c_in * kh * kw;

    let per_filter: Vec<(Vec<i8>, Vec<f32>)> = (0..c_out)
        .into_par_iter()
        .map(|o| -> Result<(Vec<i8>, Vec<f32>)> {
            let mut q = vec![0i8; filter_len];
            let mut scales = vec![0.0f32; nb * kh * kw];
            let mut buf = Vec::with_capacity(cfg.block());
            for (k, (start, len)) in depth_blocks(c_in, cfg.block()).enumerate() {
                for y in 0..kh {
                    for x in 0..kw {
                        buf.clear();
                        buf.extend((start..start + len).map(|c| w.get(o, c, y, x)));
                        let (wq, mut xi) = quantize_block(&buf, cfg.bits())?;
                        if fit == ScaleFit::Kl && wq.iter().any(|&v| v != 0) {
                            xi = kl_fit_scale(&buf, &wq)?;
                        }
                        for (i, v) in wq.into_iter().enumerate() {
                            q[((start + i) * kh + y) * kw + x] = v;
                        }
                        scales[(k * kh + y) * kw + x] = xi;
                    }
                }
            }
            Ok((q, scales))
        })
        .collect::<Result<_>>()?;

    let mut q = Vec::with_capacity(shape.numel());
    let mut scales = Vec::with_capacity(kds_shape.numel());
    for (fq, fs) in per_filter {
        q.extend(fq);
        scales.extend(fs);
    }
    Ok((Vqk::new(shape, cfg.bits(), q)?, Kds::new(kds_shape, scales)?))
}

/// Reconstruct FP weights, `w_hat = xi_block * wq`.
pub fn dequantize(vqk: &Vqk, kds: &Kds, cfg: &QuantConfig) -> Result<Tensor4D> {
    kds.check_against(vqk, cfg)?;
    let shape = vqk.shape();
    let [c_out, c_in, kh, kw] = shape.dims();
    let mut out = Vec::with_capacity(shape.numel());
    for o in 0..c_out {
        for c in 0..c_in {
            let k = c / cfg.block();
            for y in 0..kh {
                for x in 0..kw {
                    out.push(kds.get(o, k, y, x) * f32::from(vqk.get(o, c, y, x)));
                }
            }
        }
    }
    Tensor4D::new(shape, out)
}
