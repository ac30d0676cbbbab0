//! Block floating point encoding for non-negative activations.
//!
//! Values in one depth block at one spatial position share a single exponent
//! `E = floor(log2(max)) - (b - 1)`, chosen so the block maximum's mantissa
//! lands in `[2^(b-1), 2^b)`. Every element keeps an unsigned `b`-bit mantissa
//! `m = floor(x / 2^E + 1/2)`, clamped to `2^b - 1`, and decodes to `m * 2^E`.

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4D};
use crate::weight::{check_bits, depth_blocks};

/// Exponents are stored as `i8`. Blocks whose natural exponent falls below
/// this are encoded with it instead, which flushes the tiniest values to 0.
pub const MIN_EXPONENT: i32 = i8::MIN as i32;

/// One encoded depth block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedBlock {
    pub mantissas: Vec<u8>,
    pub exponent: i8,
    /// Elements whose rounded mantissa overflowed and was clamped to `2^b - 1`.
    pub clamped: usize,
}

/// `floor(log2(x))` for finite `x > 0`, exact for normals and subnormals.
pub(crate) fn floor_log2(x: f32) -> i32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let biased = ((bits >> 23) & 0xff) as i32;
    if biased == 0 {
        let frac = bits & 0x7f_ffff;
        (31 - frac.leading_zeros() as i32) - 149
    } else {
        biased - 127
    }
}

#[inline]
fn pow2(e: i32) -> f64 {
    // Exact for the exponent range used here.
    f64::powi(2.0, e)
}

/// Encode one block of non-negative values with `bits`-bit mantissas.
pub fn bfp_encode(x: &[f32], bits: u8) -> Result<EncodedBlock> {
    check_bits(bits)?;
    if let Some(v) = x.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::value(format!(
            "activations must be finite and non-negative, got {v}"
        )));
    }
    Ok(encode_unchecked(x, bits))
}

fn encode_unchecked(x: &[f32], bits: u8) -> EncodedBlock {
    let max = x.iter().copied().fold(0.0f32, f32::max);
    if max == 0.0 {
        return EncodedBlock {
            mantissas: vec![0; x.len()],
            exponent: 0,
            clamped: 0,
        };
    }
    let e = (floor_log2(max) - (i32::from(bits) - 1)).max(MIN_EXPONENT);
    let inv = pow2(-e);
    let top = f64::from((1u32 << bits) - 1);
    let mut clamped = 0;
    let mantissas = x
        .iter()
        .map(|&v| {
            let m = (f64::from(v) * inv + 0.5).floor();
            if m > top {
                clamped += 1;
                top as u8
            } else {
                m as u8
            }
        })
        .collect();
    EncodedBlock {
        mantissas,
        exponent: e as i8,
        clamped,
    }
}

/// Activation tensor in block floating point.
///
/// Mantissas have the activation shape `1 x C x H x W`; exponents are laid out
/// row-major as `ceil(C/B) x H x W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BfpTensor {
    shape: Shape4,
    bits: u8,
    block: usize,
    mantissa: Vec<u8>,
    exponent: Vec<i8>,
}

/// Diagnostics gathered while encoding a tensor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeStats {
    pub blocks: usize,
    pub clamped: usize,
}

impl BfpTensor {
    pub fn new(shape: Shape4, bits: u8, block: usize, mantissa: Vec<u8>, exponent: Vec<i8>) -> Result<Self> {
        check_bits(bits)?;
        if block == 0 {
            return Err(Error::config("B must be >= 1"));
        }
        let [n, c, h, w] = shape.dims();
        if n != 1 {
            return Err(Error::shape(format!("BFP tensors hold one sample, got {shape}")));
        }
        if mantissa.len() != shape.numel() {
            return Err(Error::shape(format!("{} mantissas for shape {shape}", mantissa.len())));
        }
        let n_exp = c.div_ceil(block) * h * w;
        if exponent.len() != n_exp {
            return Err(Error::shape(format!("{} exponents, expected {n_exp}", exponent.len())));
        }
        let limit = 1u16 << bits;
        if let Some(pos) = mantissa.iter().position(|&m| u16::from(m) >= limit) {
            return Err(Error::value(format!(
                "mantissa {} at {pos} does not fit in {bits} bits",
                mantissa[pos]
            )));
        }
        Ok(BfpTensor {
            shape,
            bits,
            block,
            mantissa,
            exponent,
        })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn channels(&self) -> usize {
        self.shape.dims()[1]
    }

    pub fn num_blocks(&self) -> usize {
        self.channels().div_ceil(self.block)
    }

    pub fn mantissas(&self) -> &[u8] {
        &self.mantissa
    }

    pub fn exponents(&self) -> &[i8] {
        &self.exponent
    }

    #[inline]
    pub fn mantissa(&self, c: usize, y: usize, x: usize) -> u8 {
        self.mantissa[self.shape.offset(0, c, y, x)]
    }

    #[inline]
    pub fn exponent(&self, k: usize, y: usize, x: usize) -> i8 {
        let [_, _, h, w] = self.shape.dims();
        self.exponent[(k * h + y) * w + x]
    }
}

/// Encode a `1 x C x H x W` activation tensor with depth blocks of `block` channels.
pub fn bfp_encode_tensor(x: &Tensor4D, bits: u8, block: usize) -> Result<BfpTensor> {
    bfp_encode_tensor_with_stats(x, bits, block).map(|(t, _)| t)
}

pub fn bfp_encode_tensor_with_stats(x: &Tensor4D, bits: u8, block: usize) -> Result<(BfpTensor, EncodeStats)> {
    check_bits(bits)?;
    if block == 0 {
        return Err(Error::config("B must be >= 1"));
    }
    let shape = x.shape();
    let [n, c, h, w] = shape.dims();
    if n != 1 {
        return Err(Error::shape(format!("expected a single sample, got {shape}")));
    }
    if let Some(v) = x.data().iter().find(|v| **v < 0.0) {
        return Err(Error::value(format!("activations must be non-negative, got {v}")));
    }

    let nb = c.div_ceil(block);
    let mut mantissa = vec![0u8; shape.numel()];
    let mut exponent = vec![0i8; nb * h * w];
    let mut stats = EncodeStats::default();
    let mut buf = Vec::with_capacity(block);
    for (k, (start, len)) in depth_blocks(c, block).enumerate() {
        for y in 0..h {
            for xx in 0..w {
                buf.clear();
                buf.extend((start..start + len).map(|ch| x.get(0, ch, y, xx)));
                let enc = encode_unchecked(&buf, bits);
                for (i, m) in enc.mantissas.into_iter().enumerate() {
                    mantissa[shape.offset(0, start + i, y, xx)] = m;
                }
                exponent[(k * h + y) * w + xx] = enc.exponent;
                stats.blocks += 1;
                stats.clamped += enc.clamped;
            }
        }
    }
    Ok((BfpTensor::new(shape, bits, block, mantissa, exponent)?, stats))
}

/// Decode to FP32: `x_hat = m * 2^E`. Exact, since `m < 2^8` and `E >= -128`.
pub fn bfp_decode(t: &BfpTensor) -> Tensor4D {
    let [_, c, h, w] = t.shape.dims();
    let mut out = vec![0.0f32; t.shape.numel()];
    for ch in 0..c {
        let k = ch / t.block;
        for y in 0..h {
            for x in 0..w {
                let m = f64::from(t.mantissa(ch, y, x));
                out[t.shape.offset(0, ch, y, x)] = (m * pow2(i32::from(t.exponent(k, y, x)))) as f32;
            }
        }
    }
    Tensor4D::from_parts_unchecked(t.shape, out)
}
