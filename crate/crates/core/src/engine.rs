//! Integer-dominant convolution over a quantized kernel and BFP activations.
//!
//! For every filter and output position, each depth block contributes one
//! integer dot product between the VQK block and the aligned mantissa block.
//! The block's scale is the KDS value with the activation exponent added to
//! its FP exponent, which is exact. Block results are converted to FP32,
//! multiplied by that scale and summed in a fixed order (kernel row, kernel
//! column, ascending block), then the bias is added.

use rayon::prelude::*;

use crate::bfp::{bfp_decode, bfp_encode_tensor_with_stats, BfpTensor, EncodeStats};
use crate::error::{Error, Result};
use crate::tensor::{fp_conv_reference, ConvGeometry, ConvParams, Shape4, Tensor4D};
use crate::weight::{check_bits, dequantize, quantize_weights_with, Kds, QuantConfig, ScaleFit, Vqk};

/// One quantized convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DsconvLayer {
    vqk: Vqk,
    kds: Kds,
    bias: Vec<f32>,
    cfg: QuantConfig,
    params: ConvParams,
}

impl DsconvLayer {
    pub fn new(vqk: Vqk, kds: Kds, bias: Vec<f32>, cfg: QuantConfig, params: ConvParams) -> Result<Self> {
        if vqk.bits() != cfg.bits() {
            return Err(Error::config(format!(
                "VQK is {}-bit but config says b={}",
                vqk.bits(),
                cfg.bits()
            )));
        }
        kds.check_against(&vqk, &cfg)?;
        let [c_out, c_in, _, _] = vqk.shape().dims();
        if bias.len() != c_out {
            return Err(Error::shape(format!(
                "bias has {} entries, expected {c_out}",
                bias.len()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::value("non-finite bias"));
        }
        ConvParams::new(params.stride, params.padding)?;
        cfg.check_accumulator(c_in)?;
        Ok(DsconvLayer {
            vqk,
            kds,
            bias,
            cfg,
            params,
        })
    }

    /// Quantize FP weights and wrap them into a layer.
    pub fn from_weights(
        weights: &Tensor4D,
        bias: Vec<f32>,
        cfg: QuantConfig,
        params: ConvParams,
        fit: ScaleFit,
    ) -> Result<Self> {
        let (vqk, kds) = quantize_weights_with(weights, &cfg, fit)?;
        Self::new(vqk, kds, bias, cfg, params)
    }

    pub fn vqk(&self) -> &Vqk {
        &self.vqk
    }

    pub fn kds(&self) -> &Kds {
        &self.kds
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn config(&self) -> QuantConfig {
        self.cfg
    }

    pub fn params(&self) -> ConvParams {
        self.params
    }

    pub fn in_channels(&self) -> usize {
        self.vqk.shape().dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.vqk.shape().dims()[0]
    }

    /// FP weights implied by the integer kernel and its scales.
    pub fn dequantized_weights(&self) -> Tensor4D {
        dequantize(&self.vqk, &self.kds, &self.cfg).expect("layer shapes validated at construction")
    }

    /// Same layer with batch normalization folded into scales and bias.
    pub fn fold_bn(&self, bn: &BnParams) -> Result<DsconvLayer> {
        let (kds, bias) = fold_bn(&self.kds, &self.bias, bn)?;
        DsconvLayer::new(self.vqk.clone(), kds, bias, self.cfg, self.params)
    }

    /// Replace the scale tensor, keeping everything else.
    pub fn with_kds(&self, kds: Kds) -> Result<DsconvLayer> {
        DsconvLayer::new(self.vqk.clone(), kds, self.bias.clone(), self.cfg, self.params)
    }
}

/// Multiply-accumulate counts issued by one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounts {
    pub fp_macs: u64,
    pub int_macs: u64,
}

impl std::ops::AddAssign for MacCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.fp_macs += rhs.fp_macs;
        self.int_macs += rhs.int_macs;
    }
}

/// `xi * 2^e` by adding `e` to the FP32 exponent field.
///
/// Falls back to a widened multiply when the result leaves the normal range,
/// where exponent addition alone is not enough.
#[inline]
pub fn merge_exponent(xi: f32, e: i8) -> f32 {
    let bits = xi.to_bits();
    let biased = ((bits >> 23) & 0xff) as i32;
    let target = biased + i32::from(e);
    if biased != 0 && biased != 0xff && (1..0xff).contains(&target) {
        f32::from_bits((bits & !(0xff << 23)) | ((target as u32) << 23))
    } else {
        (f64::from(xi) * f64::powi(2.0, i32::from(e))) as f32
    }
}

/// Integer dot product of one VQK block with one mantissa block.
///
/// The layer's accumulator guard keeps this inside `i32`; overflow panics in
/// debug builds.
#[inline]
fn block_dot(w: impl Iterator<Item = i8>, m: impl Iterator<Item = u8>) -> i32 {
    w.zip(m).fold(0i32, |acc, (a, b)| acc + i32::from(a) * i32::from(b))
}

/// Forward pass of one layer on a BFP-encoded activation map.
pub fn dsconv_forward(layer: &DsconvLayer, act: &BfpTensor) -> Result<Tensor4D> {
    dsconv_forward_counted(layer, act).map(|(t, _)| t)
}

/// Forward pass that also reports the number of FP and integer MACs issued.
///
/// Taps that fall in the zero padding are issued against zero operands and
/// counted like any other tap.
pub fn dsconv_forward_counted(layer: &DsconvLayer, act: &BfpTensor) -> Result<(Tensor4D, MacCounts)> {
    check_bits(act.bits())?;
    if act.block() != layer.cfg.block() {
        return Err(Error::shape(format!(
            "activation block size {} does not match layer block size {}",
            act.block(),
            layer.cfg.block()
        )));
    }
    let g = ConvGeometry::new(act.shape(), layer.vqk.shape(), &layer.params)?;
    let guard =
        u32::from(layer.cfg.bits()) + u32::from(act.bits()) + crate::weight::ceil_log2(layer.cfg.block().min(g.c_in));
    if guard > 31 {
        return Err(Error::config(format!(
            "{}-bit activations overflow the 32-bit block accumulator",
            act.bits()
        )));
    }

    let block = layer.cfg.block();
    let nb = layer.cfg.num_blocks(g.c_in);
    let plane = g.out_h * g.out_w;
    let (sh, sw) = layer.params.stride;
    let (ph, pw) = layer.params.padding;
    let vqk = &layer.vqk;
    let kds = &layer.kds;

    let mut out = vec![0.0f32; g.c_out * plane];
    let counts: Vec<MacCounts> = out
        .par_chunks_mut(plane)
        .enumerate()
        .map(|(o, chunk)| {
            let mut n = MacCounts::default();
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0f32;
                    for ky in 0..g.kh {
                        let iy = ConvParams::input_coord(oy, ky, sh, ph, g.h);
                        for kx in 0..g.kw {
                            let ix = ConvParams::input_coord(ox, kx, sw, pw, g.w);
                            for k in 0..nb {
                                let start = k * block;
                                let end = (start + block).min(g.c_in);
                                n.fp_macs += 1;
                                n.int_macs += (end - start) as u64;
                                let (Some(iy), Some(ix)) = (iy, ix) else {
                                    continue;
                                };
                                let dot = block_dot(
                                    (start..end).map(|c| vqk.get(o, c, ky, kx)),
                                    (start..end).map(|c| act.mantissa(c, iy, ix)),
                                );
                                let scale = merge_exponent(kds.get(o, k, ky, kx), act.exponent(k, iy, ix));
                                acc += dot as f32 * scale;
                            }
                        }
                    }
                    chunk[oy * g.out_w + ox] = acc + layer.bias[o];
                }
            }
            n
        })
        .collect();

    let mut total = MacCounts::default();
    for c in counts {
        total += c;
    }
    let shape = g.output_shape();
    if let Some(v) = out.iter().find(|v| !v.is_finite()) {
        return Err(Error::value(format!("forward pass produced non-finite value {v}")));
    }
    Ok((Tensor4D::from_parts_unchecked(shape, out), total))
}

/// Batch normalization statistics and affine parameters, one entry per output channel.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BnParams {
    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    fn validate(&self, c_out: usize) -> Result<()> {
        for (name, v) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("mean", &self.mean),
            ("var", &self.var),
        ] {
            if v.len() != c_out {
                return Err(Error::shape(format!(
                    "BN {name} has {} entries, expected {c_out}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::value(format!("BN {name} contains a non-finite value")));
            }
        }
        if !self.eps.is_finite() || self.eps < 0.0 {
            return Err(Error::value(format!("BN eps must be >= 0, got {}", self.eps)));
        }
        if let Some(v) = self
            .var
            .iter()
            .find(|&&v| v < 0.0 || f64::from(v) + f64::from(self.eps) <= 0.0)
        {
            return Err(Error::value(format!(
                "BN variance {v} with eps {} has no inverse std",
                self.eps
            )));
        }
        Ok(())
    }

    /// Apply BN in FP to a `1 x C x H x W` tensor.
    pub fn apply(&self, x: &Tensor4D) -> Result<Tensor4D> {
        let [_, c, h, w] = x.shape().dims();
        self.validate(c)?;
        let plane = h * w;
        let data = x
            .data()
            .chunks(plane)
            .enumerate()
            .flat_map(|(ch, chunk)| {
                let inv = 1.0 / (f64::from(self.var[ch]) + f64::from(self.eps)).sqrt();
                let g = f64::from(self.gamma[ch]);
                let (mu, beta) = (f64::from(self.mean[ch]), f64::from(self.beta[ch]));
                chunk
                    .iter()
                    .map(move |&v| (g * (f64::from(v) - mu) * inv + beta) as f32)
            })
            .collect();
        Tensor4D::new(x.shape(), data)
    }
}

/// Fold BN into the scales and bias.
///
/// `xi_fold = xi * gamma / sqrt(var + eps)` and
/// `b_fold = beta - gamma * mean / sqrt(var + eps) + gamma * b / sqrt(var + eps)`,
/// where the last term carries the layer's original bias through BN. The
/// integer kernel is untouched.
pub fn fold_bn(kds: &Kds, bias: &[f32], bn: &BnParams) -> Result<(Kds, Vec<f32>)> {
    let c_out = kds.shape().dims()[0];
    if bias.len() != c_out {
        return Err(Error::shape(format!(
            "bias has {} entries, expected {c_out}",
            bias.len()
        )));
    }
    bn.validate(c_out)?;
    let factor: Vec<f64> = (0..c_out)
        .map(|o| f64::from(bn.gamma[o]) / (f64::from(bn.var[o]) + f64::from(bn.eps)).sqrt())
        .collect();
    let folded_bias = (0..c_out)
        .map(|o| (f64::from(bn.beta[o]) - factor[o] * f64::from(bn.mean[o]) + factor[o] * f64::from(bias[o])) as f32)
        .collect();
    Ok((kds.scale_filters(&factor)?, folded_bias))
}

/// How activations are encoded between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivationConfig {
    /// Mantissa width for activations.
    pub bits: u8,
    /// Apply ReLU to the model input before the first encoding.
    pub relu_first: bool,
}

impl ActivationConfig {
    pub fn new(bits: u8, relu_first: bool) -> Result<Self> {
        check_bits(bits)?;
        Ok(ActivationConfig { bits, relu_first })
    }
}

/// Per-layer record of a model run.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub encoded_input: BfpTensor,
    pub output: Tensor4D,
    pub counts: MacCounts,
    pub encode_stats: EncodeStats,
}

/// Run a chain of layers: ReLU (except optionally before the first), encode
/// with the layer's block size, forward.
pub fn run_model(layers: &[DsconvLayer], act: ActivationConfig, input: &Tensor4D) -> Result<Tensor4D> {
    let trace = run_model_traced(layers, act, input)?;
    Ok(trace
        .into_iter()
        .last()
        .map(|t| t.output)
        .unwrap_or_else(|| input.clone()))
}

pub fn run_model_traced(layers: &[DsconvLayer], act: ActivationConfig, input: &Tensor4D) -> Result<Vec<LayerTrace>> {
    let mut x = input.clone();
    let mut trace = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let pre = if i > 0 || act.relu_first { x.relu() } else { x };
        let (encoded, encode_stats) = bfp_encode_tensor_with_stats(&pre, act.bits, layer.cfg.block())?;
        let (output, counts) = dsconv_forward_counted(layer, &encoded)?;
        x = output.clone();
        trace.push(LayerTrace {
            encoded_input: encoded,
            output,
            counts,
            encode_stats,
        });
    }
    Ok(trace)
}

/// One FP layer for [`run_fp_model`].
#[derive(Debug, Clone)]
pub struct FpLayer {
    pub weights: Tensor4D,
    pub bias: Vec<f32>,
    pub params: ConvParams,
}

/// Full-precision counterpart of [`run_model`]: same ReLU placement, no encoding.
pub fn run_fp_model(layers: &[FpLayer], relu_first: bool, input: &Tensor4D) -> Result<Tensor4D> {
    let mut x = input.clone();
    for (i, layer) in layers.iter().enumerate() {
        let pre = if i > 0 || relu_first { x.relu() } else { x };
        x = fp_conv_reference(&pre, &layer.weights, &layer.bias, &layer.params)?;
    }
    Ok(x)
}

/// FP reference for a single quantized layer on the exact operands it saw:
/// the decoded activations and the dequantized weights.
pub fn dequantized_reference(layer: &DsconvLayer, act: &BfpTensor) -> Result<Tensor4D> {
    fp_conv_reference(
        &bfp_decode(act),
        &layer.dequantized_weights(),
        &layer.bias,
        &layer.params,
    )
}

/// `||a - r|| / ||r||` over all elements. Zero reference gives 0 if `a` is
/// also zero and infinity otherwise.
pub fn relative_rms(a: &Tensor4D, reference: &Tensor4D) -> Result<f64> {
    if a.shape() != reference.shape() {
        return Err(Error::shape(format!(
            "cannot compare {} with {}",
            a.shape(),
            reference.shape()
        )));
    }
    let (num, den) = a
        .data()
        .iter()
        .zip(reference.data())
        .fold((0.0f64, 0.0f64), |(n, d), (&x, &r)| {
            let (x, r) = (f64::from(x), f64::from(r));
            (n + (x - r).powi(2), d + r * r)
        });
    Ok(if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    })
}

/// Output shape of a layer applied to an activation of shape `input`.
pub fn output_shape(layer: &DsconvLayer, input: Shape4) -> Result<Shape4> {
    Ok(ConvGeometry::new(input, layer.vqk.shape(), &layer.params)?.output_shape())
}
