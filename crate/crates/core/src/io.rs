//! Binary tensor and model files. All integers are little-endian.
//!
//! Tensor file:
//!
//! ```text
//! offset  size      field
//! 0       4         magic "DSC1"
//! 4       1         dtype: 0 = fp32, 1 = int8 VQK, 2 = BFP
//! 5       1         bit width b (32 for fp32)
//! 6       2         block size B (u16; 0 for fp32)
//! 8       1         ndim (always 4)
//! 9       4*ndim    dims (u32 each)
//! ..      payload   fp32: numel * 4 bytes (f32 LE)
//!                   VQK:  numel * 1 byte (i8, one per value whatever b is)
//!                   BFP:  numel mantissas (u8), then ceil(C/B)*H*W exponents (i8)
//! ```
//!
//! Model file:
//!
//! ```text
//! "DSM1", layer count (u16), then per layer:
//!   name length (u16) + UTF-8 bytes
//!   stride_h, stride_w, pad_h, pad_w (u32 each)
//!   VQK tensor block (dtype 1)
//!   KDS tensor block (dtype 0)
//!   bias count (u32) + bias values (f32 each)
//! ```

use std::path::Path;

use crate::bfp::BfpTensor;
use crate::engine::DsconvLayer;
use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Shape4, Tensor4D};
use crate::weight::{Kds, QuantConfig, Vqk};

pub const TENSOR_MAGIC: &[u8; 4] = b"DSC1";
pub const MODEL_MAGIC: &[u8; 4] = b"DSM1";

const DTYPE_FP32: u8 = 0;
const DTYPE_VQK: u8 = 1;
const DTYPE_BFP: u8 = 2;

/// Contents of one tensor file.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorPayload {
    Fp32(Tensor4D),
    /// Integer kernel together with the block size it was quantized with.
    Vqk {
        vqk: Vqk,
        block: usize,
    },
    Bfp(BfpTensor),
}

impl TensorPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            TensorPayload::Fp32(_) => "fp32",
            TensorPayload::Vqk { .. } => "vqk",
            TensorPayload::Bfp(_) => "bfp",
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if remaining < n {
            return Err(Error::format(
                self.pos,
                format!("truncated {what}: expected {n} bytes, found {remaining}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != want {
            return Err(Error::format(
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(want)
                ),
            ));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.pos,
                format!("{} trailing bytes after end of data", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn header(out: &mut Vec<u8>, dtype: u8, bits: u8, block: usize, shape: Shape4) -> Result<()> {
    let block = u16::try_from(block)
        .map_err(|_| Error::config(format!("block size {block} does not fit the u16 header field")))?;
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(dtype);
    out.push(bits);
    out.extend_from_slice(&block.to_le_bytes());
    out.push(4);
    for d in shape.dims() {
        let d = u32::try_from(d).map_err(|_| Error::config(format!("extent {d} does not fit u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

/// Append the encoding of `t` to `out`.
pub fn write_tensor(out: &mut Vec<u8>, t: &TensorPayload) -> Result<()> {
    match t {
        TensorPayload::Fp32(x) => {
            header(out, DTYPE_FP32, 32, 0, x.shape())?;
            for v in x.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        TensorPayload::Vqk { vqk, block } => {
            header(out, DTYPE_VQK, vqk.bits(), *block, vqk.shape())?;
            out.extend(vqk.data().iter().map(|&v| v as u8));
        }
        TensorPayload::Bfp(b) => {
            header(out, DTYPE_BFP, b.bits(), b.block(), b.shape())?;
            out.extend_from_slice(b.mantissas());
            out.extend(b.exponents().iter().map(|&e| e as u8));
        }
    }
    Ok(())
}

pub fn encode_tensor(t: &TensorPayload) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_tensor(&mut out, t)?;
    Ok(out)
}

/// Decode a buffer holding exactly one tensor.
pub fn decode_tensor(buf: &[u8]) -> Result<TensorPayload> {
    let mut r = Reader::new(buf);
    let t = read_tensor(&mut r)?;
    r.finish()?;
    Ok(t)
}

fn read_tensor(r: &mut Reader<'_>) -> Result<TensorPayload> {
    let start = r.pos;
    r.magic(TENSOR_MAGIC)?;
    let dtype_at = r.pos;
    let dtype = r.u8("dtype")?;
    let bits = r.u8("bit width")?;
    let block = usize::from(r.u16("block size")?);
    let ndim_at = r.pos;
    let ndim = r.u8("ndim")?;
    if ndim != 4 {
        return Err(Error::format(ndim_at, format!("ndim must be 4, got {ndim}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32("dims")? as usize;
    }
    let shape = Shape4::from_dims(dims).map_err(|e| Error::format(ndim_at + 1, e.to_string()))?;
    let payload_at = r.pos;
    let invalid = |e: Error| Error::format(payload_at, e.to_string());

    match dtype {
        DTYPE_FP32 => {
            let n = shape.numel();
            let bytes = take_payload(r, n.checked_mul(4), "fp32 payload")?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor4D::new(shape, data).map(TensorPayload::Fp32).map_err(invalid)
        }
        DTYPE_VQK => {
            if block == 0 {
                return Err(Error::format(start + 6, "VQK block size must be >= 1"));
            }
            let bytes = take_payload(r, Some(shape.numel()), "VQK payload")?;
            let data = bytes.iter().map(|&v| v as i8).collect();
            Vqk::new(shape, bits, data)
                .map(|vqk| TensorPayload::Vqk { vqk, block })
                .map_err(invalid)
        }
        DTYPE_BFP => {
            if block == 0 {
                return Err(Error::format(start + 6, "BFP block size must be >= 1"));
            }
            let [_, c, h, w] = dims;
            let n_exp = c.div_ceil(block) * h * w;
            let mant = take_payload(r, Some(shape.numel()), "BFP mantissas")?.to_vec();
            let exp = take_payload(r, Some(n_exp), "BFP exponents")?
                .iter()
                .map(|&e| e as i8)
                .collect();
            BfpTensor::new(shape, bits, block, mant, exp)
                .map(TensorPayload::Bfp)
                .map_err(invalid)
        }
        other => Err(Error::format(dtype_at, format!("unknown dtype {other}"))),
    }
}

fn take_payload<'a>(r: &mut Reader<'a>, len: Option<usize>, what: &str) -> Result<&'a [u8]> {
    let len = len.ok_or_else(|| Error::format(r.pos, format!("{what} length overflows")))?;
    r.take(len, what)
}

/// One named layer of a model file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedLayer {
    pub name: String,
    pub layer: DsconvLayer,
}

/// An ordered stack of quantized layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Model {
    pub layers: Vec<NamedLayer>,
}

impl Model {
    pub fn dsconv_layers(&self) -> Vec<DsconvLayer> {
        self.layers.iter().map(|l| l.layer.clone()).collect()
    }
}

pub fn encode_model(m: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    let count = u16::try_from(m.layers.len()).map_err(|_| Error::config("more than 65535 layers"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for NamedLayer { name, layer } in &m.layers {
        let len = u16::try_from(name.len()).map_err(|_| Error::config("layer name longer than 65535 bytes"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let p = layer.params();
        for v in [p.stride.0, p.stride.1, p.padding.0, p.padding.1] {
            let v = u32::try_from(v).map_err(|_| Error::config("conv parameter does not fit u32"))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        write_tensor(
            &mut out,
            &TensorPayload::Vqk {
                vqk: layer.vqk().clone(),
                block: layer.config().block(),
            },
        )?;
        let kds = Tensor4D::new(layer.kds().shape(), layer.kds().data().to_vec())?;
        write_tensor(&mut out, &TensorPayload::Fp32(kds))?;
        out.extend_from_slice(&(layer.bias().len() as u32).to_le_bytes());
        for b in layer.bias() {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(buf: &[u8]) -> Result<Model> {
    let mut r = Reader::new(buf);
    r.magic(MODEL_MAGIC)?;
    let count = r.u16("layer count")?;
    let mut layers = Vec::with_capacity(usize::from(count));
    for i in 0..count {
        let layer_at = r.pos;
        let name_len = usize::from(r.u16("layer name length")?);
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "layer name")?)
            .map_err(|_| Error::format(name_at, "layer name is not UTF-8"))?
            .to_string();
        let mut p = [0usize; 4];
        for v in &mut p {
            *v = r.u32("conv parameters")? as usize;
        }
        let params = ConvParams::new((p[0], p[1]), (p[2], p[3]))
            .map_err(|e| Error::format(name_at + name_len, e.to_string()))?;
        let vqk_at = r.pos;
        let (vqk, block) = match read_tensor(&mut r)? {
            TensorPayload::Vqk { vqk, block } => (vqk, block),
            other => {
                return Err(Error::format(
                    vqk_at,
                    format!("layer {i}: expected VQK tensor, found {}", other.kind()),
                ))
            }
        };
        let kds_at = r.pos;
        let kds = match read_tensor(&mut r)? {
            TensorPayload::Fp32(t) => Kds::new(t.shape(), t.into_data())?,
            other => {
                return Err(Error::format(
                    kds_at,
                    format!("layer {i}: expected fp32 KDS, found {}", other.kind()),
                ))
            }
        };
        let n_bias = r.u32("bias count")? as usize;
        let bias_bytes = take_payload(&mut r, n_bias.checked_mul(4), "bias")?;
        let bias: Vec<f32> = bias_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let cfg = QuantConfig::new(vqk.bits(), block).map_err(|e| Error::format(vqk_at, e.to_string()))?;
        let layer = DsconvLayer::new(vqk, kds, bias, cfg, params)
            .map_err(|e| Error::format(layer_at, format!("layer {i} ({name}): {e}")))?;
        layers.push(NamedLayer { name, layer });
    }
    r.finish()?;
    Ok(Model { layers })
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &TensorPayload) -> Result<()> {
    std::fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorPayload> {
    decode_tensor(&std::fs::read(path)?)
}

/// Read a file that must hold an fp32 tensor.
pub fn read_fp32_file(path: impl AsRef<Path>) -> Result<Tensor4D> {
    match read_tensor_file(path)? {
        TensorPayload::Fp32(t) => Ok(t),
        other => Err(Error::format(
            4,
            format!("expected fp32 tensor, found {}", other.kind()),
        )),
    }
}

pub fn write_model_file(path: impl AsRef<Path>, m: &Model) -> Result<()> {
    std::fs::write(path, encode_model(m)?)?;
    Ok(())
}

pub fn read_model_file(path: impl AsRef<Path>) -> Result<Model> {
    decode_model(&std::fs::read(path)?)
}
