//! Block-quantized convolution.
//!
//! Pre-trained FP32 convolution weights are split, without any data, into a
//! low-bit integer kernel ([`Vqk`]) and one FP32 scale per depth block
//! ([`Kds`]). Activations are encoded in block floating point
//! ([`BfpTensor`]): unsigned mantissas sharing one exponent per depth block.
//! The forward pass ([`dsconv_forward`]) then does almost all of its work as
//! integer dot products, with one FP multiply per block.
//!
//! Every quantized path is checked against the plain full-precision
//! [`fp_conv_reference`]. See the guide in `book/` for a walkthrough.

pub mod bfp;
pub mod cli;
pub mod cost;
pub mod engine;
pub mod error;
pub mod io;
pub mod synth;
pub mod tensor;
pub mod weight;

pub use bfp::{bfp_decode, bfp_encode, bfp_encode_tensor, BfpTensor, EncodedBlock};
pub use cost::{mac_counts, max_speedup, memory_saving, speed_ratio_threshold, CostReport};
pub use engine::{
    dsconv_forward, dsconv_forward_counted, fold_bn, run_model, ActivationConfig, BnParams, DsconvLayer, MacCounts,
};
pub use error::{Error, Result};
pub use tensor::{fp_conv_reference, max_abs, ConvParams, DepthSlice, Shape4, Tensor4D};
pub use weight::{dequantize, kl_fit_scale, quantize_block, quantize_weights, Kds, QuantConfig, ScaleFit, Vqk};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/weights.md")]
    mod weights {}
    #[doc = include_str!("../../../book/src/activations.md")]
    mod activations {}
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/batchnorm.md")]
    mod batchnorm {}
    #[doc = include_str!("../../../book/src/cost.md")]
    mod cost {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
