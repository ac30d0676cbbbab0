#![allow(dead_code)]

use dsconv::synth;
use dsconv::{ConvParams, Shape4, Tensor4D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn shape(d: [usize; 4]) -> Shape4 {
    Shape4::from_dims(d).unwrap()
}

pub fn gaussian(rng: &mut ChaCha8Rng, d: [usize; 4], std: f32) -> Tensor4D {
    let s = shape(d);
    Tensor4D::new(s, synth::gaussian_vec(rng, s.numel(), std).unwrap()).unwrap()
}

pub fn rectified(rng: &mut ChaCha8Rng, d: [usize; 4], std: f32) -> Tensor4D {
    gaussian(rng, d, std).relu()
}

/// A random convolution problem: input, weights, bias, params.
#[derive(Debug, Clone)]
pub struct ConvCase {
    pub input: Tensor4D,
    pub weights: Tensor4D,
    pub bias: Vec<f32>,
    pub params: ConvParams,
    pub bits: u8,
    pub block: usize,
}

pub fn conv_case(rng: &mut ChaCha8Rng, c_in: usize, k: usize, bits: u8, block: usize) -> ConvCase {
    let c_out = rng.gen_range(1..=6);
    let h = rng.gen_range(k.max(3)..=7);
    let w = rng.gen_range(k.max(3)..=7);
    let stride = rng.gen_range(1..=2);
    let pad = if k > 1 { rng.gen_range(0..=1) } else { 0 };
    let input = rectified(rng, [1, c_in, h, w], 1.0);
    let weights = gaussian(rng, [c_out, c_in, k, k], 0.1);
    let bias = synth::gaussian_vec(rng, c_out, 0.5).unwrap();
    ConvCase {
        input,
        weights,
        bias,
        params: ConvParams::new((stride, stride), (pad, pad)).unwrap(),
        bits,
        block,
    }
}
