mod common;

use common::{conv_case, gaussian, rectified, shape};
use dsconv::bfp::bfp_encode_tensor;
use dsconv::cost::mac_counts;
use dsconv::engine::{dsconv_forward_counted, output_shape, relative_rms, run_fp_model, run_model_traced, FpLayer};
use dsconv::synth;
use dsconv::weight::quantize_weights_with;
use dsconv::{dsconv_forward, run_model, ActivationConfig, ConvParams, DsconvLayer, QuantConfig, ScaleFit, Tensor4D};

fn identity_1x1(c: usize) -> Tensor4D {
    let mut d = vec![0.0; c * c];
    for i in 0..c {
        d[i * c + i] = 1.0;
    }
    Tensor4D::new(shape([c, c, 1, 1]), d).unwrap()
}

#[test]
fn single_layer_model_is_encode_then_forward() {
    let mut rng = synth::rng(11);
    let case = conv_case(&mut rng, 10, 3, 5, 4);
    let cfg = QuantConfig::new(case.bits, case.block).unwrap();
    let layer = DsconvLayer::from_weights(&case.weights, case.bias, cfg, case.params, ScaleFit::L2).unwrap();
    let act = ActivationConfig::new(6, true).unwrap();
    let via_model = run_model(std::slice::from_ref(&layer), act, &case.input).unwrap();
    let encoded = bfp_encode_tensor(&case.input.relu(), 6, case.block).unwrap();
    let direct = dsconv_forward(&layer, &encoded).unwrap();
    assert_eq!(via_model, direct);
}

#[test]
fn two_identity_layers_reproduce_input() {
    let mut rng = synth::rng(12);
    let x = rectified(&mut rng, [1, 4, 6, 6], 1.0);
    let cfg = QuantConfig::new(8, 1).unwrap();
    let layer =
        DsconvLayer::from_weights(&identity_1x1(4), vec![0.0; 4], cfg, ConvParams::default(), ScaleFit::L2).unwrap();
    let y = run_model(&[layer.clone(), layer], ActivationConfig::new(8, false).unwrap(), &x).unwrap();
    let e = relative_rms(&y, &x).unwrap();
    assert!(e <= 0.01, "relative RMS {e}");
}

#[test]
fn three_layer_model_tracks_fp_pipeline() {
    let mut rng = synth::rng(13);
    let channels = [16, 32, 32, 16];
    let x = rectified(&mut rng, [1, 16, 10, 10], 1.0);
    let p = ConvParams::new((1, 1), (1, 1)).unwrap();
    let cfg = QuantConfig::new(8, 16).unwrap();
    let mut fp = Vec::new();
    let mut q = Vec::new();
    for w in channels.windows(2) {
        let weights = gaussian(&mut rng, [w[1], w[0], 3, 3], (2.0 / (9.0 * w[0] as f32)).sqrt());
        let bias = synth::gaussian_vec(&mut rng, w[1], 0.1).unwrap();
        q.push(DsconvLayer::from_weights(&weights, bias.clone(), cfg, p, ScaleFit::L2).unwrap());
        fp.push(FpLayer {
            weights,
            bias,
            params: p,
        });
    }
    let want = run_fp_model(&fp, false, &x).unwrap();
    let got = run_model(&q, ActivationConfig::new(8, false).unwrap(), &x).unwrap();
    let e = relative_rms(&got, &want).unwrap();
    assert!(e <= 0.01, "relative RMS {e}");
}

#[test]
fn counters_match_cost_model() {
    let mut rng = synth::rng(14);
    for (c_in, k, block) in [(150, 3, 64), (7, 1, 3), (32, 3, 32), (5, 3, 8)] {
        let case = conv_case(&mut rng, c_in, k, 4, block);
        let cfg = QuantConfig::new(4, block).unwrap();
        let layer = DsconvLayer::from_weights(&case.weights, case.bias, cfg, case.params, ScaleFit::L2).unwrap();
        let act = bfp_encode_tensor(&case.input, 8, block).unwrap();
        let (out, counts) = dsconv_forward_counted(&layer, &act).unwrap();
        let [_, _, oh, ow] = out.shape().dims();
        assert_eq!(output_shape(&layer, case.input.shape()).unwrap(), out.shape());
        let model = mac_counts(case.weights.shape(), block, (oh, ow)).unwrap();
        assert_eq!(counts.int_macs, model.int_total, "C_i={c_in} k={k} B={block}");
        assert_eq!(counts.fp_macs, model.fp_total, "C_i={c_in} k={k} B={block}");
    }
}

#[test]
fn trace_records_every_layer() {
    let mut rng = synth::rng(15);
    let x = gaussian(&mut rng, [1, 4, 5, 5], 1.0);
    let cfg = QuantConfig::new(4, 2).unwrap();
    let w = gaussian(&mut rng, [4, 4, 3, 3], 0.2);
    let layer = DsconvLayer::from_weights(
        &w,
        vec![0.0; 4],
        cfg,
        ConvParams::new((1, 1), (1, 1)).unwrap(),
        ScaleFit::L2,
    )
    .unwrap();
    let trace = run_model_traced(&[layer.clone(), layer], ActivationConfig::new(6, true).unwrap(), &x).unwrap();
    assert_eq!(trace.len(), 2);
    assert_eq!(trace[0].encode_stats.blocks, 2 * 25);
    // The second layer sees the rectified output of the first.
    let again = bfp_encode_tensor(&trace[0].output.relu(), 6, 2).unwrap();
    assert_eq!(trace[1].encoded_input, again);
}

#[test]
fn kl_fit_stays_close_to_l2() {
    let mut rng = synth::rng(16);
    let w = gaussian(&mut rng, [8, 64, 3, 3], 0.05);
    let cfg = QuantConfig::new(4, 16).unwrap();
    let (v_l2, k_l2) = quantize_weights_with(&w, &cfg, ScaleFit::L2).unwrap();
    let (v_kl, k_kl) = quantize_weights_with(&w, &cfg, ScaleFit::Kl).unwrap();
    assert_eq!(v_l2, v_kl);
    let rel: Vec<f64> = k_l2
        .data()
        .iter()
        .zip(k_kl.data())
        .map(|(&a, &b)| ((f64::from(b) - f64::from(a)) / f64::from(a)).abs())
        .collect();
    let mean = rel.iter().sum::<f64>() / rel.len() as f64;
    assert!(mean <= 0.15, "mean relative difference {mean}");
}

#[test]
fn forward_is_deterministic() {
    let mut rng = synth::rng(17);
    let case = conv_case(&mut rng, 40, 3, 3, 8);
    let cfg = QuantConfig::new(3, 8).unwrap();
    let layer = DsconvLayer::from_weights(&case.weights, case.bias, cfg, case.params, ScaleFit::Kl).unwrap();
    let act = bfp_encode_tensor(&case.input, 5, 8).unwrap();
    let a = dsconv_forward(&layer, &act).unwrap();
    for _ in 0..3 {
        let b = dsconv_forward(&layer, &act).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
