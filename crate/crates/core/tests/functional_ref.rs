mod common;

use hvsim_core::functional::*;
use hvsim_core::ir::{Activation, LayerDesc, LayerKind, NetworkGraph, Stage, TensorShape};
use hvsim_core::verify::{conv_case, float_oracle, random_graph, random_model, GraphGenOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ft(shape: TensorShape, rng: &mut impl Rng, lo: f64, hi: f64) -> FloatTensor {
    FloatTensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn identity_weights(c: usize) -> FloatTensor {
    FloatTensor::from_fn(TensorShape::new(c, c, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 })
}

#[test]
fn identity_pointwise_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = ft(TensorShape::chw(5, 4, 3), &mut rng, -2.0, 2.0);
    let y = conv2d_ref(&x, &identity_weights(5), &[0.0; 5], &LayerDesc::pw(5, 5)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn all_ones_depthwise_counts_taps() {
    let x = FloatTensor::from_fn(TensorShape::chw(2, 4, 4), |_, _, _, _| 1.0);
    let w = FloatTensor::from_fn(TensorShape::new(2, 1, 3, 3), |_, _, _, _| 1.0);
    let y = conv2d_ref(&x, &w, &[0.0; 2], &LayerDesc::dw(2, 3, 1)).unwrap();
    assert_eq!(y.at(0, 0, 1, 1), 9.0);
    assert_eq!(y.at(0, 1, 2, 2), 9.0);
    assert_eq!(y.at(0, 0, 0, 0), 4.0);
    assert_eq!(y.at(0, 1, 3, 3), 4.0);
    assert_eq!(y.at(0, 0, 0, 1), 6.0);
}

#[test]
fn generic_conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (k, s) in [(3, 1), (3, 2), (5, 1), (7, 2)] {
        let desc = LayerDesc::generic_conv(3, 6, k, s, k / 2);
        let x = ft(TensorShape::chw(3, 11, 9), &mut rng, -1.0, 1.0);
        let w = ft(TensorShape::new(6, 3, k, k), &mut rng, -1.0, 1.0);
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = conv2d_ref(&x, &w, &b, &desc).unwrap();
        let o = common::direct_conv_f64(&x, &w, &b, &desc);
        assert_eq!(y.shape, o.shape);
        assert!(max_diff(&y.data, &o.data) <= 1e-6);
    }
}

#[test]
fn grouped_pointwise_is_channelwise_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = ft(TensorShape::chw(4, 3, 3), &mut rng, -1.0, 1.0);
    let scale = [0.5, -2.0, 3.0, 1.5];
    let w = FloatTensor::new(TensorShape::new(4, 1, 1, 1), scale.to_vec()).unwrap();
    let desc = LayerDesc::pw(4, 4).with_groups(4);
    let y = conv2d_ref(&x, &w, &[0.0; 4], &desc).unwrap();
    for (i, v) in y.data.iter().enumerate() {
        assert!((v - x.data[i] * scale[i / 9]).abs() < 1e-12);
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let x = FloatTensor::zeros(TensorShape::chw(3, 4, 4));
    let w = FloatTensor::zeros(TensorShape::new(8, 4, 1, 1));
    assert!(conv2d_ref(&x, &w, &[0.0; 8], &LayerDesc::pw(4, 8)).is_err());
}

#[test]
fn activation_examples() {
    let x = FloatTensor::new(TensorShape::new(1, 1, 1, 4), vec![-1.5, 3.0, -3.0, 1.0]).unwrap();
    let r = activation_ref(&x, Activation::ReLU);
    assert_eq!(r.data[0], 0.0);
    let h = activation_ref(&x, Activation::Hardswish);
    assert_eq!(h.data[1], 3.0);
    assert_eq!(h.data[2], 0.0);
    assert!((h.data[3] - 4.0 / 6.0).abs() < 1e-15);
}

#[test]
fn batchnorm_identity_and_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = ft(TensorShape::new(3, 2, 3, 3), &mut rng, -1.0, 1.0);
    let b = vec![0.1, -0.2, 0.3];
    let (w1, b1) = fold_batchnorm(&w, &b, &BatchNorm::identity(3));
    assert_eq!((w1.data.clone(), b1), (w.data.clone(), b.clone()));
    let mut bn = BatchNorm::identity(3);
    bn.gamma = vec![2.0; 3];
    let (w2, b2) = fold_batchnorm(&w, &b, &bn);
    assert!(w2.data.iter().zip(&w.data).all(|(a, b)| *a == 2.0 * b));
    assert!(b2.iter().zip(&b).all(|(a, b)| *a == 2.0 * b));
}

#[test]
fn batchnorm_fold_is_exact_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let cin = rng.gen_range(1..6);
        let cout = rng.gen_range(1..6);
        let k = [1, 3, 5][case % 3];
        let desc = LayerDesc::generic_conv(cin, cout, k, 1, k / 2);
        let x = ft(TensorShape::chw(cin, 6, 5), &mut rng, -3.0, 3.0);
        let w = ft(TensorShape::new(cout, cin, k, k), &mut rng, -1.0, 1.0);
        let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bn = BatchNorm {
            gamma: (0..cout).map(|_| rng.gen_range(0.1..3.0)).collect(),
            beta: (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            mean: (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            var: (0..cout).map(|_| rng.gen_range(0.0..3.0)).collect(),
            eps: 1e-5,
        };
        let unfolded = bn.apply(&conv2d_ref(&x, &w, &b, &desc).unwrap());
        let (wf, bf) = fold_batchnorm(&w, &b, &bn);
        let folded = conv2d_ref(&x, &wf, &bf, &desc).unwrap();
        assert!(max_diff(&unfolded.data, &folded.data) <= 1e-5, "case {case}");
    }
}

fn tokens(rng: &mut impl Rng, n: usize, d: usize, lo: f64) -> FloatTensor {
    ft(TensorShape::new(1, 1, n, d), rng, lo, 1.0)
}

#[test]
fn right_and_left_association_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=16);
        let (q, k, v) = (tokens(&mut rng, n, d, -1.0), tokens(&mut rng, n, d, -1.0), tokens(&mut rng, n, d, -1.0));
        let right = relu_linear_attention_ref(&q, &k, &v).unwrap();
        let (left, _) = common::left_attention(&q.data, &k.data, &v.data, n, d, d);
        for (a, b) in right.data.iter().zip(&left) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn six_by_four_nonnegative_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (q, k, v) = (tokens(&mut rng, 6, 4, 0.0), tokens(&mut rng, 6, 4, 0.0), tokens(&mut rng, 6, 4, 0.0));
    let right = relu_linear_attention_ref(&q, &k, &v).unwrap();
    let (left, _) = common::left_attention(&q.data, &k.data, &v.data, 6, 4, 4);
    assert!(max_diff(&right.data, &left) <= 1e-6);
}

#[test]
fn all_ones_keys_give_weighted_column_means() {
    let n = 5;
    let q = FloatTensor::from_fn(TensorShape::new(1, 1, n, n), |_, _, t, i| if t == i { 1.0 } else { 0.0 });
    let k = FloatTensor::from_fn(TensorShape::new(1, 1, n, n), |_, _, _, _| 1.0);
    let v = FloatTensor::from_fn(TensorShape::new(1, 1, n, n), |_, _, t, j| (t * n + j) as f64);
    let o = relu_linear_attention_ref(&q, &k, &v).unwrap();
    for t in 0..n {
        for j in 0..n {
            let mean = (0..n).map(|s| v.at(0, 0, s, j)).sum::<f64>() / n as f64;
            assert!((o.at(0, 0, t, j) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn negative_query_row_outputs_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut q = tokens(&mut rng, 4, 3, 0.1);
    for i in 0..3 {
        q.data[2 * 3 + i] = -0.5;
    }
    let (k, v) = (tokens(&mut rng, 4, 3, 0.1), tokens(&mut rng, 4, 3, -1.0));
    let o = relu_linear_attention_ref(&q, &k, &v).unwrap();
    assert_eq!(&o.data[6..9], &[0.0; 3]);
    assert!(o.data[..6].iter().any(|&x| x != 0.0));
}

#[test]
fn rows_are_convex_combinations_of_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let n = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=6);
        let (q, k, v) = (tokens(&mut rng, n, d, -1.0), tokens(&mut rng, n, d, -1.0), tokens(&mut rng, n, d, -1.0));
        let o = relu_linear_attention_ref(&q, &k, &v).unwrap();
        let (_, sim) = common::left_attention(&q.data, &k.data, &v.data, n, d, d);
        for t in 0..n {
            let row = &sim[t * n..(t + 1) * n];
            let den: f64 = row.iter().sum();
            if den == 0.0 {
                assert!(o.data[t * d..(t + 1) * d].iter().all(|&x| x == 0.0));
                continue;
            }
            let weights: Vec<f64> = row.iter().map(|s| s / den).collect();
            assert!(weights.iter().all(|&w| w >= 0.0));
            assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..d {
                let rebuilt: f64 = (0..n).map(|s| weights[s] * v.data[s * d + j]).sum();
                assert!((rebuilt - o.data[t * d + j]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn single_scale_identity_msa_is_plain_attention() {
    let (d, hw) = (4, 3);
    let n = hw * hw;
    let desc = LayerDesc::msa(3 * d, d, 1, d, vec![1]);
    let w = MsaWeights {
        qkv: ConvWeights {
            weight: identity_weights(3 * d),
            bias: vec![0.0; 3 * d],
        },
        branches: vec![None],
        proj: ConvWeights {
            weight: identity_weights(d),
            bias: vec![0.0; d],
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = ft(TensorShape::chw(3 * d, hw, hw), &mut rng, -1.0, 1.0);
    let y = multi_scale_msa_ref(&x, &desc, &w).unwrap();
    let tok = |c0: usize| {
        FloatTensor::from_fn(TensorShape::new(1, 1, n, d), |_, _, t, i| x.data[(c0 + i) * n + t])
    };
    let a = relu_linear_attention_ref(&tok(0), &tok(d), &tok(2 * d)).unwrap();
    for t in 0..n {
        for j in 0..d {
            assert_eq!(y.data[j * n + t], a.at(0, 0, t, j));
        }
    }
}

#[test]
fn msa_matches_hand_composed_pipeline() {
    let desc = LayerDesc::msa(6, 5, 2, 4, vec![1, 5]).with_activation(Activation::Hardswish);
    let mut gen = WeightGen::new(11);
    let w = gen.msa(&desc);
    let x = gen.input(TensorShape::chw(6, 5, 4), 1.0);
    let y = multi_scale_msa_ref(&x, &desc, &w).unwrap();
    assert_eq!(y.shape, TensorShape::chw(5, 5, 4));

    let n = 20;
    let qkv = conv2d_ref(&x, &w.qkv.weight, &w.qkv.bias, &desc.qkv_desc()).unwrap();
    let (dw, pw) = w.branches[1].as_ref().unwrap();
    let agg = conv2d_ref(&qkv, &dw.weight, &dw.bias, &desc.aggregation_dw_desc(5)).unwrap();
    let agg = conv2d_ref(&agg, &pw.weight, &pw.bias, &desc.aggregation_pw_desc(5)).unwrap();
    let mut heads = Vec::new();
    for src in [&qkv, &agg] {
        for h in 0..2 {
            let tok = |c0: usize| FloatTensor::from_fn(TensorShape::new(1, 1, n, 4), |_, _, t, i| src.data[(c0 + i) * n + t]);
            let a = relu_linear_attention_ref(&tok(h * 12), &tok(h * 12 + 4), &tok(h * 12 + 8)).unwrap();
            heads.push(FloatTensor::from_fn(TensorShape::chw(4, 5, 4), |_, c, y, xx| a.at(0, 0, y * 4 + xx, c)));
        }
    }
    let cat = FloatTensor::concat_channels(&heads).unwrap();
    let proj = conv2d_ref(&cat, &w.proj.weight, &w.proj.bias, &desc.proj_desc()).unwrap();
    assert_eq!(activation_ref(&proj, Activation::Hardswish), y);
}

#[test]
fn quantize_examples() {
    let p = QuantParams::new(0.1);
    let x = FloatTensor::new(TensorShape::new(1, 1, 1, 3), vec![0.0, 0.1 * 127.6, -0.1 * 300.0]).unwrap();
    let q = quantize(&x, p);
    assert_eq!(q.data, vec![0, 127, -128]);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = ft(TensorShape::chw(3, 8, 8), &mut rng, -12.7, 12.7);
    let back = dequantize(&quantize(&x, p));
    assert!(max_diff(&x.data, &back.data) <= 0.05 + 1e-12);
    assert_eq!(round_half_even(2.5), 2.0);
    assert_eq!(round_half_even(-3.5), -4.0);
}

#[test]
fn qlinear_examples() {
    let p = QuantParams::new(0.5);
    let x = QuantTensor::new(TensorShape::chw(3, 2, 2), (0..12).map(|v| v as i8 - 6).collect(), p).unwrap();
    let w = QuantTensor::new(
        TensorShape::new(3, 3, 1, 1),
        (0..9).map(|i| if i % 4 == 0 { 1 } else { 0 }).collect(),
        QuantParams::new(1.0),
    )
    .unwrap();
    let y = qlinear(&x, &w, &[0; 3], &LayerDesc::pw(3, 3), p).unwrap();
    assert_eq!(y.data, x.data);

    // Two channels of ones: 3 + 4 = 7 in the accumulator.
    let x = QuantTensor::new(TensorShape::chw(2, 1, 1), vec![3, 4], QuantParams::new(1.0)).unwrap();
    let w = QuantTensor::new(TensorShape::new(1, 2, 1, 1), vec![1, 1], QuantParams::new(1.0)).unwrap();
    assert_eq!(conv_accumulate(&x, &w, &LayerDesc::pw(2, 1)).unwrap(), vec![7]);
    assert_eq!(qlinear(&x, &w, &[0], &LayerDesc::pw(2, 1), QuantParams::new(1.0)).unwrap().data, vec![7]);
}

#[test]
fn accumulator_overflow_is_reported() {
    let n = 300;
    let x = QuantTensor::new(TensorShape::chw(n, 1, 1), vec![-128; n], QuantParams::new(1.0)).unwrap();
    let w = QuantTensor::new(TensorShape::new(1, n, 1, 1), vec![-128; n], QuantParams::new(1.0)).unwrap();
    let e = qlinear(&x, &w, &[i32::MAX], &LayerDesc::pw(n, 1), QuantParams::new(1.0)).unwrap_err();
    assert!(matches!(e, hvsim_core::Error::AccumulatorOverflow { .. }), "{e}");
}

#[test]
fn zero_divisor_rows_are_zero_in_fixed_point() {
    let q = TokenMatrix::new(2, 2, vec![-5, -7, 3, 9]);
    let k = TokenMatrix::new(2, 2, vec![10, 20, 30, 40]);
    let v = TokenMatrix::new(2, 2, vec![1, 2, 3, 4]);
    let scales = AttentionScales {
        src: 0.1,
        z: 1.0,
        k_rowsum: 1.0,
        out: 0.01,
    };
    let (o, inter) = q_attention(&q, &k, &v, &scales).unwrap();
    assert_eq!(inter.divisors[0], 0);
    assert_eq!((o.at(0, 0), o.at(0, 1)), (0, 0));
    assert_eq!(fixed_divide(1234, 0, &Requantizer::from_real(1.0)), 0);
}

#[test]
fn calibration_fallbacks() {
    assert_eq!(max_abs_scale(127.0), 1.0);
    assert_eq!(max_abs_scale(0.0), 1.0);
    let g = NetworkGraph::build(TensorShape::chw(2, 2, 2), vec![(LayerDesc::pw(2, 2), Stage::S1, None)]).unwrap();
    let w = vec![LayerWeights::Conv(ConvWeights {
        weight: FloatTensor::zeros(TensorShape::new(2, 2, 1, 1)),
        bias: vec![0.0; 2],
    })];
    let x = FloatTensor::from_fn(TensorShape::chw(2, 2, 2), |_, _, _, _| 127.0);
    let p = calibrate_scales(&g, &w, &[x]).unwrap();
    assert_eq!(p.input.scale, 1.0);
    assert_eq!(p.layers[0].output.scale, 1.0);
    assert!(calibrate_scales(&g, &w, &[]).is_err());
}

#[test]
fn calibrated_graphs_rarely_saturate() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let opts = GraphGenOptions {
        sides: &[32, 40],
        ..GraphGenOptions::default()
    };
    for i in 0..30 {
        let g = random_graph(&mut rng, opts).unwrap();
        let mut gen = WeightGen::new(i);
        let weights = gen.network(&g);
        let samples: Vec<FloatTensor> = (0..3).map(|_| gen.input(g.input_shape(), 1.0)).collect();
        let params = calibrate_scales(&g, &weights, &samples).unwrap();
        let model = QuantizedModel::new(g, &weights, params.clone()).unwrap();
        for x in &samples {
            let (_, stats) = forward_quantized_with_stats(&model, &quantize(x, params.input)).unwrap();
            // Every quantized tensor, MSA intermediates included.
            for (name, sat, total) in &stats.entries {
                assert!((*sat as f64) < 1e-3 * *total as f64, "graph {i} {name}: {sat} of {total} saturated");
            }
        }
    }
}

#[test]
fn params_json_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let g = random_graph(&mut rng, GraphGenOptions::default()).unwrap();
    let (model, _) = random_model(&g, 3).unwrap();
    let back = CalibratedParams::from_json(&model.params.to_json()).unwrap();
    assert_eq!(back, model.params);
}

#[test]
fn dumps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let q = common::random_qt(&mut rng, TensorShape::chw(3, 4, 5));
    write_dump(&dir.path().join("act"), &DumpData::Int8(q.clone())).unwrap();
    assert_eq!(read_dump(&dir.path().join("act")).unwrap(), DumpData::Int8(q));
    let f = ft(TensorShape::chw(2, 3, 3), &mut rng, -1.0, 1.0);
    write_dump(&dir.path().join("f"), &DumpData::Float(f.clone())).unwrap();
    assert_eq!(read_dump(&dir.path().join("f")).unwrap(), DumpData::Float(f));
    std::fs::write(dir.path().join("bad.txt"), "dtype i8\nshape 1 2\n").unwrap();
    std::fs::write(dir.path().join("bad.bin"), [0u8; 2]).unwrap();
    assert!(read_dump(&dir.path().join("bad")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn quantized_layers_within_one_lsb(
        seed in any::<u64>(), kind in 0usize..4, k in prop::sample::select(vec![3usize, 5, 7]), s in 1usize..=2,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = [LayerKind::DWConv, LayerKind::PWConv, LayerKind::MatMul, LayerKind::GenericConv][kind];
        let case = hvsim_core::verify::random_conv_case(&mut rng, kind, k, s);
        let q = qlinear(&case.x, &case.w.weight, &case.w.bias, &case.desc, case.out).unwrap();
        prop_assert!(q.max_lsb_diff(&float_oracle(&case).unwrap()).unwrap() <= 1);
    }

    #[test]
    fn integer_accumulators_match_direct_sum(seed in any::<u64>(), cin in 1usize..6, cout in 1usize..6, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let desc = LayerDesc::generic_conv(cin, cout, 2 * k - 1, 1 + (seed % 2) as usize, k - 1);
        let case = conv_case(&mut rng, desc.clone(), TensorShape::chw(cin, 7, 6));
        let (_, expect) = common::direct_conv_acc(&case.x, &case.w.weight, &desc);
        prop_assert_eq!(conv_accumulate(&case.x, &case.w.weight, &desc).unwrap(), expect);
    }
}
