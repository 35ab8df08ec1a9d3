//! Randomized cross-checks shared by the `verify` command and the test
//! suites: random layers and graphs, engine vs. integer reference, and
//! integer reference vs. float oracle.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{mat_execute, rpe_dw_execute, rpe_pw_execute, EngineResult};
use crate::error::Result;
use crate::functional::{
    activation_ref, calibrate_scales, conv2d_ref, dequantize, msa_quantized, multi_scale_msa_trace, qlinear, quantize,
    ConvWeights, FloatTensor, LayerWeights, QuantConv, QuantParams, QuantTensor, QuantizedModel, TokenMatrix,
    WeightGen,
};
use crate::ir::{layer_macs, Activation, LayerDesc, LayerKind, NetworkGraph, Stage, TensorShape};
use crate::sched::HardwareConfig;

/// One quantized conv-like layer with operands.
#[derive(Debug, Clone)]
pub struct ConvCase {
    pub desc: LayerDesc,
    pub x: QuantTensor,
    pub w: QuantConv,
    pub out: QuantParams,
}

fn random_bytes(rng: &mut impl Rng, n: usize) -> Vec<i8> {
    (0..n).map(|_| rng.gen_range(-128i32..=127) as i8).collect()
}

fn random_activation(rng: &mut impl Rng) -> Activation {
    *[Activation::None, Activation::ReLU, Activation::Hardswish]
        .choose(rng)
        .expect("nonempty")
}

/// Random operands for `desc` on an input of `input` shape. The output scale
/// is set near the typical accumulator magnitude so values span the int8 range.
pub fn conv_case(rng: &mut impl Rng, desc: LayerDesc, input: TensorShape) -> ConvCase {
    let x_scale = rng.gen_range(0.005..0.05);
    let w_scale = rng.gen_range(0.005..0.05);
    let cin_g = desc.in_channels / desc.groups;
    let wshape = TensorShape::new(desc.out_channels, cin_g, desc.kernel, desc.kernel);
    let x = QuantTensor::new(input, random_bytes(rng, input.numel()), QuantParams::new(x_scale)).expect("sized");
    let weight = QuantTensor::new(wshape, random_bytes(rng, wshape.numel()), QuantParams::new(w_scale)).expect("sized");
    let fan_in = (cin_g * desc.kernel * desc.kernel) as f64;
    let typical = fan_in.sqrt() * 74.0 * 74.0;
    let bias = (0..desc.out_channels)
        .map(|_| rng.gen_range(-(typical as i32)..=typical as i32))
        .collect();
    let out = QuantParams::new(x_scale * w_scale * typical * rng.gen_range(0.01..0.05));
    ConvCase {
        desc,
        x,
        w: ConvWeights { weight, bias },
        out,
    }
}

/// Random conv-like layer of the given kind with CHW input.
pub fn random_conv_case(rng: &mut impl Rng, kind: LayerKind, kernel: usize, stride: usize) -> ConvCase {
    let h = rng.gen_range(kernel.max(2)..=14);
    let w = rng.gen_range(kernel.max(2)..=14);
    let act = random_activation(rng);
    let desc = match kind {
        LayerKind::DWConv => LayerDesc::dw(rng.gen_range(1..=20), kernel, stride),
        LayerKind::PWConv => LayerDesc::pw(rng.gen_range(1..=24), rng.gen_range(1..=24)),
        LayerKind::MatMul => LayerDesc::matmul(rng.gen_range(1..=24), rng.gen_range(1..=24)),
        _ => LayerDesc::generic_conv(rng.gen_range(1..=6), rng.gen_range(1..=12), kernel, stride, kernel / 2),
    }
    .with_activation(act);
    let input = TensorShape::chw(desc.in_channels, h, w);
    conv_case(rng, desc, input)
}

/// Largest |a - b| in LSBs between two int8 tensors of equal shape.
pub fn lsb_diff(a: &QuantTensor, b: &QuantTensor) -> u32 {
    a.max_lsb_diff(b).unwrap_or(u32::MAX)
}

/// Float oracle of one quantized layer: dequantize, convolve, activate, quantize.
pub fn float_oracle(case: &ConvCase) -> Result<QuantTensor> {
    let acc_scale = case.x.params.scale * case.w.weight.params.scale;
    let bias: Vec<f64> = case.w.bias.iter().map(|&b| b as f64 * acc_scale).collect();
    let y = conv2d_ref(&dequantize(&case.x), &dequantize(&case.w.weight), &bias, &case.desc)?;
    Ok(quantize(&activation_ref(&y, case.desc.activation), case.out))
}

/// Engines that can run the case's layer kind.
pub fn run_engines(case: &ConvCase, hw: &HardwareConfig) -> Result<Vec<(&'static str, EngineResult)>> {
    let (x, w, d, o) = (&case.x, &case.w, &case.desc, case.out);
    Ok(if d.kind == LayerKind::DWConv {
        vec![("RPE-DW", rpe_dw_execute(x, w, d, o, &hw.rpe())?)]
    } else {
        vec![
            ("RPE-PW", rpe_pw_execute(x, w, d, o, &hw.rpe())?),
            ("MAT", mat_execute(x, w, d, o, &hw.mat())?),
        ]
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifySummary {
    pub layer_cases: usize,
    pub msa_cases: usize,
    /// Engine runs whose bytes differ from the integer reference.
    pub engine_mismatches: usize,
    /// Engine runs whose activity differs from the layer's MAC count.
    pub activity_mismatches: usize,
    /// Integer reference vs. float oracle, over every checked stage.
    pub max_float_lsb: u32,
    pub max_engine_lsb: u32,
}

impl VerifySummary {
    pub fn passed(&self) -> bool {
        self.engine_mismatches == 0 && self.activity_mismatches == 0 && self.max_float_lsb <= 1
    }
}

/// An engine run of a verification case next to the integer reference.
pub struct CaseOutcome {
    pub reference: QuantTensor,
    pub engines: Vec<(&'static str, EngineResult)>,
}

/// Check one conv case: every engine byte-equal to `qlinear`, activity equal
/// to the MAC count, reference within 1 LSB of the float oracle.
pub fn check_conv_case(case: &ConvCase, hw: &HardwareConfig, s: &mut VerifySummary) -> Result<CaseOutcome> {
    let reference = qlinear(&case.x, &case.w.weight, &case.w.bias, &case.desc, case.out)?;
    let macs = layer_macs(&case.desc, case.x.shape);
    let engines = run_engines(case, hw)?;
    for (_, r) in &engines {
        let d = lsb_diff(&r.outputs, &reference);
        s.max_engine_lsb = s.max_engine_lsb.max(d);
        s.engine_mismatches += (d != 0) as usize;
        s.activity_mismatches += (r.active_mac_cycles != macs) as usize;
    }
    s.max_float_lsb = s.max_float_lsb.max(lsb_diff(&reference, &float_oracle(case)?));
    s.layer_cases += 1;
    Ok(CaseOutcome { reference, engines })
}

/// Random small MSA descriptor and input shape.
pub fn random_msa(rng: &mut impl Rng) -> (LayerDesc, TensorShape) {
    let dim = *[2usize, 4, 8].choose(rng).expect("nonempty");
    let heads = rng.gen_range(1..=2);
    let scales = [vec![1], vec![1, 3], vec![1, 5], vec![3]].choose(rng).expect("nonempty").clone();
    let cin = rng.gen_range(2..=12);
    let cout = rng.gen_range(2..=12);
    let h = rng.gen_range(2..=7);
    let w = rng.gen_range(2..=7);
    let desc = LayerDesc::msa(cin, cout, heads, dim, scales).with_activation(random_activation(rng));
    (desc, TensorShape::chw(cin, h, w))
}

/// Largest stage-wise deviation of the fixed-point MSA from float
/// evaluations of its own dequantized operands.
pub fn msa_float_deviation(desc: &LayerDesc, input: TensorShape, seed: u64) -> Result<u32> {
    let g = NetworkGraph::build(input, vec![(desc.clone(), Stage::S3, None)])?;
    let mut gen = WeightGen::new(seed);
    let weights = gen.network(&g);
    let samples: Vec<FloatTensor> = (0..2).map(|_| gen.input(input, 1.0)).collect();
    let params = calibrate_scales(&g, &weights, &samples)?;
    let model = QuantizedModel::new(g, &weights, params)?;
    let LayerWeights::Msa(qw) = &model.weights[0] else {
        unreachable!("single MSA graph")
    };
    let mq = model.params.layers[0].msa.clone().expect("MSA params");
    let x = quantize(&samples[0], model.params.input);
    let t = msa_quantized(&x, desc, qw, &mq, model.params.layers[0].output)?;
    let mut worst = 0u32;
    let mut check = |case: ConvCase, got: &QuantTensor| -> Result<()> {
        worst = worst.max(lsb_diff(got, &float_oracle(&case)?));
        Ok(())
    };
    let lin = |x: &QuantTensor, w: &QuantConv, d: LayerDesc, out: QuantParams| ConvCase {
        desc: d,
        x: x.clone(),
        w: w.clone(),
        out,
    };
    check(lin(&x, &qw.qkv, desc.qkv_desc(), mq.qkv), &t.qkv)?;
    for (b, (&k, bw)) in desc.msa_scales.iter().zip(&qw.branches).enumerate() {
        if let (Some((dw, pw)), Some(dw_out)) = (bw, &t.agg_dw[b]) {
            check(lin(&t.qkv, dw, desc.aggregation_dw_desc(k), mq.agg_dw[b].expect("dw params")), dw_out)?;
            check(lin(dw_out, pw, desc.aggregation_pw_desc(k), mq.branch[b]), &t.branch[b])?;
        }
    }
    check(lin(&t.attention, &qw.proj, desc.proj_desc(), model.params.layers[0].output), &t.output)?;

    // Attention stages per unit.
    let (h, d) = (desc.msa_heads, desc.msa_dim);
    for (b, src) in t.branch.iter().enumerate() {
        let s = src.params.scale;
        for hh in 0..h {
            let u = &t.units[b][hh];
            let base = hh * 3 * d;
            let q = TokenMatrix::from_channels(src, base, d);
            let k = TokenMatrix::from_channels(src, base + d, d);
            let v = TokenMatrix::from_channels(src, base + 2 * d, d);
            let n = q.rows;
            let (sz, sk, so) = (mq.z[b].scale, mq.k_rowsum[b].scale, mq.attention.scale);
            let q8 = |x: f64, scale: f64| crate::functional::round_half_even(x / scale).clamp(-128.0, 127.0) as i32;
            for i in 0..d {
                let ks: f64 = (0..n).map(|t| k.at(t, i).max(0) as f64 * s).sum();
                worst = worst.max((q8(ks, sk) - u.k_rowsum_q[i] as i32).unsigned_abs());
                for j in 0..d {
                    let z: f64 = (0..n).map(|t| k.at(t, i).max(0) as f64 * s * v.at(t, j) as f64 * s).sum();
                    worst = worst.max((q8(z, sz) - u.z_q[i * d + j] as i32).unsigned_abs());
                }
            }
            let c0 = (b * h + hh) * d;
            for tok in 0..n {
                let num: Vec<f64> = (0..d)
                    .map(|j| (0..d).map(|i| q.at(tok, i).max(0) as f64 * u.z_q[i * d + j] as f64 * sz).sum())
                    .collect();
                let den: f64 = (0..d).map(|i| q.at(tok, i).max(0) as f64 * u.k_rowsum_q[i] as f64 * sk).sum();
                for (j, nv) in num.iter().enumerate() {
                    let expect = if den == 0.0 { 0 } else { q8(nv / den, so) };
                    let got = t.attention.data[(c0 + j) * n + tok] as i32;
                    worst = worst.max((expect - got).unsigned_abs());
                }
            }
        }
    }
    // The float trace must agree on shapes with the quantized one.
    let ft = multi_scale_msa_trace(&samples[0], desc, match &weights[0] {
        LayerWeights::Msa(w) => w,
        _ => unreachable!("single MSA graph"),
    })?;
    debug_assert_eq!(ft.output.shape, t.output.shape);
    Ok(worst)
}

/// The sweep behind the `verify` command: `cases` random conv layers over
/// all kernel/stride combinations plus a tenth as many random MSA blocks.
pub fn verify(seed: u64, cases: usize, hw: &HardwareConfig) -> Result<VerifySummary> {
    verify_with(seed, cases, hw, |_, _, _| Ok(()))
}

/// [`verify`] with a callback on every conv case (index, case, outcome).
pub fn verify_with(
    seed: u64,
    cases: usize,
    hw: &HardwareConfig,
    mut on_case: impl FnMut(usize, &ConvCase, &CaseOutcome) -> Result<()>,
) -> Result<VerifySummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = VerifySummary::default();
    let combos: Vec<(LayerKind, usize, usize)> = [3, 5, 7]
        .iter()
        .flat_map(|&k| [1, 2].map(move |st| (k, st)))
        .flat_map(|(k, st)| [(LayerKind::DWConv, k, st), (LayerKind::GenericConv, k, st)])
        .chain([(LayerKind::PWConv, 1, 1), (LayerKind::MatMul, 1, 1)])
        .collect();
    for i in 0..cases {
        let (kind, k, st) = combos[i % combos.len()];
        let case = random_conv_case(&mut rng, kind, k, st);
        let outcome = check_conv_case(&case, hw, &mut s)?;
        on_case(i, &case, &outcome)?;
    }
    for _ in 0..cases.div_ceil(10) {
        let (desc, input) = random_msa(&mut rng);
        let dev = msa_float_deviation(&desc, input, rng.gen())?;
        s.max_float_lsb = s.max_float_lsb.max(dev);
        s.msa_cases += 1;
    }
    Ok(s)
}

/// Knobs of [`random_graph`].
#[derive(Debug, Clone, Copy)]
pub struct GraphGenOptions {
    pub max_blocks: usize,
    pub allow_msa: bool,
    /// Candidate input sides (square inputs).
    pub sides: &'static [usize],
}

impl Default for GraphGenOptions {
    fn default() -> Self {
        Self {
            max_blocks: 5,
            allow_msa: true,
            sides: &[4, 6, 8],
        }
    }
}

/// Random small network mixing PW, DW, DW→PW pairs, MBConv blocks with
/// residuals and MSA blocks.
pub fn random_graph(rng: &mut impl Rng, opts: GraphGenOptions) -> Result<NetworkGraph> {
    let mut c = rng.gen_range(2..=8);
    let side = opts.sides.choose(rng).copied().expect("nonempty");
    let input = TensorShape::chw(c, side, side);
    let mut h = side;
    let mut e: Vec<(LayerDesc, Stage, Option<usize>)> = Vec::new();
    let stages = [Stage::S1, Stage::S2, Stage::S3, Stage::S4];
    if rng.gen_bool(0.5) {
        let cout = rng.gen_range(2..=12);
        e.push((LayerDesc::generic_conv(c, cout, 3, 1, 1).with_activation(Activation::Hardswish), Stage::Conv, None));
        c = cout;
    }
    let blocks = rng.gen_range(1..=opts.max_blocks);
    for b in 0..blocks {
        let st = stages[b * stages.len() / blocks];
        let choice = rng.gen_range(0..if opts.allow_msa { 5 } else { 4 });
        let k = *[3usize, 5, 7].choose(rng).expect("nonempty");
        match choice {
            0 => {
                let cout = rng.gen_range(2..=16);
                e.push((LayerDesc::pw(c, cout).with_activation(random_activation(rng)), st, None));
                c = cout;
            }
            1 => {
                let s = if h >= 4 && rng.gen_bool(0.3) { 2 } else { 1 };
                e.push((LayerDesc::dw(c, k, s).with_activation(random_activation(rng)), st, None));
                h = (h + 2 * (k / 2) - k) / s + 1;
            }
            2 => {
                let cout = rng.gen_range(2..=16);
                e.push((LayerDesc::dw(c, k, 1).with_activation(random_activation(rng)), st, None));
                e.push((LayerDesc::pw(c, cout), st, None));
                c = cout;
            }
            3 => {
                let mid = c * rng.gen_range(2..=4);
                let src = e.len();
                e.push((LayerDesc::pw(c, mid).with_activation(Activation::Hardswish), st, None));
                e.push((LayerDesc::dw(mid, k, 1).with_activation(Activation::Hardswish), st, None));
                e.push((LayerDesc::pw(mid, c), st, None));
                e.push((LayerDesc::residual_add(c), st, Some(src)));
            }
            _ => {
                let dim = *[2usize, 4].choose(rng).expect("nonempty");
                let heads = rng.gen_range(1..=2);
                let scales = [vec![1], vec![1, 3], vec![1, 5]].choose(rng).expect("nonempty").clone();
                let src = e.len();
                e.push((LayerDesc::msa(c, c, heads, dim, scales), st, None));
                e.push((LayerDesc::residual_add(c), st, Some(src)));
            }
        }
    }
    let e = e
        .into_iter()
        .enumerate()
        .map(|(i, (d, s, k))| (d.named(format!("l{i}")), s, k))
        .collect();
    NetworkGraph::build(input, e)
}

/// Random weights calibrated on two random inputs; returns the model and a
/// quantized input for simulation.
pub fn random_model(g: &NetworkGraph, seed: u64) -> Result<(QuantizedModel, QuantTensor)> {
    let mut gen = WeightGen::new(seed);
    let weights = gen.network(g);
    let samples: Vec<FloatTensor> = (0..2).map(|_| gen.input(g.input_shape(), 1.0)).collect();
    let params = calibrate_scales(g, &weights, &samples)?;
    let x = quantize(&samples[0], params.input);
    Ok((QuantizedModel::new(g.clone(), &weights, params)?, x))
}
