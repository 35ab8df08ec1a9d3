use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{LayerDesc, LayerKind, NetworkGraph};

use super::attention::MsaTrace;
use super::float_ops::apply_activation;
use super::forward::{forward_float, msa_quantized};
use super::quant::{
    conv_accumulate, finish_accumulators, q_attention, q_residual_add, quantize, AttentionScales, MsaIntermediate,
    PostOp,
};
use super::tensor::{FloatTensor, QuantParams, QuantTensor, TokenMatrix};
use super::weights::{quantize_weights, FloatConv, LayerWeights, MsaWeights};

/// `max_abs / 127`, or 1.0 for an all-zero tensor.
pub fn max_abs_scale(max_abs: f64) -> f64 {
    if max_abs > 0.0 && max_abs.is_finite() {
        max_abs / 127.0
    } else {
        1.0
    }
}

/// Scales of the tensors inside one MSA block; per-branch vectors are
/// indexed like `msa_scales`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsaQuant {
    pub qkv: QuantParams,
    pub agg_dw: Vec<Option<QuantParams>>,
    /// Tensor Q/K/V are read from; equals `qkv` for the identity branch.
    pub branch: Vec<QuantParams>,
    pub z: Vec<QuantParams>,
    pub k_rowsum: Vec<QuantParams>,
    pub dividends: Vec<QuantParams>,
    pub divisors: Vec<QuantParams>,
    pub attention: QuantParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub output: QuantParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msa: Option<MsaQuant>,
}

/// Activation scales for a whole network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedParams {
    pub input: QuantParams,
    pub layers: Vec<LayerQuant>,
}

impl CalibratedParams {
    /// Scale of the tensor entering layer `i`.
    pub fn layer_input(&self, i: usize) -> QuantParams {
        if i == 0 {
            self.input
        } else {
            self.layers[i - 1].output
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Default, Clone)]
struct MsaMax {
    qkv: f64,
    agg_dw: Vec<f64>,
    branch: Vec<f64>,
    z: Vec<f64>,
    k_rowsum: Vec<f64>,
    dividends: Vec<f64>,
    divisors: Vec<f64>,
    attention: f64,
}

fn vmax(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

impl MsaMax {
    fn update(&mut self, t: &MsaTrace) {
        let nb = t.branch.len();
        if self.branch.is_empty() {
            *self = MsaMax {
                agg_dw: vec![0.0; nb],
                branch: vec![0.0; nb],
                z: vec![0.0; nb],
                k_rowsum: vec![0.0; nb],
                dividends: vec![0.0; nb],
                divisors: vec![0.0; nb],
                ..Default::default()
            };
        }
        self.qkv = self.qkv.max(t.qkv.max_abs());
        self.attention = self.attention.max(t.attention.max_abs());
        for b in 0..nb {
            if let Some(dw) = &t.agg_dw[b] {
                self.agg_dw[b] = self.agg_dw[b].max(dw.max_abs());
            }
            self.branch[b] = self.branch[b].max(t.branch[b].max_abs());
            for h in &t.heads[b] {
                self.z[b] = self.z[b].max(vmax(&h.z));
                self.k_rowsum[b] = self.k_rowsum[b].max(vmax(&h.k_rowsum));
                self.dividends[b] = self.dividends[b].max(vmax(&h.dividends));
                self.divisors[b] = self.divisors[b].max(vmax(&h.divisors));
            }
        }
    }

    fn finish(&self, t: &MsaTrace) -> MsaQuant {
        let p = |m: f64| QuantParams::new(max_abs_scale(m));
        let qp = |v: &[f64]| v.iter().map(|&m| p(m)).collect::<Vec<_>>();
        MsaQuant {
            qkv: p(self.qkv),
            agg_dw: t
                .agg_dw
                .iter()
                .zip(&self.agg_dw)
                .map(|(a, &m)| a.as_ref().map(|_| p(m)))
                .collect(),
            branch: qp(&self.branch),
            z: qp(&self.z),
            k_rowsum: qp(&self.k_rowsum),
            dividends: qp(&self.dividends),
            divisors: qp(&self.divisors),
            attention: p(self.attention),
        }
    }
}

/// Symmetric per-tensor scales (max_abs / 127 over all samples) for the
/// network input, every layer output and every MSA intermediate. Each
/// max_abs covers both the float evaluation and the fixed-point pipeline.
pub fn calibrate_scales(
    g: &NetworkGraph,
    weights: &[LayerWeights<FloatConv>],
    samples: &[FloatTensor],
) -> Result<CalibratedParams> {
    if samples.is_empty() {
        return Err(Error::tensor("calibration needs at least one sample"));
    }
    let mut input_max = 0.0f64;
    let mut out_max = vec![0.0f64; g.len()];
    let mut msa_max: Vec<MsaMax> = vec![MsaMax::default(); g.len()];
    let mut last_trace: Vec<Option<MsaTrace>> = vec![None; g.len()];
    for x in samples {
        input_max = input_max.max(x.max_abs());
        let trace = forward_float(g, weights, x)?;
        for (i, t) in trace.outputs.iter().enumerate() {
            out_max[i] = out_max[i].max(t.max_abs());
        }
        for (i, m) in trace.msa.into_iter().enumerate() {
            if let Some(m) = m {
                msa_max[i].update(&m);
                last_trace[i] = Some(m);
            }
        }
    }
    let layers = (0..g.len())
        .map(|i| LayerQuant {
            output: QuantParams::new(max_abs_scale(out_max[i])),
            msa: last_trace[i].as_ref().map(|t| msa_max[i].finish(t)),
        })
        .collect();
    let mut params = CalibratedParams {
        input: QuantParams::new(max_abs_scale(input_max)),
        layers,
    };
    refine_fixed_point(g, weights, samples, &mut params)?;
    Ok(params)
}

fn widen(p: &mut QuantParams, max_abs: f64) {
    if max_abs > 0.0 && max_abs.is_finite() {
        *p = QuantParams::new(p.scale.max(max_abs_scale(max_abs)));
    }
}

/// Conv-like stage of the fixed-point pipeline: widen `p` to the largest
/// pre-rounding value over the samples, then produce the int8 outputs.
fn linear_stage(xs: &[QuantTensor], w: &FloatConv, desc: &LayerDesc, p: &mut QuantParams) -> Result<Vec<QuantTensor>> {
    let qc = quantize_weights(w, xs[0].params.scale);
    let acc_scale = xs[0].params.scale * qc.weight.params.scale;
    let shape = desc.output_shape(xs[0].shape)?;
    let plane = shape.pixels();
    let accs = xs
        .iter()
        .map(|x| conv_accumulate(x, &qc.weight, desc))
        .collect::<Result<Vec<_>>>()?;
    let mut m = 0.0f64;
    for acc in &accs {
        for (i, &a) in acc.iter().enumerate() {
            let c = (i / plane) % shape.channels;
            let v = apply_activation((a + qc.bias[c] as i64) as f64 * acc_scale, desc.activation);
            m = m.max(v.abs());
        }
    }
    widen(p, m);
    let post = PostOp::new(acc_scale, *p, desc.activation);
    accs.iter()
        .map(|acc| {
            let (data, _) = finish_accumulators(acc, plane, 0, &qc.bias, &post, &desc.name)?;
            QuantTensor::new(shape, data, *p)
        })
        .collect()
}

fn msa_stage(
    xs: &[QuantTensor],
    w: &MsaWeights<FloatConv>,
    desc: &LayerDesc,
    mq: &mut MsaQuant,
    out: &mut QuantParams,
) -> Result<Vec<QuantTensor>> {
    let (h, d) = (desc.msa_heads, desc.msa_dim);
    let qkv = linear_stage(xs, &w.qkv, &desc.qkv_desc(), &mut mq.qkv)?;
    let mut branches = Vec::new();
    for (b, (&k, bw)) in desc.msa_scales.iter().zip(&w.branches).enumerate() {
        match (bw, mq.agg_dw[b].as_mut()) {
            (Some((dw, pw)), Some(dw_p)) => {
                let t = linear_stage(&qkv, dw, &desc.aggregation_dw_desc(k), dw_p)?;
                branches.push(linear_stage(&t, pw, &desc.aggregation_pw_desc(k), &mut mq.branch[b])?);
            }
            _ => {
                mq.branch[b] = mq.qkv;
                branches.push(qkv.clone());
            }
        }
    }
    let heads = |src: &QuantTensor, hh: usize| {
        let base = hh * 3 * d;
        (
            TokenMatrix::from_channels(src, base, d),
            TokenMatrix::from_channels(src, base + d, d),
            TokenMatrix::from_channels(src, base + 2 * d, d),
        )
    };
    let run = |mq: &MsaQuant, f: &mut dyn FnMut(usize, f64, &MsaIntermediate)| -> Result<()> {
        for (b, per_sample) in branches.iter().enumerate() {
            for src in per_sample {
                for hh in 0..h {
                    let (q, k, v) = heads(src, hh);
                    let scales = AttentionScales {
                        src: src.params.scale,
                        z: mq.z[b].scale,
                        k_rowsum: mq.k_rowsum[b].scale,
                        out: mq.attention.scale,
                    };
                    let (_, inter) = q_attention(&q, &k, &v, &scales)?;
                    f(b, src.params.scale, &inter);
                }
            }
        }
        Ok(())
    };
    // Z and k_rowsum are exact integer sums of the int8 operands.
    let nb = branches.len();
    let (mut z_max, mut k_max) = (vec![0.0f64; nb], vec![0.0f64; nb]);
    run(mq, &mut |b, s, u| {
        let zm = u.z.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
        let km = u.k_rowsum.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
        z_max[b] = z_max[b].max(zm as f64 * s * s);
        k_max[b] = k_max[b].max(km as f64 * s);
    })?;
    for b in 0..nb {
        widen(&mut mq.z[b], z_max[b]);
        widen(&mut mq.k_rowsum[b], k_max[b]);
    }
    // Quotients as the dividers see them.
    let mut a_max = 0.0f64;
    run(mq, &mut |b, _, u| {
        let ratio = mq.z[b].scale / mq.k_rowsum[b].scale;
        for (t, &v) in u.divisors.iter().enumerate() {
            if v != 0 {
                for &dv in &u.dividends[t * d..(t + 1) * d] {
                    a_max = a_max.max((dv as f64 / v as f64 * ratio).abs());
                }
            }
        }
    })?;
    widen(&mut mq.attention, a_max);
    let proj_w = quantize_weights(&w.proj, mq.attention.scale);
    let qw = MsaWeights {
        qkv: quantize_weights(&w.qkv, xs[0].params.scale),
        branches: w
            .branches
            .iter()
            .enumerate()
            .map(|(b, br)| {
                br.as_ref().map(|(dw, pw)| {
                    let dw_scale = mq.agg_dw[b].map(|p| p.scale).unwrap_or(1.0);
                    (quantize_weights(dw, mq.qkv.scale), quantize_weights(pw, dw_scale))
                })
            })
            .collect(),
        proj: proj_w,
    };
    let attention = xs
        .iter()
        .map(|x| msa_quantized(x, desc, &qw, mq, *out).map(|t| t.attention))
        .collect::<Result<Vec<_>>>()?;
    linear_stage(&attention, &w.proj, &desc.proj_desc(), out)
}

/// Widen every scale to also cover the values the fixed-point pipeline
/// produces on the samples, layer by layer, so rounding differences
/// between the float and integer paths do not push elements past ±127.
fn refine_fixed_point(
    g: &NetworkGraph,
    weights: &[LayerWeights<FloatConv>],
    samples: &[FloatTensor],
    params: &mut CalibratedParams,
) -> Result<()> {
    let inputs: Vec<QuantTensor> = samples.iter().map(|x| quantize(x, params.input)).collect();
    let mut outs: Vec<Vec<QuantTensor>> = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        let desc = &g.layer(i).desc;
        let xs = if i == 0 { &inputs } else { &outs[i - 1] };
        let lq = &mut params.layers[i];
        let ys = match (&weights[i], desc.kind) {
            (LayerWeights::Conv(w), _) => linear_stage(xs, w, desc, &mut lq.output)?,
            (LayerWeights::Msa(w), LayerKind::MsaBlock) => {
                let mq = lq
                    .msa
                    .as_mut()
                    .ok_or_else(|| Error::tensor(format!("layer {i}: MSA scales missing")))?;
                msa_stage(xs, w, desc, mq, &mut lq.output)?
            }
            (LayerWeights::None, LayerKind::ResidualAdd) => {
                let src = g
                    .skip_source(i)
                    .ok_or_else(|| Error::tensor(format!("layer {i}: residual operand missing")))?;
                let skips = if src == 0 { &inputs } else { &outs[src - 1] };
                let mut m = 0.0f64;
                for (a, b) in xs.iter().zip(skips) {
                    for (&x, &y) in a.data.iter().zip(&b.data) {
                        let v = x as f64 * a.params.scale + y as f64 * b.params.scale;
                        m = m.max(apply_activation(v, desc.activation).abs());
                    }
                }
                widen(&mut lq.output, m);
                xs.iter()
                    .zip(skips)
                    .map(|(a, b)| q_residual_add(a, b, lq.output, desc.activation))
                    .collect::<Result<Vec<_>>>()?
            }
            _ => return Err(Error::tensor(format!("layer {i}: weights do not match the layer kind"))),
        };
        outs.push(ys);
    }
    Ok(())
}

/// Saturated element counts per quantized tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SaturationStats {
    pub entries: Vec<(String, usize, usize)>,
}

impl SaturationStats {
    pub fn record(&mut self, name: impl Into<String>, saturated: usize, total: usize) {
        self.entries.push((name.into(), saturated, total));
    }

    pub fn worst_fraction(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, s, t)| if *t == 0 { 0.0 } else { *s as f64 / *t as f64 })
            .fold(0.0, f64::max)
    }

    pub fn total_saturated(&self) -> usize {
        self.entries.iter().map(|e| e.1).sum()
    }
}
