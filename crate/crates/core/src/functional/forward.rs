use crate::error::{Error, Result};
use crate::ir::{LayerDesc, LayerKind, NetworkGraph};
use crate::par;

use super::attention::{multi_scale_msa_trace, MsaTrace};
use super::calibrate::{MsaQuant, SaturationStats};
use super::float_ops::{activation_ref, conv2d_ref, residual_add_ref};
use super::quant::{
    finish_accumulators, conv_accumulate, q_attention, q_residual_add_counted, AttentionScales, MsaIntermediate, PostOp,
};
use super::tensor::{FloatTensor, QuantParams, QuantTensor, TokenMatrix};
use super::weights::{FloatConv, LayerWeights, MsaWeights, QuantConv, QuantizedModel};

/// Float outputs of every layer, plus MSA internals.
#[derive(Debug, Clone)]
pub struct FloatTrace {
    pub outputs: Vec<FloatTensor>,
    pub msa: Vec<Option<MsaTrace>>,
}

fn weights_mismatch(i: usize) -> Error {
    Error::tensor(format!("layer {i}: weights do not match the layer kind"))
}

pub fn forward_float(g: &NetworkGraph, weights: &[LayerWeights<FloatConv>], x: &FloatTensor) -> Result<FloatTrace> {
    if weights.len() != g.len() {
        return Err(Error::tensor(format!("{} weight sets for {} layers", weights.len(), g.len())));
    }
    let mut outputs: Vec<FloatTensor> = Vec::with_capacity(g.len());
    let mut msa = Vec::with_capacity(g.len());
    for (i, node) in g.layers().iter().enumerate() {
        let input = if i == 0 { x } else { &outputs[i - 1] };
        let d = &node.desc;
        let (out, trace) = match (d.kind, &weights[i]) {
            (LayerKind::ResidualAdd, LayerWeights::None) => {
                let src = g.skip_source(i).ok_or_else(|| Error::tensor(format!("layer {i}: no residual edge")))?;
                let skip = if src == 0 { x } else { &outputs[src - 1] };
                (residual_add_ref(input, skip, d.activation)?, None)
            }
            (LayerKind::MsaBlock, LayerWeights::Msa(w)) => {
                let t = multi_scale_msa_trace(input, d, w)?;
                (t.output.clone(), Some(t))
            }
            (LayerKind::MsaBlock | LayerKind::ResidualAdd, _) => return Err(weights_mismatch(i)),
            (_, LayerWeights::Conv(c)) => (
                activation_ref(&conv2d_ref(input, &c.weight, &c.bias, d)?, d.activation),
                None,
            ),
            _ => return Err(weights_mismatch(i)),
        };
        outputs.push(out);
        msa.push(trace);
    }
    Ok(FloatTrace { outputs, msa })
}

/// Integer executor used by the quantized forward pass. The reference
/// implementation is [`Reference`]; engine simulators provide others.
pub trait QuantBackend: Sync {
    /// Conv / matmul with requantization; returns the saturation count too.
    fn linear(&self, x: &QuantTensor, w: &QuantConv, desc: &LayerDesc, out: QuantParams) -> Result<(QuantTensor, usize)>;

    fn attention(
        &self,
        q: &TokenMatrix,
        k: &TokenMatrix,
        v: &TokenMatrix,
        scales: &AttentionScales,
    ) -> Result<(TokenMatrix, MsaIntermediate)>;
}

/// Nested-loop integer semantics.
pub struct Reference;

impl QuantBackend for Reference {
    fn linear(&self, x: &QuantTensor, w: &QuantConv, desc: &LayerDesc, out: QuantParams) -> Result<(QuantTensor, usize)> {
        let acc = conv_accumulate(x, &w.weight, desc)?;
        let shape = desc.output_shape(x.shape)?;
        let post = PostOp::new(x.params.scale * w.weight.params.scale, out, desc.activation);
        let (data, sat) = finish_accumulators(&acc, shape.pixels(), 0, &w.bias, &post, &desc.name)?;
        Ok((QuantTensor::new(shape, data, out)?, sat))
    }

    fn attention(
        &self,
        q: &TokenMatrix,
        k: &TokenMatrix,
        v: &TokenMatrix,
        scales: &AttentionScales,
    ) -> Result<(TokenMatrix, MsaIntermediate)> {
        q_attention(q, k, v, scales)
    }
}


/// Every quantized tensor produced inside one MSA block.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantMsaTrace {
    pub qkv: QuantTensor,
    pub agg_dw: Vec<Option<QuantTensor>>,
    pub branch: Vec<QuantTensor>,
    /// Per branch, per head.
    pub units: Vec<Vec<MsaIntermediate>>,
    pub attention: QuantTensor,
    pub output: QuantTensor,
    /// One entry per quantized tensor; attention units are pooled per stage.
    pub saturation: SaturationStats,
}

/// Fixed-point MSA block on any backend.
pub fn msa_with<B: QuantBackend + ?Sized>(
    backend: &B,
    x: &QuantTensor,
    desc: &LayerDesc,
    w: &MsaWeights<QuantConv>,
    mq: &MsaQuant,
    out: QuantParams,
) -> Result<QuantMsaTrace> {
    if desc.kind != LayerKind::MsaBlock || w.branches.len() != desc.msa_scales.len() {
        return Err(Error::tensor(format!("{}: MSA weights do not match the layer", desc.name)));
    }
    let (h, d) = (desc.msa_heads, desc.msa_dim);
    let n = x.shape.pixels();
    let mut stats = SaturationStats::default();
    let qkv_desc = desc.qkv_desc();
    let (qkv, s) = backend.linear(x, &w.qkv, &qkv_desc, mq.qkv)?;
    stats.record(qkv_desc.name, s, qkv.data.len());
    let mut agg_dw = Vec::new();
    let mut branch = Vec::new();
    for (b, (&k, bw)) in desc.msa_scales.iter().zip(&w.branches).enumerate() {
        match bw {
            None if k == 1 => {
                agg_dw.push(None);
                branch.push(qkv.clone());
            }
            Some((dw, pw)) if k > 1 => {
                let dw_p = mq.agg_dw[b].ok_or_else(|| Error::tensor(format!("{}: scale {k} missing", desc.name)))?;
                let (dd, pd) = (desc.aggregation_dw_desc(k), desc.aggregation_pw_desc(k));
                let (t, s1) = backend.linear(&qkv, dw, &dd, dw_p)?;
                let (o, s2) = backend.linear(&t, pw, &pd, mq.branch[b])?;
                stats.record(dd.name, s1, t.data.len());
                stats.record(pd.name, s2, o.data.len());
                agg_dw.push(Some(t));
                branch.push(o);
            }
            _ => return Err(Error::tensor(format!("{}: scale {k} weights do not match", desc.name))),
        }
    }
    let att_params = mq.attention;
    let units = par::map_range(branch.len() * h, |u| {
        let (b, hh) = (u / h, u % h);
        let src = &branch[b];
        let base = hh * 3 * d;
        let scales = AttentionScales {
            src: src.params.scale,
            z: mq.z[b].scale,
            k_rowsum: mq.k_rowsum[b].scale,
            out: att_params.scale,
        };
        backend.attention(
            &TokenMatrix::from_channels(src, base, d),
            &TokenMatrix::from_channels(src, base + d, d),
            &TokenMatrix::from_channels(src, base + 2 * d, d),
            &scales,
        )
    });
    let mut att = vec![0i8; desc.attention_channels() * n];
    let mut per_branch: Vec<Vec<MsaIntermediate>> = vec![Vec::with_capacity(h); branch.len()];
    let mut unit_sat = [0usize; 3];
    for (u, r) in units.into_iter().enumerate() {
        let (o, inter) = r?;
        let c0 = u * d;
        for j in 0..d {
            for tok in 0..n {
                att[(c0 + j) * n + tok] = o.at(tok, j);
            }
        }
        for (a, b) in unit_sat.iter_mut().zip(inter.saturated) {
            *a += b;
        }
        per_branch[u / h].push(inter);
    }
    let attention = QuantTensor::new(x.shape.with_channels(desc.attention_channels()), att, att_params)?;
    let units = branch.len() * h;
    stats.record(format!("{}.z", desc.name), unit_sat[0], units * d * d);
    stats.record(format!("{}.k_rowsum", desc.name), unit_sat[1], units * d);
    stats.record(format!("{}.attention", desc.name), unit_sat[2], attention.data.len());
    let proj_desc = desc.proj_desc();
    let (output, s) = backend.linear(&attention, &w.proj, &proj_desc, out)?;
    stats.record(proj_desc.name, s, output.data.len());
    Ok(QuantMsaTrace {
        qkv,
        agg_dw,
        branch,
        units: per_branch,
        attention,
        output,
        saturation: stats,
    })
}

/// Reference fixed-point MSA block.
pub fn msa_quantized(
    x: &QuantTensor,
    desc: &LayerDesc,
    w: &MsaWeights<QuantConv>,
    mq: &MsaQuant,
    out: QuantParams,
) -> Result<QuantMsaTrace> {
    msa_with(&Reference, x, desc, w, mq, out)
}

/// Run layer `i` of `model` on the backend. `input` is the output of `i - 1`
/// (or the network input) and `skip` the residual operand if any. Returns
/// the saturation of every tensor the layer quantizes.
pub fn layer_with<B: QuantBackend + ?Sized>(
    backend: &B,
    model: &QuantizedModel,
    i: usize,
    input: &QuantTensor,
    skip: Option<&QuantTensor>,
) -> Result<(QuantTensor, SaturationStats)> {
    let d = &model.graph.layer(i).desc;
    let single = |(y, s): (QuantTensor, usize)| {
        let mut st = SaturationStats::default();
        st.record(d.label(i), s, y.data.len());
        (y, st)
    };
    let out = model.params.layers[i].output;
    match (d.kind, &model.weights[i]) {
        (LayerKind::ResidualAdd, LayerWeights::None) => {
            let skip = skip.ok_or_else(|| Error::tensor(format!("layer {i}: residual operand missing")))?;
            q_residual_add_counted(input, skip, out, d.activation).map(single)
        }
        (LayerKind::MsaBlock, LayerWeights::Msa(w)) => {
            let mq = model.params.layers[i]
                .msa
                .as_ref()
                .ok_or_else(|| Error::tensor(format!("layer {i}: MSA scales missing")))?;
            let t = msa_with(backend, input, d, w, mq, out)?;
            Ok((t.output, t.saturation))
        }
        (LayerKind::MsaBlock | LayerKind::ResidualAdd, _) => Err(weights_mismatch(i)),
        (_, LayerWeights::Conv(c)) => backend.linear(input, c, d, out).map(single),
        _ => Err(weights_mismatch(i)),
    }
}

/// Layer-by-layer quantized forward pass on any backend.
pub fn forward_with<B: QuantBackend + ?Sized>(
    backend: &B,
    model: &QuantizedModel,
    input: &QuantTensor,
) -> Result<(Vec<QuantTensor>, SaturationStats)> {
    let g = &model.graph;
    let mut outs: Vec<QuantTensor> = Vec::with_capacity(g.len());
    let mut stats = SaturationStats::default();
    for i in 0..g.len() {
        let x = if i == 0 { input } else { &outs[i - 1] };
        let skip = g.skip_source(i).map(|s| if s == 0 { input } else { &outs[s - 1] });
        let (y, sat) = layer_with(backend, model, i, x, skip)?;
        stats.entries.extend(sat.entries);
        outs.push(y);
    }
    Ok((outs, stats))
}

pub fn forward_quantized(model: &QuantizedModel, input: &QuantTensor) -> Result<Vec<QuantTensor>> {
    forward_with(&Reference, model, input).map(|r| r.0)
}

pub fn forward_quantized_with_stats(
    model: &QuantizedModel,
    input: &QuantTensor,
) -> Result<(Vec<QuantTensor>, SaturationStats)> {
    forward_with(&Reference, model, input)
}
