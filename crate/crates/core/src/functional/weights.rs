use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ir::{LayerDesc, LayerKind, NetworkGraph, TensorShape};

use super::calibrate::{max_abs_scale, CalibratedParams};
use super::float_ops::{fold_batchnorm, BatchNorm};
use super::quant::{round_half_even, PostOp};
use super::tensor::{FloatTensor, QuantParams, QuantTensor};

/// Weight tensor (C_out, C_in / groups, k, k) plus one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<W, B> {
    pub weight: W,
    pub bias: Vec<B>,
}

pub type FloatConv = ConvWeights<FloatTensor, f64>;
/// int8 weights with their scale, int32 biases in the accumulator domain.
pub type QuantConv = ConvWeights<QuantTensor, i32>;

/// Parameters of one MSA block. `branches[i]` holds the depthwise and grouped
/// pointwise aggregation convs of scale `i`, `None` for the identity scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MsaWeights<C> {
    pub qkv: C,
    pub branches: Vec<Option<(C, C)>>,
    pub proj: C,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights<C> {
    Conv(C),
    Msa(MsaWeights<C>),
    None,
}

/// Deterministic random parameters; BN statistics are drawn and folded for
/// layers marked `bn_folded`.
pub struct WeightGen {
    rng: ChaCha8Rng,
}

impl WeightGen {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn conv_raw(&mut self, desc: &LayerDesc) -> FloatConv {
        let cin_g = desc.in_channels / desc.groups;
        let shape = TensorShape::new(desc.out_channels, cin_g, desc.kernel, desc.kernel);
        let fan_in = (cin_g * desc.kernel * desc.kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let rng = &mut self.rng;
        let data = (0..shape.numel()).map(|_| rng.gen_range(-bound..bound)).collect();
        let bias = (0..desc.out_channels).map(|_| rng.gen_range(-0.1..0.1)).collect();
        ConvWeights {
            weight: FloatTensor { shape, data },
            bias,
        }
    }

    pub fn batchnorm(&mut self, channels: usize) -> BatchNorm {
        let rng = &mut self.rng;
        BatchNorm {
            gamma: (0..channels).map(|_| rng.gen_range(0.5..1.5)).collect(),
            beta: (0..channels).map(|_| rng.gen_range(-0.2..0.2)).collect(),
            mean: (0..channels).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            var: (0..channels).map(|_| rng.gen_range(0.5..1.5)).collect(),
            eps: 1e-5,
        }
    }

    fn folded(&mut self, desc: &LayerDesc, bn: bool) -> FloatConv {
        let c = self.conv_raw(desc);
        if bn {
            let stats = self.batchnorm(desc.out_channels);
            let (weight, bias) = fold_batchnorm(&c.weight, &c.bias, &stats);
            ConvWeights { weight, bias }
        } else {
            c
        }
    }

    pub fn conv(&mut self, desc: &LayerDesc) -> FloatConv {
        self.folded(desc, desc.bn_folded)
    }

    pub fn msa(&mut self, desc: &LayerDesc) -> MsaWeights<FloatConv> {
        let qkv = self.conv_raw(&desc.qkv_desc());
        let branches = desc
            .msa_scales
            .iter()
            .map(|&k| {
                (k > 1).then(|| {
                    let dw = self.conv_raw(&desc.aggregation_dw_desc(k));
                    let pw = self.conv_raw(&desc.aggregation_pw_desc(k));
                    (dw, pw)
                })
            })
            .collect();
        let proj = self.folded(&desc.proj_desc(), desc.bn_folded);
        MsaWeights { qkv, branches, proj }
    }

    pub fn layer(&mut self, desc: &LayerDesc) -> LayerWeights<FloatConv> {
        match desc.kind {
            LayerKind::ResidualAdd => LayerWeights::None,
            LayerKind::MsaBlock => LayerWeights::Msa(self.msa(desc)),
            _ => LayerWeights::Conv(self.conv(desc)),
        }
    }

    pub fn network(&mut self, g: &NetworkGraph) -> Vec<LayerWeights<FloatConv>> {
        g.layers().iter().map(|l| self.layer(&l.desc)).collect()
    }

    /// Uniform random activation tensor in [-range, range].
    pub fn input(&mut self, shape: TensorShape, range: f64) -> FloatTensor {
        let rng = &mut self.rng;
        FloatTensor {
            shape,
            data: (0..shape.numel()).map(|_| rng.gen_range(-range..=range)).collect(),
        }
    }
}

/// Per-tensor symmetric weight quantization; biases move into the
/// accumulator domain `in_scale × weight_scale`.
pub fn quantize_weights(w: &FloatConv, in_scale: f64) -> QuantConv {
    let p = QuantParams::new(max_abs_scale(w.weight.max_abs()));
    let weight = super::quant::quantize(&w.weight, p);
    let acc_scale = in_scale * p.scale;
    let bias = w
        .bias
        .iter()
        .map(|&b| round_half_even(b / acc_scale).clamp(i32::MIN as f64, i32::MAX as f64) as i32)
        .collect();
    ConvWeights { weight, bias }
}

/// A network ready for integer execution: quantized parameters and every
/// activation scale.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub graph: NetworkGraph,
    pub weights: Vec<LayerWeights<QuantConv>>,
    pub params: CalibratedParams,
}

impl QuantizedModel {
    pub fn new(graph: NetworkGraph, weights: &[LayerWeights<FloatConv>], params: CalibratedParams) -> Result<Self> {
        if weights.len() != graph.len() || params.layers.len() != graph.len() {
            return Err(Error::tensor(format!(
                "{} layers, {} weight sets, {} calibrated layers",
                graph.len(),
                weights.len(),
                params.layers.len()
            )));
        }
        let mut qw = Vec::with_capacity(weights.len());
        for (i, w) in weights.iter().enumerate() {
            let s_in = params.layer_input(i).scale;
            qw.push(match (w, graph.layer(i).desc.kind) {
                (LayerWeights::None, LayerKind::ResidualAdd) => LayerWeights::None,
                (LayerWeights::Msa(m), LayerKind::MsaBlock) => {
                    let mq = params.layers[i]
                        .msa
                        .as_ref()
                        .ok_or_else(|| Error::tensor(format!("layer {i}: MSA scales missing")))?;
                    let branches = m
                        .branches
                        .iter()
                        .enumerate()
                        .map(|(b, br)| {
                            br.as_ref().map(|(dw, pw)| {
                                let dw_scale = mq.agg_dw[b].map(|p| p.scale).unwrap_or(1.0);
                                (quantize_weights(dw, mq.qkv.scale), quantize_weights(pw, dw_scale))
                            })
                        })
                        .collect();
                    LayerWeights::Msa(MsaWeights {
                        qkv: quantize_weights(&m.qkv, s_in),
                        branches,
                        proj: quantize_weights(&m.proj, mq.attention.scale),
                    })
                }
                (LayerWeights::Conv(c), k) if k != LayerKind::ResidualAdd && k != LayerKind::MsaBlock => {
                    LayerWeights::Conv(quantize_weights(c, s_in))
                }
                _ => return Err(Error::tensor(format!("layer {i}: weights do not match the layer kind"))),
            });
        }
        Ok(Self {
            graph,
            weights: qw,
            params,
        })
    }

    pub fn conv(&self, i: usize) -> Option<&QuantConv> {
        match &self.weights[i] {
            LayerWeights::Conv(c) => Some(c),
            _ => None,
        }
    }

    /// Post-processing of a conv-like layer.
    pub fn post_op(&self, i: usize) -> Option<PostOp> {
        let c = self.conv(i)?;
        let s_in = self.params.layer_input(i).scale;
        Some(PostOp::new(
            s_in * c.weight.params.scale,
            self.params.layers[i].output,
            self.graph.layer(i).desc.activation,
        ))
    }
}
