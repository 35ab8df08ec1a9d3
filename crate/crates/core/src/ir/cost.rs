use super::layer::{LayerDesc, LayerKind};
use super::shape::TensorShape;

/// Exact multiply-accumulate count of a layer applied to `input`.
///
/// An MsaBlock counts its Q/K/V projection, the aggregation convs, the two
/// attention MatMuls per head (ReLU(K)^T V and ReLU(Q) Z), the divisor
/// products ReLU(Q) k_rowsum, and the output projection. Row sums and
/// divisions are not multiplies.
pub fn layer_macs(desc: &LayerDesc, input: TensorShape) -> u64 {
    let out = match desc.output_shape(input) {
        Ok(o) => o,
        Err(_) => return 0,
    };
    let px = out.pixels() as u64 * out.batch as u64;
    let k2 = (desc.kernel * desc.kernel) as u64;
    match desc.kind {
        LayerKind::GenericConv | LayerKind::PWConv | LayerKind::MatMul | LayerKind::DWConv => {
            let cin_per_group = (desc.in_channels / desc.groups.max(1)) as u64;
            desc.out_channels as u64 * cin_per_group * k2 * px
        }
        LayerKind::MsaBlock => {
            let n = px;
            let c = desc.in_channels as u64;
            let d = desc.msa_dim as u64;
            let h = desc.msa_heads as u64;
            let qkv = 3 * h * d;
            let mut macs = qkv * c * n;
            for &k in &desc.msa_scales {
                if k > 1 {
                    macs += qkv * (k * k) as u64 * n; // depthwise aggregation
                    macs += qkv * d * n; // grouped 1x1, group width d
                }
            }
            let per_head = n * d * d + n * d * d + n * d;
            macs += desc.msa_scales.len() as u64 * h * per_head;
            macs += desc.out_channels as u64 * desc.attention_channels() as u64 * n;
            macs
        }
        LayerKind::ResidualAdd => 0,
    }
}

/// Operations, counting one MAC as two operations.
pub fn layer_ops(desc: &LayerDesc, input: TensorShape) -> u64 {
    2 * layer_macs(desc, input)
}

/// Weight bytes at one byte per FIX8 element. Biases are not counted.
pub fn weight_bytes(desc: &LayerDesc) -> u64 {
    let k2 = (desc.kernel * desc.kernel) as u64;
    match desc.kind {
        LayerKind::GenericConv | LayerKind::PWConv | LayerKind::MatMul | LayerKind::DWConv => {
            desc.out_channels as u64 * (desc.in_channels / desc.groups.max(1)) as u64 * k2
        }
        LayerKind::MsaBlock => {
            let qkv = desc.qkv_channels() as u64;
            let d = desc.msa_dim as u64;
            let mut bytes = qkv * desc.in_channels as u64;
            for &k in &desc.msa_scales {
                if k > 1 {
                    bytes += qkv * (k * k) as u64 + qkv * d;
                }
            }
            bytes + desc.out_channels as u64 * desc.attention_channels() as u64
        }
        LayerKind::ResidualAdd => 0,
    }
}

/// DRAM traffic of one layer: weights, plus the input unless it arrives from
/// an on-chip producer, plus the output unless an on-chip consumer takes it.
/// A ResidualAdd reads two operands.
pub fn layer_dram_bytes(desc: &LayerDesc, input: TensorShape, fused_input: bool, fused_output: bool) -> u64 {
    let out = desc.output_shape(input).map(|o| o.numel() as u64).unwrap_or(0);
    let operands = if desc.kind == LayerKind::ResidualAdd { 2 } else { 1 };
    let mut bytes = weight_bytes(desc);
    if !fused_input {
        bytes += operands * input.numel() as u64;
    }
    if !fused_output {
        bytes += out;
    }
    bytes
}
