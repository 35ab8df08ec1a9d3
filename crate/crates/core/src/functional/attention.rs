use crate::error::{Error, Result};
use crate::ir::{LayerDesc, LayerKind, TensorShape};

use super::float_ops::{activation_ref, conv2d_ref};
use super::tensor::FloatTensor;
use super::weights::{FloatConv, MsaWeights};

/// Float intermediates of one (branch, head) attention unit.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParts {
    /// d x dv, row-major.
    pub z: Vec<f64>,
    pub k_rowsum: Vec<f64>,
    /// n x dv, row-major.
    pub dividends: Vec<f64>,
    pub divisors: Vec<f64>,
    /// n x dv, row-major.
    pub output: Vec<f64>,
}

/// Right-associated ReLU linear attention on token-major slices.
pub(crate) fn attention_parts(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, dv: usize) -> AttentionParts {
    let mut z = vec![0.0; d * dv];
    let mut k_rowsum = vec![0.0; d];
    for t in 0..n {
        for i in 0..d {
            let kr = k[t * d + i].max(0.0);
            k_rowsum[i] += kr;
            for j in 0..dv {
                z[i * dv + j] += kr * v[t * dv + j];
            }
        }
    }
    let mut dividends = vec![0.0; n * dv];
    let mut divisors = vec![0.0; n];
    let mut output = vec![0.0; n * dv];
    for t in 0..n {
        for i in 0..d {
            let qr = q[t * d + i].max(0.0);
            divisors[t] += qr * k_rowsum[i];
            for j in 0..dv {
                dividends[t * dv + j] += qr * z[i * dv + j];
            }
        }
        if divisors[t] != 0.0 {
            for j in 0..dv {
                output[t * dv + j] = dividends[t * dv + j] / divisors[t];
            }
        }
    }
    AttentionParts {
        z,
        k_rowsum,
        dividends,
        divisors,
        output,
    }
}

/// `O_t = ReLU(Q_t)·Z / (ReLU(Q_t)·Σ_s ReLU(K_s))` with `Z = ReLU(K)ᵀ·V`.
/// Operands have shape (1, 1, n, d): one row per token. Rows whose divisor is
/// zero produce zeros.
pub fn relu_linear_attention_ref(q: &FloatTensor, k: &FloatTensor, v: &FloatTensor) -> Result<FloatTensor> {
    let (n, d) = (q.shape.height, q.shape.width);
    if k.shape != q.shape || v.shape.height != n || q.shape.batch * q.shape.channels != 1 {
        return Err(Error::tensor(format!(
            "attention operands Q {}, K {}, V {}",
            q.shape, k.shape, v.shape
        )));
    }
    let dv = v.shape.width;
    let parts = attention_parts(&q.data, &k.data, &v.data, n, d, dv);
    Ok(FloatTensor {
        shape: TensorShape::new(1, 1, n, dv),
        data: parts.output,
    })
}

/// Every float tensor produced inside one MSA block.
#[derive(Debug, Clone, PartialEq)]
pub struct MsaTrace {
    pub qkv: FloatTensor,
    /// Per scale branch: depthwise output (None for the identity branch).
    pub agg_dw: Vec<Option<FloatTensor>>,
    /// Per scale branch: the tensor Q/K/V are read from.
    pub branch: Vec<FloatTensor>,
    /// Per branch, per head.
    pub heads: Vec<Vec<AttentionParts>>,
    /// Concatenated attention outputs (branches x heads x d channels).
    pub attention: FloatTensor,
    pub output: FloatTensor,
}

/// Token-major copy of channels `[c0, c0 + d)`.
pub(crate) fn tokens(t: &FloatTensor, c0: usize, d: usize) -> Vec<f64> {
    let n = t.shape.pixels();
    let mut out = vec![0.0; n * d];
    for j in 0..d {
        for tok in 0..n {
            out[tok * d + j] = t.data[(c0 + j) * n + tok];
        }
    }
    out
}

fn check_msa(x: &FloatTensor, desc: &LayerDesc, w: &MsaWeights<FloatConv>) -> Result<()> {
    if desc.kind != LayerKind::MsaBlock {
        return Err(Error::tensor(format!("{} is not an MsaBlock", desc.name)));
    }
    if x.shape.batch != 1 || x.shape.channels != desc.in_channels {
        return Err(Error::tensor(format!(
            "MSA input {} does not match {} input channels",
            x.shape, desc.in_channels
        )));
    }
    if w.branches.len() != desc.msa_scales.len() {
        return Err(Error::tensor(format!(
            "{} weight branches for {} scales",
            w.branches.len(),
            desc.msa_scales.len()
        )));
    }
    Ok(())
}

pub fn multi_scale_msa_trace(x: &FloatTensor, desc: &LayerDesc, w: &MsaWeights<FloatConv>) -> Result<MsaTrace> {
    check_msa(x, desc, w)?;
    let (h, d) = (desc.msa_heads, desc.msa_dim);
    let n = x.shape.pixels();
    let qkv = conv2d_ref(x, &w.qkv.weight, &w.qkv.bias, &desc.qkv_desc())?;
    let mut agg_dw = Vec::new();
    let mut branch = Vec::new();
    for (&k, bw) in desc.msa_scales.iter().zip(&w.branches) {
        match (k, bw) {
            (1, None) => {
                agg_dw.push(None);
                branch.push(qkv.clone());
            }
            (k, Some((dw, pw))) if k > 1 => {
                let t = conv2d_ref(&qkv, &dw.weight, &dw.bias, &desc.aggregation_dw_desc(k))?;
                branch.push(conv2d_ref(&t, &pw.weight, &pw.bias, &desc.aggregation_pw_desc(k))?);
                agg_dw.push(Some(t));
            }
            _ => return Err(Error::tensor(format!("scale {k} weights do not match the branch kind"))),
        }
    }
    let mut heads = Vec::new();
    let mut att = vec![0.0; desc.attention_channels() * n];
    for (b, src) in branch.iter().enumerate() {
        let mut per_head = Vec::new();
        for hh in 0..h {
            let base = hh * 3 * d;
            let parts = attention_parts(
                &tokens(src, base, d),
                &tokens(src, base + d, d),
                &tokens(src, base + 2 * d, d),
                n,
                d,
                d,
            );
            let c0 = (b * h + hh) * d;
            for j in 0..d {
                for tok in 0..n {
                    att[(c0 + j) * n + tok] = parts.output[tok * d + j];
                }
            }
            per_head.push(parts);
        }
        heads.push(per_head);
    }
    let attention = FloatTensor {
        shape: x.shape.with_channels(desc.attention_channels()),
        data: att,
    };
    let proj = conv2d_ref(&attention, &w.proj.weight, &w.proj.bias, &desc.proj_desc())?;
    let output = activation_ref(&proj, desc.activation);
    Ok(MsaTrace {
        qkv,
        agg_dw,
        branch,
        heads,
        attention,
        output,
    })
}

/// Q/K/V projection, per-scale aggregation, per-head ReLU linear attention,
/// concatenation and output projection.
pub fn multi_scale_msa_ref(x: &FloatTensor, desc: &LayerDesc, w: &MsaWeights<FloatConv>) -> Result<FloatTensor> {
    multi_scale_msa_trace(x, desc, w).map(|t| t.output)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(n: usize, d: usize, v: &[f64]) -> FloatTensor {
        FloatTensor::new(TensorShape::new(1, 1, n, d), v.to_vec()).unwrap()
    }

    #[test]
    fn negative_query_row_gives_zero() {
        let q = mat(2, 2, &[-1.0, -2.0, 1.0, 1.0]);
        let k = mat(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let v = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let o = relu_linear_attention_ref(&q, &k, &v).unwrap();
        assert_eq!(&o.data[..2], &[0.0, 0.0]);
        assert_eq!(&o.data[2..], &[2.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let q = mat(2, 2, &[0.0; 4]);
        let k = mat(1, 2, &[0.0; 2]);
        assert!(relu_linear_attention_ref(&q, &k, &q).is_err());
    }
}
