use crate::error::{Error, Result};
use crate::functional::{
    check_i32, divide_rows, requantize_vec, AttentionScales, MsaIntermediate, QuantParams, QuantTensor, Requantizer,
    TokenMatrix,
};
use crate::ir::{LayerDesc, TensorShape};

use super::{mat_tile, rpe_pw_tile, MatConfig, OutputTile, RpeConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KAdderResult {
    pub k_rowsum: Vec<i32>,
    /// Cycles when run on its own: one cycle per `lanes`-wide chunk of the
    /// ReLU(Kᵀ) stream. Zero extra cycles when it taps the RPE's Z stream.
    pub standalone_cycles: u64,
}

/// Row sums of ReLU(Kᵀ) over the same N-wide token chunks the RPE reads.
pub fn kadder_execute(k_relu: &TokenMatrix, lanes: usize) -> KAdderResult {
    let (n, d) = (k_relu.rows, k_relu.cols);
    let mut k_rowsum = vec![0i32; d];
    let mut chunks = 0u64;
    for (i, sum) in k_rowsum.iter_mut().enumerate() {
        for t0 in (0..n).step_by(lanes) {
            chunks += 1;
            *sum += (t0..n.min(t0 + lanes)).map(|t| k_relu.at(t, i).max(0) as i32).sum::<i32>();
        }
    }
    KAdderResult {
        k_rowsum,
        standalone_cycles: chunks,
    }
}

/// Divider bank: `divider_count` fixed-point divisions per cycle.
pub fn divider_execute(
    dividends: &[i32],
    divisors: &[i32],
    dv: usize,
    post: &Requantizer,
    divider_count: usize,
) -> Result<(Vec<i8>, u64)> {
    if divider_count == 0 || dividends.len() != divisors.len() * dv {
        return Err(Error::tensor(format!(
            "{} dividends, {} divisors, width {dv}, {divider_count} dividers",
            dividends.len(),
            divisors.len()
        )));
    }
    let (out, _) = divide_rows(dividends, divisors, dv, post);
    Ok((out, dividends.len().div_ceil(divider_count) as u64))
}

/// Cycle and activity counts of one attention unit run on the engines.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRun {
    pub output: TokenMatrix,
    pub intermediate: MsaIntermediate,
    /// Z = ReLU(K)ᵀ·V on the RPE.
    pub rpe_cycles: u64,
    /// Divisors, then dividends ReLU(Q)·Z, on the MAT.
    pub mat_divisor_cycles: u64,
    pub mat_dividend_cycles: u64,
    pub kadder_standalone_cycles: u64,
    pub divider_cycles: u64,
    pub active_mac_cycles: u64,
}

fn unit_params() -> QuantParams {
    QuantParams::new(1.0)
}

/// ReLU linear attention of one head: Z on the RPE (K-adder-tree in its
/// shadow), divisors and dividends on the MAT, division in the divider bank.
pub fn attention_execute(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    scales: &AttentionScales,
    rpe: &RpeConfig,
    mat: &MatConfig,
    divider_count: usize,
) -> Result<AttentionRun> {
    let (n, d, dv) = (q.rows, q.cols, v.cols);
    if k.rows != n || k.cols != d || v.rows != n {
        return Err(Error::tensor(format!(
            "attention operands {}x{}, {}x{}, {}x{}",
            q.rows, q.cols, k.rows, k.cols, v.rows, v.cols
        )));
    }
    let kr = k.relu();
    let qr = q.relu();

    // Z: tokens are the reduction channels, the d key features are pixels.
    let xk = QuantTensor::new(TensorShape::new(1, n, 1, d), kr.data.clone(), unit_params())?;
    let wv = QuantTensor::new(TensorShape::new(dv, n, 1, 1), v.transpose().data, unit_params())?;
    let zdesc = LayerDesc::matmul(n, dv);
    let zr = rpe_pw_tile(&xk, &wv, &zdesc, &OutputTile { channels: 0..dv, rows: 0..1 }, rpe)?;
    let mut z = vec![0i32; d * dv];
    for j in 0..dv {
        for i in 0..d {
            z[i * dv + j] = check_i32(zr.acc[j * d + i], || "attention Z accumulator".into())?;
        }
    }
    let ka = kadder_execute(&kr, rpe.n);
    let (z_q, s1) = requantize_vec(&z, &scales.z_requant());
    let (k_rowsum_q, s2) = requantize_vec(&ka.k_rowsum, &scales.k_rowsum_requant());

    // Divisors in transposed orientation: one pixel, d input channels, n outputs.
    let xs = QuantTensor::new(TensorShape::new(1, d, 1, 1), k_rowsum_q.clone(), unit_params())?;
    let wq = QuantTensor::new(TensorShape::new(n, d, 1, 1), qr.data.clone(), unit_params())?;
    let vr = mat_tile(&xs, &wq, &LayerDesc::matmul(d, n), &OutputTile { channels: 0..n, rows: 0..1 }, mat)?;
    let divisors: Vec<i32> = vr.acc.iter().map(|&a| a as i32).collect();

    // Dividends: tokens are pixels, d input channels, dv outputs.
    let xq = QuantTensor::new(TensorShape::new(1, d, 1, n), qr.transpose().data, unit_params())?;
    let wz = QuantTensor::new(
        TensorShape::new(dv, d, 1, 1),
        TokenMatrix::new(d, dv, z_q.clone()).transpose().data,
        unit_params(),
    )?;
    let dr = mat_tile(&xq, &wz, &LayerDesc::matmul(d, dv), &OutputTile { channels: 0..dv, rows: 0..1 }, mat)?;
    let mut dividends = vec![0i32; n * dv];
    for j in 0..dv {
        for t in 0..n {
            dividends[t * dv + j] = dr.acc[j * n + t] as i32;
        }
    }
    let post = scales.division_requant();
    let (out, divider_cycles) = divider_execute(&dividends, &divisors, dv, &post, divider_count)?;
    let (_, s3) = divide_rows(&dividends, &divisors, dv, &post);
    Ok(AttentionRun {
        output: TokenMatrix::new(n, dv, out),
        intermediate: MsaIntermediate {
            z,
            z_q,
            k_rowsum: ka.k_rowsum,
            k_rowsum_q,
            dividends,
            divisors,
            saturated: [s1, s2, s3],
        },
        rpe_cycles: zr.cycles,
        mat_divisor_cycles: vr.cycles,
        mat_dividend_cycles: dr.cycles,
        kadder_standalone_cycles: ka.standalone_cycles,
        divider_cycles,
        active_mac_cycles: zr.active_mac_cycles + vr.active_mac_cycles + dr.active_mac_cycles,
    })
}
