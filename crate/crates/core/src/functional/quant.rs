use crate::error::{Error, Result};
use crate::ir::{Activation, LayerDesc};

use super::float_ops::{check_conv_shapes, hardswish};
use super::tensor::{FloatTensor, QuantParams, QuantTensor, TokenMatrix};

/// Fractional bits kept by the attention dividers.
pub const DIVISION_GUARD_BITS: u32 = 8;

pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

/// Quantize one value; the flag reports saturation.
#[inline]
pub(crate) fn quantize_value(x: f64, scale: f64) -> (i8, bool) {
    let r = round_half_even(x / scale);
    if r > 127.0 {
        (127, true)
    } else if r < -128.0 {
        (-128, true)
    } else {
        (r as i8, false)
    }
}

#[inline]
pub(crate) fn clamp_i8(v: i64) -> (i8, bool) {
    if v > 127 {
        (127, true)
    } else if v < -128 {
        (-128, true)
    } else {
        (v as i8, false)
    }
}

pub fn quantize(x: &FloatTensor, p: QuantParams) -> QuantTensor {
    QuantTensor {
        shape: x.shape,
        data: x.data.iter().map(|&v| quantize_value(v, p.scale).0).collect(),
        params: p,
    }
}

pub fn dequantize(q: &QuantTensor) -> FloatTensor {
    FloatTensor {
        shape: q.shape,
        data: q.data.iter().map(|&v| v as f64 * q.params.scale).collect(),
    }
}

/// Right shift with round-half-even on the discarded bits.
#[inline]
fn rshift_rhe(v: i128, s: u32) -> i128 {
    if s == 0 {
        return v;
    }
    let q = v >> s;
    let r = v - (q << s);
    let half = 1i128 << (s - 1);
    if r > half || (r == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Integer division rounded half to even.
#[inline]
pub(crate) fn div_rhe(n: i64, d: i64) -> i64 {
    debug_assert!(d != 0);
    let (n, d) = if d < 0 { (-n, -d) } else { (n, d) };
    let q = n.div_euclid(d);
    let r2 = 2 * n.rem_euclid(d);
    if r2 > d || (r2 == d && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Real multiplier `m` approximated as `multiplier / 2^shift` with a 31-bit
/// mantissa; applied with round-half-even.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requantizer {
    pub multiplier: i64,
    pub shift: i32,
}

const MAX_SHIFT: i32 = 62;

impl Requantizer {
    pub fn from_real(m: f64) -> Self {
        assert!(m.is_finite() && m >= 0.0, "requantization multiplier must be finite and nonnegative, got {m}");
        if m == 0.0 {
            return Self { multiplier: 0, shift: 0 };
        }
        let mut exp = m.log2().floor() as i32 + 1;
        let mut mant = m / 2f64.powi(exp);
        while mant >= 1.0 {
            mant /= 2.0;
            exp += 1;
        }
        while mant < 0.5 {
            mant *= 2.0;
            exp -= 1;
        }
        let mut multiplier = round_half_even(mant * (1u64 << 31) as f64) as i64;
        if multiplier == 1 << 31 {
            multiplier >>= 1;
            exp += 1;
        }
        let shift = 31 - exp;
        if shift > MAX_SHIFT {
            return Self { multiplier: 0, shift: 0 };
        }
        Self { multiplier, shift }
    }

    pub fn real(&self) -> f64 {
        self.multiplier as f64 * 2f64.powi(-self.shift)
    }

    #[inline]
    pub fn apply(&self, acc: i64) -> i64 {
        let v = acc as i128 * self.multiplier as i128;
        let r = if self.shift >= 0 {
            rshift_rhe(v, self.shift as u32)
        } else {
            v << (-self.shift) as u32
        };
        r.clamp(i64::MIN as i128, i64::MAX as i128) as i64
    }
}

/// Post-processing of one int32 accumulator: requantize, then activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostOp {
    /// Real value of one accumulator LSB (input scale × weight scale).
    pub acc_scale: f64,
    pub out: QuantParams,
    pub activation: Activation,
    pub requant: Requantizer,
}

impl PostOp {
    pub fn new(acc_scale: f64, out: QuantParams, activation: Activation) -> Self {
        Self {
            acc_scale,
            out,
            activation,
            requant: Requantizer::from_real(acc_scale / out.scale),
        }
    }

    #[inline]
    pub fn apply(&self, acc: i64) -> (i8, bool) {
        match self.activation {
            Activation::Hardswish => quantize_value(hardswish(acc as f64 * self.acc_scale), self.out.scale),
            Activation::ReLU => clamp_i8(self.requant.apply(acc).max(0)),
            Activation::None => clamp_i8(self.requant.apply(acc)),
        }
    }
}

#[inline]
pub(crate) fn check_i32(value: i64, context: impl FnOnce() -> String) -> Result<i32> {
    i32::try_from(value).map_err(|_| Error::AccumulatorOverflow {
        value,
        context: context(),
    })
}

/// Add biases, check the 32-bit accumulator range and post-process a
/// channel-major accumulator block. Returns the bytes and the saturation count.
pub(crate) fn finish_accumulators(
    acc: &[i64],
    plane: usize,
    channel0: usize,
    bias: &[i32],
    post: &PostOp,
    context: &str,
) -> Result<(Vec<i8>, usize)> {
    let mut out = Vec::with_capacity(acc.len());
    let mut saturated = 0;
    for (i, &a) in acc.iter().enumerate() {
        let c = channel0 + i / plane.max(1);
        let v = check_i32(a + bias[c] as i64, || format!("{context}, output channel {c}"))?;
        let (q, sat) = post.apply(v as i64);
        saturated += sat as usize;
        out.push(q);
    }
    Ok((out, saturated))
}

pub(crate) fn conv_output_shape(x: &QuantTensor, w: &QuantTensor, desc: &LayerDesc) -> Result<crate::ir::TensorShape> {
    check_conv_shapes(x.shape, w.shape, desc.out_channels, desc)
}

/// Raw integer MAC sums (no bias) in (N, C_out, H_out, W_out) order.
pub fn conv_accumulate(x: &QuantTensor, w: &QuantTensor, desc: &LayerDesc) -> Result<Vec<i64>> {
    let os = check_conv_shapes(x.shape, w.shape, desc.out_channels, desc)?;
    let (k, s, p) = (desc.kernel, desc.stride, desc.padding);
    let cin_g = x.shape.channels / desc.groups;
    let cout_g = desc.out_channels / desc.groups;
    let (h, wd) = (x.shape.height as isize, x.shape.width as isize);
    let mut acc = Vec::with_capacity(os.numel());
    for n in 0..os.batch {
        for oc in 0..os.channels {
            let g = oc / cout_g;
            for oy in 0..os.height {
                for ox in 0..os.width {
                    let mut a = 0i64;
                    for icg in 0..cin_g {
                        let ic = g * cin_g + icg;
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= wd {
                                    continue;
                                }
                                a += x.at(n, ic, iy as usize, ix as usize) as i64 * w.at(oc, icg, ky, kx) as i64;
                            }
                        }
                    }
                    acc.push(a);
                }
            }
        }
    }
    Ok(acc)
}

/// FIX8 convolution / matmul: integer MACs, 32-bit bias add, round-half-even
/// requantization to `out_params`, then `desc.activation`.
pub fn qlinear(
    x: &QuantTensor,
    w: &QuantTensor,
    bias32: &[i32],
    desc: &LayerDesc,
    out_params: QuantParams,
) -> Result<QuantTensor> {
    let os = check_conv_shapes(x.shape, w.shape, bias32.len(), desc)?;
    let acc = conv_accumulate(x, w, desc)?;
    let post = PostOp::new(x.params.scale * w.params.scale, out_params, desc.activation);
    let plane = os.pixels();
    let mut data = Vec::with_capacity(acc.len());
    for chunk in acc.chunks(os.channels * plane) {
        data.extend(finish_accumulators(chunk, plane, 0, bias32, &post, &desc.name)?.0);
    }
    QuantTensor::new(os, data, out_params)
}

/// `q(s_a·a + s_b·b)`: two integer multipliers on a common shift, one rounding.
pub fn q_residual_add(
    a: &QuantTensor,
    b: &QuantTensor,
    out_params: QuantParams,
    activation: Activation,
) -> Result<QuantTensor> {
    q_residual_add_counted(a, b, out_params, activation).map(|r| r.0)
}

pub(crate) fn q_residual_add_counted(
    a: &QuantTensor,
    b: &QuantTensor,
    out_params: QuantParams,
    activation: Activation,
) -> Result<(QuantTensor, usize)> {
    if a.shape != b.shape {
        return Err(Error::tensor(format!("residual operands {} and {}", a.shape, b.shape)));
    }
    let ra = Requantizer::from_real(a.params.scale / out_params.scale);
    let rb = Requantizer::from_real(b.params.scale / out_params.scale);
    let shift = ra.shift.max(rb.shift);
    let term = |r: &Requantizer, v: i8| -> i128 {
        let t = v as i128 * r.multiplier as i128;
        let up = shift - r.shift;
        if r.multiplier == 0 {
            0
        } else {
            t << up as u32
        }
    };
    let mut saturated = 0;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let (q, sat) = match activation {
                Activation::Hardswish => quantize_value(
                    hardswish(x as f64 * a.params.scale + y as f64 * b.params.scale),
                    out_params.scale,
                ),
                _ => {
                    let sum = term(&ra, x) + term(&rb, y);
                    let v = if shift >= 0 {
                        rshift_rhe(sum, shift as u32)
                    } else {
                        sum << (-shift) as u32
                    };
                    let v = v.clamp(i64::MIN as i128, i64::MAX as i128) as i64;
                    clamp_i8(if activation == Activation::ReLU { v.max(0) } else { v })
                }
            };
            saturated += sat as usize;
            q
        })
        .collect();
    Ok((QuantTensor::new(a.shape, data, out_params)?, saturated))
}

/// `round_half_even(dividend·2⁸ / divisor)` requantized by `post`; a zero
/// divisor yields 0.
#[inline]
pub fn fixed_divide(dividend: i64, divisor: i64, post: &Requantizer) -> i8 {
    if divisor == 0 {
        return 0;
    }
    let ratio = div_rhe(dividend << DIVISION_GUARD_BITS, divisor);
    clamp_i8(post.apply(ratio)).0
}

/// Real scales of the attention operands of one branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionScales {
    /// Scale of Q, K and V (they come from the same tensor).
    pub src: f64,
    pub z: f64,
    pub k_rowsum: f64,
    pub out: f64,
}

impl AttentionScales {
    pub fn z_requant(&self) -> Requantizer {
        Requantizer::from_real(self.src * self.src / self.z)
    }

    pub fn k_rowsum_requant(&self) -> Requantizer {
        Requantizer::from_real(self.src / self.k_rowsum)
    }

    /// Maps `dividend·2⁸/divisor` onto the output scale.
    pub fn division_requant(&self) -> Requantizer {
        Requantizer::from_real(self.z / (self.k_rowsum * self.out) / (1u32 << DIVISION_GUARD_BITS) as f64)
    }
}

/// Integer intermediates of one attention unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MsaIntermediate {
    /// `ReLU(K)ᵀ·V` in int32, d x dv row-major.
    pub z: Vec<i32>,
    pub z_q: Vec<i8>,
    pub k_rowsum: Vec<i32>,
    pub k_rowsum_q: Vec<i8>,
    /// `ReLU(Q)·Z_q`, n x dv row-major.
    pub dividends: Vec<i32>,
    /// `ReLU(Q)·k_rowsum_q`, length n.
    pub divisors: Vec<i32>,
    /// Elements clamped while requantizing Z, requantizing k_rowsum and dividing.
    pub saturated: [usize; 3],
}

pub(crate) fn requantize_vec(acc: &[i32], r: &Requantizer) -> (Vec<i8>, usize) {
    let mut sat = 0;
    let v = acc
        .iter()
        .map(|&a| {
            let (q, s) = clamp_i8(r.apply(a as i64));
            sat += s as usize;
            q
        })
        .collect();
    (v, sat)
}

/// Divide every dividend row by its divisor; returns output bytes and the
/// saturation count.
pub(crate) fn divide_rows(
    dividends: &[i32],
    divisors: &[i32],
    dv: usize,
    post: &Requantizer,
) -> (Vec<i8>, usize) {
    let mut sat = 0;
    let mut out = Vec::with_capacity(dividends.len());
    for (t, row) in dividends.chunks(dv).enumerate() {
        for &num in row {
            if divisors[t] == 0 {
                out.push(0);
                continue;
            }
            let ratio = div_rhe((num as i64) << DIVISION_GUARD_BITS, divisors[t] as i64);
            let (q, s) = clamp_i8(post.apply(ratio));
            sat += s as usize;
            out.push(q);
        }
    }
    (out, sat)
}

/// Fixed-point ReLU linear attention on token-major int8 operands.
pub fn q_attention(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    scales: &AttentionScales,
) -> Result<(TokenMatrix, MsaIntermediate)> {
    let (n, d, dv) = (q.rows, q.cols, v.cols);
    if k.rows != n || k.cols != d || v.rows != n {
        return Err(Error::tensor(format!(
            "attention operands {}x{}, {}x{}, {}x{}",
            q.rows, q.cols, k.rows, k.cols, v.rows, v.cols
        )));
    }
    let mut z64 = vec![0i64; d * dv];
    let mut ks64 = vec![0i64; d];
    for t in 0..n {
        for i in 0..d {
            let kr = k.at(t, i).max(0) as i64;
            ks64[i] += kr;
            for j in 0..dv {
                z64[i * dv + j] += kr * v.at(t, j) as i64;
            }
        }
    }
    let z = z64
        .iter()
        .map(|&a| check_i32(a, || "attention Z accumulator".into()))
        .collect::<Result<Vec<_>>>()?;
    let k_rowsum = ks64
        .iter()
        .map(|&a| check_i32(a, || "attention k_rowsum accumulator".into()))
        .collect::<Result<Vec<_>>>()?;
    let (z_q, s1) = requantize_vec(&z, &scales.z_requant());
    let (k_rowsum_q, s2) = requantize_vec(&k_rowsum, &scales.k_rowsum_requant());
    let mut dividends = vec![0i32; n * dv];
    let mut divisors = vec![0i32; n];
    for t in 0..n {
        for i in 0..d {
            let qr = q.at(t, i).max(0) as i32;
            divisors[t] += qr * k_rowsum_q[i] as i32;
            for j in 0..dv {
                dividends[t * dv + j] += qr * z_q[i * dv + j] as i32;
            }
        }
    }
    let (out, s3) = divide_rows(&dividends, &divisors, dv, &scales.division_requant());
    Ok((
        TokenMatrix::new(n, dv, out),
        MsaIntermediate {
            z,
            z_q,
            k_rowsum,
            k_rowsum_q,
            dividends,
            divisors,
            saturated: [s1, s2, s3],
        },
    ))
}
