//! Independent oracles shared by the integration tests. Cycle counts here
//! come from running the engine simulators on tiles and from cycle-stepped
//! simulations, never from the scheduler's closed forms.
#![allow(dead_code)]

use std::collections::HashMap;
use std::ops::Range;

use hvsim_core::engine::{attention_execute, mat_tile, rpe_dw_tile, rpe_pw_tile, OutputTile};
use hvsim_core::functional::{AttentionScales, FloatTensor, QuantParams, QuantTensor, TokenMatrix};
use hvsim_core::ir::{LayerDesc, TensorShape};
use hvsim_core::sched::HardwareConfig;
use rand::Rng;

pub fn random_qt(rng: &mut impl Rng, shape: TensorShape) -> QuantTensor {
    let data = (0..shape.numel()).map(|_| rng.gen_range(-128i32..=127) as i8).collect();
    QuantTensor::new(shape, data, QuantParams::new(0.02)).unwrap()
}

pub fn random_tokens(rng: &mut impl Rng, n: usize, d: usize) -> TokenMatrix {
    TokenMatrix::new(n, d, (0..n * d).map(|_| rng.gen_range(-128i32..=127) as i8).collect())
}

/// Output shape by the textbook formula.
pub fn out_shape(x: TensorShape, desc: &LayerDesc) -> TensorShape {
    let f = |i: usize| (i + 2 * desc.padding - desc.kernel) / desc.stride + 1;
    TensorShape::new(x.batch, desc.out_channels, f(x.height), f(x.width))
}

/// Direct-summation accumulators (no bias), NCHW.
pub fn direct_conv_acc(x: &QuantTensor, w: &QuantTensor, desc: &LayerDesc) -> (TensorShape, Vec<i64>) {
    let os = out_shape(x.shape, desc);
    let (k, s, p) = (desc.kernel as isize, desc.stride as isize, desc.padding as isize);
    let cin_g = desc.in_channels / desc.groups;
    let cout_g = desc.out_channels / desc.groups;
    let mut acc = vec![0i64; os.numel()];
    for oc in 0..os.channels {
        let g = oc / cout_g;
        for oy in 0..os.height {
            for ox in 0..os.width {
                let mut sum = 0i64;
                for ic in 0..cin_g {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy as isize * s - p + ky;
                            let ix = ox as isize * s - p + kx;
                            if iy < 0 || ix < 0 || iy >= x.shape.height as isize || ix >= x.shape.width as isize {
                                continue;
                            }
                            let xv = x.at(0, g * cin_g + ic, iy as usize, ix as usize) as i64;
                            let wv = w.at(oc, ic, ky as usize, kx as usize) as i64;
                            sum += xv * wv;
                        }
                    }
                }
                acc[(oc * os.height + oy) * os.width + ox] = sum;
            }
        }
    }
    (os, acc)
}

/// Weight tensor shape of a conv-like layer.
pub fn weight_shape(desc: &LayerDesc) -> TensorShape {
    TensorShape::new(desc.out_channels, desc.in_channels / desc.groups, desc.kernel, desc.kernel)
}

/// Balanced chunk `i` of `parts`.
pub fn part(i: usize, parts: usize, total: usize) -> Range<usize> {
    (i * total / parts)..((i + 1) * total / parts)
}

pub fn grids(l: usize) -> Vec<(usize, usize)> {
    (1..=l).filter(|r| l.is_multiple_of(*r)).map(|r| (r, l / r)).collect()
}

/// Measures engine tile cycles, memoized by tile geometry.
pub struct TileClock<'a> {
    pub x: &'a QuantTensor,
    pub w: &'a QuantTensor,
    pub desc: &'a LayerDesc,
    pub hw: &'a HardwareConfig,
    memo: HashMap<(u8, usize, usize, usize, usize), u64>,
}

impl<'a> TileClock<'a> {
    pub fn new(x: &'a QuantTensor, w: &'a QuantTensor, desc: &'a LayerDesc, hw: &'a HardwareConfig) -> Self {
        Self {
            x,
            w,
            desc,
            hw,
            memo: HashMap::new(),
        }
    }

    fn run(&mut self, eng: u8, rows: Range<usize>, ch: Range<usize>) -> u64 {
        if rows.is_empty() || ch.is_empty() {
            return 0;
        }
        // Cycles do not depend on which rows, only on how many.
        let key = (eng, rows.len(), 0, ch.start, ch.end);
        if let Some(&c) = self.memo.get(&key) {
            return c;
        }
        let tile = OutputTile {
            channels: ch,
            rows: 0..rows.len(),
        };
        let c = match eng {
            0 => rpe_pw_tile(self.x, self.w, self.desc, &tile, &self.hw.rpe()),
            1 => mat_tile(self.x, self.w, self.desc, &tile, &self.hw.mat()),
            _ => rpe_dw_tile(self.x, self.w, self.desc, &tile, &self.hw.rpe()),
        }
        .unwrap()
        .cycles;
        self.memo.insert(key, c);
        c
    }

    pub fn rpe(&mut self, rows: Range<usize>, ch: Range<usize>) -> u64 {
        self.run(0, rows, ch)
    }
    pub fn mat(&mut self, rows: Range<usize>, ch: Range<usize>) -> u64 {
        self.run(1, rows, ch)
    }
    pub fn dw(&mut self, rows: Range<usize>, ch: Range<usize>) -> u64 {
        self.run(2, rows, ch)
    }
}

/// Best latency of a standalone PW-type layer over every grid and every
/// RPE/MAT split, timed on the engines.
pub fn linear_oracle(x: &QuantTensor, w: &QuantTensor, desc: &LayerDesc, hw: &HardwareConfig) -> u64 {
    let os = out_shape(x.shape, desc);
    let mut clk = TileClock::new(x, w, desc, hw);
    let mut best = u64::MAX;
    for (pr, pc) in grids(hw.l) {
        let mut worst = 0;
        for p in 0..hw.l {
            let rows = part(p / pc, pr, os.height);
            let ch = part(p % pc, pc, os.channels);
            let mut pg = u64::MAX;
            for mid in ch.clone().chain([ch.end]) {
                let a = clk.rpe(rows.clone(), ch.start..mid);
                let b = clk.mat(rows.clone(), mid..ch.end);
                pg = pg.min(a.max(b));
            }
            worst = worst.max(pg);
        }
        best = best.min(worst);
    }
    best
}

/// Best latency of a standalone DWConv over every grid, RPEs only.
pub fn dw_oracle(x: &QuantTensor, w: &QuantTensor, desc: &LayerDesc, hw: &HardwareConfig) -> u64 {
    let os = out_shape(x.shape, desc);
    let mut clk = TileClock::new(x, w, desc, hw);
    grids(hw.l)
        .into_iter()
        .map(|(pr, pc)| {
            (0..hw.l)
                .map(|p| clk.dw(part(p / pc, pr, os.height), part(p % pc, pc, os.channels)))
                .max()
                .unwrap()
        })
        .min()
        .unwrap()
}

/// Cycle-stepped model of one PG of a fused DW→PW pair. The RPE spends
/// `rows × d_row` cycles on DW rows; the MAT works on row `j` only once it
/// is complete; when DW is done the RPE joins and the remaining PW work is
/// shared at the two engines' combined rate.
pub fn fused_pg_des(rows: u64, d_row: u64, cmat: u64, crpe: u64) -> u64 {
    let t_dw = rows * d_row;
    if rows == 0 || cmat == 0 {
        return t_dw + rows * crpe;
    }
    // One PW row is `cmat × crpe` units; the MAT does `crpe` per cycle, the RPE `cmat`.
    let unit = cmat * crpe;
    let total = rows * unit;
    let (mut done, mut row, mut progress, mut t) = (0u64, 0u64, 0u64, 0u64);
    while done + progress < total {
        if t < t_dw {
            if row < rows && (row + 1) * d_row <= t {
                progress += crpe;
                if progress == unit {
                    done += unit;
                    progress = 0;
                    row += 1;
                }
            }
        } else {
            done += progress + crpe + cmat;
            progress = 0;
        }
        t += 1;
    }
    t.max(t_dw)
}

/// Best latency of a fused DW→PW pair over grids whose two-row DW buffer
/// fits the auxiliary buffer, with per-row costs timed on the engines.
#[allow(clippy::too_many_arguments)]
pub fn fused_pair_oracle(
    x: &QuantTensor,
    wdw: &QuantTensor,
    dw: &LayerDesc,
    mid: &QuantTensor,
    wpw: &QuantTensor,
    pw: &LayerDesc,
    hw: &HardwareConfig,
) -> Option<u64> {
    let dso = out_shape(x.shape, dw);
    let pso = out_shape(mid.shape, pw);
    let mut dclk = TileClock::new(x, wdw, dw, hw);
    let mut pclk = TileClock::new(mid, wpw, pw, hw);
    let mut best: Option<u64> = None;
    for (pr, pc) in grids(hw.l) {
        let widest = (0..pc).map(|c| part(c, pc, dso.channels).len()).max().unwrap();
        if (2 * dso.width * widest) as u64 > hw.buffer_bytes.aux {
            continue;
        }
        let d_row = (0..pc).map(|c| dclk.dw(0..1, part(c, pc, dso.channels))).max().unwrap();
        let mut worst = 0;
        for p in 0..hw.l {
            let rows = part(p / pc, pr, dso.height).len() as u64;
            let couts = part(p % pc, pc, pso.channels);
            let cmat = pclk.mat(0..1, couts.clone());
            let crpe = pclk.rpe(0..1, couts);
            worst = worst.max(fused_pg_des(rows, d_row, cmat, crpe));
        }
        best = Some(best.map_or(worst, |b: u64| b.min(worst)));
    }
    best
}

/// Per-unit attention costs measured by running the attention engines.
#[derive(Debug, Clone)]
pub struct UnitCosts {
    pub n: u64,
    pub d: u64,
    pub rpe: u64,
    pub kadder: u64,
    /// (tokens, MAT divisor cycles) per divisor tile.
    pub tiles: Vec<(u64, u64)>,
    pub row: u64,
    pub dc: u64,
}

pub fn measure_unit(rng: &mut impl Rng, n: usize, d: usize, hw: &HardwareConfig) -> UnitCosts {
    let q = random_tokens(rng, n, d);
    let k = random_tokens(rng, n, d);
    let v = random_tokens(rng, n, d);
    let scales = AttentionScales {
        src: 1.0,
        z: 1e3,
        k_rowsum: 1e2,
        out: 0.01,
    };
    let r = attention_execute(&q, &k, &v, &scales, &hw.rpe(), &hw.mat(), hw.divider_count).unwrap();
    assert_eq!(r.mat_dividend_cycles % n as u64, 0);
    assert_eq!(r.divider_cycles, ((n * d) as u64).div_ceil(hw.divider_count as u64));
    // Divisor tiles: a double-buffered 32-bit divisor per token.
    let cap = (hw.buffer_bytes.divisor / 8) as usize;
    let mut tiles = Vec::new();
    let mut t0 = 0;
    while t0 < n {
        let nt = cap.min(n - t0);
        let xs = random_qt(rng, TensorShape::new(1, d, 1, 1));
        let wq = random_qt(rng, TensorShape::new(nt, d, 1, 1));
        let tile = OutputTile { channels: 0..nt, rows: 0..1 };
        let c = mat_tile(&xs, &wq, &LayerDesc::matmul(d, nt), &tile, &hw.mat()).unwrap().cycles;
        tiles.push((nt as u64, c));
        t0 += nt;
    }
    if tiles.len() == 1 {
        assert_eq!(tiles[0].1, r.mat_divisor_cycles);
    }
    UnitCosts {
        n: n as u64,
        d: d as u64,
        rpe: r.rpe_cycles,
        kadder: r.kadder_standalone_cycles,
        tiles,
        row: r.mat_dividend_cycles / n as u64,
        dc: hw.divider_count as u64,
    }
}

/// Event log of [`attention_des`], per unit.
#[derive(Debug, Clone, Default)]
pub struct UnitEvents {
    pub rpe_start: u64,
    pub z_ready: u64,
    pub mat_start: u64,
    pub mat_end: u64,
    pub div_end: u64,
}

/// Cycle-stepped co-simulation of `units` attention units on one PG:
/// RPE (Z, with the K-adder-tree beside it), MAT (divisor tiles, then one
/// dividend row at a time) and a divider bank taking up to `dc` elements of
/// one unit per cycle from the rows the MAT has completed, the completing
/// cycle included. Z is double-buffered. `kadder_overlap = false` runs the
/// K-adder-tree after the RPE instead of beside it.
pub fn attention_des(c: &UnitCosts, units: usize, kadder_overlap: bool) -> (u64, Vec<UnitEvents>) {
    if units == 0 {
        return (0, vec![]);
    }
    let mut ev = vec![UnitEvents::default(); units];
    let z_time = if kadder_overlap { c.rpe.max(c.kadder) } else { c.rpe + c.kadder };
    // RPE state.
    let (mut rpe_unit, mut rpe_left, mut rpe_busy) = (0usize, 0u64, false);
    let mut z_ready = vec![u64::MAX; units];
    // MAT state: step list per unit of (cycles, tokens emitted at the end).
    let steps: Vec<(u64, u64)> = c
        .tiles
        .iter()
        .flat_map(|&(nt, dcyc)| std::iter::once((dcyc, 0)).chain((0..nt).map(|_| (c.row, 1))))
        .collect();
    let (mut mat_unit, mut mat_step, mut mat_left, mut mat_busy) = (0usize, 0usize, 0u64, false);
    let mut mat_done = vec![u64::MAX; units];
    // Divider state: elements released per unit, elements divided per unit.
    let mut released = vec![0u64; units];
    let mut divided = vec![0u64; units];
    let mut div_unit = 0usize;
    let per_unit = c.n * c.d;
    let mut t = 0u64;
    loop {
        // RPE: unit j may start once unit j-2's Z slot has been consumed.
        if !rpe_busy && rpe_unit < units && (rpe_unit < 2 || mat_done[rpe_unit - 2] <= t) {
            rpe_busy = true;
            rpe_left = z_time;
            ev[rpe_unit].rpe_start = t;
        }
        if !mat_busy && mat_unit < units && z_ready[mat_unit] <= t {
            mat_busy = true;
            mat_step = 0;
            mat_left = steps[0].0;
            ev[mat_unit].mat_start = t;
        }
        // Work of cycle t.
        if rpe_busy {
            rpe_left -= 1;
            if rpe_left == 0 {
                z_ready[rpe_unit] = t + 1;
                ev[rpe_unit].z_ready = t + 1;
                rpe_busy = false;
                rpe_unit += 1;
            }
        }
        if mat_busy {
            // Zero-cycle steps (none expected) are skipped.
            while mat_left == 0 && mat_step + 1 < steps.len() {
                mat_step += 1;
                mat_left = steps[mat_step].0;
            }
            let mut finished_step = false;
            if mat_left > 0 {
                mat_left -= 1;
                finished_step = mat_left == 0;
            }
            if finished_step {
                released[mat_unit] += steps[mat_step].1 * c.d;
                if mat_step + 1 < steps.len() {
                    mat_step += 1;
                    mat_left = steps[mat_step].0;
                } else {
                    mat_done[mat_unit] = t + 1;
                    ev[mat_unit].mat_end = t + 1;
                    mat_busy = false;
                    mat_unit += 1;
                }
            }
        }
        if div_unit < units {
            let avail = released[div_unit] - divided[div_unit];
            let take = avail.min(c.dc);
            divided[div_unit] += take;
            if divided[div_unit] == per_unit && mat_done[div_unit] <= t + 1 {
                ev[div_unit].div_end = t + 1;
                div_unit += 1;
                if div_unit == units {
                    return (t + 1, ev);
                }
            }
        }
        t += 1;
    }
}

/// Round-robin units per PG, simulated PG by PG.
pub fn attention_oracle(c: &UnitCosts, units: usize, l: usize) -> u64 {
    (0..l)
        .map(|p| attention_des(c, (p..units).step_by(l).count(), true).0)
        .max()
        .unwrap()
}

/// Float direct-summation conv with bias.
pub fn direct_conv_f64(x: &FloatTensor, w: &FloatTensor, bias: &[f64], desc: &LayerDesc) -> FloatTensor {
    let os = out_shape(x.shape, desc);
    let (k, s, p) = (desc.kernel as isize, desc.stride as isize, desc.padding as isize);
    let cin_g = desc.in_channels / desc.groups;
    let cout_g = desc.out_channels / desc.groups;
    FloatTensor::from_fn(os, |_, oc, oy, ox| {
        let g = oc / cout_g;
        let mut sum = bias[oc];
        for ic in 0..cin_g {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = oy as isize * s - p + ky;
                    let ix = ox as isize * s - p + kx;
                    if iy >= 0 && ix >= 0 && iy < x.shape.height as isize && ix < x.shape.width as isize {
                        sum += x.at(0, g * cin_g + ic, iy as usize, ix as usize) * w.at(oc, ic, ky as usize, kx as usize);
                    }
                }
            }
        }
        sum
    })
}

/// Left-associated ReLU attention: the n×n similarity matrix
/// ReLU(Q)·ReLU(K)ᵀ first, then its product with V and its row sums.
/// Token-major slices; returns (output, similarity).
pub fn left_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, dv: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sim = vec![0.0; n * n];
    for t in 0..n {
        for s in 0..n {
            sim[t * n + s] = (0..d).map(|i| q[t * d + i].max(0.0) * k[s * d + i].max(0.0)).sum();
        }
    }
    let mut out = vec![0.0; n * dv];
    for t in 0..n {
        let den: f64 = sim[t * n..(t + 1) * n].iter().sum();
        if den == 0.0 {
            continue;
        }
        for j in 0..dv {
            out[t * dv + j] = (0..n).map(|s| sim[t * n + s] * v[s * dv + j]).sum::<f64>() / den;
        }
    }
    (out, sim)
}
