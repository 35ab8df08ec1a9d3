//! Work partitioning across processing groups and the per-tile cycle
//! formulas of the engines (these equal the engine simulators' counts).

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::engine::{MatConfig, RpeConfig};
use crate::ir::{LayerDesc, TensorShape};

use super::hw::HardwareConfig;

/// `L = row_groups × channel_groups`; PG `p` owns row chunk
/// `p / channel_groups` and channel chunk `p % channel_groups`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub row_groups: usize,
    pub channel_groups: usize,
}

impl Grid {
    /// Every factorization of `l`, most row groups first.
    pub fn all(l: usize) -> Vec<Grid> {
        (1..=l)
            .rev()
            .filter(|r| l.is_multiple_of(*r))
            .map(|r| Grid {
                row_groups: r,
                channel_groups: l / r,
            })
            .collect()
    }

    pub fn pg(&self, p: usize) -> (usize, usize) {
        (p / self.channel_groups, p % self.channel_groups)
    }
}

/// Chunk `i` of `parts` balanced chunks of `0..total`.
pub fn chunk(i: usize, parts: usize, total: usize) -> Range<usize> {
    (i * total / parts)..((i + 1) * total / parts)
}

/// Work of one processing group for a conv-like layer: output rows, and
/// the output channels given to the RPE and the MAT.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PgTile {
    pub pg: usize,
    pub rows: Range<usize>,
    pub rpe_channels: Range<usize>,
    pub mat_channels: Range<usize>,
}

/// Cycles of the PW-type schedule for output rows `rows` and output
/// channels `channels` (sums over the groups the range touches).
pub fn pw_cycles(desc: &LayerDesc, out: TensorShape, rows: usize, channels: Range<usize>, lines: usize, lanes: usize) -> u64 {
    if channels.is_empty() || rows == 0 {
        return 0;
    }
    let cout_g = desc.out_channels / desc.groups;
    let cin_g = desc.in_channels / desc.groups;
    let per_px = (desc.kernel * desc.kernel * cin_g.div_ceil(lanes)) as u64;
    let mut lines_total = 0u64;
    let mut c = channels.start;
    while c < channels.end {
        let g_end = ((c / cout_g) + 1) * cout_g;
        let hi = g_end.min(channels.end);
        lines_total += (hi - c).div_ceil(lines) as u64;
        c = hi;
    }
    per_px * lines_total * (rows * out.width) as u64
}

pub fn rpe_pw_cycles(desc: &LayerDesc, out: TensorShape, rows: usize, channels: Range<usize>, rpe: &RpeConfig) -> u64 {
    pw_cycles(desc, out, rows, channels, rpe.m, rpe.n)
}

pub fn mat_cycles(desc: &LayerDesc, out: TensorShape, rows: usize, channels: Range<usize>, mat: &MatConfig) -> u64 {
    pw_cycles(desc, out, rows, channels, mat.s, mat.t)
}

/// DW-mode cycles: `ceil(C/N) × rows × ceil(W_out/M) × k²`.
pub fn dw_cycles(desc: &LayerDesc, out: TensorShape, rows: usize, channels: usize, rpe: &RpeConfig) -> u64 {
    (channels.div_ceil(rpe.n) * rows * out.width.div_ceil(rpe.m) * desc.kernel * desc.kernel) as u64
}

/// Best split of `channels` between the RPE (leading part) and the MAT.
pub fn split_engines(
    desc: &LayerDesc,
    out: TensorShape,
    rows: usize,
    channels: Range<usize>,
    hw: &HardwareConfig,
) -> (usize, u64) {
    let (rpe, mat) = (hw.rpe(), hw.mat());
    let mut best = (0, u64::MAX);
    for cr in (0..=channels.len()).rev() {
        let mid = channels.start + cr;
        let a = rpe_pw_cycles(desc, out, rows, channels.start..mid, &rpe);
        let b = mat_cycles(desc, out, rows, mid..channels.end, &mat);
        let v = a.max(b);
        if v < best.1 {
            best = (cr, v);
        }
    }
    best
}

/// Partition of a standalone PW-type layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPlan {
    pub grid: Grid,
    pub tiles: Vec<PgTile>,
    pub cycles: u64,
}

fn linear_plan_for(desc: &LayerDesc, out: TensorShape, grid: Grid, hw: &HardwareConfig) -> LinearPlan {
    let mut tiles = Vec::with_capacity(hw.l);
    let mut cycles = 0;
    for p in 0..hw.l {
        let (r, c) = grid.pg(p);
        let rows = chunk(r, grid.row_groups, out.height);
        let ch = chunk(c, grid.channel_groups, out.channels);
        let (cr, cyc) = split_engines(desc, out, rows.len(), ch.clone(), hw);
        cycles = cycles.max(cyc);
        let mid = ch.start + cr;
        tiles.push(PgTile {
            pg: p,
            rows,
            rpe_channels: ch.start..mid,
            mat_channels: mid..ch.end,
        });
    }
    LinearPlan { grid, tiles, cycles }
}

/// Standalone PWConv / GenericConv / MatMul on both engines of all PGs.
pub fn plan_linear(desc: &LayerDesc, out: TensorShape, hw: &HardwareConfig) -> LinearPlan {
    let mut best: Option<LinearPlan> = None;
    for grid in Grid::all(hw.l) {
        let p = linear_plan_for(desc, out, grid, hw);
        if best.as_ref().is_none_or(|b| p.cycles < b.cycles) {
            best = Some(p);
        }
    }
    best.expect("L >= 1")
}

/// Standalone DWConv on the RPEs (the MAT cannot run it).
pub fn plan_dw(desc: &LayerDesc, out: TensorShape, hw: &HardwareConfig) -> LinearPlan {
    let rpe = hw.rpe();
    let mut best: Option<LinearPlan> = None;
    for grid in Grid::all(hw.l) {
        let mut tiles = Vec::with_capacity(hw.l);
        let mut cycles = 0;
        for p in 0..hw.l {
            let (r, c) = grid.pg(p);
            let rows = chunk(r, grid.row_groups, out.height);
            let ch = chunk(c, grid.channel_groups, out.channels);
            cycles = cycles.max(dw_cycles(desc, out, rows.len(), ch.len(), &rpe));
            tiles.push(PgTile {
                pg: p,
                rows,
                mat_channels: ch.end..ch.end,
                rpe_channels: ch,
            });
        }
        if best.as_ref().is_none_or(|b| cycles < b.cycles) {
            best = Some(LinearPlan { grid, tiles, cycles });
        }
    }
    best.expect("L >= 1")
}
