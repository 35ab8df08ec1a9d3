//! DW→PW inter-layer fusion. The RPEs of a row group produce DW output rows
//! (each PG its own channel chunk); every PG's MAT starts its PW chunk as
//! soon as a full row is ready, and the RPE joins the PW once its DW share is
//! done.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{LayerDesc, TensorShape};

use super::hw::HardwareConfig;
use super::tiling::{chunk, dw_cycles, mat_cycles, rpe_pw_cycles, Grid};

/// Inputs of the two-phase model for one processing group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedPairParams {
    /// Output rows of the row group.
    pub rows: u64,
    /// Cycles until one more full DW output row (all channels) is ready.
    pub d_row: u64,
    /// MAT cycles for one PW row of this PG's output channels.
    pub cmat: u64,
    /// RPE cycles for the same row.
    pub crpe: u64,
    /// Whether the RPE takes PW work after finishing DW.
    pub rpe_joins: bool,
}

/// Latency of one PG under the two-phase model. Work is counted in units of
/// `1 / (cmat × crpe)` rows so both engine rates are integral: the MAT does
/// `crpe` units per cycle, the RPE `cmat`.
pub fn fused_pair_cycles(p: &FusedPairParams) -> u64 {
    let t_dw = p.rows * p.d_row;
    if p.rows == 0 || p.cmat == 0 && p.crpe == 0 {
        return t_dw;
    }
    if p.cmat == 0 {
        // The MAT has nothing to do; the RPE computes the whole PW chunk.
        return t_dw + p.rows * p.crpe;
    }
    let mut fin = 0u64;
    if !p.rpe_joins || p.crpe == 0 {
        for j in 1..=p.rows {
            fin = fin.max(j * p.d_row) + p.cmat;
        }
        return fin.max(t_dw);
    }
    let unit = p.cmat as u128 * p.crpe as u128;
    let mut done: u128 = 0;
    for j in 1..=p.rows {
        let start = fin.max(j * p.d_row);
        if start >= t_dw {
            break;
        }
        if start + p.cmat > t_dw {
            done += (t_dw - start) as u128 * p.crpe as u128;
            break;
        }
        fin = start + p.cmat;
        done += unit;
    }
    let rest = p.rows as u128 * unit - done;
    t_dw + rest.div_ceil((p.crpe + p.cmat) as u128) as u64
}

/// Fused pair schedule chosen for a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedPlan {
    pub grid: Grid,
    /// Per PG, in PG order.
    pub pgs: Vec<FusedPairParams>,
    pub cycles: u64,
}

fn plan_for(dw: &LayerDesc, pw: &LayerDesc, dw_out: TensorShape, pw_out: TensorShape, grid: Grid, hw: &HardwareConfig) -> FusedPlan {
    let (rpe, mat) = (hw.rpe(), hw.mat());
    let mut pgs = Vec::with_capacity(hw.l);
    let mut cycles = 0;
    for p in 0..hw.l {
        let (r, _) = grid.pg(p);
        let rows = chunk(r, grid.row_groups, dw_out.height).len();
        // A DW row is complete once the slowest PG of the row group finishes its chunk.
        let d_row = (0..grid.channel_groups)
            .map(|c| {
                let ch = chunk(c, grid.channel_groups, dw_out.channels).len();
                dw_cycles(dw, dw_out, 1, ch, &rpe)
            })
            .max()
            .unwrap_or(0);
        let (_, c) = grid.pg(p);
        let couts = chunk(c, grid.channel_groups, pw_out.channels);
        let params = FusedPairParams {
            rows: rows as u64,
            d_row,
            cmat: mat_cycles(pw, pw_out, 1, couts.clone(), &mat),
            crpe: rpe_pw_cycles(pw, pw_out, 1, couts, &rpe),
            rpe_joins: true,
        };
        cycles = cycles.max(fused_pair_cycles(&params));
        pgs.push(params);
    }
    FusedPlan { grid, pgs, cycles }
}

/// Row buffer the MAT reads DW output from: two rows of one PG's DW channel
/// chunk must fit in the auxiliary buffer.
pub(crate) fn aux_bytes(dw_out: TensorShape, grid: Grid) -> u64 {
    2 * (dw_out.width * dw_out.channels.div_ceil(grid.channel_groups)) as u64
}

/// Best grid for the fused pair among those whose DW row buffer fits in aux.
pub fn plan_fused_pair(
    dw: &LayerDesc,
    pw: &LayerDesc,
    dw_out: TensorShape,
    pw_out: TensorShape,
    hw: &HardwareConfig,
) -> Result<FusedPlan> {
    let mut best: Option<FusedPlan> = None;
    for grid in Grid::all(hw.l) {
        if aux_bytes(dw_out, grid) > hw.buffer_bytes.aux {
            continue;
        }
        let p = plan_for(dw, pw, dw_out, pw_out, grid, hw);
        if best.as_ref().is_none_or(|b| p.cycles < b.cycles) {
            best = Some(p);
        }
    }
    best.ok_or_else(|| {
        Error::Buffer(format!(
            "{}: no tiling keeps two DW output rows ({} bytes at best) within the {}-byte aux buffer",
            dw.name,
            aux_bytes(dw_out, Grid { row_groups: 1, channel_groups: hw.l }),
            hw.buffer_bytes.aux
        ))
    })
}
