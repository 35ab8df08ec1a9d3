//! Cycle-true models of one processing group's compute units. Every engine
//! returns functional outputs together with cycle and activity counts;
//! pipeline fill and drain are excluded (steady state).

mod attention;
mod mat;
mod pw;
mod rpe;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::{finish_accumulators, PostOp, QuantConv, QuantParams, QuantTensor};
use crate::ir::{LayerDesc, TensorShape};

pub use attention::{attention_execute, divider_execute, kadder_execute, AttentionRun, KAdderResult};
pub use mat::{mat_execute, mat_tile};
pub use rpe::{rpe_dw_execute, rpe_dw_tile, rpe_pw_execute, rpe_pw_tile};

/// `M` PE lines of `N` MACs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpeConfig {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
}

/// `S` adder trees fed by `T` multipliers each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatConfig {
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "T")]
    pub t: usize,
}

impl RpeConfig {
    pub fn multipliers(&self) -> usize {
        self.m * self.n
    }
}

impl MatConfig {
    pub fn multipliers(&self) -> usize {
        self.s * self.t
    }
}

impl Default for RpeConfig {
    fn default() -> Self {
        Self { m: 8, n: 8 }
    }
}

impl Default for MatConfig {
    fn default() -> Self {
        Self { s: 8, t: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineResult {
    pub outputs: QuantTensor,
    pub cycles: u64,
    pub active_mac_cycles: u64,
    pub peak_mac_cycles: u64,
}

/// Output channels `channels` of output rows `rows`, all columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputTile {
    pub channels: Range<usize>,
    pub rows: Range<usize>,
}

impl OutputTile {
    pub fn full(out: TensorShape) -> Self {
        Self {
            channels: 0..out.channels,
            rows: 0..out.height,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty() || self.rows.is_empty()
    }
}

/// Raw accumulators of one tile, channel-major (tile channel, row, column).
#[derive(Debug, Clone, PartialEq)]
pub struct AccResult {
    pub acc: Vec<i64>,
    pub cycles: u64,
    pub active_mac_cycles: u64,
    pub peak_mac_cycles: u64,
}

pub(crate) fn check_tile(tile: &OutputTile, out: TensorShape) -> Result<()> {
    if tile.channels.end > out.channels || tile.rows.end > out.height {
        return Err(Error::tensor(format!(
            "tile channels {:?} rows {:?} outside output {out}",
            tile.channels, tile.rows
        )));
    }
    if out.batch != 1 {
        return Err(Error::tensor("engines process one image at a time"));
    }
    Ok(())
}

/// Bias add, overflow check and requantization of a full-layer tile.
pub(crate) fn finish(
    r: AccResult,
    x: &QuantTensor,
    w: &QuantConv,
    desc: &LayerDesc,
    out: QuantParams,
    shape: TensorShape,
) -> Result<EngineResult> {
    if w.bias.len() != desc.out_channels {
        return Err(Error::tensor(format!(
            "{} bias values for {} output channels",
            w.bias.len(),
            desc.out_channels
        )));
    }
    let post = PostOp::new(x.params.scale * w.weight.params.scale, out, desc.activation);
    let (data, _) = finish_accumulators(&r.acc, shape.pixels(), 0, &w.bias, &post, &desc.name)?;
    Ok(EngineResult {
        outputs: QuantTensor::new(shape, data, out)?,
        cycles: r.cycles,
        active_mac_cycles: r.active_mac_cycles,
        peak_mac_cycles: r.peak_mac_cycles,
    })
}
