use crate::error::{Error, Result};
use crate::functional::{conv_output_shape, QuantConv, QuantParams, QuantTensor};
use crate::ir::{LayerDesc, LayerKind};

use super::pw::pw_schedule;
use super::{finish, AccResult, EngineResult, MatConfig, OutputTile};

/// `S` adder trees each reduce `T` products along input channels per cycle;
/// the tree is pipelined, so reduction adds no cycles.
pub fn mat_tile(
    x: &QuantTensor,
    w: &QuantTensor,
    desc: &LayerDesc,
    tile: &OutputTile,
    cfg: &MatConfig,
) -> Result<AccResult> {
    match desc.kind {
        LayerKind::DWConv => Err(Error::Unsupported {
            engine: "MAT",
            what: "DWConv".into(),
        }),
        LayerKind::MsaBlock | LayerKind::ResidualAdd => Err(Error::Unsupported {
            engine: "MAT",
            what: format!("{:?}", desc.kind),
        }),
        _ => pw_schedule(x, w, desc, tile, cfg.s, cfg.t),
    }
}

pub fn mat_execute(
    x: &QuantTensor,
    w: &QuantConv,
    desc: &LayerDesc,
    out: QuantParams,
    cfg: &MatConfig,
) -> Result<EngineResult> {
    let os = conv_output_shape(x, &w.weight, desc)?;
    let r = mat_tile(x, &w.weight, desc, &OutputTile::full(os), cfg)?;
    finish(r, x, w, desc, out, os)
}
