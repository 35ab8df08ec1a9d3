use crate::error::{Error, Result};
use crate::functional::{conv_output_shape, QuantConv, QuantParams, QuantTensor};
use crate::ir::{LayerDesc, LayerKind};

use super::pw::pw_schedule;
use super::{check_tile, finish, AccResult, EngineResult, OutputTile, RpeConfig};

fn check_dw(desc: &LayerDesc) -> Result<()> {
    if desc.kind != LayerKind::DWConv {
        return Err(Error::Unsupported {
            engine: "RPE DW mode",
            what: format!("{:?}", desc.kind),
        });
    }
    if ![3, 5, 7].contains(&desc.kernel) {
        return Err(Error::Unsupported {
            engine: "RPE DW mode",
            what: format!("kernel {}", desc.kernel),
        });
    }
    if !(desc.stride == 1 || desc.stride == 2) {
        return Err(Error::Unsupported {
            engine: "RPE DW mode",
            what: format!("stride {}", desc.stride),
        });
    }
    Ok(())
}

/// Kernel-column order of one kernel row: in order for stride 1; even
/// columns then odd columns for stride 2, so each parity bank only shifts.
fn column_order(k: usize, stride: usize) -> Vec<usize> {
    if stride == 1 {
        (0..k).collect()
    } else {
        (0..k).step_by(2).chain((1..k).step_by(2)).collect()
    }
}

/// DW-mode (self-accumulation) schedule. The `N` MAC lanes take `N`
/// channels; the `M` PE lines hold `M` horizontally adjacent outputs of one
/// row. Per kernel row, a shift register per lane delivers one input per PE
/// line per cycle for `k` cycles while each MAC accumulates its own window.
pub fn rpe_dw_tile(
    x: &QuantTensor,
    w: &QuantTensor,
    desc: &LayerDesc,
    tile: &OutputTile,
    cfg: &RpeConfig,
) -> Result<AccResult> {
    check_dw(desc)?;
    let os = conv_output_shape(x, w, desc)?;
    check_tile(tile, os)?;
    let (k, s, p) = (desc.kernel, desc.stride, desc.padding);
    let (mm, nn) = (cfg.m, cfg.n);
    let (h, wd, ow) = (x.shape.height as isize, x.shape.width as isize, os.width);
    let rows = tile.rows.len();
    let mut acc = vec![0i64; tile.channels.len() * rows * ow];
    let order = column_order(k, s);
    let input = |c: usize, iy: isize, ix: isize| -> i32 {
        if iy < 0 || iy >= h || ix < 0 || ix >= wd {
            0
        } else {
            x.at(0, c, iy as usize, ix as usize) as i32
        }
    };
    let mut cycles = 0u64;
    let mut active = 0u64;
    // regs[lane][parity][line]
    let mut regs = vec![[vec![0i32; mm], vec![0i32; mm]]; nn];
    let mut macs = vec![vec![0i64; mm]; nn];
    for c0 in tile.channels.clone().step_by(nn) {
        let cn = nn.min(tile.channels.end - c0);
        for (tr, oy) in tile.rows.clone().enumerate() {
            for x0 in (0..ow).step_by(mm) {
                let mn = mm.min(ow - x0);
                for lane in macs.iter_mut() {
                    lane.fill(0);
                }
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let mut loaded = [false, false];
                    for &kx in &order {
                        let bank = kx % 2 * (s - 1);
                        for (n, reg) in regs.iter_mut().enumerate().take(cn) {
                            let c = c0 + n;
                            let r = &mut reg[bank];
                            if !loaded[bank] {
                                for (m, v) in r.iter_mut().enumerate() {
                                    *v = input(c, iy, (s * (x0 + m) + kx) as isize - p as isize);
                                }
                            } else {
                                r.rotate_left(1);
                                r[mm - 1] = input(c, iy, (s * (x0 + mm - 1) + kx) as isize - p as isize);
                            }
                            let wv = w.at(c, 0, ky, kx) as i64;
                            for m in 0..mn {
                                macs[n][m] += r[m] as i64 * wv;
                            }
                        }
                        loaded[bank] = true;
                        cycles += 1;
                        active += (cn * mn) as u64;
                    }
                }
                for (n, line) in macs.iter().enumerate().take(cn) {
                    let tc = c0 + n - tile.channels.start;
                    let at = (tc * rows + tr) * ow + x0;
                    acc[at..at + mn].copy_from_slice(&line[..mn]);
                }
            }
        }
    }
    Ok(AccResult {
        acc,
        cycles,
        active_mac_cycles: active,
        peak_mac_cycles: cycles * cfg.multipliers() as u64,
    })
}

pub fn rpe_dw_execute(
    x: &QuantTensor,
    w: &QuantConv,
    desc: &LayerDesc,
    out: QuantParams,
    cfg: &RpeConfig,
) -> Result<EngineResult> {
    check_dw(desc)?;
    let os = conv_output_shape(x, &w.weight, desc)?;
    let r = rpe_dw_tile(x, &w.weight, desc, &OutputTile::full(os), cfg)?;
    finish(r, x, w, desc, out, os)
}

/// PW-mode (down-forward accumulation) schedule for PWConv, GenericConv and MatMul.
pub fn rpe_pw_tile(
    x: &QuantTensor,
    w: &QuantTensor,
    desc: &LayerDesc,
    tile: &OutputTile,
    cfg: &RpeConfig,
) -> Result<AccResult> {
    if matches!(desc.kind, LayerKind::DWConv | LayerKind::MsaBlock | LayerKind::ResidualAdd) {
        return Err(Error::Unsupported {
            engine: "RPE PW mode",
            what: format!("{:?}", desc.kind),
        });
    }
    pw_schedule(x, w, desc, tile, cfg.m, cfg.n)
}

pub fn rpe_pw_execute(
    x: &QuantTensor,
    w: &QuantConv,
    desc: &LayerDesc,
    out: QuantParams,
    cfg: &RpeConfig,
) -> Result<EngineResult> {
    let os = conv_output_shape(x, &w.weight, desc)?;
    let r = rpe_pw_tile(x, &w.weight, desc, &OutputTile::full(os), cfg)?;
    finish(r, x, w, desc, out, os)
}
