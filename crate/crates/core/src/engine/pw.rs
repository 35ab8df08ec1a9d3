//! Shared PW-type schedule: per cycle one output pixel, `lines` output
//! channels by `lanes` input channels. The RPE in PW mode (down-forward
//! accumulation) and the MAT (adder trees over input channels) both follow it.

use crate::error::Result;
use crate::functional::QuantTensor;
use crate::ir::LayerDesc;

use super::{check_tile, AccResult, OutputTile};

pub(crate) fn pw_schedule(
    x: &QuantTensor,
    w: &QuantTensor,
    desc: &LayerDesc,
    tile: &OutputTile,
    lines: usize,
    lanes: usize,
) -> Result<AccResult> {
    let os = crate::functional::conv_output_shape(x, w, desc)?;
    check_tile(tile, os)?;
    let (k, s, p) = (desc.kernel, desc.stride, desc.padding);
    let cin_g = x.shape.channels / desc.groups;
    let cout_g = desc.out_channels / desc.groups;
    let (h, wd, ow) = (x.shape.height as isize, x.shape.width as isize, os.width);
    let plane_in = x.shape.pixels();
    let tile_ch = tile.channels.len();
    let tile_rows = tile.rows.len();
    let mut acc = vec![0i64; tile_ch * tile_rows * ow];

    // Weights reordered as [oc][ky][kx][icg] so one cycle reads a contiguous lane vector.
    let wt: Vec<i32> = {
        let mut v = vec![0i32; tile_ch * k * k * cin_g];
        for (to, oc) in tile.channels.clone().enumerate() {
            for icg in 0..cin_g {
                for ky in 0..k {
                    for kx in 0..k {
                        v[((to * k + ky) * k + kx) * cin_g + icg] = w.at(oc, icg, ky, kx) as i32;
                    }
                }
            }
        }
        v
    };

    let mut cycles = 0u64;
    let mut active = 0u64;
    let mut xv = vec![0i32; cin_g];
    let g_first = tile.channels.start / cout_g.max(1);
    let g_last = if tile.channels.is_empty() { g_first } else { (tile.channels.end - 1) / cout_g + 1 };
    for g in g_first..g_last {
        let oc_lo = tile.channels.start.max(g * cout_g);
        let oc_hi = tile.channels.end.min((g + 1) * cout_g);
        for (tr, oy) in tile.rows.clone().enumerate() {
            for ox in 0..ow {
                for oc0 in (oc_lo..oc_hi).step_by(lines) {
                    let ocn = lines.min(oc_hi - oc0);
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            let inside = iy >= 0 && iy < h && ix >= 0 && ix < wd;
                            if inside {
                                let base = (g * cin_g) * plane_in + iy as usize * x.shape.width + ix as usize;
                                for (l, v) in xv.iter_mut().enumerate() {
                                    *v = x.data[base + l * plane_in] as i32;
                                }
                            }
                            for ic0 in (0..cin_g).step_by(lanes) {
                                let icn = lanes.min(cin_g - ic0);
                                cycles += 1;
                                active += (ocn * icn) as u64;
                                if !inside {
                                    continue;
                                }
                                let xs = &xv[ic0..ic0 + icn];
                                for m in 0..ocn {
                                    let to = oc0 + m - tile.channels.start;
                                    let wo = ((to * k + ky) * k + kx) * cin_g + ic0;
                                    let ws = &wt[wo..wo + icn];
                                    let psum: i32 = xs.iter().zip(ws).map(|(a, b)| a * b).sum();
                                    acc[(to * tile_rows + tr) * ow + ox] += psum as i64;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(AccResult {
        acc,
        cycles,
        active_mac_cycles: active,
        peak_mac_cycles: cycles * (lines * lanes) as u64,
    })
}
