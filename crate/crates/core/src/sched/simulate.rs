use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::engine::{attention_execute, mat_tile, rpe_dw_tile, rpe_pw_tile, AccResult, OutputTile};
use crate::error::{Error, Result};
use crate::functional::{
    finish_accumulators, layer_with, AttentionScales, MsaIntermediate, PostOp, QuantBackend, QuantConv, QuantParams,
    QuantTensor, QuantizedModel, TokenMatrix,
};
use crate::ir::{LayerDesc, LayerKind, Stage, TensorShape};
use crate::par;

use super::hw::HardwareConfig;
use super::fused::FusedPlan;
use super::plan::{GroupKind, GroupPlan, Phase, Schedule};
use super::tiling::{chunk, plan_dw, plan_linear, split_engines};

/// Timing of one group (or a sum of groups).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTiming {
    pub compute_cycles: u64,
    pub memory_cycles: u64,
    pub latency_cycles: u64,
    pub active_mac_cycles: u64,
    pub dram_bytes: u64,
}

impl LayerTiming {
    pub fn add(&mut self, o: &LayerTiming) {
        self.compute_cycles += o.compute_cycles;
        self.memory_cycles += o.memory_cycles;
        self.latency_cycles += o.latency_cycles;
        self.active_mac_cycles += o.active_mac_cycles;
        self.dram_bytes += o.dram_bytes;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub kind: GroupKind,
    pub members: Vec<usize>,
    pub names: Vec<String>,
    pub stage: Stage,
    pub macs: u64,
    pub timing: LayerTiming,
    pub phases: Vec<Phase>,
}

impl GroupReport {
    pub fn utilization(&self, multipliers: u64) -> f64 {
        if self.timing.latency_cycles == 0 {
            0.0
        } else {
            self.timing.active_mac_cycles as f64 / (self.timing.latency_cycles as f64 * multipliers as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub groups: Vec<GroupReport>,
    pub totals: LayerTiming,
    pub total_macs: u64,
    pub multipliers: u64,
    pub clock_hz: f64,
    pub fusion: bool,
}

impl RunReport {
    fn new(s: &Schedule, groups: Vec<GroupReport>) -> Self {
        let mut totals = LayerTiming::default();
        for g in &groups {
            totals.add(&g.timing);
        }
        Self {
            total_macs: groups.iter().map(|g| g.macs).sum(),
            groups,
            totals,
            multipliers: s.hw.total_multipliers() as u64,
            clock_hz: s.hw.clock_hz,
            fusion: s.options.fusion,
        }
    }

    /// Σ active / (Σ latency × multipliers).
    pub fn utilization(&self) -> f64 {
        if self.totals.latency_cycles == 0 {
            return 0.0;
        }
        self.totals.active_mac_cycles as f64 / (self.totals.latency_cycles as f64 * self.multipliers as f64)
    }

    /// Group report of the group containing layer `layer`.
    pub fn group_of(&self, layer: usize) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.members.contains(&layer))
    }
}

fn group_report(s: &Schedule, gi: usize, names: Vec<String>, active: u64) -> GroupReport {
    let g = &s.groups[gi];
    let dram_bytes = g.dram.total();
    GroupReport {
        kind: g.kind,
        members: g.members.clone(),
        names,
        stage: g.stage,
        macs: g.macs,
        timing: LayerTiming {
            compute_cycles: g.compute_cycles,
            memory_cycles: g.memory_cycles(&s.hw),
            latency_cycles: g.latency_cycles(&s.hw),
            active_mac_cycles: active,
            dram_bytes,
        },
        phases: g.phases.clone(),
    }
}

/// Timing report straight from the plan; activity equals the MAC count of
/// every group (which the engines reproduce exactly).
pub fn estimate_report(s: &Schedule, names: impl Fn(usize) -> String) -> RunReport {
    let groups = (0..s.groups.len())
        .map(|gi| {
            let n = s.groups[gi].members.iter().map(|&m| names(m)).collect();
            group_report(s, gi, n, s.groups[gi].macs)
        })
        .collect();
    RunReport::new(s, groups)
}

#[derive(Clone, Copy)]
enum Unit {
    Dw,
    Rpe,
    Mat,
}

/// Runs every conv-like layer as PG tiles on the engine models and counts
/// active MAC cycles.
pub struct EngineBackend<'a> {
    pub hw: &'a HardwareConfig,
    active: AtomicU64,
    /// Tilings for the next conv-like layers, in call order; empty means
    /// the standalone tiling.
    pending: Mutex<VecDeque<Vec<(Unit, OutputTile)>>>,
}

impl<'a> EngineBackend<'a> {
    pub fn new(hw: &'a HardwareConfig) -> Self {
        Self {
            hw,
            active: AtomicU64::new(0),
            pending: Mutex::new(VecDeque::new()),
        }
    }

    fn pending_len(&self) -> usize {
        self.pending.lock().expect("unpoisoned").len()
    }

    /// Tiles of a fused DW→PW pair on the grid the planner chose: PG `p`
    /// computes its DW channel chunk of its row group's rows, then its PW
    /// output-channel chunk of the same rows, split between RPE and MAT.
    fn queue_fused(&self, f: &FusedPlan, dw: (&LayerDesc, TensorShape), pw: (&LayerDesc, TensorShape)) {
        let (grid, l) = (f.grid, f.pgs.len());
        let mut dw_jobs = Vec::with_capacity(l);
        let mut pw_jobs = Vec::with_capacity(2 * l);
        for p in 0..l {
            let (r, c) = grid.pg(p);
            dw_jobs.push((
                Unit::Dw,
                OutputTile {
                    channels: chunk(c, grid.channel_groups, dw.1.channels),
                    rows: chunk(r, grid.row_groups, dw.1.height),
                },
            ));
            let rows = chunk(r, grid.row_groups, pw.1.height);
            let ch = chunk(c, grid.channel_groups, pw.1.channels);
            let (cr, _) = split_engines(pw.0, pw.1, rows.len(), ch.clone(), self.hw);
            let mid = ch.start + cr;
            pw_jobs.push((Unit::Rpe, OutputTile { channels: ch.start..mid, rows: rows.clone() }));
            pw_jobs.push((Unit::Mat, OutputTile { channels: mid..ch.end, rows }));
        }
        let mut q = self.pending.lock().expect("unpoisoned");
        q.push_back(dw_jobs);
        q.push_back(pw_jobs);
    }

    pub fn active_mac_cycles(&self) -> u64 {
        self.active.load(Ordering::Relaxed)
    }
}

impl QuantBackend for EngineBackend<'_> {
    fn linear(&self, x: &QuantTensor, w: &QuantConv, desc: &LayerDesc, out: QuantParams) -> Result<(QuantTensor, usize)> {
        let os = desc.output_shape(x.shape)?;
        let queued = self.pending.lock().expect("unpoisoned").pop_front();
        let jobs: Vec<(Unit, OutputTile)> = if let Some(jobs) = queued {
            jobs
        } else if desc.kind == LayerKind::DWConv {
            let p = plan_dw(desc, os, self.hw);
            let jobs = p
                .tiles
                .iter()
                .map(|t| {
                    (
                        Unit::Dw,
                        OutputTile {
                            channels: t.rpe_channels.clone(),
                            rows: t.rows.clone(),
                        },
                    )
                })
                .collect();
            jobs
        } else {
            let p = plan_linear(desc, os, self.hw);
            let mut jobs = Vec::new();
            for t in &p.tiles {
                jobs.push((
                    Unit::Rpe,
                    OutputTile {
                        channels: t.rpe_channels.clone(),
                        rows: t.rows.clone(),
                    },
                ));
                jobs.push((
                    Unit::Mat,
                    OutputTile {
                        channels: t.mat_channels.clone(),
                        rows: t.rows.clone(),
                    },
                ));
            }
            jobs
        };
        let jobs: Vec<_> = jobs.into_iter().filter(|(_, t)| !t.is_empty()).collect();
        let (rpe, mat) = (self.hw.rpe(), self.hw.mat());
        let results = par::map_slice(&jobs, |(u, tile)| -> Result<AccResult> {
            match u {
                Unit::Dw => rpe_dw_tile(x, &w.weight, desc, tile, &rpe),
                Unit::Rpe => rpe_pw_tile(x, &w.weight, desc, tile, &rpe),
                Unit::Mat => mat_tile(x, &w.weight, desc, tile, &mat),
            }
        });
        let plane = os.pixels();
        let mut acc = vec![0i64; os.numel()];
        let mut active = 0;
        for ((_, tile), r) in jobs.iter().zip(results) {
            let r = r?;
            active += r.active_mac_cycles;
            let rows = tile.rows.len();
            for (tc, c) in tile.channels.clone().enumerate() {
                for (tr, y) in tile.rows.clone().enumerate() {
                    let src = &r.acc[(tc * rows + tr) * os.width..(tc * rows + tr + 1) * os.width];
                    let dst = c * plane + y * os.width;
                    acc[dst..dst + os.width].copy_from_slice(src);
                }
            }
        }
        self.active.fetch_add(active, Ordering::Relaxed);
        if w.bias.len() != desc.out_channels {
            return Err(Error::tensor(format!("{}: bias length {}", desc.name, w.bias.len())));
        }
        let post = PostOp::new(x.params.scale * w.weight.params.scale, out, desc.activation);
        let (data, sat) = finish_accumulators(&acc, plane, 0, &w.bias, &post, &desc.name)?;
        Ok((QuantTensor::new(os, data, out)?, sat))
    }

    fn attention(
        &self,
        q: &TokenMatrix,
        k: &TokenMatrix,
        v: &TokenMatrix,
        scales: &AttentionScales,
    ) -> Result<(TokenMatrix, MsaIntermediate)> {
        let r = attention_execute(q, k, v, scales, &self.hw.rpe(), &self.hw.mat(), self.hw.divider_count)?;
        self.active.fetch_add(r.active_mac_cycles, Ordering::Relaxed);
        Ok((r.output, r.intermediate))
    }
}

/// Execute the schedule on the engine models. Returns every layer's output
/// activation and the run report; activity counts come from the engines.
pub fn simulate_schedule(
    s: &Schedule,
    model: &QuantizedModel,
    input: &QuantTensor,
) -> Result<(Vec<QuantTensor>, RunReport)> {
    let g = &model.graph;
    let backend = EngineBackend::new(&s.hw);
    let mut outs: Vec<QuantTensor> = Vec::with_capacity(g.len());
    let mut groups = Vec::with_capacity(s.groups.len());
    for (gi, grp) in s.groups.iter().enumerate() {
        let before = backend.active_mac_cycles();
        if let GroupPlan::Fused(f) = &grp.plan {
            let (a, b) = (g.layer(grp.members[0]), g.layer(grp.members[1]));
            backend.queue_fused(f, (&a.desc, a.output), (&b.desc, b.output));
        }
        for &i in &grp.members {
            if i != outs.len() {
                return Err(Error::Report(format!("schedule runs layer {i} out of order")));
            }
            let x = if i == 0 { input } else { &outs[i - 1] };
            let skip = g.skip_source(i).map(|src| if src == 0 { input } else { &outs[src - 1] });
            let (y, _) = layer_with(&backend, model, i, x, skip)?;
            outs.push(y);
        }
        if backend.pending_len() != 0 {
            return Err(Error::Report(format!("group {gi}: fused tiling not consumed")));
        }
        let active = backend.active_mac_cycles() - before;
        let names = grp.members.iter().map(|&m| g.layer(m).desc.label(m)).collect();
        groups.push(group_report(s, gi, names, active));
    }
    if outs.len() != g.len() {
        return Err(Error::Report(format!("schedule covers {} of {} layers", outs.len(), g.len())));
    }
    Ok((outs, RunReport::new(s, groups)))
}
