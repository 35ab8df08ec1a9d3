use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{layer_macs, weight_bytes, LayerKind, NetworkGraph, Stage};

use super::fused::{plan_fused_pair, FusedPlan};
use super::hw::HardwareConfig;
use super::msa::{fused_msa_timing, unfused_msa_timing, MsaPlan};
use super::tiling::{plan_dw, plan_linear, LinearPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupKind {
    Standalone,
    DwPwFused,
    MsaFused,
}

/// How the group's compute is spread over the engines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GroupPlan {
    /// PW-type layer on both engines of every PG.
    Linear(LinearPlan),
    /// DWConv on the RPEs only.
    Depthwise(LinearPlan),
    Fused(FusedPlan),
    Msa(MsaPlan),
    /// Nothing to compute (a residual add without a producer group).
    Empty,
}

impl GroupPlan {
    pub fn cycles(&self) -> u64 {
        match self {
            GroupPlan::Linear(p) | GroupPlan::Depthwise(p) => p.cycles,
            GroupPlan::Fused(f) => f.cycles,
            GroupPlan::Msa(m) => m.cycles(),
            GroupPlan::Empty => 0,
        }
    }
}

/// One step of a group's phase plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub engines: String,
    pub work: String,
    pub cycles: u64,
}

/// Off-chip traffic of one group, in bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramTraffic {
    pub weights: u64,
    pub input_read: u64,
    pub output_write: u64,
    pub skip_read: u64,
    /// Intermediate tensors inside the group that overflow the buffers
    /// (written and read back).
    pub spill: u64,
}

impl DramTraffic {
    pub fn total(&self) -> u64 {
        self.weights + self.input_read + self.output_write + self.skip_read + self.spill
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionGroup {
    pub kind: GroupKind,
    /// Layer indices in execution order. Residual adds ride along as a
    /// post-processing epilogue of the group producing their main operand.
    pub members: Vec<usize>,
    pub plan: GroupPlan,
    pub phases: Vec<Phase>,
    pub compute_cycles: u64,
    pub dram: DramTraffic,
    pub macs: u64,
    pub stage: Stage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanOptions {
    /// DW→PW and MSA fusion.
    pub fusion: bool,
    /// Keep tensors between consecutive groups on chip.
    pub residency: bool,
}

impl PlanOptions {
    pub const FUSED: PlanOptions = PlanOptions {
        fusion: true,
        residency: true,
    };
    /// Layer-by-layer baseline: every tensor goes through DRAM.
    pub const UNFUSED: PlanOptions = PlanOptions {
        fusion: false,
        residency: false,
    };
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self::FUSED
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub groups: Vec<FusionGroup>,
    pub hw: HardwareConfig,
    pub options: PlanOptions,
}

/// `ceil(bytes / bandwidth)`.
pub fn memory_cycles(dram_bytes: u64, hw: &HardwareConfig) -> u64 {
    dram_bytes.div_ceil(hw.dram_bytes_per_cycle)
}

/// Roofline: a group takes as long as the slower of compute and DRAM.
pub fn roofline_latency(compute_cycles: u64, dram_bytes: u64, hw: &HardwareConfig) -> u64 {
    compute_cycles.max(memory_cycles(dram_bytes, hw))
}

impl FusionGroup {
    pub fn memory_cycles(&self, hw: &HardwareConfig) -> u64 {
        memory_cycles(self.dram.total(), hw)
    }

    pub fn latency_cycles(&self, hw: &HardwareConfig) -> u64 {
        roofline_latency(self.compute_cycles, self.dram.total(), hw)
    }
}

fn phase(engines: &str, work: String, cycles: u64) -> Phase {
    Phase {
        engines: engines.into(),
        work,
        cycles,
    }
}

/// Group the layers: DW→PW pairs and MSA blocks fuse, residual adds attach
/// to the preceding group, everything else stands alone.
fn group_members(g: &NetworkGraph, fusion: bool) -> Vec<(GroupKind, Vec<usize>)> {
    let mut groups: Vec<(GroupKind, Vec<usize>)> = Vec::new();
    let mut i = 0;
    while i < g.len() {
        let kind = g.layer(i).desc.kind;
        if kind == LayerKind::ResidualAdd && fusion {
            if let Some(last) = groups.last_mut() {
                last.1.push(i);
                i += 1;
                continue;
            }
        }
        if fusion && kind == LayerKind::DWConv && i + 1 < g.len() && g.layer(i + 1).desc.kind == LayerKind::PWConv {
            groups.push((GroupKind::DwPwFused, vec![i, i + 1]));
            i += 2;
            continue;
        }
        let k = if fusion && kind == LayerKind::MsaBlock {
            GroupKind::MsaFused
        } else {
            GroupKind::Standalone
        };
        groups.push((k, vec![i]));
        i += 1;
    }
    groups
}

fn compute_plan(g: &NetworkGraph, kind: GroupKind, members: &[usize], hw: &HardwareConfig) -> Result<(GroupPlan, Vec<Phase>)> {
    let first = g.layer(members[0]);
    let d = &first.desc;
    let name = d.label(members[0]);
    let mut phases = Vec::new();
    let plan = match (kind, d.kind) {
        (GroupKind::DwPwFused, _) => {
            let pw = g.layer(members[1]);
            let f = plan_fused_pair(d, &pw.desc, first.output, pw.output, hw)?;
            let t_dw = f.pgs.iter().map(|p| p.rows * p.d_row).max().unwrap_or(0);
            let d_row = f.pgs.iter().map(|p| p.d_row).max().unwrap_or(0);
            phases.push(phase("RPE", format!("{name}: depthwise rows"), t_dw));
            phases.push(phase(
                "MAT",
                format!("{}: pointwise from the first ready DW row (after {d_row} cycles)", pw.desc.label(members[1])),
                t_dw.saturating_sub(d_row),
            ));
            phases.push(phase(
                "RPE+MAT",
                format!("{}: remaining pointwise work", pw.desc.label(members[1])),
                f.cycles - t_dw.min(f.cycles),
            ));
            GroupPlan::Fused(f)
        }
        (_, LayerKind::MsaBlock) => {
            let m = if kind == GroupKind::MsaFused {
                fused_msa_timing(d, first.input, hw)?
            } else {
                unfused_msa_timing(d, first.input, hw)?
            };
            for (label, c) in m.phases(d) {
                let engines = match label.as_str() {
                    "attention" if m.fused => "RPE+K-adder | MAT | dividers",
                    "attention" => "RPE, K-adder, MAT, dividers in turn",
                    _ => "RPE+MAT",
                };
                phases.push(phase(engines, format!("{name}: {label}"), c));
            }
            GroupPlan::Msa(m)
        }
        (_, LayerKind::DWConv) => {
            let p = plan_dw(d, first.output, hw);
            phases.push(phase("RPE", format!("{name}: depthwise"), p.cycles));
            GroupPlan::Depthwise(p)
        }
        (_, LayerKind::ResidualAdd) => GroupPlan::Empty,
        _ => {
            let p = plan_linear(d, first.output, hw);
            phases.push(phase("RPE+MAT", format!("{name}: output channels split across engines"), p.cycles));
            GroupPlan::Linear(p)
        }
    };
    for &m in members {
        if g.layer(m).desc.kind == LayerKind::ResidualAdd {
            phases.push(phase("post-processing", format!("{}: residual add", g.layer(m).desc.label(m)), 0));
        }
    }
    Ok((plan, phases))
}

/// Bytes of the tensor entering layer `i` (the network input for `i = 0`).
fn input_bytes(g: &NetworkGraph, i: usize) -> u64 {
    g.layer(i).input.numel() as u64
}

fn msa_internal_bytes(g: &NetworkGraph, i: usize) -> Vec<u64> {
    let node = g.layer(i);
    let d = &node.desc;
    let n = node.input.pixels() as u64;
    let qkv = d.qkv_channels() as u64 * n;
    let mut v = vec![qkv];
    for &k in &d.msa_scales {
        if k > 1 {
            v.push(qkv);
            v.push(qkv);
        }
    }
    v.push(d.attention_channels() as u64 * n);
    v
}

pub fn plan_schedule(g: &NetworkGraph, hw: &HardwareConfig) -> Result<Schedule> {
    plan_schedule_with(g, hw, PlanOptions::FUSED)
}

pub fn plan_schedule_with(g: &NetworkGraph, hw: &HardwareConfig, options: PlanOptions) -> Result<Schedule> {
    hw.validate()?;
    if g.is_empty() {
        return Err(Error::Validation(vec!["graph has no layers".into()]));
    }
    let cap = if options.residency { hw.buffer_bytes.activation_capacity() } else { 0 };
    let overflow = |bytes: u64| bytes.saturating_sub(cap);
    let members = group_members(g, options.fusion);
    let ng = members.len();
    let mut group_of = vec![0usize; g.len()];
    for (gi, (_, m)) in members.iter().enumerate() {
        for &l in m {
            group_of[l] = gi;
        }
    }
    // A skip operand is free when it sits fully on chip as the input of the
    // add's group or of the group before it.
    let skip_free = |src: usize, add_group: usize| -> bool {
        if !options.residency || input_bytes(g, src) > cap {
            return false;
        }
        let producer = if src == 0 { None } else { Some(group_of[src - 1]) };
        match producer {
            None => add_group <= 1,
            Some(p) => p + 1 == add_group || p + 2 == add_group,
        }
    };
    // Tensors that must be written in full because a non-free skip reads them.
    let mut full_write = vec![false; g.len()];
    for &(src, dst) in g.residual_edges() {
        if !skip_free(src, group_of[dst]) && src > 0 {
            full_write[src - 1] = true;
        }
    }

    let mut groups = Vec::with_capacity(ng);
    for (gi, (kind, m)) in members.into_iter().enumerate() {
        let (plan, phases) = compute_plan(g, kind, &m, hw)?;
        let first = m[0];
        let last = *m.last().expect("nonempty group");
        let in_bytes = input_bytes(g, first);
        let out_bytes = g.layer(last).output.numel() as u64;
        let mut dram = DramTraffic {
            weights: m.iter().map(|&l| weight_bytes(&g.layer(l).desc)).sum(),
            input_read: if gi == 0 { in_bytes } else { overflow(in_bytes) },
            output_write: if gi + 1 == ng || full_write[last] {
                out_bytes
            } else {
                overflow(out_bytes)
            },
            ..Default::default()
        };
        for &l in &m {
            let d = &g.layer(l).desc;
            if d.kind == LayerKind::ResidualAdd {
                if let Some(src) = g.skip_source(l) {
                    if !skip_free(src, gi) {
                        dram.skip_read += input_bytes(g, src);
                    }
                }
            }
            if d.kind == LayerKind::MsaBlock {
                for b in msa_internal_bytes(g, l) {
                    dram.spill += 2 * if kind == GroupKind::MsaFused { overflow(b) } else { b };
                }
            }
        }
        let macs = m.iter().map(|&l| layer_macs(&g.layer(l).desc, g.layer(l).input)).sum();
        let stage = g.stage(first).ok_or(Error::MissingStage(first))?;
        groups.push(FusionGroup {
            kind,
            compute_cycles: plan.cycles(),
            members: m,
            plan,
            phases,
            dram,
            macs,
            stage,
        });
    }
    Ok(Schedule {
        groups,
        hw: *hw,
        options,
    })
}
