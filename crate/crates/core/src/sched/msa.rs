//! Intra-layer MSA fusion. Each (scale branch, head) pair is an attention
//! unit; units are dealt round-robin to the processing groups. Inside a PG
//! the RPE computes Z = ReLU(K)ᵀ·V (the K-adder-tree sums ReLU(Kᵀ) from the
//! same stream), the MAT computes divisors and then dividends from Z, and
//! the divider bank consumes dividend rows as the MAT emits them. Units
//! pipeline through the three resources.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{LayerDesc, TensorShape};

use super::fused::{plan_fused_pair, FusedPlan};
use super::hw::HardwareConfig;
use super::tiling::{plan_dw, plan_linear, LinearPlan};

/// Cycle costs of one attention unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionUnitCost {
    pub tokens: u64,
    pub dim: u64,
    /// RPE cycles for Z.
    pub rpe: u64,
    /// K-adder-tree cycles when not overlapped with Z.
    pub kadder: u64,
    /// Token tiles bounded by the divisor buffer.
    pub tiles: Vec<u64>,
    /// MAT cycles for the divisors of each tile.
    pub divisor_cycles: Vec<u64>,
    /// MAT cycles per dividend row.
    pub row_cycles: u64,
    pub divider_count: u64,
}

impl AttentionUnitCost {
    pub fn new(desc: &LayerDesc, tokens: usize, hw: &HardwareConfig) -> Result<Self> {
        let (n, d) = (tokens as u64, desc.msa_dim as u64);
        let (mm, nn, s, t) = (hw.m as u64, hw.n as u64, hw.s as u64, hw.t as u64);
        let tile = hw.buffer_bytes.divisor / 8;
        if tile == 0 {
            return Err(Error::Buffer(format!(
                "{}: divisor buffer of {} bytes cannot double-buffer one 32-bit divisor",
                desc.name, hw.buffer_bytes.divisor
            )));
        }
        let mut tiles = Vec::new();
        let mut left = n;
        while left > 0 {
            let nt = left.min(tile);
            tiles.push(nt);
            left -= nt;
        }
        Ok(Self {
            tokens: n,
            dim: d,
            rpe: n.div_ceil(nn) * d.div_ceil(mm) * d,
            kadder: d * n.div_ceil(nn),
            divisor_cycles: tiles.iter().map(|&nt| d.div_ceil(t) * nt.div_ceil(s)).collect(),
            tiles,
            row_cycles: d.div_ceil(t) * d.div_ceil(s),
            divider_count: hw.divider_count as u64,
        })
    }

    pub fn mat(&self) -> u64 {
        self.divisor_cycles.iter().sum::<u64>() + self.tokens * self.row_cycles
    }

    pub fn divider(&self) -> u64 {
        (self.tokens * self.dim).div_ceil(self.divider_count)
    }
}

/// Latency of `units` identical attention units on one PG.
pub fn attention_pg_cycles(c: &AttentionUnitCost, units: usize, fused: bool) -> u64 {
    if !fused {
        return units as u64 * (c.rpe + c.kadder + c.mat() + c.divider());
    }
    let dc = c.divider_count;
    let total_div = (c.tokens * c.dim).div_ceil(dc);
    let (mut rpe_end, mut mat_start, mut mat_end, mut div_end) = (0u64, 0u64, 0u64, 0u64);
    for j in 0..units {
        // Z is double-buffered: unit j may overwrite the slot of unit j-2 only.
        let rs = if j == 0 { 0 } else { rpe_end.max(mat_start) };
        let re = rs + c.rpe;
        let ms = re.max(mat_end);
        let mut t = ms;
        let mut f = div_end + total_div;
        let mut idx = 0u64;
        for (tile, &nt) in c.tiles.iter().enumerate() {
            t += c.divisor_cycles[tile];
            for _ in 0..nt {
                t += c.row_cycles;
                // Row `idx` enters the dividers in the MAT cycle that completes it.
                f = f.max(t - 1 + ((c.tokens - idx) * c.dim).div_ceil(dc));
                idx += 1;
            }
        }
        rpe_end = re;
        mat_start = ms;
        mat_end = t;
        div_end = f.max(t);
    }
    div_end
}

/// Attention core of one MSA: units dealt round-robin over the PGs.
pub fn attention_cycles(desc: &LayerDesc, tokens: usize, hw: &HardwareConfig, fused: bool) -> Result<u64> {
    let cost = AttentionUnitCost::new(desc, tokens, hw)?;
    let units = desc.msa_scales.len() * desc.msa_heads;
    let per_pg = (0..hw.l).map(|p| (units + hw.l - 1 - p) / hw.l);
    Ok(per_pg.map(|u| attention_pg_cycles(&cost, u, fused)).max().unwrap_or(0))
}

/// Aggregation convs of one scale branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AggregationPlan {
    Fused(FusedPlan),
    Separate { dw: LinearPlan, pw: LinearPlan },
}

impl AggregationPlan {
    pub fn cycles(&self) -> u64 {
        match self {
            AggregationPlan::Fused(f) => f.cycles,
            AggregationPlan::Separate { dw, pw } => dw.cycles + pw.cycles,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsaPlan {
    pub qkv: LinearPlan,
    /// One entry per scale; `None` for the identity scale.
    pub aggregations: Vec<Option<AggregationPlan>>,
    pub attention_cycles: u64,
    pub proj: LinearPlan,
    pub fused: bool,
}

impl MsaPlan {
    pub fn cycles(&self) -> u64 {
        self.qkv.cycles
            + self.aggregations.iter().flatten().map(AggregationPlan::cycles).sum::<u64>()
            + self.attention_cycles
            + self.proj.cycles
    }

    /// (label, cycles) of each sequential sub-phase.
    pub fn phases(&self, desc: &LayerDesc) -> Vec<(String, u64)> {
        let mut v = vec![("qkv projection".to_string(), self.qkv.cycles)];
        for (k, a) in desc.msa_scales.iter().zip(&self.aggregations) {
            if let Some(a) = a {
                v.push((format!("aggregation {k}x{k}"), a.cycles()));
            }
        }
        v.push(("attention".to_string(), self.attention_cycles));
        v.push(("output projection".to_string(), self.proj.cycles));
        v
    }
}

fn msa_plan(desc: &LayerDesc, input: TensorShape, hw: &HardwareConfig, fused: bool) -> Result<MsaPlan> {
    let qkv_out = input.with_channels(desc.qkv_channels());
    let qkv = plan_linear(&desc.qkv_desc(), qkv_out, hw);
    let mut aggregations = Vec::new();
    for &k in &desc.msa_scales {
        if k == 1 {
            aggregations.push(None);
            continue;
        }
        let dw = desc.aggregation_dw_desc(k);
        let pw = desc.aggregation_pw_desc(k);
        aggregations.push(Some(if fused {
            AggregationPlan::Fused(plan_fused_pair(&dw, &pw, qkv_out, qkv_out, hw)?)
        } else {
            AggregationPlan::Separate {
                dw: plan_dw(&dw, qkv_out, hw),
                pw: plan_linear(&pw, qkv_out, hw),
            }
        }));
    }
    let attention_cycles = attention_cycles(desc, input.pixels(), hw, fused)?;
    let proj = plan_linear(&desc.proj_desc(), input.with_channels(desc.out_channels), hw);
    Ok(MsaPlan {
        qkv,
        aggregations,
        attention_cycles,
        proj,
        fused,
    })
}

/// Compute timing of a fused MSA block.
pub fn fused_msa_timing(desc: &LayerDesc, input: TensorShape, hw: &HardwareConfig) -> Result<MsaPlan> {
    msa_plan(desc, input, hw, true)
}

/// The same block with every step run back to back.
pub fn unfused_msa_timing(desc: &LayerDesc, input: TensorShape, hw: &HardwareConfig) -> Result<MsaPlan> {
    msa_plan(desc, input, hw, false)
}
