//! Per-stage aggregation, resource and throughput arithmetic, and the
//! JSON/CSV report formats.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{NetworkGraph, Stage};
use crate::sched::{GroupKind, HardwareConfig, RunReport};

/// Stated in every report so GOPS figures are unambiguous.
pub const OPS_CONVENTION: &str = "1 MAC = 2 ops";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub latency_cycles: u64,
    pub utilization: f64,
    pub gops: f64,
    pub dram_bytes: u64,
}

/// GOPS of `macs` multiply-accumulates finished in `latency_cycles`.
pub fn gops(macs: u64, clock_hz: f64, latency_cycles: u64) -> f64 {
    if latency_cycles == 0 {
        0.0
    } else {
        2.0 * macs as f64 * clock_hz / latency_cycles as f64 / 1e9
    }
}

/// One row per stage present in the run, in stem-to-S4 order. Each group
/// counts towards the stage of its first layer.
pub fn aggregate_stages(r: &RunReport, g: &NetworkGraph) -> Result<Vec<StageReport>> {
    #[derive(Default)]
    struct Acc {
        latency: u64,
        active: u64,
        macs: u64,
        dram: u64,
    }
    let mut per: BTreeMap<Stage, Acc> = BTreeMap::new();
    for grp in &r.groups {
        for &m in &grp.members {
            if m >= g.len() {
                return Err(Error::Report(format!("report names layer {m}, graph has {}", g.len())));
            }
            g.stage(m).ok_or(Error::MissingStage(m))?;
        }
        let first = *grp.members.first().ok_or_else(|| Error::Report("empty group".into()))?;
        let stage = g.stage(first).ok_or(Error::MissingStage(first))?;
        let a = per.entry(stage).or_default();
        a.latency += grp.timing.latency_cycles;
        a.active += grp.timing.active_mac_cycles;
        a.macs += grp.macs;
        a.dram += grp.timing.dram_bytes;
    }
    Ok(per
        .into_iter()
        .map(|(stage, a)| StageReport {
            stage,
            latency_cycles: a.latency,
            utilization: if a.latency == 0 {
                0.0
            } else {
                a.active as f64 / (a.latency as f64 * r.multipliers as f64)
            },
            gops: gops(a.macs, r.clock_hz, a.latency),
            dram_bytes: a.dram,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceEstimate {
    pub multipliers: u64,
    /// Two 8×8-bit multiplications share one DSP.
    pub dsp_count: u64,
    pub pg_count: u64,
}

pub fn resource_estimate(hw: &HardwareConfig) -> ResourceEstimate {
    let multipliers = hw.total_multipliers() as u64;
    ResourceEstimate {
        multipliers,
        dsp_count: multipliers.div_ceil(2),
        pg_count: hw.l as u64,
    }
}

/// `2 × multipliers × clock`, in GOPS.
pub fn peak_gops(hw: &HardwareConfig) -> f64 {
    2.0 * hw.total_multipliers() as f64 * hw.clock_hz / 1e9
}

/// Fraction of peak that a throughput represents.
pub fn utilization_of(gops: f64, hw: &HardwareConfig) -> f64 {
    gops / peak_gops(hw)
}

/// End-to-end (GOPS, utilization) of a run.
pub fn throughput_and_utilization(r: &RunReport, hw: &HardwareConfig) -> Result<(f64, f64)> {
    if r.totals.latency_cycles == 0 {
        return Err(Error::Report("run has zero latency".into()));
    }
    let g = gops(r.total_macs, hw.clock_hz, r.totals.latency_cycles);
    Ok((g, utilization_of(g, hw)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub kind: GroupKind,
    pub stage: Stage,
    pub layers: Vec<String>,
    pub macs: u64,
    pub compute_cycles: u64,
    pub memory_cycles: u64,
    pub latency_cycles: u64,
    pub active_mac_cycles: u64,
    pub utilization: f64,
    pub gops: f64,
    pub dram_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub latency_cycles: u64,
    pub utilization: f64,
    pub gops: f64,
    pub dram_bytes: u64,
    pub macs: u64,
    pub active_mac_cycles: u64,
}

/// Machine-readable run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub ops_convention: String,
    pub network: String,
    pub fusion: bool,
    pub hardware: HardwareConfig,
    pub resources: ResourceEstimate,
    pub peak_gops: f64,
    pub stages: Vec<StageReport>,
    pub groups: Vec<GroupRow>,
    pub totals: Totals,
}

impl ReportFile {
    pub fn build(network: &str, r: &RunReport, g: &NetworkGraph, hw: &HardwareConfig) -> Result<Self> {
        let stages = aggregate_stages(r, g)?;
        let (total_gops, utilization) = throughput_and_utilization(r, hw)?;
        let groups = r
            .groups
            .iter()
            .map(|grp| GroupRow {
                kind: grp.kind,
                stage: grp.stage,
                layers: grp.names.clone(),
                macs: grp.macs,
                compute_cycles: grp.timing.compute_cycles,
                memory_cycles: grp.timing.memory_cycles,
                latency_cycles: grp.timing.latency_cycles,
                active_mac_cycles: grp.timing.active_mac_cycles,
                utilization: grp.utilization(r.multipliers),
                gops: gops(grp.macs, hw.clock_hz, grp.timing.latency_cycles),
                dram_bytes: grp.timing.dram_bytes,
            })
            .collect();
        Ok(Self {
            ops_convention: OPS_CONVENTION.into(),
            network: network.into(),
            fusion: r.fusion,
            hardware: *hw,
            resources: resource_estimate(hw),
            peak_gops: peak_gops(hw),
            stages,
            groups,
            totals: Totals {
                latency_cycles: r.totals.latency_cycles,
                utilization,
                gops: total_gops,
                dram_bytes: r.totals.dram_bytes,
                macs: r.total_macs,
                active_mac_cycles: r.totals.active_mac_cycles,
            },
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Stage rows plus a `total` row, same columns as the JSON stage entries.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stage", "latency_cycles", "utilization", "gops", "dram_bytes"])?;
        for s in &self.stages {
            w.write_record([
                s.stage.to_string(),
                s.latency_cycles.to_string(),
                s.utilization.to_string(),
                s.gops.to_string(),
                s.dram_bytes.to_string(),
            ])?;
        }
        let t = &self.totals;
        w.write_record([
            "total".to_string(),
            t.latency_cycles.to_string(),
            t.utilization.to_string(),
            t.gops.to_string(),
            t.dram_bytes.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Human-readable stage table.
    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{} (fusion {}); ops convention: {}\n{:<8}{:>14}{:>13}{:>10}{:>14}\n",
            self.network,
            if self.fusion { "on" } else { "off" },
            self.ops_convention,
            "stage",
            "latency",
            "utilization",
            "GOPS",
            "DRAM bytes"
        );
        for st in &self.stages {
            s.push_str(&format!(
                "{:<8}{:>14}{:>12.2}%{:>10.1}{:>14}\n",
                st.stage.to_string(),
                st.latency_cycles,
                100.0 * st.utilization,
                st.gops,
                st.dram_bytes
            ));
        }
        let t = &self.totals;
        s.push_str(&format!(
            "{:<8}{:>14}{:>12.2}%{:>10.1}{:>14}\n",
            "total",
            t.latency_cycles,
            100.0 * t.utilization,
            t.gops,
            t.dram_bytes
        ));
        s.push_str(&format!(
            "{} multipliers, {} DSPs, {} PGs, peak {:.1} GOPS\n",
            self.resources.multipliers, self.resources.dsp_count, self.resources.pg_count, self.peak_gops
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resource_arithmetic() {
        let mut hw = HardwareConfig::default();
        assert_eq!(resource_estimate(&hw), ResourceEstimate { multipliers: 2048, dsp_count: 1024, pg_count: 16 });
        assert!((peak_gops(&hw) - 819.2).abs() < 1e-9);
        hw.l = 8;
        assert_eq!(resource_estimate(&hw).dsp_count, 512);
        let tiny = HardwareConfig { m: 1, n: 1, s: 1, t: 1, l: 1, ..HardwareConfig::default() };
        assert_eq!(resource_estimate(&tiny), ResourceEstimate { multipliers: 2, dsp_count: 1, pg_count: 1 });
    }

    #[test]
    fn gops_of_nothing_is_zero() {
        assert_eq!(gops(0, 2e8, 100), 0.0);
    }
}
