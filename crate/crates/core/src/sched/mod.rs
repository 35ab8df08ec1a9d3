//! Time-multiplexed and pipelined scheduling: grouping and fusion, work
//! partitioning over the processing groups, buffer residency, the roofline
//! latency rule, and execution of a schedule on the engine models.

mod fused;
mod hw;
mod msa;
mod plan;
mod simulate;
mod tiling;

pub use fused::{fused_pair_cycles, plan_fused_pair, FusedPairParams, FusedPlan};
pub use hw::{BufferBytes, HardwareConfig};
pub use msa::{
    attention_cycles, attention_pg_cycles, fused_msa_timing, unfused_msa_timing, AggregationPlan, AttentionUnitCost,
    MsaPlan,
};
pub use plan::{
    memory_cycles, plan_schedule, plan_schedule_with, roofline_latency, DramTraffic, FusionGroup, GroupKind, GroupPlan,
    Phase, PlanOptions, Schedule,
};
pub use simulate::{estimate_report, simulate_schedule, EngineBackend, GroupReport, LayerTiming, RunReport};
pub use tiling::{chunk, dw_cycles, mat_cycles, plan_dw, plan_linear, pw_cycles, rpe_pw_cycles, split_engines, Grid, LinearPlan, PgTile};
