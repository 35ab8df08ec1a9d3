use serde::{Deserialize, Serialize};

use crate::engine::{MatConfig, RpeConfig};
use crate::error::{Error, Result};

/// On-chip buffer capacities in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferBytes {
    #[serde(rename = "A")]
    pub a: u64,
    #[serde(rename = "B")]
    pub b: u64,
    #[serde(rename = "C")]
    pub c: u64,
    pub aux: u64,
    pub divisor: u64,
}

impl Default for BufferBytes {
    fn default() -> Self {
        Self {
            a: 280 << 10,
            b: 140 << 10,
            c: 280 << 10,
            aux: 16 << 10,
            divisor: 4 << 10,
        }
    }
}

impl BufferBytes {
    /// Capacity for an activation tensor handed from one group to the next.
    pub fn activation_capacity(&self) -> u64 {
        self.a.min(self.c)
    }
}

/// Accelerator configuration. Serialized with flat keys
/// `M, N, S, T, L, clock_hz, dram_bytes_per_cycle, buffer_bytes, divider_count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareConfig {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub clock_hz: f64,
    pub dram_bytes_per_cycle: u64,
    pub buffer_bytes: BufferBytes,
    pub divider_count: usize,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        Self {
            m: 8,
            n: 8,
            s: 8,
            t: 8,
            l: 16,
            clock_hz: 200e6,
            dram_bytes_per_cycle: 128,
            buffer_bytes: BufferBytes::default(),
            divider_count: 16,
        }
    }
}

impl HardwareConfig {
    pub fn rpe(&self) -> RpeConfig {
        RpeConfig { m: self.m, n: self.n }
    }

    pub fn mat(&self) -> MatConfig {
        MatConfig { s: self.s, t: self.t }
    }

    /// Multipliers in one processing group.
    pub fn pg_multipliers(&self) -> usize {
        self.m * self.n + self.s * self.t
    }

    pub fn total_multipliers(&self) -> usize {
        self.pg_multipliers() * self.l
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("M", self.m),
            ("N", self.n),
            ("S", self.s),
            ("T", self.t),
            ("L", self.l),
            ("divider_count", self.divider_count),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be >= 1"));
            }
        }
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            errs.push(format!("clock_hz must be positive, got {}", self.clock_hz));
        }
        if self.dram_bytes_per_cycle == 0 {
            errs.push("dram_bytes_per_cycle must be >= 1".into());
        }
        let b = &self.buffer_bytes;
        for (name, v) in [("A", b.a), ("B", b.b), ("C", b.c), ("aux", b.aux), ("divisor", b.divisor)] {
            if v == 0 {
                errs.push(format!("buffer_bytes.{name} must be >= 1"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Hardware(errs.join("; ")))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let hw: Self = serde_json::from_str(text).map_err(|e| Error::Hardware(e.to_string()))?;
        hw.validate()?;
        Ok(hw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hardware config serializes")
    }
}
