//! Analytical decode cost model, arithmetic-intensity classifier, and a
//! deterministic simulation of the group-centric kernel schedule counting
//! HBM<->SRAM traffic.

use serde::{Deserialize, Serialize};

use crate::nsa::{BlockSelection, NsaConfig};
use crate::{Error, Result};

/// Peak compute, memory bandwidth, and on-chip scratch capacity of the
/// modeled accelerator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareSpec {
    pub peak_flops: f64,
    pub mem_bandwidth: f64,
    pub sram_bytes: f64,
}

impl Default for HardwareSpec {
    // A100-class numbers: 312 Tflop/s half precision, 2.0 TB/s HBM
    fn default() -> Self {
        HardwareSpec { peak_flops: 312e12, mem_bandwidth: 2.0e12, sram_bytes: 192.0 * 1024.0 }
    }
}

impl HardwareSpec {
    pub fn validate(&self) -> Result<()> {
        if self.peak_flops <= 0.0 || self.mem_bandwidth <= 0.0 || self.sram_bytes <= 0.0 {
            return Err(Error::Config("hardware limits must be positive".into()));
        }
        Ok(())
    }

    /// FLOPs per byte at which a kernel flips from memory- to
    /// compute-bound.
    pub fn critical_intensity(&self) -> f64 {
        self.peak_flops / self.mem_bandwidth
    }
}

/// Kernel schedule parameters: the fetch chunk size B_k and the scalar
/// width of the modeled deployment (2 = half precision).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kernel_block: usize,
    pub bytes_per_scalar: usize,
    pub cfg: NsaConfig,
}

impl ScheduleConfig {
    pub fn new(kernel_block: usize, bytes_per_scalar: usize, cfg: NsaConfig) -> Result<Self> {
        if kernel_block == 0 || cfg.sel_block_len % kernel_block != 0 {
            return Err(Error::Config(format!(
                "kernel block {} must divide selection block {}",
                kernel_block, cfg.sel_block_len
            )));
        }
        if bytes_per_scalar == 0 {
            return Err(Error::Config("bytes_per_scalar must be positive".into()));
        }
        Ok(ScheduleConfig { kernel_block, bytes_per_scalar, cfg })
    }
}

/// Simulated traffic for one schedule run. `hbm_bytes_loaded` counts the
/// shared KV fetches of the group-centric schedule;
/// `per_head_baseline_bytes` charges every head its own copy of the same
/// KV blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub hbm_bytes_loaded: u64,
    pub query_bytes_loaded: u64,
    pub sram_peak_bytes: u64,
    pub kv_block_fetch_count: u64,
    pub per_head_baseline_bytes: u64,
    pub sram_capacity_exceeded: bool,
}

/// Counting mode for [`decode_kv_tokens`]: `Exact` evaluates the
/// floor-form compression count, `Table` uses the plain stride quotient
/// that the reference decode volumes follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    Exact,
    Table,
}

impl std::str::FromStr for CountMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(CountMode::Exact),
            "table" => Ok(CountMode::Table),
            other => Err(Error::Argument(format!("unknown mode {other:?}"))),
        }
    }
}

/// KV tokens loaded per decode step at cached length `s`: compression
/// tokens + n*l' selected tokens + w window tokens. Returns the count and
/// a degeneracy flag for s < l (no compression blocks yet).
pub fn decode_kv_tokens(s: usize, cfg: &NsaConfig, mode: CountMode) -> (u64, bool) {
    if s < cfg.block_len {
        return ((cfg.n_selected * cfg.sel_block_len + cfg.window.min(s)) as u64, true);
    }
    let cmp = match mode {
        CountMode::Exact => (s - cfg.block_len) / cfg.stride,
        CountMode::Table => s / cfg.stride,
    };
    ((cmp + cfg.n_selected * cfg.sel_block_len + cfg.window) as u64, false)
}

/// Expected decode speedup over full attention: s / NSA tokens, using
/// table-mode counting. Valid because decoding is memory-bound, so
/// latency tracks bytes moved.
pub fn decode_speedup(s: usize, cfg: &NsaConfig) -> f64 {
    let (tokens, _) = decode_kv_tokens(s, cfg, CountMode::Table);
    s as f64 / tokens as f64
}

/// Arithmetic intensity classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Compute,
    Memory,
}

/// flops/bytes ratio and which hardware limit binds. A ratio exactly at
/// the critical intensity counts as compute-bound.
pub fn arithmetic_intensity(flops: f64, bytes: f64, hw: &HardwareSpec) -> Result<(f64, Bound)> {
    if bytes <= 0.0 {
        return Err(Error::Argument("arithmetic_intensity: bytes must be > 0".into()));
    }
    let ratio = flops / bytes;
    let bound = if ratio >= hw.critical_intensity() { Bound::Compute } else { Bound::Memory };
    Ok((ratio, bound))
}

/// Walk the group-centric schedule over per-position, per-group block
/// selections: load the group's H query rows once, fetch each selected KV
/// block once in B_k-sized chunks, and compare against a per-head
/// baseline that refetches the same blocks H times.
pub fn simulate_group_schedule(
    selections: &[Vec<BlockSelection>],
    sched: &ScheduleConfig,
) -> Result<TrafficReport> {
    let cfg = &sched.cfg;
    cfg.validate()?;
    if sched.kernel_block == 0 || cfg.sel_block_len % sched.kernel_block != 0 {
        return Err(Error::Config(format!(
            "kernel block {} must divide selection block {}",
            sched.kernel_block, cfg.sel_block_len
        )));
    }
    let bps = sched.bytes_per_scalar as u64;
    let heads = cfg.heads_per_group() as u64;
    let kv_row_bytes = (cfg.d_k + cfg.d_v) as u64 * bps;
    let chunks_per_block = (cfg.sel_block_len / sched.kernel_block) as u64;

    let mut kv_bytes = 0u64;
    let mut query_bytes = 0u64;
    let mut fetches = 0u64;
    for per_group in selections {
        if per_group.len() != cfg.n_groups {
            return Err(Error::Shape(format!(
                "{} selections for {} groups",
                per_group.len(),
                cfg.n_groups
            )));
        }
        for sel in per_group {
            query_bytes += heads * cfg.d_q as u64 * bps;
            let blocks = sel.indices.len() as u64;
            fetches += blocks * chunks_per_block;
            kv_bytes += blocks * cfg.sel_block_len as u64 * kv_row_bytes;
        }
    }

    // resident set: H queries + one KV chunk + H output accumulators
    let sram_peak = heads * cfg.d_q as u64 * bps
        + sched.kernel_block as u64 * kv_row_bytes
        + heads * cfg.d_v as u64 * bps;

    Ok(TrafficReport {
        hbm_bytes_loaded: kv_bytes,
        query_bytes_loaded: query_bytes,
        sram_peak_bytes: sram_peak,
        kv_block_fetch_count: fetches,
        per_head_baseline_bytes: heads * kv_bytes,
        sram_capacity_exceeded: false,
    })
}

/// As [`simulate_group_schedule`], flagging (not failing) schedules whose
/// resident set exceeds the hardware's SRAM.
pub fn simulate_with_hardware(
    selections: &[Vec<BlockSelection>],
    sched: &ScheduleConfig,
    hw: &HardwareSpec,
) -> Result<TrafficReport> {
    let mut report = simulate_group_schedule(selections, sched)?;
    report.sram_capacity_exceeded = report.sram_peak_bytes as f64 > hw.sram_bytes;
    Ok(report)
}
