//! Deterministic dispatch-order execution engine: a host clock, a serial
//! compute stream and a serial transfer stream over a caching arena
//! allocator, with OOM recovery and two block-release disciplines for
//! swapped-out memory.

mod pool;

pub use pool::{Block, MemoryPool};

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::executor::{SwapCommandKind, SwapPlan};
use crate::profiler::{SwapDirection, SwapEvent};
use crate::trace::{validate_trace, IterationTrace, TensorId};

/// How the block of a swapped-out tensor is returned to the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStreamMode {
    /// The host polls a completion event for every outstanding block on
    /// each dispatch and releases only blocks whose copy has finished:
    /// safe, but host-bound and memory is held long.
    Naive,
    /// Blocks are released at a precomputed free point; a reuse before the
    /// copy finishes makes the writer wait on the copy's completion.
    Custom,
}

impl Default for RecordStreamMode {
    fn default() -> Self {
        RecordStreamMode::Custom
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub memory_budget: u64,
    /// Bytes per model-time unit on the transfer stream.
    pub bandwidth: f64,
    /// Host time consumed dispatching one op.
    pub host_dispatch_cost: f64,
    /// Host time per completion-event poll (naive mode).
    pub event_query_cost: f64,
    /// Allow free-region coalescing during OOM recovery.
    pub defragmentation: bool,
    pub record_stream_mode: RecordStreamMode,
    /// Fault injection: release swapped-out blocks immediately with no
    /// synchronization, so reuse can overlap the in-flight copy.
    pub sabotage_skip_sync: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            memory_budget: 1 << 40,
            bandwidth: 1024.0,
            host_dispatch_cost: 1.0,
            event_query_cost: 0.2,
            defragmentation: true,
            record_stream_mode: RecordStreamMode::Custom,
            sabotage_skip_sync: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    ComputeWrite,
    CopyOut,
    CopyIn,
}

/// One logged access to a block region, for post-hoc hazard analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoggedInterval {
    pub offset: u64,
    pub size: u64,
    pub start: f64,
    pub end: f64,
    pub kind: AccessKind,
    pub op_index: usize,
    pub tensor: TensorId,
}

/// Count pairs where a copy interval overlaps a compute-write interval on
/// an overlapping address range: use-after-free symptoms of a release
/// without synchronization.
pub fn hazard_check(log: &[LoggedInterval]) -> u64 {
    let mut hazards = 0;
    for (i, a) in log.iter().enumerate() {
        for b in &log[i + 1..] {
            let (copy, write) = match (a.kind, b.kind) {
                (AccessKind::ComputeWrite, AccessKind::CopyOut | AccessKind::CopyIn) => (b, a),
                (AccessKind::CopyOut | AccessKind::CopyIn, AccessKind::ComputeWrite) => (a, b),
                _ => continue,
            };
            if copy.tensor == write.tensor {
                continue;
            }
            let space = copy.offset < write.offset + write.size && write.offset < copy.offset + copy.size;
            let time = copy.start < write.end && write.start < copy.end;
            if space && time {
                hazards += 1;
            }
        }
    }
    hazards
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    /// Max bytes ever held by the allocator (live + in-flight copies +
    /// blocks awaiting release).
    pub peak_memory: u64,
    /// End-to-end iteration time: slowest of host, compute and transfer.
    pub step_time: f64,
    pub host_time: f64,
    pub compute_time: f64,
    pub device_idle_time: f64,
    /// Allocation attempts that entered OOM recovery.
    pub oom_count: u64,
    pub passive_swap_count: u64,
    pub hazard_count: u64,
    pub swap_out_bytes: u64,
    pub swap_in_bytes: u64,
    /// Ops between a swap-out dispatch and its block's release.
    pub reuse_interval_mean: f64,
    pub reuse_interval_max: u64,
}

#[derive(Debug, Clone)]
pub struct IterationReport {
    pub metrics: SimMetrics,
    /// Bytes of logically resident tensors at each op dispatch.
    pub live_memory: Vec<u64>,
    pub swap_events: Vec<SwapEvent>,
    pub log: Vec<LoggedInterval>,
}

#[derive(Debug, Clone, Copy)]
enum TState {
    Live { block: Block },
    /// Copy-out dispatched; block still owned, awaiting release.
    PendingRelease { block: Block, copy_end: f64, marked_at: usize },
    Out { size: u64 },
    SwappingIn { block: Block, copy_end: f64 },
    Freed,
}

struct Sim<'a> {
    trace: &'a IterationTrace,
    config: &'a SimConfig,
    pool: MemoryPool,
    states: BTreeMap<TensorId, TState>,
    last_use: BTreeMap<TensorId, usize>,
    host_time: f64,
    compute_tail: f64,
    swap_tail: f64,
    log: Vec<LoggedInterval>,
    swap_events: Vec<SwapEvent>,
    live_memory: Vec<u64>,
    reuse_intervals: Vec<u64>,
    /// Bytes of tensors evicted with an immediate free during the current
    /// op (passive swaps, sabotage frees); they still count as logically
    /// resident at this op.
    out_this_op: u64,
    metrics: SimMetrics,
}

impl<'a> Sim<'a> {
    fn size_of(&self, t: TensorId) -> u64 {
        self.trace.tensors[&t].size
    }

    fn note_peak(&mut self) {
        self.metrics.peak_memory = self.metrics.peak_memory.max(self.pool.used_bytes());
    }

    fn record_event(&mut self, op: usize, t: TensorId, size: u64, direction: SwapDirection) {
        self.swap_events.push(SwapEvent {
            op_index: op,
            tensor: t,
            size,
            direction,
        });
    }

    fn release(&mut self, t: TensorId, block: Block, copy_end: f64, marked_at: usize, at_op: usize) {
        self.pool.free(Block {
            ready_at: copy_end,
            ..block
        });
        self.states.insert(t, TState::Out { size: block.size });
        self.reuse_intervals.push((at_op - marked_at) as u64);
    }

    /// Naive-mode host polling: pay one event query per outstanding block,
    /// then release every block whose copy has completed by now.
    fn poll_releases(&mut self, op: usize) {
        let pending: Vec<(TensorId, Block, f64, usize)> = self
            .states
            .iter()
            .filter_map(|(&t, s)| match *s {
                TState::PendingRelease { block, copy_end, marked_at } => Some((t, block, copy_end, marked_at)),
                _ => None,
            })
            .collect();
        self.host_time += self.config.event_query_cost * pending.len() as f64;
        for (t, block, copy_end, marked_at) in pending {
            if copy_end <= self.host_time {
                self.release(t, block, copy_end, marked_at, op);
            }
        }
    }

    /// Allocate with OOM recovery: collect deferred releases, then
    /// defragment, then passively swap out closest-size resident tensors
    /// until the request fits.
    fn alloc_with_oom(&mut self, size: u64, op: usize, protect: &HashSet<TensorId>) -> Result<Block> {
        if let Some(b) = self.pool.alloc(size) {
            self.note_peak();
            return Ok(b);
        }

        // Routine deferred-release collection (the analog of processing
        // outstanding stream events before declaring OOM): blocks marked
        // for release are handed back with their copy-drain time attached.
        let pending: Vec<(TensorId, Block, f64, usize)> = self
            .states
            .iter()
            .filter_map(|(&t, s)| match *s {
                TState::PendingRelease { block, copy_end, marked_at } => Some((t, block, copy_end, marked_at)),
                _ => None,
            })
            .collect();
        if !pending.is_empty() {
            for (t, block, copy_end, marked_at) in pending {
                self.release(t, block, copy_end, marked_at, op);
            }
            if let Some(b) = self.pool.alloc(size) {
                self.note_peak();
                return Ok(b);
            }
        }
        self.metrics.oom_count += 1;

        if self.config.defragmentation {
            self.pool.defragment();
            if let Some(b) = self.pool.alloc(size) {
                self.note_peak();
                return Ok(b);
            }
        }

        loop {
            // Prefer settled blocks; an in-flight prefetch is evicted back
            // only when nothing else remains (thrash rather than die).
            let victim = self
                .states
                .iter()
                .filter_map(|(&t, s)| match *s {
                    TState::Live { block } if !protect.contains(&t) => Some((t, block, 0.0f64)),
                    TState::SwappingIn { block, copy_end } if !protect.contains(&t) => {
                        Some((t, block, copy_end))
                    }
                    _ => None,
                })
                .min_by(|a, b| {
                    let key = |&(t, block, in_flight): &(TensorId, Block, f64)| {
                        (in_flight > 0.0, block.size.abs_diff(size), std::cmp::Reverse(block.size), t)
                    };
                    key(a).cmp(&key(b))
                });
            let Some((t, block, in_flight_end)) = victim else {
                return Err(SimError::Oom {
                    op_index: op,
                    requested: size,
                });
            };
            let copy_start = self
                .swap_tail
                .max(self.host_time)
                .max(block.ready_at)
                .max(in_flight_end);
            let copy_end = copy_start + block.size as f64 / self.config.bandwidth;
            self.swap_tail = copy_end;
            self.log.push(LoggedInterval {
                offset: block.offset,
                size: block.size,
                start: copy_start,
                end: copy_end,
                kind: AccessKind::CopyOut,
                op_index: op,
                tensor: t,
            });
            self.record_event(op, t, block.size, SwapDirection::Out);
            self.metrics.passive_swap_count += 1;
            self.metrics.swap_out_bytes += block.size;
            // Passive eviction synchronizes: the region is writable only
            // after the copy drains.
            self.pool.free(Block {
                ready_at: copy_end,
                ..block
            });
            self.states.insert(t, TState::Out { size: block.size });
            self.out_this_op += block.size;
            if self.config.defragmentation {
                self.pool.defragment();
            }
            if let Some(b) = self.pool.alloc(size) {
                self.note_peak();
                return Ok(b);
            }
        }
    }

    /// Dispatch a host-to-device copy bringing `t` back. Returns the time
    /// the data becomes readable.
    fn begin_swap_in(&mut self, t: TensorId, op: usize, protect: &HashSet<TensorId>) -> Result<f64> {
        let size = match self.states.get(&t) {
            Some(TState::Out { size }) => *size,
            _ => return Err(SimError::validation("swap-in of a tensor that is not out")),
        };
        let block = self.alloc_with_oom(size, op, protect)?;
        let copy_start = self.swap_tail.max(self.host_time).max(block.ready_at);
        let copy_end = copy_start + size as f64 / self.config.bandwidth;
        self.swap_tail = copy_end;
        self.log.push(LoggedInterval {
            offset: block.offset,
            size,
            start: copy_start,
            end: copy_end,
            kind: AccessKind::CopyIn,
            op_index: op,
            tensor: t,
        });
        self.record_event(op, t, size, SwapDirection::In);
        self.metrics.swap_in_bytes += size;
        self.states.insert(t, TState::SwappingIn { block, copy_end });
        Ok(copy_end)
    }

    /// Dispatch a device-to-host copy for a live tensor; `data_ready` is
    /// when its producing/using compute finishes.
    fn begin_swap_out(&mut self, t: TensorId, op: usize, data_ready: f64) {
        let Some(TState::Live { block }) = self.states.get(&t).copied() else {
            return; // stale command; nothing to do
        };
        let copy_start = self.swap_tail.max(data_ready).max(self.host_time);
        let copy_end = copy_start + block.size as f64 / self.config.bandwidth;
        self.swap_tail = copy_end;
        self.log.push(LoggedInterval {
            offset: block.offset,
            size: block.size,
            start: copy_start,
            end: copy_end,
            kind: AccessKind::CopyOut,
            op_index: op,
            tensor: t,
        });
        self.record_event(op, t, block.size, SwapDirection::Out);
        self.metrics.swap_out_bytes += block.size;
        if self.config.sabotage_skip_sync {
            // Fault injection: hand the block back with no ready time.
            self.pool.free(Block {
                ready_at: 0.0,
                ..block
            });
            self.states.insert(t, TState::Out { size: block.size });
            self.out_this_op += block.size;
            self.reuse_intervals.push(0);
        } else {
            self.states.insert(t, TState::PendingRelease {
                block,
                copy_end,
                marked_at: op,
            });
        }
    }

    /// Make an input readable; returns the time it is ready.
    fn ensure_readable(&mut self, t: TensorId, op: usize, protect: &HashSet<TensorId>) -> Result<f64> {
        match self.states.get(&t).copied() {
            Some(TState::Live { .. }) => Ok(0.0),
            Some(TState::SwappingIn { block, copy_end }) => {
                self.states.insert(t, TState::Live { block });
                Ok(copy_end)
            }
            // Marked out but the copy has not released the block: the
            // on-device data is still valid, so cancel the eviction. The
            // block was still held the whole time, which counts toward the
            // reuse-interval metric.
            Some(TState::PendingRelease { block, marked_at, .. }) => {
                self.states.insert(t, TState::Live { block });
                self.record_event(op, t, block.size, SwapDirection::In);
                self.reuse_intervals.push((op - marked_at) as u64);
                Ok(0.0)
            }
            // Not resident and no scheduled swap-in: fetch on demand and
            // stall the consumer.
            Some(TState::Out { .. }) => {
                let ready = self.begin_swap_in(t, op, protect)?;
                if let Some(TState::SwappingIn { block, .. }) = self.states.get(&t).copied() {
                    self.states.insert(t, TState::Live { block });
                }
                Ok(ready)
            }
            Some(TState::Freed) | None => Err(SimError::validation(format!(
                "op {op} reads tensor {} that is not allocated",
                t.0
            ))),
        }
    }

    /// Logical residency at op `i`: everything live or arriving, plus
    /// tensors that left *during* this op — a tensor swapped out at op `i`
    /// coexisted with the op's outputs, so its absence starts at `i + 1`.
    fn logical_resident_bytes(&self, i: usize) -> u64 {
        self.states
            .values()
            .map(|s| match *s {
                TState::Live { block } | TState::SwappingIn { block, .. } => block.size,
                TState::PendingRelease { block, marked_at, .. } if marked_at == i => block.size,
                _ => 0,
            })
            .sum::<u64>()
            + self.out_this_op
    }
}

/// Execute one iteration under a swap plan (possibly empty). Deterministic:
/// identical inputs produce an identical report.
pub fn run_iteration(trace: &IterationTrace, plan: &SwapPlan, config: &SimConfig) -> Result<IterationReport> {
    validate_trace(trace)?;
    if config.bandwidth <= 0.0 {
        return Err(SimError::validation("bandwidth must be > 0"));
    }
    if config.memory_budget == 0 {
        return Err(SimError::validation("memory budget must be > 0"));
    }

    let n = trace.ops.len();
    let mut swap_in_at: BTreeMap<usize, Vec<TensorId>> = BTreeMap::new();
    let mut swap_out_at: BTreeMap<usize, Vec<TensorId>> = BTreeMap::new();
    let mut free_at: BTreeMap<usize, Vec<TensorId>> = BTreeMap::new();
    for cmd in &plan.commands {
        let bucket = match cmd.kind {
            SwapCommandKind::SwapIn => &mut swap_in_at,
            SwapCommandKind::SwapOut => &mut swap_out_at,
            SwapCommandKind::FreeAt => &mut free_at,
        };
        // Commands beyond the iteration (shifted sequences) resolve at the
        // final op.
        bucket.entry(cmd.op_index.min(n.saturating_sub(1))).or_default().push(cmd.tensor);
    }

    let mut sim = Sim {
        trace,
        config,
        pool: MemoryPool::new(config.memory_budget),
        states: BTreeMap::new(),
        last_use: trace.last_use(),
        host_time: 0.0,
        compute_tail: 0.0,
        swap_tail: 0.0,
        log: Vec::new(),
        swap_events: Vec::new(),
        live_memory: Vec::with_capacity(n),
        reuse_intervals: Vec::new(),
        out_this_op: 0,
        metrics: SimMetrics::default(),
    };

    for op in &trace.ops {
        let i = op.op_index;
        sim.out_this_op = 0;
        sim.host_time += config.host_dispatch_cost;
        if config.record_stream_mode == RecordStreamMode::Naive {
            sim.poll_releases(i);
        }

        let mut protect: HashSet<TensorId> = op.inputs.iter().chain(op.outputs.iter()).copied().collect();

        // Scheduled prefetches for this op.
        for t in swap_in_at.get(&i).cloned().unwrap_or_default() {
            // A tensor already past its last use, or still pending release,
            // is handled lazily by ensure_readable; only true misses fetch.
            if sim.last_use.get(&t).is_some_and(|&lu| lu < i) {
                continue;
            }
            if matches!(sim.states.get(&t), Some(TState::Out { .. })) {
                protect.insert(t);
                sim.begin_swap_in(t, i, &protect)?;
            }
        }

        // Input readiness (on-demand fetches stall the consumer).
        let mut ready = 0.0f64;
        for &t in &op.inputs {
            ready = ready.max(sim.ensure_readable(t, i, &protect)?);
        }

        // Output allocation.
        let mut blocks = Vec::with_capacity(op.outputs.len());
        for &t in &op.outputs {
            let block = sim.alloc_with_oom(sim.size_of(t), i, &protect)?;
            ready = ready.max(block.ready_at);
            sim.states.insert(t, TState::Live { block });
            blocks.push((t, block));
        }

        // Compute.
        let start = sim.compute_tail.max(sim.host_time).max(ready);
        let end = start + op.compute_cost;
        sim.metrics.device_idle_time += start - sim.compute_tail;
        sim.compute_tail = end;
        for (t, block) in blocks {
            sim.log.push(LoggedInterval {
                offset: block.offset,
                size: block.size,
                start,
                end,
                kind: AccessKind::ComputeWrite,
                op_index: i,
                tensor: t,
            });
        }

        // Policy swap-outs triggered after this op.
        for t in swap_out_at.get(&i).cloned().unwrap_or_default() {
            sim.begin_swap_out(t, i, end);
        }

        sim.live_memory.push(sim.logical_resident_bytes(i));

        // Custom-mode releases at their precomputed points.
        if config.record_stream_mode == RecordStreamMode::Custom && !config.sabotage_skip_sync {
            for t in free_at.get(&i).cloned().unwrap_or_default() {
                if let Some(TState::PendingRelease { block, copy_end, marked_at }) = sim.states.get(&t).copied() {
                    sim.release(t, block, copy_end, marked_at, i);
                }
            }
        }

        // Reference-count frees at the tensor's last use. The region
        // becomes writable once this op's compute finishes.
        for &t in op.inputs.iter().chain(op.outputs.iter()) {
            if sim.last_use.get(&t) == Some(&i) {
                if let Some(TState::Live { block }) = sim.states.get(&t).copied() {
                    sim.pool.free(Block {
                        ready_at: end,
                        ..block
                    });
                    sim.states.insert(t, TState::Freed);
                }
            }
        }
    }

    // Drain blocks still awaiting release.
    let leftover: Vec<(TensorId, Block, f64, usize)> = sim
        .states
        .iter()
        .filter_map(|(&t, s)| match *s {
            TState::PendingRelease { block, copy_end, marked_at } => Some((t, block, copy_end, marked_at)),
            _ => None,
        })
        .collect();
    for (t, block, copy_end, marked_at) in leftover {
        sim.release(t, block, copy_end, marked_at, n.saturating_sub(1));
    }

    sim.metrics.host_time = sim.host_time;
    sim.metrics.compute_time = sim.compute_tail;
    sim.metrics.step_time = sim.host_time.max(sim.compute_tail).max(sim.swap_tail);
    sim.metrics.hazard_count = hazard_check(&sim.log);
    if !sim.reuse_intervals.is_empty() {
        sim.metrics.reuse_interval_mean =
            sim.reuse_intervals.iter().sum::<u64>() as f64 / sim.reuse_intervals.len() as f64;
        sim.metrics.reuse_interval_max = sim.reuse_intervals.iter().copied().max().unwrap_or(0);
    }

    Ok(IterationReport {
        metrics: sim.metrics,
        live_memory: sim.live_memory,
        swap_events: sim.swap_events,
        log: sim.log,
    })
}

/// Independent liveness scan: bytes of tensors with
/// `first_def <= i <= last_use` at each op. This is what a no-swap run's
/// live memory must equal.
pub fn no_swap_usage(trace: &IterationTrace) -> Vec<u64> {
    let mut first_def: BTreeMap<TensorId, usize> = BTreeMap::new();
    for op in &trace.ops {
        for &t in &op.outputs {
            first_def.entry(t).or_insert(op.op_index);
        }
    }
    let last_use = trace.last_use();
    let n = trace.ops.len();
    let mut usage = vec![0u64; n];
    for (&t, &d) in &first_def {
        let lu = last_use[&t];
        let size = trace.tensors[&t].size;
        for slot in usage.iter_mut().take(lu + 1).skip(d) {
            *slot += size;
        }
    }
    usage
}
