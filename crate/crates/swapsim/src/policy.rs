//! Swap-policy generation: memory reduction list, candidate scoring,
//! logical-layer grouping with estimated durations, and the global
//! swap-timing simulator.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::executor::{MatchTables, TensorFeature};
use crate::profiler::{DetailedRecord, MemoryTimeline};
use crate::trace::{Phase, TensorId};

/// Required memory reduction per op, for exactly the ops whose no-swap
/// usage exceeds the budget.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryReductionList {
    entries: BTreeMap<usize, u64>,
}

impl MemoryReductionList {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, op: usize) -> Option<u64> {
        self.entries.get(&op).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    /// Ops in `[span_start, span_end)` that carry an entry.
    pub fn covered_ops(&self, span_start: usize, span_end: usize) -> usize {
        if span_start >= span_end {
            return 0;
        }
        self.entries.range(span_start..span_end).count()
    }

    /// First (earliest) covered op in the span, if any.
    pub fn first_covered(&self, span_start: usize, span_end: usize) -> Option<usize> {
        if span_start >= span_end {
            return None;
        }
        self.entries.range(span_start..span_end).next().map(|(&k, _)| k)
    }

    /// Decrement every entry in the span by `amount`, clamping at zero and
    /// removing exhausted entries. Empty or inverted spans reduce nothing.
    pub fn reduce_span(&mut self, span_start: usize, span_end: usize, amount: u64) {
        if span_start >= span_end {
            return;
        }
        let ops: Vec<usize> = self.entries.range(span_start..span_end).map(|(&k, _)| k).collect();
        for op in ops {
            let v = self.entries.get_mut(&op).expect("entry present");
            if *v <= amount {
                self.entries.remove(&op);
            } else {
                *v -= amount;
            }
        }
    }

    /// Entry with the largest residual reduction.
    pub fn worst(&self) -> Option<(usize, u64)> {
        self.entries.iter().max_by_key(|(_, &v)| v).map(|(&k, &v)| (k, v))
    }
}

/// Entry for exactly the ops with `actual_usage > budget`.
pub fn build_mrl(timeline: &MemoryTimeline, budget: u64) -> MemoryReductionList {
    let entries = timeline
        .actual_usage
        .iter()
        .enumerate()
        .filter(|(_, &u)| u > budget)
        .map(|(i, &u)| (i, u - budget))
        .collect();
    MemoryReductionList { entries }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub tensor: TensorId,
    pub key: TensorFeature,
    pub size: u64,
    pub last_fwd_use: usize,
    pub first_bwd_use: usize,
    pub swap_out_slot: usize,
    /// MREs covered by `[last_fwd_use + 1, first_bwd_use)`: absence starts
    /// the op after the swap-out, which coexists with its op's outputs.
    pub mre_coverage: usize,
    pub score: f64,
}

/// Rank swappable tensors by `Score = N_mre_hat + C * S_hat`, both terms
/// max-normalized over the surviving candidate set. Tensors whose lifespan
/// overlaps no MRE, and already-selected tensors, are excluded.
pub fn build_cl(
    detailed: &DetailedRecord,
    mrl: &MemoryReductionList,
    c: f64,
    excluded: &HashSet<TensorId>,
) -> Vec<Candidate> {
    let mut raw = Vec::new();
    for (&id, profile) in &detailed.tensors {
        if excluded.contains(&id) || profile.size == 0 {
            continue;
        }
        let (Some(last_fwd), Some(first_bwd), Some(key), Some(slot)) = (
            profile.last_fwd_use,
            profile.first_bwd_use,
            profile.feature_at_last_fwd,
            profile.last_fwd_slot,
        ) else {
            continue;
        };
        if last_fwd + 1 >= first_bwd {
            continue;
        }
        let coverage = mrl.covered_ops(last_fwd + 1, first_bwd);
        if coverage == 0 {
            continue;
        }
        raw.push(Candidate {
            tensor: id,
            key,
            size: profile.size,
            last_fwd_use: last_fwd,
            first_bwd_use: first_bwd,
            swap_out_slot: slot,
            mre_coverage: coverage,
            score: 0.0,
        });
    }

    let max_cov = raw.iter().map(|c| c.mre_coverage).max().unwrap_or(1) as f64;
    let max_size = raw.iter().map(|c| c.size).max().unwrap_or(1) as f64;
    for cand in &mut raw {
        cand.score = cand.mre_coverage as f64 / max_cov + c * (cand.size as f64 / max_size);
    }
    raw.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(b.size.cmp(&a.size))
            .then(a.last_fwd_use.cmp(&b.last_fwd_use))
            .then(a.tensor.cmp(&b.tensor))
    });
    raw
}

/// Contiguous near-even group of ops with an estimated duration and the
/// overlap time still available for swaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicalLayer {
    pub start_op_id: usize,
    pub op_count: usize,
    pub layer_type: Phase,
    pub candidates: Vec<TensorId>,
    pub remaining_time: f64,
    pub estimated_duration: f64,
}

impl LogicalLayer {
    pub fn end_op(&self) -> usize {
        self.start_op_id + self.op_count
    }

    pub fn last_op(&self) -> usize {
        self.end_op() - 1
    }

    pub fn contains(&self, op: usize) -> bool {
        op >= self.start_op_id && op < self.end_op()
    }
}

fn split_even(start: usize, count: usize, groups: usize) -> Vec<(usize, usize)> {
    let base = count / groups;
    let extra = count % groups;
    let mut out = Vec::with_capacity(groups);
    let mut at = start;
    for g in 0..groups {
        let n = base + usize::from(g < extra);
        out.push((at, n));
        at += n;
    }
    out
}

/// Split FWD ops into `groups_fwd` contiguous near-even groups, BWD into
/// `groups_bwd`, and OPT into one layer. Each layer's estimated duration is
/// `(T_iter / N_iter) * N_group`.
pub fn partition_layers(
    detailed: &DetailedRecord,
    groups_fwd: usize,
    groups_bwd: usize,
    overlap_factor: f64,
) -> Result<Vec<LogicalLayer>> {
    let n_iter = detailed.phases.len();
    if n_iter == 0 {
        return Err(SimError::validation("cannot partition an empty iteration"));
    }
    let per_op = detailed.iteration_duration / n_iter as f64;

    let count_of = |p: Phase| detailed.phases.iter().filter(|&&q| q == p).count();
    let start_of = |p: Phase| detailed.phases.iter().position(|&q| q == p);
    let fwd_count = count_of(Phase::Fwd);
    let bwd_count = count_of(Phase::Bwd);
    let opt_count = count_of(Phase::Opt);

    if groups_fwd == 0 || groups_fwd > fwd_count {
        return Err(SimError::validation(format!(
            "groups_fwd {groups_fwd} invalid for {fwd_count} forward ops"
        )));
    }
    if groups_bwd == 0 || groups_bwd > bwd_count {
        return Err(SimError::validation(format!(
            "groups_bwd {groups_bwd} invalid for {bwd_count} backward ops"
        )));
    }

    let mut layers = Vec::new();
    let push_groups = |start: usize, count: usize, groups: usize, phase: Phase, layers: &mut Vec<LogicalLayer>| {
        for (s, n) in split_even(start, count, groups) {
            let estimated = per_op * n as f64;
            layers.push(LogicalLayer {
                start_op_id: s,
                op_count: n,
                layer_type: phase,
                candidates: Vec::new(),
                remaining_time: estimated * overlap_factor,
                estimated_duration: estimated,
            });
        }
    };

    let fwd_start = start_of(Phase::Fwd).expect("fwd ops present");
    push_groups(fwd_start, fwd_count, groups_fwd, Phase::Fwd, &mut layers);
    let bwd_start = start_of(Phase::Bwd).expect("bwd ops present");
    push_groups(bwd_start, bwd_count, groups_bwd, Phase::Bwd, &mut layers);
    if opt_count > 0 {
        let opt_start = start_of(Phase::Opt).expect("opt ops present");
        push_groups(opt_start, opt_count, 1, Phase::Opt, &mut layers);
    }
    Ok(layers)
}

pub fn layer_containing(layers: &[LogicalLayer], op: usize) -> Option<usize> {
    layers.iter().position(|l| l.contains(op))
}

/// `T_swap = S / B`.
pub fn swap_time(size: u64, bandwidth: f64) -> Result<f64> {
    if bandwidth <= 0.0 {
        return Err(SimError::validation("bandwidth must be > 0"));
    }
    Ok(size as f64 / bandwidth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyItem {
    /// Fuzzy match key: feature snapshot at the tensor's last forward use.
    pub key: TensorFeature,
    /// Tensor id in the iteration the policy was generated from.
    pub tensor: TensorId,
    pub size: u64,
    /// Swap-out trigger: the tensor's last forward use.
    pub swap_out_after: usize,
    /// Positional key for the fixed-index baseline matcher.
    pub swap_out_slot: usize,
    pub swap_in_layer: usize,
    /// First op of the swap-in layer (dispatch point for the copy).
    pub swap_in_op: usize,
    /// Op whose dispatch releases the swapped-out block (swap-out
    /// completion point from the simulator).
    pub free_at: usize,
    /// Scheduled without overlap budget; expected to degrade performance.
    pub fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SwapPolicy {
    pub items: Vec<PolicyItem>,
    /// Bandwidth (bytes per model-time unit) used at generation.
    pub bandwidth: f64,
    /// Set when some swap-out never found a layer with spare time.
    pub transfer_saturated: bool,
    pub tables: MatchTables,
}

impl SwapPolicy {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// One JSON object per line, for inspection and golden tests.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&serde_json::to_string(item).expect("item serialization"));
            out.push('\n');
        }
        out
    }
}

/// Pre-trigger swap-in placement: walk candidates in score order, searching
/// backward from the layer before the first backward use (bounded by the
/// earliest covered MRE) for a layer with `remaining_time > T_swap`. When a
/// pass places nothing, the highest-score candidate is forced into the
/// layer immediately preceding its first backward use.
pub fn simulate_swap_in(
    cl: &[Candidate],
    mrl: &mut MemoryReductionList,
    layers: &mut [LogicalLayer],
    bandwidth: f64,
) -> Result<Vec<PolicyItem>> {
    let mut items = Vec::new();

    fn place(
        items: &mut Vec<PolicyItem>,
        cand: &Candidate,
        layer_idx: usize,
        fallback: bool,
        mrl: &mut MemoryReductionList,
        layers: &mut [LogicalLayer],
        bandwidth: f64,
    ) {
        let t_swap = swap_time(cand.size, bandwidth).expect("validated bandwidth");
        layers[layer_idx].remaining_time -= t_swap;
        layers[layer_idx].candidates.push(cand.tensor);
        // The tensor is resident again from the op where its swap-in is
        // dispatched, so only the realized absence counts as reduction.
        let swap_in_op = layers[layer_idx].start_op_id;
        mrl.reduce_span(cand.last_fwd_use + 1, swap_in_op, cand.size);
        items.push(PolicyItem {
            key: cand.key,
            tensor: cand.tensor,
            size: cand.size,
            swap_out_after: cand.last_fwd_use,
            swap_out_slot: cand.swap_out_slot,
            swap_in_layer: layer_idx,
            swap_in_op,
            free_at: cand.last_fwd_use,
            fallback,
        });
    }

    swap_time(1, bandwidth)?; // validate once up front

    for cand in cl {
        if mrl.is_empty() {
            break;
        }
        let t_swap = swap_time(cand.size, bandwidth)?;
        let Some(use_layer) = layer_containing(layers, cand.first_bwd_use) else {
            continue;
        };
        // Earlier placements in this pass may have cleared every MRE the
        // candidate covers.
        let Some(peak_op) = mrl.first_covered(cand.last_fwd_use + 1, cand.first_bwd_use) else {
            continue;
        };
        // Swapping in at or before the peak would re-inflate it: the
        // backward search stops at the layer after the earliest MRE the
        // candidate covers, so every placement reduces that MRE.
        let floor = layer_containing(layers, peak_op).unwrap_or(0) + 1;

        // The use layer itself is eligible: a swap-in dispatched at an op
        // is processed before that op's inputs, so arriving within the use
        // layer is still in time (at the cost of a possible stall).
        let found = (floor..=use_layer)
            .rev()
            .find(|&idx| layers[idx].remaining_time > t_swap);
        if let Some(idx) = found {
            place(&mut items, cand, idx, false, mrl, layers, bandwidth);
        }
    }

    if items.is_empty() && !mrl.is_empty() {
        // No candidate fits anywhere: accept the stall rather than OOM.
        if let Some(best) = cl
            .iter()
            .find(|c| mrl.covered_ops(c.last_fwd_use + 1, c.first_bwd_use) > 0)
        {
            let use_layer = layer_containing(layers, best.first_bwd_use)
                .ok_or_else(|| SimError::validation("first backward use outside all layers"))?;
            place(&mut items, best, use_layer, true, mrl, layers, bandwidth);
        }
    }

    Ok(items)
}

/// Swap-out completion: in dispatch order, scan forward from the layer of
/// the last forward use for a layer with spare time before the item's own
/// swap-in; mark `free_at` at that layer's last op. Returns whether any
/// item saturated the transfer budget.
pub fn simulate_swap_out(
    items: &mut [PolicyItem],
    layers: &mut [LogicalLayer],
    bandwidth: f64,
) -> Result<bool> {
    let mut saturated = false;
    let last_fwd_layer = layers
        .iter()
        .rposition(|l| l.layer_type == Phase::Fwd)
        .ok_or_else(|| SimError::validation("no forward layers"))?;

    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by_key(|&i| items[i].swap_out_after);

    for i in order {
        let t_swap = swap_time(items[i].size, bandwidth)?;
        let start = layer_containing(layers, items[i].swap_out_after)
            .ok_or_else(|| SimError::validation("swap-out op outside all layers"))?;
        let end = items[i].swap_in_layer.max(start);
        let found = (start..end).find(|&idx| layers[idx].remaining_time > t_swap);
        match found {
            Some(idx) => {
                items[i].free_at = layers[idx].last_op();
                layers[idx].remaining_time -= t_swap;
                let tensor = items[i].tensor;
                layers[idx].candidates.push(tensor);
            }
            None => {
                saturated = true;
                items[i].free_at = layers[last_fwd_layer].last_op();
            }
        }
    }
    Ok(saturated)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Coefficient weighting normalized size against MRE coverage.
    pub c: f64,
    pub groups_fwd: usize,
    pub groups_bwd: usize,
    /// Fraction of each layer's estimated duration available to swaps.
    pub overlap_factor: f64,
    /// Bytes per model-time unit between host and device.
    pub bandwidth: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            c: 1.0,
            groups_fwd: 8,
            groups_bwd: 8,
            overlap_factor: 1.0,
            bandwidth: 1024.0,
        }
    }
}

/// Full generation loop: rebuild the candidate list and place swap-ins
/// until the MRL clears (or error out), then fix swap-out completion
/// points.
pub fn generate_policy(
    detailed: &DetailedRecord,
    timeline: &MemoryTimeline,
    budget: u64,
    config: &PolicyConfig,
) -> Result<SwapPolicy> {
    if budget == 0 {
        return Err(SimError::validation("budget must be > 0"));
    }
    let mut mrl = build_mrl(timeline, budget);
    if mrl.is_empty() {
        return Ok(SwapPolicy {
            bandwidth: config.bandwidth,
            ..SwapPolicy::default()
        });
    }

    let mut layers = partition_layers(detailed, config.groups_fwd, config.groups_bwd, config.overlap_factor)?;
    let mut excluded: HashSet<TensorId> = HashSet::new();
    let mut items: Vec<PolicyItem> = Vec::new();

    while !mrl.is_empty() {
        let cl = build_cl(detailed, &mrl, config.c, &excluded);
        if cl.is_empty() {
            let (op_index, residual_bytes) = mrl.worst().expect("mrl non-empty");
            return Err(SimError::Infeasible {
                op_index,
                residual_bytes,
            });
        }
        let new_items = simulate_swap_in(&cl, &mut mrl, &mut layers, config.bandwidth)?;
        debug_assert!(!new_items.is_empty(), "swap-in pass must make progress");
        for item in &new_items {
            excluded.insert(item.tensor);
        }
        items.extend(new_items);
    }

    items.sort_by_key(|it| it.swap_out_after);
    let transfer_saturated = simulate_swap_out(&mut items, &mut layers, config.bandwidth)?;

    Ok(SwapPolicy {
        items,
        bandwidth: config.bandwidth,
        transfer_saturated,
        tables: detailed.tables.clone(),
    })
}
