//! Lightweight/Detailed profiling, sequence-change detection, the stage
//! machine, and reconstruction of no-swap memory usage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::executor::{FeatureTracker, MatchTables, TensorFeature};
use crate::trace::{DType, IterationTrace, Phase, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    WarmUp,
    GenPolicy,
    Stable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfilerConfig {
    /// Stable iterations before WarmUp -> GenPolicy.
    pub m: u32,
    /// Stable iterations before GenPolicy -> Stable.
    pub n: u32,
    /// Length-change fraction above which the sequence counts as changed.
    pub len_threshold: f64,
    /// Cosine similarity below which the sequence counts as changed.
    pub cos_threshold: f64,
}

impl Default for ProfilerConfig {
    fn default() -> Self {
        ProfilerConfig {
            m: 2,
            n: 5,
            len_threshold: 0.05,
            cos_threshold: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeqComparison {
    pub len_diff_fraction: f64,
    pub cosine_similarity: f64,
}

/// Length difference fraction plus cosine similarity over token-frequency
/// histograms (histograms keep cosine well-defined for unequal lengths).
pub fn compare_sequences(a: &[u32], b: &[u32]) -> Result<SeqComparison> {
    if a.is_empty() || b.is_empty() {
        return Err(SimError::validation("cannot compare empty token sequences"));
    }
    let len_diff_fraction =
        (a.len() as f64 - b.len() as f64).abs() / a.len().max(b.len()) as f64;

    let mut ha: BTreeMap<u32, u64> = BTreeMap::new();
    let mut hb: BTreeMap<u32, u64> = BTreeMap::new();
    for &t in a {
        *ha.entry(t).or_default() += 1;
    }
    for &t in b {
        *hb.entry(t).or_default() += 1;
    }
    let dot: f64 = ha
        .iter()
        .filter_map(|(t, &ca)| hb.get(t).map(|&cb| ca as f64 * cb as f64))
        .sum();
    let norm = |h: &BTreeMap<u32, u64>| {
        h.values().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt()
    };
    Ok(SeqComparison {
        len_diff_fraction,
        cosine_similarity: dot / (norm(&ha) * norm(&hb)),
    })
}

/// Stage-adjusting state machine. All "static" fields live here and are
/// initialized on the first observation.
#[derive(Debug, Clone)]
pub struct ProfilerState {
    pub config: ProfilerConfig,
    prev_seq: Option<Vec<u32>>,
    stable_step: u32,
    prev_stage: Stage,
}

impl ProfilerState {
    pub fn new(config: ProfilerConfig) -> Self {
        ProfilerState {
            config,
            prev_seq: None,
            stable_step: 0,
            prev_stage: Stage::WarmUp,
        }
    }

    /// Resume from a known state; used for exhaustive conformance checks
    /// and for scenario checkpointing.
    pub fn at(config: ProfilerConfig, stage: Stage, stable_step: u32, prev_seq: Vec<u32>) -> Self {
        ProfilerState {
            config,
            prev_seq: Some(prev_seq),
            stable_step,
            prev_stage: stage,
        }
    }

    pub fn stage(&self) -> Stage {
        self.prev_stage
    }

    pub fn stable_step(&self) -> u32 {
        self.stable_step
    }

    /// One stage-adjustment step: count stable iterations, promote
    /// WarmUp -> GenPolicy -> Stable, and fall back to WarmUp on change.
    pub fn adjust_stage(&mut self, seq: &[u32]) -> Stage {
        let prev = self.prev_seq.get_or_insert_with(|| seq.to_vec());
        let cmp = compare_sequences(seq, prev).expect("non-empty sequences");

        let stage;
        if cmp.len_diff_fraction < self.config.len_threshold
            && cmp.cosine_similarity > self.config.cos_threshold
        {
            self.stable_step += 1;
            if self.prev_stage == Stage::WarmUp && self.stable_step > self.config.m {
                stage = Stage::GenPolicy;
                self.stable_step = 0;
            } else if self.prev_stage == Stage::GenPolicy && self.stable_step > self.config.n {
                stage = Stage::Stable;
            } else {
                stage = self.prev_stage;
            }
        } else {
            stage = Stage::WarmUp;
            self.stable_step = 0;
        }

        self.prev_stage = stage;
        self.prev_seq = Some(seq.to_vec());
        stage
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapDirection {
    Out,
    In,
}

/// One observed swap during an iteration (policy-driven or passive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapEvent {
    pub op_index: usize,
    pub tensor: TensorId,
    pub size: u64,
    pub direction: SwapDirection,
}

/// Per-tensor profile captured in Detailed mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorProfile {
    pub size: u64,
    pub dtype: DType,
    /// Op indices that used this tensor, in order.
    pub uses: Vec<usize>,
    pub last_fwd_use: Option<usize>,
    pub first_bwd_use: Option<usize>,
    /// Feature snapshot right after the last forward use (the swap-out
    /// match key).
    pub feature_at_last_fwd: Option<TensorFeature>,
    /// Position of this tensor among the using op's inputs++outputs at the
    /// last forward use (fixed-index baseline key).
    pub last_fwd_slot: Option<usize>,
}

/// Detailed-mode record: per-op tokens, phases and live memory, the
/// iteration duration, per-tensor profiles, and observed swaps. Per-op
/// execution times are never recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailedRecord {
    pub tokens: Vec<u32>,
    pub phases: Vec<Phase>,
    /// Bytes of tensors resident on device, measured at each op dispatch.
    pub live_memory: Vec<u64>,
    pub iteration_duration: f64,
    pub tensors: BTreeMap<TensorId, TensorProfile>,
    pub swap_events: Vec<SwapEvent>,
    pub tables: MatchTables,
}

/// Build a DetailedRecord from a trace plus runtime observations.
pub fn collect_detailed(
    trace: &IterationTrace,
    tables: MatchTables,
    live_memory: Vec<u64>,
    iteration_duration: f64,
    swap_events: Vec<SwapEvent>,
) -> DetailedRecord {
    let mut tracker = FeatureTracker::new(&tables);
    let mut tensors: BTreeMap<TensorId, TensorProfile> = trace
        .tensors
        .iter()
        .map(|(&id, decl)| {
            (
                id,
                TensorProfile {
                    size: decl.size,
                    dtype: decl.dtype,
                    uses: Vec::new(),
                    last_fwd_use: None,
                    first_bwd_use: None,
                    feature_at_last_fwd: None,
                    last_fwd_slot: None,
                },
            )
        })
        .collect();

    for op in &trace.ops {
        let touched = tracker.apply_op(trace, op);
        for (slot, t) in touched.iter().enumerate() {
            let profile = tensors.get_mut(t).expect("declared tensor");
            profile.uses.push(op.op_index);
            match op.phase {
                Phase::Fwd => {
                    profile.last_fwd_use = Some(op.op_index);
                    profile.feature_at_last_fwd = tracker.feature(*t);
                    profile.last_fwd_slot = Some(slot);
                }
                Phase::Bwd => {
                    if profile.first_bwd_use.is_none() {
                        profile.first_bwd_use = Some(op.op_index);
                    }
                }
                Phase::Opt => {}
            }
        }
    }

    DetailedRecord {
        tokens: crate::trace::tokenize(trace),
        phases: trace.ops.iter().map(|op| op.phase).collect(),
        live_memory,
        iteration_duration,
        tensors,
        swap_events,
        tables,
    }
}

/// No-swap memory usage reconstructed from a (possibly swapped) iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryTimeline {
    pub actual_usage: Vec<u64>,
}

impl MemoryTimeline {
    pub fn peak(&self) -> u64 {
        self.actual_usage.iter().copied().max().unwrap_or(0)
    }
}

/// Add back the size of every tensor that was swapped out and not yet
/// swapped back at each op: `actual[i] = measured[i] + sum(absent sizes)`.
/// A tensor swapped out at op `o` still coexists with op `o`'s outputs,
/// so its absence covers `[o + 1, swap_in_op)`.
pub fn reconstruct_memory(detailed: &DetailedRecord) -> Result<MemoryTimeline> {
    let n = detailed.live_memory.len();
    let mut delta = vec![0i64; n + 1];
    let mut open: BTreeMap<TensorId, (usize, u64)> = BTreeMap::new();

    for ev in &detailed.swap_events {
        if ev.op_index >= n {
            return Err(SimError::validation(format!(
                "swap event references op {} outside iteration of {n} ops",
                ev.op_index
            )));
        }
        match ev.direction {
            SwapDirection::Out => {
                open.insert(ev.tensor, (ev.op_index, ev.size));
            }
            SwapDirection::In => {
                let (start, size) = open.remove(&ev.tensor).ok_or_else(|| {
                    SimError::validation(format!(
                        "swap-in of tensor {} without prior swap-out",
                        ev.tensor.0
                    ))
                })?;
                if start + 1 < ev.op_index {
                    delta[start + 1] += size as i64;
                    delta[ev.op_index] -= size as i64;
                }
            }
        }
    }
    // Tensors still out at iteration end stay absent through the tail.
    for (_, (start, size)) in open {
        delta[start + 1] += size as i64;
        delta[n] -= size as i64;
    }

    let mut absent = 0i64;
    let actual_usage = detailed
        .live_memory
        .iter()
        .enumerate()
        .map(|(i, &measured)| {
            absent += delta[i];
            measured + absent as u64
        })
        .collect();
    Ok(MemoryTimeline { actual_usage })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record_with(live: Vec<u64>, events: Vec<SwapEvent>) -> DetailedRecord {
        DetailedRecord {
            tokens: vec![1; live.len()],
            phases: vec![Phase::Fwd; live.len()],
            live_memory: live,
            iteration_duration: 1.0,
            tensors: BTreeMap::new(),
            swap_events: events,
            tables: MatchTables::default(),
        }
    }

    #[test]
    fn identical_sequences_compare_as_stable() {
        let s = vec![1, 2, 3, 1, 2, 3];
        let cmp = compare_sequences(&s, &s).unwrap();
        assert_eq!(cmp.len_diff_fraction, 0.0);
        assert!((cmp.cosine_similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn len_diff_fraction_example() {
        let cmp = compare_sequences(&[1, 2, 3], &[1, 2, 3, 4]).unwrap();
        assert!((cmp.len_diff_fraction - 0.25).abs() < 1e-12);
    }

    #[test]
    fn cosine_over_histograms() {
        // A = {1:2, 2:2}, B = {1:2, 2:1} -> 6 / (sqrt(8) * sqrt(5))
        let a = vec![1, 1, 2, 2];
        let b = vec![1, 1, 2];
        let cmp = compare_sequences(&a, &b).unwrap();
        let expect = 6.0 / (8.0f64.sqrt() * 5.0f64.sqrt());
        assert!((cmp.cosine_similarity - expect).abs() < 1e-12);
    }

    #[test]
    fn comparison_is_symmetric() {
        let a = vec![1, 2, 3, 4, 4];
        let b = vec![1, 2, 4];
        let ab = compare_sequences(&a, &b).unwrap();
        let ba = compare_sequences(&b, &a).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn empty_sequence_is_an_error() {
        assert!(compare_sequences(&[], &[1]).is_err());
    }

    #[test]
    fn warmup_to_genpolicy_after_m_stable_steps() {
        let mut state = ProfilerState::new(ProfilerConfig::default()); // m = 2
        let seq = vec![1, 2, 3];
        assert_eq!(state.adjust_stage(&seq), Stage::WarmUp); // StableStep = 1
        assert_eq!(state.adjust_stage(&seq), Stage::WarmUp); // StableStep = 2
        assert_eq!(state.adjust_stage(&seq), Stage::GenPolicy); // StableStep = 3 > m
        assert_eq!(state.stable_step(), 0); // reset on entry
    }

    #[test]
    fn ten_percent_longer_sequence_resets_to_warmup() {
        let mut state = ProfilerState::new(ProfilerConfig::default());
        let seq: Vec<u32> = (0..100).map(|i| i % 7).collect();
        for _ in 0..10 {
            state.adjust_stage(&seq);
        }
        assert_eq!(state.stage(), Stage::Stable);
        let longer: Vec<u32> = (0..110).map(|i| i % 7).collect();
        assert_eq!(state.adjust_stage(&longer), Stage::WarmUp);
        assert_eq!(state.stable_step(), 0);
    }

    #[test]
    fn genpolicy_held_until_n_exceeded() {
        let mut state = ProfilerState::new(ProfilerConfig::default()); // n = 5
        let seq = vec![5, 6, 7];
        for _ in 0..3 {
            state.adjust_stage(&seq);
        }
        assert_eq!(state.stage(), Stage::GenPolicy);
        // StableStep counts 1..=5 in GenPolicy, promotes at 6 > n.
        for _ in 0..5 {
            assert_eq!(state.adjust_stage(&seq), Stage::GenPolicy);
        }
        assert_eq!(state.adjust_stage(&seq), Stage::Stable);
    }

    #[test]
    fn no_swaps_reconstructs_to_measured() {
        let rec = record_with(vec![10, 20, 30, 20], vec![]);
        let tl = reconstruct_memory(&rec).unwrap();
        assert_eq!(tl.actual_usage, vec![10, 20, 30, 20]);
    }

    #[test]
    fn swapped_tensor_added_back_over_its_absence() {
        // 30 swapped out at op 1 (still resident there), back at op 3:
        // measured 50 at op 2 -> 80.
        let t = TensorId(9);
        let rec = record_with(
            vec![80, 80, 50, 80],
            vec![
                SwapEvent { op_index: 1, tensor: t, size: 30, direction: SwapDirection::Out },
                SwapEvent { op_index: 3, tensor: t, size: 30, direction: SwapDirection::In },
            ],
        );
        let tl = reconstruct_memory(&rec).unwrap();
        assert_eq!(tl.actual_usage, vec![80, 80, 80, 80]);
    }

    #[test]
    fn swap_in_without_out_is_an_error() {
        let rec = record_with(
            vec![10, 10],
            vec![SwapEvent {
                op_index: 1,
                tensor: TensorId(1),
                size: 5,
                direction: SwapDirection::In,
            }],
        );
        assert!(reconstruct_memory(&rec).is_err());
    }

    #[test]
    fn reconstruction_order_independent_for_disjoint_tensors() {
        let mk = |events: Vec<SwapEvent>| record_with(vec![100; 6], events);
        let e1 = SwapEvent { op_index: 1, tensor: TensorId(1), size: 10, direction: SwapDirection::Out };
        let e2 = SwapEvent { op_index: 4, tensor: TensorId(1), size: 10, direction: SwapDirection::In };
        let e3 = SwapEvent { op_index: 2, tensor: TensorId(2), size: 20, direction: SwapDirection::Out };
        let e4 = SwapEvent { op_index: 5, tensor: TensorId(2), size: 20, direction: SwapDirection::In };
        let a = reconstruct_memory(&mk(vec![e1, e2, e3, e4])).unwrap();
        let b = reconstruct_memory(&mk(vec![e3, e1, e4, e2])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.actual_usage, vec![100, 100, 110, 130, 120, 100]);
    }
}
