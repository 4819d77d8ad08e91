//! Policy application: multi-feature fuzzy matching of tensors across
//! iterations without cross-iteration ids, plus the index-keyed baseline
//! matcher it replaces.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::policy::SwapPolicy;
use crate::trace::{DType, IterationTrace, OpRecord, TensorId};

/// Integer-only tensor fingerprint. Comparisons on the hot path are four
/// integer equality checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TensorFeature {
    /// Times this tensor has been used so far (producing op included).
    pub op_count: u32,
    /// One-hot OR of the top-32 most frequent op tokens that used it.
    pub op_tag: u32,
    pub dtype: u8,
    /// Last 8 using-op indices, 8 bits each, shift-packed.
    pub op_call_stack: u64,
}

pub fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F16 => 1,
        DType::BF16 => 2,
        DType::I64 => 3,
    }
}

/// Token lookup tables fixed per policy generation: a one-hot bit for each
/// of the 32 most frequent tokens, and a frequency-ranked 8-bit index for
/// every token.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchTables {
    top32: HashMap<u32, u8>,
    index8: HashMap<u32, u8>,
}

impl MatchTables {
    /// Build from a token sequence, ranking tokens by frequency
    /// (ties broken by smaller token value).
    pub fn from_tokens(tokens: &[u32]) -> Self {
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for &t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut tables = MatchTables::default();
        for (rank, (token, _)) in ranked.iter().enumerate() {
            if rank < 32 {
                tables.top32.insert(*token, rank as u8);
            }
            tables.index8.insert(*token, (rank & 0xFF) as u8);
        }
        tables
    }

    pub fn one_hot(&self, token: u32) -> Option<u32> {
        self.top32.get(&token).map(|&bit| 1u32 << bit)
    }

    pub fn index8(&self, token: u32) -> u8 {
        self.index8.get(&token).copied().unwrap_or(0xFF)
    }
}

/// Appendix-style feature update: bump the use count, OR in the token's
/// one-hot bit when it is in the top 32, and shift the token's 8-bit index
/// into the call stack.
pub fn update_feature(f: TensorFeature, op_token: u32, tables: &MatchTables) -> TensorFeature {
    let mut out = f;
    out.op_count += 1;
    if let Some(bit) = tables.one_hot(op_token) {
        out.op_tag |= bit;
    }
    out.op_call_stack = (out.op_call_stack << 8).wrapping_add(tables.index8(op_token) as u64);
    out
}

/// Tracks the live feature of every tensor over a dispatch sequence.
pub struct FeatureTracker<'a> {
    tables: &'a MatchTables,
    features: HashMap<TensorId, TensorFeature>,
}

impl<'a> FeatureTracker<'a> {
    pub fn new(tables: &'a MatchTables) -> Self {
        FeatureTracker {
            tables,
            features: HashMap::new(),
        }
    }

    /// Update the features of every tensor the op touches; returns the
    /// touched ids in dispatch order (inputs then outputs, deduplicated).
    pub fn apply_op(&mut self, trace: &IterationTrace, op: &OpRecord) -> Vec<TensorId> {
        let mut touched = Vec::with_capacity(op.inputs.len() + op.outputs.len());
        for &t in op.inputs.iter().chain(op.outputs.iter()) {
            if !touched.contains(&t) {
                touched.push(t);
            }
        }
        for &t in &touched {
            let entry = self.features.entry(t).or_insert_with(|| TensorFeature {
                dtype: trace.tensors.get(&t).map(|d| dtype_code(d.dtype)).unwrap_or(0),
                ..TensorFeature::default()
            });
            *entry = update_feature(*entry, op.op_token, self.tables);
        }
        touched
    }

    pub fn feature(&self, t: TensorId) -> Option<TensorFeature> {
        self.features.get(&t).copied()
    }
}

/// Full-field equality index from feature key to policy items. Items that
/// share a key (structurally identical tensors in different layers) are
/// kept in swap-out dispatch order, so replay matches them one-to-one.
pub struct MatchIndex<'a> {
    pub policy: &'a SwapPolicy,
    by_key: HashMap<TensorFeature, VecDeque<usize>>,
}

impl<'a> MatchIndex<'a> {
    pub fn build(policy: &'a SwapPolicy) -> Self {
        let mut by_key: HashMap<TensorFeature, VecDeque<usize>> = HashMap::new();
        let mut order: Vec<usize> = (0..policy.items.len()).collect();
        order.sort_by_key(|&i| policy.items[i].swap_out_after);
        for i in order {
            by_key.entry(policy.items[i].key).or_default().push_back(i);
        }
        MatchIndex { policy, by_key }
    }

    /// Pop the earliest unmatched item whose stored feature equals `f` on
    /// all fields. `Err(())` distinguishes "key known but exhausted"
    /// (a collision) from a plain no-match.
    fn take(&mut self, f: &TensorFeature) -> std::result::Result<Option<usize>, ()> {
        match self.by_key.get_mut(f) {
            None => Ok(None),
            Some(q) => match q.pop_front() {
                Some(i) => Ok(Some(i)),
                None => Err(()),
            },
        }
    }

    /// Non-consuming lookup used by tests and diagnostics.
    pub fn peek(&self, f: &TensorFeature) -> Option<usize> {
        self.by_key.get(f).and_then(|q| q.front().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwapCommandKind {
    /// Dispatch a device-to-host copy right after this op.
    SwapOut,
    /// Dispatch a host-to-device copy before this op (logical-layer start).
    SwapIn,
    /// Release the swapped-out block after dispatching this op
    /// (custom recordStream free point).
    FreeAt,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SwapCommand {
    pub op_index: usize,
    pub kind: SwapCommandKind,
    /// Index into the policy's item list.
    pub item: usize,
    /// The live tensor the item matched in this iteration.
    pub tensor: TensorId,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MatchDiagnostics {
    pub matched: usize,
    pub stale_items: usize,
    pub collisions: usize,
    /// Fixed-index matcher only: items whose positional lookup selected a
    /// wrong-size tensor or fell outside the iteration.
    pub mismatches: usize,
    pub match_rate: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SwapPlan {
    pub commands: Vec<SwapCommand>,
    pub diagnostics: MatchDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatcherKind {
    Fuzzy,
    FixedIndex,
}

impl Default for MatcherKind {
    fn default() -> Self {
        MatcherKind::Fuzzy
    }
}

fn kind_rank(k: SwapCommandKind) -> u8 {
    match k {
        SwapCommandKind::SwapIn => 0,
        SwapCommandKind::SwapOut => 1,
        SwapCommandKind::FreeAt => 2,
    }
}

fn finish_plan(mut commands: Vec<SwapCommand>, mut diags: MatchDiagnostics, total_items: usize) -> SwapPlan {
    commands.sort_by_key(|c| (c.op_index, kind_rank(c.kind), c.item));
    diags.match_rate = if total_items == 0 {
        1.0
    } else {
        diags.matched as f64 / total_items as f64
    };
    SwapPlan {
        commands,
        diagnostics: diags,
    }
}

/// Replay a policy against a fresh iteration with fuzzy matching: maintain
/// live features per tensor, emit a swap-out when a tensor's feature equals
/// a policy key, then schedule the matched item's swap-in and free point.
/// Unmatched items are tolerated and reported as stale.
pub fn drive_iteration(trace: &IterationTrace, policy: &SwapPolicy) -> SwapPlan {
    let mut index = MatchIndex::build(policy);
    let mut tracker = FeatureTracker::new(&policy.tables);
    let mut commands = Vec::new();
    let mut diags = MatchDiagnostics::default();

    for op in &trace.ops {
        let touched = tracker.apply_op(trace, op);
        for t in touched {
            let f = tracker.feature(t).expect("feature just updated");
            match index.take(&f) {
                Ok(Some(item_idx)) => {
                    diags.matched += 1;
                    let item = &policy.items[item_idx];
                    commands.push(SwapCommand {
                        op_index: op.op_index,
                        kind: SwapCommandKind::SwapOut,
                        item: item_idx,
                        tensor: t,
                    });
                    commands.push(SwapCommand {
                        op_index: item.swap_in_op,
                        kind: SwapCommandKind::SwapIn,
                        item: item_idx,
                        tensor: t,
                    });
                    commands.push(SwapCommand {
                        op_index: item.free_at,
                        kind: SwapCommandKind::FreeAt,
                        item: item_idx,
                        tensor: t,
                    });
                }
                Ok(None) => {}
                Err(()) => diags.collisions += 1,
            }
        }
    }

    diags.stale_items = policy.items.len() - diags.matched;
    finish_plan(commands, diags, policy.items.len())
}

/// Baseline matcher keyed by (op index, i-th tensor of the op), as earlier
/// swap systems did. A shifted sequence makes the positional lookup select
/// the wrong tensor; this is reported as a mismatch, never applied.
pub fn drive_iteration_fixed_index(trace: &IterationTrace, policy: &SwapPolicy) -> SwapPlan {
    let mut commands = Vec::new();
    let mut diags = MatchDiagnostics::default();

    for (item_idx, item) in policy.items.iter().enumerate() {
        let resolved = trace.ops.get(item.swap_out_after).and_then(|op| {
            op.inputs
                .iter()
                .chain(op.outputs.iter())
                .nth(item.swap_out_slot)
                .copied()
        });
        let tensor = match resolved {
            Some(t) => t,
            None => {
                diags.mismatches += 1;
                continue;
            }
        };
        let size = trace.tensors.get(&tensor).map(|d| d.size).unwrap_or(0);
        if size != item.size {
            diags.mismatches += 1;
            continue;
        }
        diags.matched += 1;
        commands.push(SwapCommand {
            op_index: item.swap_out_after,
            kind: SwapCommandKind::SwapOut,
            item: item_idx,
            tensor,
        });
        commands.push(SwapCommand {
            op_index: item.swap_in_op,
            kind: SwapCommandKind::SwapIn,
            item: item_idx,
            tensor,
        });
        commands.push(SwapCommand {
            op_index: item.free_at,
            kind: SwapCommandKind::FreeAt,
            item: item_idx,
            tensor,
        });
    }

    diags.stale_items = policy.items.len() - diags.matched;
    finish_plan(commands, diags, policy.items.len())
}
