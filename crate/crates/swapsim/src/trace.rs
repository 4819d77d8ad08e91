//! Workload model: operator/tensor traces and a synthetic generator whose
//! operator sequences vary across iterations (optimizer skips, on-the-fly
//! validation, conditional branches).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Stable per-iteration tensor identifier. Identity is intentionally
/// per-iteration: traces carry no cross-iteration correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TensorId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
    BF16,
    I64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Fwd,
    Bwd,
    Opt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDecl {
    pub tensor_id: TensorId,
    pub size: u64,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpRecord {
    pub op_index: usize,
    pub op_token: u32,
    pub phase: Phase,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
    pub compute_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iter_index: u64,
    pub ops: Vec<OpRecord>,
    pub tensors: BTreeMap<TensorId, TensorDecl>,
}

/// Where validation ops are spliced into the iteration. Prepending shifts
/// every training op index (the case that breaks index-keyed matchers);
/// appending leaves the original token sequence as a prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationPosition {
    Prepend,
    Append,
}

impl Default for ValidationPosition {
    fn default() -> Self {
        ValidationPosition::Prepend
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicEvent {
    /// Skip the optimizer tail, either with a per-iteration probability or
    /// at fixed iteration indices (loss-scale adjustment analog).
    SkipOptimizer {
        #[serde(default)]
        prob: f64,
        #[serde(default)]
        iters: Vec<u64>,
    },
    /// Run `extra_ops` validation ops every `every` iterations.
    InsertValidation {
        every: u64,
        extra_ops: usize,
        #[serde(default)]
        position: ValidationPosition,
    },
    /// With probability `prob`, execute an alternate span of `span_ops`
    /// extra forward ops.
    ConditionalBranch { span_ops: usize, prob: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    /// Per-op forward cost range; one cost is drawn per layer position so
    /// the sequence has per-layer periodic structure.
    pub cost_min: f64,
    pub cost_max: f64,
    /// Backward per-op cost = mirrored forward cost times this.
    pub bwd_multiplier: f64,
    /// Absolute per-op optimizer cost.
    pub opt_cost: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        let (cost_min, cost_max) = (0.5, 1.5);
        CostModel {
            cost_min,
            cost_max,
            bwd_multiplier: 2.0,
            opt_cost: (cost_min + cost_max) / 2.0,
        }
    }
}

impl CostModel {
    pub fn mean_cost(&self) -> f64 {
        (self.cost_min + self.cost_max) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub layers: usize,
    pub ops_per_layer: usize,
    /// Size in bytes of each activation (and gradient) tensor.
    pub activation_size: u64,
    /// Number of optimizer-tail ops.
    #[serde(default = "default_opt_ops")]
    pub opt_ops: usize,
    #[serde(default)]
    pub events: Vec<DynamicEvent>,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub cost: CostModel,
}

fn default_opt_ops() -> usize {
    2
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(SimError::validation("workload has zero layers"));
        }
        if self.ops_per_layer == 0 {
            return Err(SimError::validation("workload has zero ops per layer"));
        }
        if self.activation_size == 0 {
            return Err(SimError::validation("activation size must be > 0"));
        }
        if !(self.cost.cost_min > 0.0 && self.cost.cost_max >= self.cost.cost_min) {
            return Err(SimError::validation("invalid compute cost range"));
        }
        if self.cost.bwd_multiplier <= 0.0 || self.cost.opt_cost <= 0.0 {
            return Err(SimError::validation("cost multipliers must be > 0"));
        }
        for ev in &self.events {
            let prob = match ev {
                DynamicEvent::SkipOptimizer { prob, .. } => *prob,
                DynamicEvent::ConditionalBranch { prob, .. } => *prob,
                DynamicEvent::InsertValidation { every, .. } => {
                    if *every == 0 {
                        return Err(SimError::validation("validation interval must be > 0"));
                    }
                    0.0
                }
            };
            if !(0.0..=1.0).contains(&prob) {
                return Err(SimError::validation("event probability outside [0, 1]"));
            }
        }
        Ok(())
    }
}

// Token layout: forward ops start at FWD_TOKEN_BASE + layer position,
// backward mirrors at BWD_TOKEN_BASE, and so on. Only relative identity
// matters; the bases keep phases disjoint.
pub const FWD_TOKEN_BASE: u32 = 1;
pub const BWD_TOKEN_BASE: u32 = 1001;
pub const OPT_TOKEN: u32 = 2001;
pub const VALIDATION_TOKEN_BASE: u32 = 3001;
pub const BRANCH_TOKEN_BASE: u32 = 4001;

struct TraceBuilder {
    ops: Vec<OpRecord>,
    tensors: BTreeMap<TensorId, TensorDecl>,
    next_id: u32,
}

impl TraceBuilder {
    fn new() -> Self {
        TraceBuilder {
            ops: Vec::new(),
            tensors: BTreeMap::new(),
            next_id: 0,
        }
    }

    fn declare(&mut self, size: u64, dtype: DType) -> TensorId {
        let id = TensorId(self.next_id);
        self.next_id += 1;
        self.tensors.insert(id, TensorDecl { tensor_id: id, size, dtype });
        id
    }

    fn push(&mut self, token: u32, phase: Phase, inputs: Vec<TensorId>, outputs: Vec<TensorId>, cost: f64) {
        let op_index = self.ops.len();
        self.ops.push(OpRecord {
            op_index,
            op_token: token,
            phase,
            inputs,
            outputs,
            compute_cost: cost,
        });
    }
}

/// Generate the trace for one iteration. Pure function of
/// `(spec, iter_index)`: with all dynamic events disabled the result is
/// identical for every iteration.
pub fn generate_trace(spec: &WorkloadSpec, iter_index: u64) -> Result<IterationTrace> {
    spec.validate()?;

    // Costs are seeded from rng_seed alone so they are iteration-invariant.
    let mut cost_rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let fwd_costs: Vec<f64> = (0..spec.ops_per_layer)
        .map(|_| cost_rng.gen_range(spec.cost.cost_min..=spec.cost.cost_max))
        .collect();
    let mean_cost = spec.cost.mean_cost();

    // Per-iteration event decisions get their own stream.
    let mut event_rng =
        ChaCha8Rng::seed_from_u64(spec.rng_seed ^ (iter_index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));

    let mut skip_opt = false;
    let mut validation: Option<(usize, ValidationPosition)> = None;
    let mut branch_span = 0usize;
    for ev in &spec.events {
        match ev {
            DynamicEvent::SkipOptimizer { prob, iters } => {
                let fixed = iters.contains(&iter_index);
                let random = *prob > 0.0 && event_rng.gen_bool(*prob);
                skip_opt = skip_opt || fixed || random;
            }
            DynamicEvent::InsertValidation { every, extra_ops, position } => {
                if iter_index > 0 && iter_index % every == 0 {
                    validation = Some((*extra_ops, *position));
                }
            }
            DynamicEvent::ConditionalBranch { span_ops, prob } => {
                if *prob > 0.0 && event_rng.gen_bool(*prob) {
                    branch_span += span_ops;
                }
            }
        }
    }

    let mut b = TraceBuilder::new();

    let emit_validation = |b: &mut TraceBuilder, count: usize, phase: Phase| {
        let size = (spec.activation_size / 4).max(1);
        let mut prev: Option<TensorId> = None;
        for v in 0..count {
            let out = b.declare(size, DType::F16);
            let inputs = prev.map(|p| vec![p]).unwrap_or_default();
            b.push(VALIDATION_TOKEN_BASE + (v % 16) as u32, phase, inputs, vec![out], mean_cost);
            prev = Some(out);
        }
    };

    if let Some((count, ValidationPosition::Prepend)) = validation {
        emit_validation(&mut b, count, Phase::Fwd);
    }

    // Forward: one activation per op, each consumed by the next forward op
    // and by its mirrored backward op.
    let fwd_ops = spec.layers * spec.ops_per_layer;
    let mut acts = Vec::with_capacity(fwd_ops);
    for f in 0..fwd_ops {
        let j = f % spec.ops_per_layer;
        let out = b.declare(spec.activation_size, DType::F16);
        let inputs = if f == 0 { vec![] } else { vec![acts[f - 1]] };
        b.push(FWD_TOKEN_BASE + j as u32, Phase::Fwd, inputs, vec![out], fwd_costs[j]);
        acts.push(out);
    }

    // Conditional branch: extra forward span chained off the last activation.
    let mut branch_prev = *acts.last().expect("fwd_ops >= 1");
    for k in 0..branch_span {
        let out = b.declare(spec.activation_size, DType::F16);
        b.push(
            BRANCH_TOKEN_BASE + (k % 16) as u32,
            Phase::Fwd,
            vec![branch_prev],
            vec![out],
            mean_cost,
        );
        branch_prev = out;
    }

    // Backward mirrors forward in reverse.
    let mut prev_grad: Option<TensorId> = None;
    for f in (0..fwd_ops).rev() {
        let j = f % spec.ops_per_layer;
        let grad = b.declare(spec.activation_size, DType::F16);
        let mut inputs = vec![acts[f]];
        if let Some(g) = prev_grad {
            inputs.push(g);
        }
        b.push(
            BWD_TOKEN_BASE + j as u32,
            Phase::Bwd,
            inputs,
            vec![grad],
            fwd_costs[j] * spec.cost.bwd_multiplier,
        );
        prev_grad = Some(grad);
    }
    let final_grad = prev_grad.expect("fwd_ops >= 1");

    if !skip_opt {
        let size = (spec.activation_size / 16).max(1);
        for _ in 0..spec.opt_ops {
            let out = b.declare(size, DType::F32);
            b.push(OPT_TOKEN, Phase::Opt, vec![final_grad], vec![out], spec.cost.opt_cost);
        }
    }

    if let Some((count, ValidationPosition::Append)) = validation {
        emit_validation(&mut b, count, Phase::Opt);
    }

    Ok(IterationTrace {
        iter_index,
        ops: b.ops,
        tensors: b.tensors,
    })
}

/// Token sequence of a trace: `ops[i].op_token` in order.
pub fn tokenize(trace: &IterationTrace) -> Vec<u32> {
    trace.ops.iter().map(|op| op.op_token).collect()
}

impl IterationTrace {
    /// Op index of the last use of each tensor (reference-count release point).
    pub fn last_use(&self) -> BTreeMap<TensorId, usize> {
        let mut last = BTreeMap::new();
        for op in &self.ops {
            for &t in op.inputs.iter().chain(op.outputs.iter()) {
                last.insert(t, op.op_index);
            }
        }
        last
    }

    pub fn total_compute_cost(&self) -> f64 {
        self.ops.iter().map(|op| op.compute_cost).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    iter_index: u64,
    tensors: Vec<TensorDecl>,
}

/// Serialize as JSON lines: one header line, then one `OpRecord` per line.
pub fn save_trace(trace: &IterationTrace) -> Vec<u8> {
    let mut out = Vec::new();
    let header = TraceHeader {
        iter_index: trace.iter_index,
        tensors: trace.tensors.values().copied().collect(),
    };
    serde_json::to_writer(&mut out, &header).expect("header serialization");
    out.push(b'\n');
    for op in &trace.ops {
        serde_json::to_writer(&mut out, op).expect("op serialization");
        out.push(b'\n');
    }
    out
}

pub fn save_trace_to(trace: &IterationTrace, mut w: impl Write) -> Result<()> {
    w.write_all(&save_trace(trace))?;
    Ok(())
}

/// Parse a trace saved by [`save_trace`]. Errors carry the byte offset of
/// the offending line; no partial trace is returned.
pub fn load_trace(bytes: &[u8]) -> Result<IterationTrace> {
    let mut offset = 0usize;
    let mut lines = bytes.split(|&c| c == b'\n');

    let header_line = lines.next().filter(|l| !l.is_empty()).ok_or(SimError::Parse {
        offset: 0,
        message: "missing header line".into(),
    })?;
    let header: TraceHeader = serde_json::from_slice(header_line).map_err(|e| SimError::Parse {
        offset,
        message: e.to_string(),
    })?;
    offset += header_line.len() + 1;

    let mut ops = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let op: OpRecord = serde_json::from_slice(line).map_err(|e| SimError::Parse {
            offset,
            message: e.to_string(),
        })?;
        ops.push(op);
        offset += line.len() + 1;
    }

    let tensors: BTreeMap<TensorId, TensorDecl> =
        header.tensors.into_iter().map(|d| (d.tensor_id, d)).collect();
    let trace = IterationTrace {
        iter_index: header.iter_index,
        ops,
        tensors,
    };
    validate_trace(&trace)?;
    Ok(trace)
}

/// Check single-assignment dataflow and op-index consistency.
pub fn validate_trace(trace: &IterationTrace) -> Result<()> {
    let mut defined = std::collections::BTreeSet::new();
    for (i, op) in trace.ops.iter().enumerate() {
        if op.op_index != i {
            return Err(SimError::validation(format!(
                "op_index {} at position {i}",
                op.op_index
            )));
        }
        for t in &op.inputs {
            if !defined.contains(t) {
                return Err(SimError::validation(format!(
                    "op {i} reads tensor {} before definition",
                    t.0
                )));
            }
        }
        for t in &op.outputs {
            if !defined.insert(*t) {
                return Err(SimError::validation(format!(
                    "tensor {} defined twice (op {i})",
                    t.0
                )));
            }
            if !trace.tensors.contains_key(t) {
                return Err(SimError::validation(format!("tensor {} not declared", t.0)));
            }
        }
    }
    Ok(())
}

pub fn load_trace_from(mut r: impl BufRead) -> Result<IterationTrace> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    load_trace(&bytes)
}
