//! End-to-end scenarios: the staged training loop (profile, generate,
//! re-bind, execute) and scale sweeps, with JSON-lines metrics output.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::executor::{drive_iteration, drive_iteration_fixed_index, MatchTables, MatcherKind, SwapPlan};
use crate::policy::{generate_policy, PolicyConfig, SwapPolicy};
use crate::profiler::{collect_detailed, reconstruct_memory, ProfilerConfig, ProfilerState, Stage};
use crate::runtime::{no_swap_usage, run_iteration, SimConfig, SimMetrics};
use crate::trace::{generate_trace, tokenize, WorkloadSpec};

/// Policy-generation knobs exposed in scenario files. Bandwidth always
/// comes from the simulator config so generation and execution agree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyTuning {
    pub c: f64,
    pub groups_fwd: usize,
    pub groups_bwd: usize,
    pub overlap_factor: f64,
}

impl Default for PolicyTuning {
    fn default() -> Self {
        let d = PolicyConfig::default();
        PolicyTuning {
            c: d.c,
            groups_fwd: d.groups_fwd,
            groups_bwd: d.groups_bwd,
            overlap_factor: d.overlap_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub sim: SimConfig,
    pub iterations: u64,
    #[serde(default)]
    pub profiler: ProfilerConfig,
    #[serde(default)]
    pub policy: PolicyTuning,
    #[serde(default)]
    pub matcher: MatcherKind,
}

impl Scenario {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let scenario: Scenario = serde_json::from_slice(bytes).map_err(|e| SimError::Parse {
            offset: e.column(),
            message: e.to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        self.workload.validate()?;
        if self.iterations == 0 {
            return Err(SimError::validation("scenario needs at least one iteration"));
        }
        Ok(())
    }

    fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            c: self.policy.c,
            groups_fwd: self.policy.groups_fwd,
            groups_bwd: self.policy.groups_bwd,
            overlap_factor: self.policy.overlap_factor,
            bandwidth: self.sim.bandwidth,
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iter: u64,
    pub stage: Stage,
    pub ops: usize,
    pub metrics: SimMetrics,
    /// Items in the policy applied this iteration (0 = no-swap run).
    pub policy_items: usize,
    pub match_rate: f64,
    pub mismatches: usize,
    pub collisions: usize,
    pub stale_items: usize,
    pub policy_generated: bool,
}

/// Whole-run rollup, written as `summary.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: u64,
    pub final_stage: Stage,
    /// Best step time observed under an applied policy.
    pub best_step_time: Option<f64>,
    pub peak_memory_max: u64,
    pub total_hazards: u64,
    pub total_passive_swaps: u64,
    pub policies_generated: usize,
    pub best_policy_items: usize,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub per_iteration: Vec<IterationSummary>,
    pub summary: RunSummary,
    pub best_policy: Option<SwapPolicy>,
}

fn plan_for(
    trace: &crate::trace::IterationTrace,
    policy: Option<&SwapPolicy>,
    matcher: MatcherKind,
) -> (SwapPlan, usize) {
    match policy {
        None => (SwapPlan::default(), 0),
        Some(p) if p.is_empty() => (SwapPlan::default(), 0),
        Some(p) => {
            let plan = match matcher {
                MatcherKind::Fuzzy => drive_iteration(trace, p),
                MatcherKind::FixedIndex => drive_iteration_fixed_index(trace, p),
            };
            (plan, p.items.len())
        }
    }
}

/// Run the staged loop. Each iteration is staged by sequence drift:
/// WarmUp runs without a policy (OOM recovery only), GenPolicy applies the
/// latest candidate policy, profiles in detail, and generates the next
/// candidate, and Stable replays the best candidate seen. Infeasible
/// policy generation aborts the run.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioReport> {
    scenario.validate()?;
    let mut profiler = ProfilerState::new(scenario.profiler);
    let mut pending: Option<SwapPolicy> = None;
    let mut best: Option<(f64, SwapPolicy)> = None;
    let mut per_iteration = Vec::with_capacity(scenario.iterations as usize);
    let mut policies_generated = 0usize;
    let mut last_tokens: Option<Vec<u32>> = None;

    for iter in 0..scenario.iterations {
        let trace = generate_trace(&scenario.workload, iter)?;
        let tokens = tokenize(&trace);
        // Stage from completed history only: in eager mode the current
        // iteration's sequence is unknown until it has run, so a drift at
        // iteration i is acted on from iteration i+1.
        let stage = match &last_tokens {
            None => Stage::WarmUp,
            Some(prev) => profiler.adjust_stage(prev),
        };

        if stage == Stage::WarmUp {
            // The sequence changed: existing policies no longer apply.
            pending = None;
            best = None;
        }

        let applied: Option<SwapPolicy> = match stage {
            Stage::WarmUp => None,
            Stage::GenPolicy => pending.clone(),
            Stage::Stable => best.as_ref().map(|(_, p)| p.clone()).or_else(|| pending.clone()),
        };
        let (plan, policy_items) = plan_for(&trace, applied.as_ref(), scenario.matcher);
        let report = run_iteration(&trace, &plan, &scenario.sim)?;

        let mut generated = false;
        if stage == Stage::GenPolicy {
            if policy_items > 0 {
                let t = report.metrics.step_time;
                if best.as_ref().map_or(true, |(bt, _)| t < *bt) {
                    best = Some((t, applied.clone().expect("policy applied")));
                }
            }
            let tables = match &applied {
                Some(p) => p.tables.clone(),
                None => MatchTables::from_tokens(&tokens),
            };
            let detailed = collect_detailed(
                &trace,
                tables,
                report.live_memory.clone(),
                report.metrics.step_time,
                report.swap_events.clone(),
            );
            let timeline = reconstruct_memory(&detailed)?;
            let next = generate_policy(&detailed, &timeline, scenario.sim.memory_budget, &scenario.policy_config())?;
            policies_generated += 1;
            pending = Some(next);
            generated = true;
        }

        per_iteration.push(IterationSummary {
            iter,
            stage,
            ops: trace.ops.len(),
            metrics: report.metrics,
            policy_items,
            match_rate: plan.diagnostics.match_rate,
            mismatches: plan.diagnostics.mismatches,
            collisions: plan.diagnostics.collisions,
            stale_items: plan.diagnostics.stale_items,
            policy_generated: generated,
        });
        last_tokens = Some(tokens);
    }

    let summary = RunSummary {
        iterations: scenario.iterations,
        final_stage: profiler.stage(),
        best_step_time: best.as_ref().map(|(t, _)| *t),
        peak_memory_max: per_iteration.iter().map(|s| s.metrics.peak_memory).max().unwrap_or(0),
        total_hazards: per_iteration.iter().map(|s| s.metrics.hazard_count).sum(),
        total_passive_swaps: per_iteration.iter().map(|s| s.metrics.passive_swap_count).sum(),
        policies_generated,
        best_policy_items: best.as_ref().map(|(_, p)| p.items.len()).unwrap_or(0),
    };
    Ok(ScenarioReport {
        per_iteration,
        summary,
        best_policy: best.map(|(_, p)| p),
    })
}

/// Write one `IterationSummary` JSON object per line.
pub fn write_metrics(report: &ScenarioReport, mut w: impl Write) -> Result<()> {
    for line in &report.per_iteration {
        serde_json::to_writer(&mut w, line).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_summary(report: &ScenarioReport, mut w: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, &report.summary).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Scales activation bytes linearly (more samples per step).
    Batch,
    /// Scales activation bytes linearly (longer sequences).
    Seq,
    /// Scales activation bytes quadratically (wider layers grow both
    /// feature maps and intermediate products).
    Hidden,
    /// Scales model depth: layer count.
    Layers,
}

impl FromStr for SweepAxis {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(SweepAxis::Batch),
            "seq" => Ok(SweepAxis::Seq),
            "hidden" => Ok(SweepAxis::Hidden),
            "layers" => Ok(SweepAxis::Layers),
            other => Err(SimError::validation(format!(
                "unknown sweep axis {other:?} (expected batch, seq, hidden or layers)"
            ))),
        }
    }
}

fn scaled_workload(base: &WorkloadSpec, axis: SweepAxis, value: f64) -> Result<WorkloadSpec> {
    if value <= 0.0 {
        return Err(SimError::validation("sweep values must be > 0"));
    }
    let mut spec = base.clone();
    match axis {
        SweepAxis::Batch | SweepAxis::Seq => {
            spec.activation_size = ((base.activation_size as f64) * value).round().max(1.0) as u64;
        }
        SweepAxis::Hidden => {
            spec.activation_size = ((base.activation_size as f64) * value * value).round().max(1.0) as u64;
        }
        SweepAxis::Layers => {
            spec.layers = (((base.layers as f64) * value).round() as usize).max(1);
        }
    }
    Ok(spec)
}

/// One line of `sweep.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub activation_size: u64,
    pub layers: usize,
    pub no_swap_peak: u64,
    /// Peak under the budget without any swapping.
    pub no_swap_feasible: bool,
    /// A policy clearing the budget exists.
    pub swap_feasible: bool,
    pub policy_items: usize,
    /// Step time with the policy applied (no-swap when none is needed);
    /// absent when even swapping cannot fit.
    pub step_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    /// Largest scale value feasible without swapping.
    pub max_no_swap: Option<f64>,
    /// Largest scale value feasible with swapping.
    pub max_with_swap: Option<f64>,
}

/// Evaluate one scale point: profile iteration 0 unconstrained, then try
/// to generate and execute a policy under the real budget.
fn sweep_point(scenario: &Scenario, axis: SweepAxis, value: f64) -> Result<SweepPoint> {
    let workload = scaled_workload(&scenario.workload, axis, value)?;
    let trace = generate_trace(&workload, 0)?;
    let usage = no_swap_usage(&trace);
    let no_swap_peak = usage.iter().copied().max().unwrap_or(0);
    let budget = scenario.sim.memory_budget;
    let no_swap_feasible = no_swap_peak <= budget;

    // Profile without a budget so the timeline reflects true demand.
    let unconstrained = SimConfig {
        memory_budget: u64::MAX,
        ..scenario.sim
    };
    let profile_run = run_iteration(&trace, &SwapPlan::default(), &unconstrained)?;
    let detailed = collect_detailed(
        &trace,
        MatchTables::from_tokens(&tokenize(&trace)),
        profile_run.live_memory.clone(),
        profile_run.metrics.step_time,
        profile_run.swap_events.clone(),
    );
    let timeline = reconstruct_memory(&detailed)?;

    let mut point = SweepPoint {
        value,
        activation_size: workload.activation_size,
        layers: workload.layers,
        no_swap_peak,
        no_swap_feasible,
        swap_feasible: false,
        policy_items: 0,
        step_time: None,
    };
    match generate_policy(&detailed, &timeline, budget, &scenario.policy_config()) {
        Ok(policy) => {
            point.swap_feasible = true;
            point.policy_items = policy.items.len();
            let (plan, _) = plan_for(&trace, Some(&policy), scenario.matcher);
            match run_iteration(&trace, &plan, &scenario.sim) {
                Ok(report) => point.step_time = Some(report.metrics.step_time),
                Err(SimError::Oom { .. }) => point.swap_feasible = false,
                Err(e) => return Err(e),
            }
        }
        Err(SimError::Infeasible { .. }) => {}
        Err(e) => return Err(e),
    }
    Ok(point)
}

/// Sweep one scale axis over the given values.
pub fn run_sweep(scenario: &Scenario, axis: SweepAxis, values: &[f64]) -> Result<SweepReport> {
    scenario.validate()?;
    if values.is_empty() {
        return Err(SimError::validation("sweep needs at least one value"));
    }
    let mut points = Vec::with_capacity(values.len());
    for &v in values {
        points.push(sweep_point(scenario, axis, v)?);
    }
    let max_of = |pred: fn(&SweepPoint) -> bool| {
        points
            .iter()
            .filter(|p| pred(p))
            .map(|p| p.value)
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    };
    Ok(SweepReport {
        axis,
        max_no_swap: max_of(|p| p.no_swap_feasible),
        max_with_swap: max_of(|p| p.swap_feasible),
        points,
    })
}

pub fn write_sweep(report: &SweepReport, mut w: impl Write) -> Result<()> {
    for p in &report.points {
        serde_json::to_writer(&mut w, p).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
