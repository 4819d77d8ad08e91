//! Acceptance gate: one test per acceptance criterion, each printing a
//! single `criterion N: PASS`/`FAIL` line (visible with
//! `cargo test --test acceptance -- --nocapture`).

use std::time::Instant;

use swapsim::executor::{
    drive_iteration, MatchTables, MatcherKind, SwapCommand,
    SwapCommandKind, SwapPlan,
};
use swapsim::policy::{generate_policy, partition_layers, PolicyConfig};
use swapsim::profiler::{collect_detailed, reconstruct_memory, ProfilerConfig, ProfilerState, Stage};
use swapsim::runtime::{no_swap_usage, run_iteration, RecordStreamMode, SimConfig};
use swapsim::scenario::{run_scenario, run_sweep, write_metrics, PolicyTuning, Scenario, SweepAxis};
use swapsim::trace::{
    generate_trace, tokenize, CostModel, DynamicEvent, IterationTrace, TensorId,
    ValidationPosition, WorkloadSpec,
};

fn verdict(n: u32, what: &str, ok: bool) {
    println!("criterion {n}: {} ({what})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {what}");
}

fn workload(seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        layers: 6,
        ops_per_layer: 4,
        activation_size: 4096,
        opt_ops: 2,
        events: vec![],
        rng_seed: seed,
        cost: CostModel::default(),
    }
}

fn unconstrained() -> SimConfig {
    SimConfig {
        memory_budget: u64::MAX,
        ..SimConfig::default()
    }
}

/// Criterion 1: the stage machine matches the reference transition rules
/// exactly, over every reachable (stage, stable_step, changed?) input,
/// with m = 2, n = 5, in under a second.
#[test]
fn criterion_1_stage_machine_conformance() {
    let start = Instant::now();
    let config = ProfilerConfig::default();
    assert_eq!((config.m, config.n), (2, 5));

    let base: Vec<u32> = (1..=40).collect();
    let drifted: Vec<u32> = (100..=160).collect();

    let oracle = |stage: Stage, step: u32, changed: bool| -> (Stage, u32) {
        if changed {
            return (Stage::WarmUp, 0);
        }
        let step = step + 1;
        match stage {
            Stage::WarmUp if step > config.m => (Stage::GenPolicy, 0),
            Stage::GenPolicy if step > config.n => (Stage::Stable, step),
            s => (s, step),
        }
    };

    let mut ok = true;
    for stage in [Stage::WarmUp, Stage::GenPolicy, Stage::Stable] {
        for step in 0..=config.n + 2 {
            for changed in [false, true] {
                let mut state = ProfilerState::at(config, stage, step, base.clone());
                let seq = if changed { &drifted } else { &base };
                let got = (state.adjust_stage(seq), state.stable_step());
                let want = oracle(stage, step, changed);
                if got != want {
                    eprintln!("({stage:?}, {step}, changed={changed}): got {got:?}, want {want:?}");
                    ok = false;
                }
            }
        }
    }
    let fast = start.elapsed().as_secs_f64() < 1.0;
    verdict(1, "stage machine conformance, < 1 s", ok && fast);
}

/// Criterion 2: per-group duration estimates on a 32-layer periodic trace
/// are within 5% for group counts up to 32 (groups align with whole
/// layers) and the mean error grows with finer grouping beyond that.
#[test]
fn criterion_2_grouping_estimate_error() {
    let start = Instant::now();
    let spec = WorkloadSpec {
        layers: 32,
        ops_per_layer: 8,
        activation_size: 1024,
        opt_ops: 2,
        events: vec![],
        rng_seed: 11,
        cost: CostModel {
            bwd_multiplier: 1.0,
            ..CostModel::default()
        },
    };
    let trace = generate_trace(&spec, 0).unwrap();
    let report = run_iteration(&trace, &SwapPlan::default(), &unconstrained()).unwrap();
    let detailed = collect_detailed(
        &trace,
        MatchTables::from_tokens(&tokenize(&trace)),
        report.live_memory,
        trace.total_compute_cost(),
        report.swap_events,
    );

    let mean_error = |groups: usize| -> f64 {
        let layers = partition_layers(&detailed, groups, groups, 1.0).unwrap();
        let fwd: Vec<f64> = layers
            .iter()
            .filter(|l| l.layer_type == swapsim::trace::Phase::Fwd)
            .map(|l| {
                let actual: f64 = trace.ops[l.start_op_id..l.end_op()].iter().map(|o| o.compute_cost).sum();
                (l.estimated_duration - actual).abs() / actual
            })
            .collect();
        fwd.iter().sum::<f64>() / fwd.len() as f64
    };
    let max_error = |groups: usize| -> f64 {
        let layers = partition_layers(&detailed, groups, groups, 1.0).unwrap();
        layers
            .iter()
            .filter(|l| l.layer_type == swapsim::trace::Phase::Fwd)
            .map(|l| {
                let actual: f64 = trace.ops[l.start_op_id..l.end_op()].iter().map(|o| o.compute_cost).sum();
                (l.estimated_duration - actual).abs() / actual
            })
            .fold(0.0, f64::max)
    };

    let coarse_ok = [8, 16, 32].iter().all(|&g| max_error(g) < 0.05);
    let e32 = mean_error(32);
    let e64 = mean_error(64);
    let e128 = mean_error(128);
    let grows = e32 <= e64 && e64 <= e128 && e128 > 0.05;
    let fast = start.elapsed().as_secs_f64() < 5.0;
    verdict(
        2,
        "group-duration error < 5% up to 32 groups, growing beyond",
        coarse_ok && grows && fast,
    );
}

fn fuzz_scenario(seed: u64) -> (Scenario, u64, f64) {
    let mut spec = workload(seed);
    spec.layers = 4 + (seed % 5) as usize; // 4..=8
    spec.ops_per_layer = 2 + (seed % 3) as usize; // 2..=4
    spec.activation_size = 2048 + 512 * (seed % 8); // 2048..=5632
    let trace = generate_trace(&spec, 0).unwrap();
    let peak = no_swap_usage(&trace).into_iter().max().unwrap();
    let baseline = run_iteration(&trace, &SwapPlan::default(), &unconstrained())
        .unwrap()
        .metrics
        .step_time;

    // Target over-subscription ratio spread across [1.1, 2.0].
    let ratio = 1.1 + 0.9 * (seed as f64 / 99.0);
    let budget = (peak as f64 / ratio) as u64;
    let scenario = Scenario {
        workload: spec,
        sim: SimConfig {
            memory_budget: budget,
            bandwidth: 1_000_000.0,
            ..SimConfig::default()
        },
        iterations: 14,
        profiler: ProfilerConfig::default(),
        policy: PolicyTuning {
            groups_fwd: 4,
            groups_bwd: 4,
            ..PolicyTuning::default()
        },
        matcher: MatcherKind::Fuzzy,
    };
    (scenario, budget, baseline)
}

/// Criterion 3: for 100 randomized workloads whose no-swap peak is
/// 1.1x-2x the budget (and generous bandwidth), policy generation
/// succeeds and the Stable stage replays under budget with zero OOM.
#[test]
fn criterion_3_policy_feasibility_fuzz() {
    let mut ok = true;
    for seed in 0..100u64 {
        let (scenario, budget, _) = fuzz_scenario(seed);
        let report = match run_scenario(&scenario) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("seed {seed}: scenario failed: {e}");
                ok = false;
                continue;
            }
        };
        if report.summary.final_stage != Stage::Stable || report.summary.policies_generated == 0 {
            eprintln!("seed {seed}: never reached Stable with a policy");
            ok = false;
            continue;
        }
        for line in report.per_iteration.iter().filter(|l| l.stage == Stage::Stable) {
            if line.metrics.oom_count != 0 || line.metrics.peak_memory > budget {
                eprintln!(
                    "seed {seed} iter {}: oom {} peak {} budget {budget}",
                    line.iter, line.metrics.oom_count, line.metrics.peak_memory
                );
                ok = false;
            }
        }
    }
    verdict(3, "100-seed feasibility fuzz, Stable under budget with zero OOM", ok);
}

/// Criterion 4: the swap overlap is effectively free — Stable-stage step
/// time stays within 2% of the unconstrained no-swap baseline.
#[test]
fn criterion_4_negligible_overhead() {
    let mut ok = true;
    for seed in 0..100u64 {
        let (scenario, _, baseline) = fuzz_scenario(seed);
        let report = run_scenario(&scenario).unwrap();
        let stable: Vec<f64> = report
            .per_iteration
            .iter()
            .filter(|l| l.stage == Stage::Stable)
            .map(|l| l.metrics.step_time)
            .collect();
        if stable.is_empty() {
            eprintln!("seed {seed}: no Stable iterations");
            ok = false;
            continue;
        }
        for t in stable {
            if t > 1.02 * baseline {
                eprintln!("seed {seed}: stable step {t} > 1.02 x baseline {baseline}");
                ok = false;
            }
        }
    }
    verdict(4, "Stable step time <= 1.02x no-swap baseline", ok);
}

/// Criterion 5: swapping stretches the batch-analog axis at least 4x past
/// the no-swap maximum; the hidden-analog axis (quadratic memory) gains a
/// strictly smaller multiple.
#[test]
fn criterion_5_capacity_scaling() {
    let scenario = Scenario {
        workload: WorkloadSpec {
            layers: 12,
            ops_per_layer: 4,
            activation_size: 4096,
            opt_ops: 2,
            events: vec![],
            rng_seed: 3,
            cost: CostModel::default(),
        },
        sim: SimConfig {
            memory_budget: 400_000,
            bandwidth: 1_000_000.0,
            ..SimConfig::default()
        },
        iterations: 1,
        profiler: ProfilerConfig::default(),
        policy: PolicyTuning::default(),
        matcher: MatcherKind::Fuzzy,
    };
    let values = [0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0];

    let ratio = |axis: SweepAxis| -> f64 {
        let report = run_sweep(&scenario, axis, &values).unwrap();
        match (report.max_no_swap, report.max_with_swap) {
            (Some(a), Some(b)) if a > 0.0 => b / a,
            _ => f64::NAN,
        }
    };
    let batch = ratio(SweepAxis::Batch);
    let hidden = ratio(SweepAxis::Hidden);
    verdict(
        5,
        "batch axis gains >= 4x, hidden axis strictly less",
        batch >= 4.0 && hidden < batch,
    );
}

/// Hand-built plan swapping the first `k` activations across the backward
/// pass, with a release point 2 ops after each swap-out.
fn early_activation_plan(trace: &IterationTrace, k: usize) -> SwapPlan {
    let mut commands = Vec::new();
    for (item, f) in (0..k).enumerate() {
        let t = trace.ops[f].outputs[0];
        let last_use = trace
            .ops
            .iter()
            .rfind(|op| op.inputs.contains(&t))
            .unwrap()
            .op_index;
        let mk = |op_index, kind| SwapCommand { op_index, kind, item, tensor: t };
        commands.push(mk(f + 1, SwapCommandKind::SwapOut));
        commands.push(mk(f + 3, SwapCommandKind::FreeAt));
        commands.push(mk(last_use - 1, SwapCommandKind::SwapIn));
    }
    SwapPlan { commands, ..SwapPlan::default() }
}

/// Criterion 6: under a host-lead configuration (default dispatch and
/// event-query costs, device compute cheap), naive host-polled releases
/// hold blocks at least 3x longer than releases at precomputed free
/// points, and cost step time.
#[test]
fn criterion_6_record_stream_comparison() {
    let mut naive_interval = 0.0;
    let mut custom_interval = 0.0;
    let mut naive_step = 0.0;
    let mut custom_step = 0.0;
    let seeds = 20u64;
    for seed in 0..seeds {
        let mut spec = workload(seed);
        // Host-lead: device compute well under the 1.0 dispatch cost.
        spec.cost = CostModel {
            cost_min: 0.1,
            cost_max: 0.3,
            ..CostModel::default()
        };
        let trace = generate_trace(&spec, 0).unwrap();
        let plan = early_activation_plan(&trace, 4);
        let base = SimConfig {
            bandwidth: 512.0, // each copy takes ~8 dispatch intervals
            ..unconstrained()
        };
        let naive = run_iteration(
            &trace,
            &plan,
            &SimConfig { record_stream_mode: RecordStreamMode::Naive, ..base },
        )
        .unwrap();
        let custom = run_iteration(
            &trace,
            &plan,
            &SimConfig { record_stream_mode: RecordStreamMode::Custom, ..base },
        )
        .unwrap();
        naive_interval += naive.metrics.reuse_interval_mean;
        custom_interval += custom.metrics.reuse_interval_mean;
        naive_step += naive.metrics.step_time;
        custom_step += custom.metrics.step_time;
    }
    naive_interval /= seeds as f64;
    custom_interval /= seeds as f64;
    naive_step /= seeds as f64;
    custom_step /= seeds as f64;
    println!(
        "  reuse interval naive {naive_interval:.2} vs custom {custom_interval:.2}; \
         step naive {naive_step:.2} vs custom {custom_step:.2}"
    );
    verdict(
        6,
        "naive reuse interval >= 3x custom, custom step <= naive step",
        naive_interval >= 3.0 * custom_interval && custom_step <= naive_step,
    );
}

/// Criterion 7: generated policies replay hazard-free in both release
/// modes across 100 fuzz seeds, and the detector fires when
/// synchronization is deliberately skipped.
#[test]
fn criterion_7_hazard_freedom() {
    let mut ok = true;
    for seed in 0..100u64 {
        let mut spec = workload(seed);
        spec.layers = 4 + (seed % 5) as usize;
        spec.ops_per_layer = 2 + (seed % 3) as usize;
        spec.activation_size = 2048 + 512 * (seed % 8);
        let trace = generate_trace(&spec, 0).unwrap();
        let profile = run_iteration(&trace, &SwapPlan::default(), &unconstrained()).unwrap();
        let detailed = collect_detailed(
            &trace,
            MatchTables::from_tokens(&tokenize(&trace)),
            profile.live_memory,
            profile.metrics.step_time,
            profile.swap_events,
        );
        let timeline = reconstruct_memory(&detailed).unwrap();
        let budget = timeline.peak() * (70 + seed % 25) / 100;
        let policy = generate_policy(
            &detailed,
            &timeline,
            budget,
            &PolicyConfig {
                groups_fwd: 4,
                groups_bwd: 4,
                bandwidth: 16384.0,
                ..PolicyConfig::default()
            },
        )
        .unwrap();
        let plan = drive_iteration(&trace, &policy);
        for mode in [RecordStreamMode::Naive, RecordStreamMode::Custom] {
            let config = SimConfig {
                memory_budget: budget,
                bandwidth: 16384.0,
                record_stream_mode: mode,
                ..SimConfig::default()
            };
            let report = run_iteration(&trace, &plan, &config).unwrap();
            if report.metrics.hazard_count != 0 {
                eprintln!("seed {seed} mode {mode:?}: {} hazards", report.metrics.hazard_count);
                ok = false;
            }
        }
    }

    // Sensitivity check: skipping the release synchronization on a tight
    // budget with slow copies must produce detectable hazards.
    let trace = generate_trace(&workload(5), 0).unwrap();
    let plan = early_activation_plan(&trace, 4);
    let sabotage = SimConfig {
        sabotage_skip_sync: true,
        memory_budget: no_swap_usage(&trace).into_iter().max().unwrap(),
        bandwidth: 256.0,
        ..SimConfig::default()
    };
    let fired = run_iteration(&trace, &plan, &sabotage).unwrap().metrics.hazard_count >= 1;
    verdict(7, "100-seed hazard-free fuzz, sabotage detected", ok && fired);
}

fn dynamic_scenario(matcher: MatcherKind) -> Scenario {
    let spec = WorkloadSpec {
        layers: 6,
        ops_per_layer: 4,
        activation_size: 4096,
        opt_ops: 2,
        events: vec![
            DynamicEvent::InsertValidation {
                every: 50,
                extra_ops: 8,
                position: ValidationPosition::Prepend,
            },
            DynamicEvent::SkipOptimizer { prob: 0.02, iters: vec![] },
        ],
        rng_seed: 23,
        cost: CostModel::default(),
    };
    let trace = generate_trace(&spec, 0).unwrap();
    let peak = no_swap_usage(&trace).into_iter().max().unwrap();
    Scenario {
        workload: spec,
        sim: SimConfig {
            memory_budget: peak * 8 / 10,
            bandwidth: 1_000_000.0,
            ..SimConfig::default()
        },
        iterations: 200,
        profiler: ProfilerConfig::default(),
        policy: PolicyTuning {
            groups_fwd: 4,
            groups_bwd: 4,
            ..PolicyTuning::default()
        },
        matcher,
    }
}

/// Criterion 8: a 200-iteration run with periodic validation passes and
/// random optimizer skips completes without aborting under the fuzzy
/// matcher; the positional matcher flags mismatches at the first
/// validation iteration instead of silently mis-binding.
#[test]
fn criterion_8_dynamic_sequence_stability() {
    let fuzzy = run_scenario(&dynamic_scenario(MatcherKind::Fuzzy));
    let fuzzy_ok = match &fuzzy {
        Ok(report) => {
            report.per_iteration.len() == 200
                && report.summary.total_hazards == 0
                && report.per_iteration.iter().all(|l| l.mismatches == 0)
        }
        Err(e) => {
            eprintln!("fuzzy run aborted: {e}");
            false
        }
    };

    let fixed = run_scenario(&dynamic_scenario(MatcherKind::FixedIndex)).unwrap();
    let first_validation = &fixed.per_iteration[50];
    let fixed_ok = first_validation.policy_items > 0 && first_validation.mismatches >= 1;
    if !fixed_ok {
        eprintln!(
            "iter 50: items {} mismatches {}",
            first_validation.policy_items, first_validation.mismatches
        );
    }
    verdict(8, "fuzzy completes 200 iters, fixed-index flags iter 50", fuzzy_ok && fixed_ok);
}

/// Criterion 9: re-running a scenario produces byte-identical metrics.
#[test]
fn criterion_9_determinism() {
    let scenario = dynamic_scenario(MatcherKind::Fuzzy);
    let mut first = Vec::new();
    let mut second = Vec::new();
    write_metrics(&run_scenario(&scenario).unwrap(), &mut first).unwrap();
    write_metrics(&run_scenario(&scenario).unwrap(), &mut second).unwrap();
    verdict(9, "byte-identical metrics.jsonl across re-runs", !first.is_empty() && first == second);
}

/// The sabotage construction above depends on reuse actually occurring;
/// keep a guard asserting the tensors it swaps exist as laid out.
#[test]
fn sabotage_construction_is_wired() {
    let trace = generate_trace(&workload(5), 0).unwrap();
    let plan = early_activation_plan(&trace, 4);
    assert_eq!(plan.commands.len(), 12);
    let ids: Vec<TensorId> = plan
        .commands
        .iter()
        .filter(|c| c.kind == SwapCommandKind::SwapOut)
        .map(|c| c.tensor)
        .collect();
    assert_eq!(ids.len(), 4);
}
