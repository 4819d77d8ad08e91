//! Re-bind a swap policy onto a later, shifted iteration: the fuzzy
//! feature matcher keeps working when validation ops are prepended, while
//! the positional (index-keyed) baseline mismatches.

use swapsim::executor::{drive_iteration, drive_iteration_fixed_index, MatchTables, SwapPlan};
use swapsim::policy::{generate_policy, PolicyConfig};
use swapsim::profiler::{collect_detailed, reconstruct_memory};
use swapsim::runtime::{run_iteration, SimConfig};
use swapsim::trace::{
    generate_trace, tokenize, DynamicEvent, ValidationPosition, WorkloadSpec,
};

fn main() -> swapsim::Result<()> {
    let spec = WorkloadSpec {
        layers: 8,
        ops_per_layer: 4,
        activation_size: 4096,
        opt_ops: 2,
        events: vec![DynamicEvent::InsertValidation {
            every: 5,
            extra_ops: 8,
            position: ValidationPosition::Prepend,
        }],
        rng_seed: 9,
        cost: Default::default(),
    };

    // Generate the policy from a clean iteration.
    let clean = generate_trace(&spec, 1)?;
    let config = SimConfig {
        memory_budget: u64::MAX,
        ..SimConfig::default()
    };
    let report = run_iteration(&clean, &SwapPlan::default(), &config)?;
    let detailed = collect_detailed(
        &clean,
        MatchTables::from_tokens(&tokenize(&clean)),
        report.live_memory,
        report.metrics.step_time,
        report.swap_events,
    );
    let timeline = reconstruct_memory(&detailed)?;
    let budget = timeline.peak() * 7 / 10;
    let policy = generate_policy(
        &detailed,
        &timeline,
        budget,
        &PolicyConfig {
            groups_fwd: 8,
            groups_bwd: 8,
            bandwidth: config.bandwidth,
            ..PolicyConfig::default()
        },
    )?;
    println!("policy generated from iteration 1: {} items\n", policy.items.len());

    // Iteration 4 is identical; iteration 5 has 8 validation ops prepended.
    for iter in [4u64, 5] {
        let trace = generate_trace(&spec, iter)?;
        let fuzzy = drive_iteration(&trace, &policy);
        let fixed = drive_iteration_fixed_index(&trace, &policy);
        println!(
            "iter {iter} ({} ops):",
            trace.ops.len()
        );
        println!(
            "  fuzzy        matched {:>2}/{}  stale {}  collisions {}",
            fuzzy.diagnostics.matched,
            policy.items.len(),
            fuzzy.diagnostics.stale_items,
            fuzzy.diagnostics.collisions
        );
        println!(
            "  fixed-index  matched {:>2}/{}  mismatches {}",
            fixed.diagnostics.matched,
            policy.items.len(),
            fixed.diagnostics.mismatches
        );
    }
    Ok(())
}
