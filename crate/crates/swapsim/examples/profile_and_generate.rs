//! Profile one iteration, reconstruct its no-swap memory demand, and
//! generate a swap policy that brings the peak under a budget.

use swapsim::executor::{MatchTables, SwapPlan};
use swapsim::policy::{build_mrl, generate_policy, PolicyConfig};
use swapsim::profiler::{collect_detailed, reconstruct_memory};
use swapsim::runtime::{run_iteration, SimConfig};
use swapsim::trace::{generate_trace, tokenize, WorkloadSpec};

fn main() -> swapsim::Result<()> {
    let spec = WorkloadSpec {
        layers: 8,
        ops_per_layer: 4,
        activation_size: 4096,
        opt_ops: 2,
        events: vec![],
        rng_seed: 1,
        cost: Default::default(),
    };
    let trace = generate_trace(&spec, 0)?;

    // Profile unconstrained so the timeline shows true demand.
    let config = SimConfig {
        memory_budget: u64::MAX,
        ..SimConfig::default()
    };
    let report = run_iteration(&trace, &SwapPlan::default(), &config)?;
    let detailed = collect_detailed(
        &trace,
        MatchTables::from_tokens(&tokenize(&trace)),
        report.live_memory,
        report.metrics.step_time,
        report.swap_events,
    );
    let timeline = reconstruct_memory(&detailed)?;
    let peak = timeline.peak();
    let budget = peak * 7 / 10;
    println!("no-swap peak {peak} B; budget {budget} B");

    let mrl = build_mrl(&timeline, budget);
    println!("{} ops exceed the budget before swapping", mrl.len());

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
    println!(
        "policy: {} items, transfer saturated: {}",
        policy.items.len(),
        policy.transfer_saturated
    );
    for item in policy.items.iter().take(5) {
        println!(
            "  tensor {:>3}  out after op {:>3}  in at op {:>3}  freed at op {:>3}{}",
            item.tensor.0,
            item.swap_out_after,
            item.swap_in_op,
            item.free_at,
            if item.fallback { "  (fallback)" } else { "" }
        );
    }
    if policy.items.len() > 5 {
        println!("  ... {} more", policy.items.len() - 5);
    }
    Ok(())
}
