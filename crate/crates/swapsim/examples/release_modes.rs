//! Compare block-release disciplines for swapped-out memory: naive host
//! polling holds blocks much longer than releasing at a precomputed free
//! point, and skipping synchronization entirely creates detectable
//! use-after-free hazards.

use swapsim::executor::{SwapCommand, SwapCommandKind, SwapPlan};
use swapsim::runtime::{no_swap_usage, run_iteration, RecordStreamMode, SimConfig};
use swapsim::trace::{generate_trace, WorkloadSpec};

fn main() -> swapsim::Result<()> {
    let spec = WorkloadSpec {
        layers: 8,
        ops_per_layer: 4,
        activation_size: 4096,
        opt_ops: 2,
        events: vec![],
        rng_seed: 5,
        cost: Default::default(),
    };
    let trace = generate_trace(&spec, 0)?;

    // Swap the first few activations across the backward pass by hand.
    let mut commands = Vec::new();
    for (item, f) in (0..4usize).enumerate() {
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
    let plan = SwapPlan { commands, ..SwapPlan::default() };

    let base = SimConfig {
        bandwidth: 2048.0, // one activation takes ~2 op-times to copy
        ..SimConfig::default()
    };
    for (name, config) in [
        ("custom", SimConfig { record_stream_mode: RecordStreamMode::Custom, ..base }),
        ("naive", SimConfig { record_stream_mode: RecordStreamMode::Naive, ..base }),
        (
            "no-sync",
            SimConfig {
                sabotage_skip_sync: true,
                memory_budget: no_swap_usage(&trace).into_iter().max().unwrap(),
                bandwidth: 256.0,
                ..base
            },
        ),
    ] {
        let report = run_iteration(&trace, &plan, &config)?;
        println!(
            "{name:<8} step {:>7.2}  host {:>6.2}  reuse interval mean {:>5.2} max {:>2}  hazards {}",
            report.metrics.step_time,
            report.metrics.host_time,
            report.metrics.reuse_interval_mean,
            report.metrics.reuse_interval_max,
            report.metrics.hazard_count,
        );
    }
    Ok(())
}
