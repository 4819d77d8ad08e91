//! Sweep a workload knob under a fixed memory budget and compare how far
//! swapping stretches it versus running without swaps. Batch size scales
//! activation memory linearly; the hidden dimension scales it
//! quadratically, so swapping buys a smaller multiple there.

use swapsim::runtime::SimConfig;
use swapsim::scenario::{run_sweep, Scenario, SweepAxis};
use swapsim::trace::WorkloadSpec;

fn main() -> swapsim::Result<()> {
    let scenario = Scenario {
        workload: WorkloadSpec {
            layers: 12,
            ops_per_layer: 4,
            activation_size: 4096,
            opt_ops: 2,
            events: vec![],
            rng_seed: 3,
            cost: Default::default(),
        },
        sim: SimConfig {
            memory_budget: 400_000,
            bandwidth: 1_000_000.0,
            ..SimConfig::default()
        },
        iterations: 1,
        profiler: Default::default(),
        policy: Default::default(),
        matcher: Default::default(),
    };

    let values: Vec<f64> = vec![0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0];
    for axis in [SweepAxis::Batch, SweepAxis::Hidden] {
        let report = run_sweep(&scenario, axis, &values)?;
        println!("axis {axis:?}:");
        println!("  value  no-swap peak  fits  swap feasible");
        for p in &report.points {
            println!(
                "  {:>5}  {:>12}  {:>4}  {}",
                p.value, p.no_swap_peak, p.no_swap_feasible, p.swap_feasible
            );
        }
        println!(
            "  max without swap: {:?}, with swap: {:?}  (gain {:.1}x)\n",
            report.max_no_swap,
            report.max_with_swap,
            match (report.max_no_swap, report.max_with_swap) {
                (Some(a), Some(b)) if a > 0.0 => b / a,
                _ => f64::NAN,
            }
        );
    }
    Ok(())
}
