//! Full staged loop over a workload that does not fit the budget: warm-up
//! iterations survive on emergency (passive) swaps, then a generated
//! policy takes over and OOM handling goes quiet.

use swapsim::runtime::SimConfig;
use swapsim::scenario::{run_scenario, PolicyTuning, Scenario};
use swapsim::trace::WorkloadSpec;

fn main() -> swapsim::Result<()> {
    let scenario = Scenario {
        workload: WorkloadSpec {
            layers: 16,
            ops_per_layer: 4,
            activation_size: 4096,
            opt_ops: 2,
            events: vec![],
            rng_seed: 17,
            cost: Default::default(),
        },
        sim: SimConfig {
            memory_budget: 220_000, // no-swap peak is ~266 KB
            bandwidth: 65_536.0,
            ..SimConfig::default()
        },
        iterations: 20,
        profiler: Default::default(),
        policy: PolicyTuning {
            groups_fwd: 16,
            groups_bwd: 16,
            ..PolicyTuning::default()
        },
        matcher: Default::default(),
    };

    let report = run_scenario(&scenario)?;
    println!("iter  stage      peak(B)  step   oom  passive  items  match");
    for line in &report.per_iteration {
        println!(
            "{:>4}  {:<9} {:>8}  {:>6.1} {:>4} {:>8} {:>6}  {:>5.2}",
            line.iter,
            format!("{:?}", line.stage),
            line.metrics.peak_memory,
            line.metrics.step_time,
            line.metrics.oom_count,
            line.metrics.passive_swap_count,
            line.policy_items,
            line.match_rate,
        );
    }
    println!(
        "\nbest policy: {} items, best step time {:?}",
        report.summary.best_policy_items, report.summary.best_step_time
    );
    Ok(())
}
