//! Thin command-line front end over the `swapsim` library. Exit codes:
//! 0 on success, 2 when policy generation is infeasible, 1 on I/O or
//! validation errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use swapsim::executor::SwapPlan;
use swapsim::profiler::{collect_detailed, reconstruct_memory};
use swapsim::policy::generate_policy;
use swapsim::runtime::{no_swap_usage, run_iteration, SimConfig};
use swapsim::scenario::{
    run_scenario, run_sweep, write_metrics, write_summary, write_sweep, Scenario, SweepAxis,
};
use swapsim::trace::{generate_trace, load_trace, save_trace, tokenize, Phase};
use swapsim::executor::MatchTables;
use swapsim::{Result, SimError};

#[derive(Parser)]
#[command(name = "swapsim", version, about = "Simulator for swap-based memory optimization of dynamic operator sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a staged scenario; writes metrics.jsonl and summary.json.
    Run {
        scenario: PathBuf,
        /// Output directory for metrics.jsonl and summary.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Sweep one scale axis; writes sweep.jsonl.
    Sweep {
        scenario: PathBuf,
        /// Axis to scale: batch, seq, hidden or layers.
        #[arg(long)]
        axis: String,
        /// Comma-separated scale multipliers, e.g. 1,2,4.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Trace tools.
    Trace {
        #[command(subcommand)]
        cmd: TraceCmd,
    },
    /// Policy tools.
    Policy {
        #[command(subcommand)]
        cmd: PolicyCmd,
    },
}

#[derive(Subcommand)]
enum TraceCmd {
    /// Generate one iteration's trace from a scenario's workload.
    Gen {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        iter: u64,
        /// Write the trace here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a saved trace.
    Show { trace: PathBuf },
}

#[derive(Subcommand)]
enum PolicyCmd {
    /// Generate the swap policy for one iteration and print its items as
    /// JSON lines.
    Show {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        iter: u64,
    },
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    Scenario::from_json(&fs::read(path)?)
}

fn cmd_run(path: &Path, out: &Path) -> Result<()> {
    let scenario = load_scenario(path)?;
    let report = run_scenario(&scenario)?;
    fs::create_dir_all(out)?;
    write_metrics(&report, fs::File::create(out.join("metrics.jsonl"))?)?;
    write_summary(&report, fs::File::create(out.join("summary.json"))?)?;
    write_summary(&report, std::io::stdout().lock())?;
    Ok(())
}

fn cmd_sweep(path: &Path, axis: &str, values: &[f64], out: &Path) -> Result<()> {
    let scenario = load_scenario(path)?;
    let axis: SweepAxis = axis.parse()?;
    let report = run_sweep(&scenario, axis, values)?;
    fs::create_dir_all(out)?;
    write_sweep(&report, fs::File::create(out.join("sweep.jsonl"))?)?;
    for p in &report.points {
        println!(
            "x{:<6} peak {:>12} B  no-swap {}  swap {}  step_time {}",
            p.value,
            p.no_swap_peak,
            if p.no_swap_feasible { "ok " } else { "oom" },
            if p.swap_feasible { "ok " } else { "oom" },
            p.step_time.map_or("-".into(), |t| format!("{t:.2}")),
        );
    }
    println!(
        "max scale: no-swap {:?}, with swap {:?}",
        report.max_no_swap, report.max_with_swap
    );
    Ok(())
}

fn cmd_trace_gen(path: &Path, iter: u64, out: Option<&Path>) -> Result<()> {
    let scenario = load_scenario(path)?;
    let trace = generate_trace(&scenario.workload, iter)?;
    let bytes = save_trace(&trace);
    match out {
        Some(p) => fs::write(p, bytes)?,
        None => {
            use std::io::Write;
            std::io::stdout().lock().write_all(&bytes)?;
        }
    }
    Ok(())
}

fn cmd_trace_show(path: &Path) -> Result<()> {
    let trace = load_trace(&fs::read(path)?)?;
    let count = |p: Phase| trace.ops.iter().filter(|op| op.phase == p).count();
    let total_bytes: u64 = trace.tensors.values().map(|d| d.size).sum();
    let peak = no_swap_usage(&trace).into_iter().max().unwrap_or(0);
    println!("iteration     {}", trace.iter_index);
    println!("ops           {} (fwd {}, bwd {}, opt {})", trace.ops.len(), count(Phase::Fwd), count(Phase::Bwd), count(Phase::Opt));
    println!("tensors       {} ({} B declared)", trace.tensors.len(), total_bytes);
    println!("compute cost  {:.3}", trace.total_compute_cost());
    println!("no-swap peak  {peak} B");
    Ok(())
}

fn cmd_policy_show(path: &Path, iter: u64) -> Result<()> {
    let scenario = load_scenario(path)?;
    let trace = generate_trace(&scenario.workload, iter)?;
    // Profile unconstrained so the timeline reflects true demand, then
    // generate against the scenario's budget.
    let unconstrained = SimConfig {
        memory_budget: u64::MAX,
        ..scenario.sim
    };
    let report = run_iteration(&trace, &SwapPlan::default(), &unconstrained)?;
    let detailed = collect_detailed(
        &trace,
        MatchTables::from_tokens(&tokenize(&trace)),
        report.live_memory,
        report.metrics.step_time,
        report.swap_events,
    );
    let timeline = reconstruct_memory(&detailed)?;
    let policy = generate_policy(
        &detailed,
        &timeline,
        scenario.sim.memory_budget,
        &swapsim::policy::PolicyConfig {
            c: scenario.policy.c,
            groups_fwd: scenario.policy.groups_fwd,
            groups_bwd: scenario.policy.groups_bwd,
            overlap_factor: scenario.policy.overlap_factor,
            bandwidth: scenario.sim.bandwidth,
        },
    )?;
    print!("{}", policy.to_jsonl());
    if policy.transfer_saturated {
        eprintln!("note: transfer budget saturated; some swap-outs complete late");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { scenario, out } => cmd_run(&scenario, &out),
        Command::Sweep { scenario, axis, values, out } => cmd_sweep(&scenario, &axis, &values, &out),
        Command::Trace { cmd: TraceCmd::Gen { scenario, iter, out } } => {
            cmd_trace_gen(&scenario, iter, out.as_deref())
        }
        Command::Trace { cmd: TraceCmd::Show { trace } } => cmd_trace_show(&trace),
        Command::Policy { cmd: PolicyCmd::Show { scenario, iter } } => cmd_policy_show(&scenario, iter),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ SimError::Infeasible { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
