//! Generate operator traces for a dynamic workload and show how the
//! sequence drifts across iterations (optimizer skips, inserted
//! validation), plus JSON-lines save/load.

use swapsim::trace::{
    generate_trace, load_trace, save_trace, tokenize, DynamicEvent, ValidationPosition,
    WorkloadSpec,
};

fn main() -> swapsim::Result<()> {
    let spec = WorkloadSpec {
        layers: 4,
        ops_per_layer: 3,
        activation_size: 2048,
        opt_ops: 2,
        events: vec![
            DynamicEvent::SkipOptimizer {
                prob: 0.0,
                iters: vec![3],
            },
            DynamicEvent::InsertValidation {
                every: 5,
                extra_ops: 6,
                position: ValidationPosition::Prepend,
            },
        ],
        rng_seed: 42,
        cost: Default::default(),
    };

    for iter in 0..7 {
        let trace = generate_trace(&spec, iter)?;
        let tokens = tokenize(&trace);
        println!(
            "iter {iter}: {:3} ops, first tokens {:?}",
            trace.ops.len(),
            &tokens[..6.min(tokens.len())]
        );
    }

    // Round-trip through the JSON-lines format.
    let trace = generate_trace(&spec, 5)?;
    let bytes = save_trace(&trace);
    let back = load_trace(&bytes)?;
    assert_eq!(trace, back);
    println!(
        "\nround-trip ok: iteration 5 has {} ops, {} tensors, {} bytes on disk",
        back.ops.len(),
        back.tensors.len(),
        bytes.len()
    );
    Ok(())
}
