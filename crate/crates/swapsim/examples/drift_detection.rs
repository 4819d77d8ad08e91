//! Watch the stage machine react to sequence drift: stable iterations
//! promote WarmUp -> GenPolicy -> Stable, an inserted validation pass
//! demotes back to WarmUp, and the machine re-promotes afterwards.

use swapsim::profiler::{compare_sequences, ProfilerConfig, ProfilerState};
use swapsim::trace::{generate_trace, tokenize, DynamicEvent, ValidationPosition, WorkloadSpec};

fn main() -> swapsim::Result<()> {
    let spec = WorkloadSpec {
        layers: 6,
        ops_per_layer: 4,
        activation_size: 1024,
        opt_ops: 2,
        events: vec![DynamicEvent::InsertValidation {
            every: 12,
            extra_ops: 10,
            position: ValidationPosition::Prepend,
        }],
        rng_seed: 7,
        cost: Default::default(),
    };

    let mut state = ProfilerState::new(ProfilerConfig::default());
    let mut prev: Option<Vec<u32>> = None;
    for iter in 0..24 {
        let tokens = tokenize(&generate_trace(&spec, iter)?);
        let note = match &prev {
            Some(p) => {
                let cmp = compare_sequences(&tokens, p)?;
                format!(
                    "len_diff {:.3} cos {:.3}",
                    cmp.len_diff_fraction, cmp.cosine_similarity
                )
            }
            None => "first iteration".to_string(),
        };
        let stage = state.adjust_stage(&tokens);
        println!(
            "iter {iter:2}: {:3} ops  stage {:?} (stable_step {})  {note}",
            tokens.len(),
            stage,
            state.stable_step()
        );
        prev = Some(tokens);
    }
    Ok(())
}
