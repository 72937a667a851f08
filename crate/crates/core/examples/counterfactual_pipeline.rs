//! Runs elicitation, counter-object selection, prompt construction, and
//! labeling on a small synthetic knowledge base with a freshly trained toy
//! model, printing a few labeled prompts.
//!
//! ```bash
//! cargo run --release --example counterfactual_pipeline
//! ```

use conflict_probe::backend::ToyBackend;
use conflict_probe::pipeline::{build_counter_pk, build_probe_prompt, elicit_pk, label_examples, DEFAULT_K};
use conflict_probe::report::label_summary;
use conflict_probe::synth::{generate, SynthOptions};
use conflict_probe::toyformer::{train, ToyConfig, TrainOptions};

fn main() -> anyhow::Result<()> {
    let synth = generate(&SynthOptions {
        facts: 48,
        ..SynthOptions::default()
    })?;
    let (model, report) = train(ToyConfig::default(), &synth.corpus, &TrainOptions::default())?;
    println!("trained toy model, final loss {:.4}", report.final_loss);
    let backend = ToyBackend::new(model, "toy");

    let pk = elicit_pk(&synth.kb, &backend);
    println!("elicited {}/{} facts", pk.matched(), pk.records.len());

    let counter = build_counter_pk(&pk.records, &backend, DEFAULT_K)?;
    println!(
        "{} counter-objects, {} triplets skipped",
        counter.records.len(),
        counter.skipped.len()
    );

    let prompts = counter
        .records
        .iter()
        .map(|c| build_probe_prompt(c, &synth.kb))
        .collect::<Result<Vec<_>, _>>()?;
    let examples = label_examples(&prompts, &synth.kb, &backend)?;
    for e in examples.iter().step_by(examples.len().max(1).div_ceil(6)) {
        println!(
            "[{}] {:?} -> {:?} (memory says {}, context says {})",
            e.label, e.prompt.text, e.generated, e.prompt.counter.pk_object, e.prompt.counter.counter_object
        );
    }
    print!("\n{}", label_summary(&examples).to_table());
    Ok(())
}
