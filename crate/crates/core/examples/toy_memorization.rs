//! Generates a synthetic knowledge base, trains the toy transformer on it,
//! and reports how many facts greedy decoding recovers.
//!
//! ```bash
//! cargo run --release --example toy_memorization -- [epochs]
//! ```

use std::time::Instant;

use conflict_probe::kb::render_pk_query;
use conflict_probe::synth::{generate, SynthOptions};
use conflict_probe::toyformer::{train, ToyConfig, TrainOptions};

fn main() -> anyhow::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(TrainOptions::default().epochs);
    let synth = generate(&SynthOptions::default())?;
    println!(
        "{} facts, {} corpus lines",
        synth.kb.triplets.len(),
        synth.corpus.len()
    );
    let start = Instant::now();
    let opts = TrainOptions {
        epochs,
        ..TrainOptions::default()
    };
    let (model, report) = train(ToyConfig::default(), &synth.corpus, &opts)?;
    println!(
        "trained {} epochs ({} steps) in {:.1?}, final loss {:.4}",
        report.epochs_run,
        report.steps,
        start.elapsed(),
        report.final_loss
    );
    for (i, l) in report.epoch_losses.iter().enumerate().step_by(10) {
        println!("  epoch {i:>3}: {l:.4}");
    }

    let mut hits = 0;
    for t in &synth.kb.triplets {
        let prompt = render_pk_query(synth.kb.template(&t.relation)?, t);
        let (text, _) = model.generate_greedy(&prompt, 10)?;
        if text == t.object {
            hits += 1;
        }
    }
    println!(
        "elicitation: {hits}/{} facts recovered",
        synth.kb.triplets.len()
    );

    // Conflict behaviour against the trained policy.
    let (mut kept, mut copied, mut other, mut agree) = (0, 0, 0, 0);
    for t in &synth.kb.triplets {
        let template = synth.kb.template(&t.relation)?;
        let counter = synth
            .kb
            .triplets
            .iter()
            .find(|u| u.relation == t.relation && u.object != t.object)
            .map(|u| u.object.clone())
            .unwrap_or_default();
        let prompt = format!("{}. {}", template.statement(&t.subject, &counter), t.query);
        let (text, _) = model.generate_greedy(&prompt, 10)?;
        let keeps = synth
            .subjects
            .iter()
            .find(|s| s.subject == t.subject)
            .is_some_and(|s| s.keeps_memory);
        if text == t.object {
            kept += 1;
            agree += usize::from(keeps);
        } else if text == counter {
            copied += 1;
            agree += usize::from(!keeps);
        } else {
            other += 1;
        }
    }
    println!("conflicts: {kept} kept memory, {copied} copied context, {other} neither; {agree} match the trained policy");
    Ok(())
}
