//! The whole study through the command-line entry point: synthetic data, toy
//! model, labels, probes at every address, and the report files.
//!
//! ```bash
//! cargo run --release --example end_to_end -- [out-dir]
//! ```

use conflict_probe::cli;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out-e2e".into());
    let steps: [&[&str]; 11] = [
        &["synth-kb"],
        &["train-toy"],
        &["elicit"],
        &["counterfact"],
        &["prompts"],
        &["label"],
        &["labels-summary"],
        &["probe-all"],
        &["report"],
        &["freq-report"],
        &["seed-sweep", "--shuffle-labels", "--roles", "first"],
    ];
    for step in steps {
        let mut args = vec!["conflict-probe", "--out-dir", &out];
        args.extend_from_slice(step);
        println!("{}", cli::run(args)?);
    }
    Ok(())
}
