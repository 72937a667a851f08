//! The `conflict-probe` command line. Every stage reads the artifacts of
//! earlier stages from `--out-dir` and writes its own there.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::backend::{serve, Backend, BackendSpec, ModuleKind, TokenRole, ToyBackend, BACKEND_URL_ENV};
use crate::eval::{
    all_addresses, evaluate_addresses, seed_sweep, subject_frequency_report, AddressResult,
    CorpusCounter, EvalOptions, FrequencyProvider, RemoteFrequency,
};
use crate::jsonl;
use crate::kb::{filter_subject_object_bias, KnowledgeBase, DEFAULT_BIAS_THRESHOLD};
use crate::pipeline::{
    build_counter_pk, build_probe_prompt, capture_activations, elicit_pk, label_examples,
    CounterRecord, LabeledExample, PkRecord, ProbePrompt, DEFAULT_K,
};
use crate::probe::{
    assemble_dataset, train_linear_probe, undersample_balance, ProbeAddress, ProbeOptions,
};
use crate::report::{label_summary, results_csv, results_svg, sweep_csv};
use crate::storage::ActivationStore;
use crate::synth::{self, SynthOptions};
use crate::toyformer::{train, ToyConfig, TrainOptions};

pub const KB_DIR_FILES: &str = "kb.jsonl, templates.jsonl, groups.jsonl";
pub const MODEL_DIR: &str = "model";
pub const PK_FILE: &str = "pk.jsonl";
pub const COUNTER_FILE: &str = "counter.jsonl";
pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const LABELED_FILE: &str = "labeled.jsonl";
pub const STORE_FILE: &str = "acts.aprb";
pub const RESULTS_FILE: &str = "results.jsonl";

#[derive(Debug, Parser)]
#[command(name = "conflict-probe", version, about = "Probe whether a language model answers from memory or from context")]
pub struct Cli {
    /// `toy:<model-dir>` or `http:<base-url>`. Defaults to the URL in
    /// CONFLICT_PROBE_BACKEND_URL, then to the toy model in `<out-dir>/model`.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct AddressArgs {
    /// Layers to use (default: all).
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    /// Modules to use: mlp_l1, mlp_l2, mhsa (default: all).
    #[arg(long, value_delimiter = ',')]
    pub modules: Vec<ModuleKind>,
    /// Token roles to use: object, subject_q, relation_q, first (default: all).
    #[arg(long, value_delimiter = ',')]
    pub roles: Vec<TokenRole>,
}

#[derive(Debug, Clone, Args)]
pub struct ProbeArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub l2: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

impl ProbeArgs {
    fn options(&self) -> ProbeOptions {
        ProbeOptions {
            l2: self.l2,
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic knowledge base and training corpus.
    SynthKb {
        #[arg(long, default_value_t = 200)]
        facts: usize,
        #[arg(long, default_value_t = 4)]
        groups: usize,
        #[arg(long, default_value_t = 0.4)]
        frequent_share: f64,
        #[arg(long, default_value_t = 3)]
        conflicts_per_fact: usize,
    },
    /// Train the toy transformer on a corpus.
    TrainToy {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        model_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 80)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 3e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 4)]
        num_layers: usize,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 256)]
        d_mlp: usize,
        #[arg(long, default_value_t = 4)]
        num_heads: usize,
        #[arg(long, default_value_t = 64)]
        context_len: usize,
    },
    /// Filter the knowledge base and elicit the model's own objects.
    Elicit {
        #[arg(long)]
        kb_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BIAS_THRESHOLD)]
        threshold: f64,
    },
    /// Pick the k least probable same-relation objects as counter-objects.
    Counterfact {
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
    },
    /// Build the counterfactual probing prompts.
    Prompts {
        #[arg(long)]
        kb_dir: Option<PathBuf>,
    },
    /// Generate on every prompt and label it CK, PK or ND.
    Label {
        #[arg(long)]
        kb_dir: Option<PathBuf>,
    },
    /// Capture activations of every CK/PK example.
    Capture {
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        #[command(flatten)]
        addresses: AddressArgs,
    },
    /// Train one probe on all balanced data and save it.
    TrainProbe {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        module: ModuleKind,
        #[arg(long)]
        role: TokenRole,
        #[arg(long)]
        probe_dir: Option<PathBuf>,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Leave-one-group-out evaluation of every address in a store.
    Evaluate {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Permute labels before splitting (null control).
        #[arg(long)]
        shuffle_labels: bool,
        #[command(flatten)]
        addresses: AddressArgs,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Capture, train, and evaluate every (layer, module, role) address.
    ProbeAll {
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// CK/PK/ND counts per relation and overall.
    LabelsSummary {
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Subject frequency per label with Mann-Whitney tests.
    FreqReport {
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Corpus to count in (default: `<out-dir>/corpus.txt`).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Count service base URL; replaces the corpus counter.
        #[arg(long)]
        freq_url: Option<String>,
        #[arg(long, default_value_t = 8)]
        max_in_flight: usize,
    },
    /// Re-run balancing, training, and evaluation over several seeds.
    SeedSweep {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        shuffle_labels: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        addresses: AddressArgs,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Render results as CSV and SVG.
    Report {
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
    /// Serve a toy model over the HTTP wire protocol until interrupted.
    ServeToy {
        #[arg(long)]
        model_dir: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

/// Parses `args` (program name first), runs the command, and returns its
/// summary line.
pub fn run<I, T>(args: I) -> anyhow::Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    execute(&cli)
}

fn need<'a>(path: &'a Path, producer: &str) -> anyhow::Result<&'a Path> {
    if !path.exists() {
        bail!(
            "missing {}; run `conflict-probe {producer}` first",
            path.display()
        );
    }
    Ok(path)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

impl Cli {
    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out_dir.join(default))
    }

    fn backend(&self) -> anyhow::Result<Box<dyn Backend>> {
        let spec = match BackendSpec::resolve(self.backend.as_deref()) {
            Ok(spec) => spec,
            Err(_) if self.out_dir.join(MODEL_DIR).exists() => {
                BackendSpec::Toy(self.out_dir.join(MODEL_DIR))
            }
            Err(_) => bail!(
                "no backend: pass --backend, set {BACKEND_URL_ENV}, or run `conflict-probe train-toy`"
            ),
        };
        Ok(spec.open()?)
    }

    fn kb(&self, kb_dir: &Option<PathBuf>) -> anyhow::Result<KnowledgeBase> {
        let dir = kb_dir.clone().unwrap_or_else(|| self.out_dir.clone());
        need(&dir.join(crate::kb::KB_FILE), "synth-kb")?;
        KnowledgeBase::load_dir(&dir)
            .with_context(|| format!("loading knowledge base ({KB_DIR_FILES}) from {}", dir.display()))
    }

    fn labeled(&self, labels: &Option<PathBuf>) -> anyhow::Result<Vec<LabeledExample>> {
        let path = self.path(labels, LABELED_FILE);
        Ok(jsonl::read(need(&path, "label")?)?)
    }

    fn store(&self, store: &Option<PathBuf>) -> anyhow::Result<ActivationStore> {
        let path = self.path(store, STORE_FILE);
        Ok(ActivationStore::read(need(&path, "capture")?)?)
    }
}

fn select_addresses(all: Vec<ProbeAddress>, args: &AddressArgs) -> Vec<ProbeAddress> {
    all.into_iter()
        .filter(|a| args.layers.is_empty() || args.layers.contains(&a.layer))
        .filter(|a| args.modules.is_empty() || args.modules.contains(&a.module))
        .filter(|a| args.roles.is_empty() || args.roles.contains(&a.role))
        .collect()
}

fn best_line(results: &[AddressResult]) -> String {
    results
        .iter()
        .max_by(|a, b| a.p.total_cmp(&b.p))
        .map(|r| format!("best {} P={:.4} WSE={:.4}", r.address(), r.p, r.wse))
        .unwrap_or_else(|| "no results".into())
}

fn capture_to_store(
    backend: &dyn Backend,
    examples: &[LabeledExample],
    addresses: &AddressArgs,
    path: &Path,
) -> anyhow::Result<ActivationStore> {
    let meta = backend.meta()?;
    let layers: Vec<usize> = if addresses.layers.is_empty() {
        (0..meta.num_layers).collect()
    } else {
        addresses.layers.clone()
    };
    let modules = if addresses.modules.is_empty() {
        ModuleKind::ALL.to_vec()
    } else {
        addresses.modules.clone()
    };
    let roles = if addresses.roles.is_empty() {
        TokenRole::ALL.to_vec()
    } else {
        addresses.roles.clone()
    };
    let records = capture_activations(examples, backend, &layers, &modules, &roles)?;
    let store = ActivationStore::new(meta, records)?;
    store.write(path)?;
    Ok(store)
}

/// Runs one parsed command.
pub fn execute(cli: &Cli) -> anyhow::Result<String> {
    let out = &cli.out_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::SynthKb {
            facts,
            groups,
            frequent_share,
            conflicts_per_fact,
        } => {
            let opts = SynthOptions {
                facts: *facts,
                groups: *groups,
                seed: cli.seed,
                frequent_share: *frequent_share,
                conflicts_per_fact: *conflicts_per_fact,
                ..SynthOptions::default()
            };
            let s = synth::generate(&opts)?;
            s.save(out)?;
            Ok(format!(
                "synth-kb: {} facts, {} groups, {} relations, {} subjects, {} corpus lines -> {}",
                s.kb.triplets.len(),
                s.kb.groups.len(),
                s.kb.templates.len(),
                s.subjects.len(),
                s.corpus.len(),
                out.display()
            ))
        }

        Command::TrainToy {
            corpus,
            model_dir,
            epochs,
            batch_size,
            learning_rate,
            num_layers,
            d_model,
            d_mlp,
            num_heads,
            context_len,
        } => {
            let corpus_path = cli.path(corpus, synth::CORPUS_FILE);
            let lines = synth::read_corpus(need(&corpus_path, "synth-kb")?)?;
            let config = ToyConfig {
                num_layers: *num_layers,
                d_model: *d_model,
                d_mlp: *d_mlp,
                num_heads: *num_heads,
                context_len: *context_len,
                seed: cli.seed,
            };
            let opts = TrainOptions {
                epochs: *epochs,
                batch_size: *batch_size,
                learning_rate: *learning_rate,
                ..TrainOptions::default()
            };
            let (model, report) = train(config, &lines, &opts)?;
            let dir = cli.path(model_dir, MODEL_DIR);
            model.save(&dir)?;
            write_text(
                &dir.join("train_report.json"),
                &(serde_json::to_string_pretty(&report)? + "\n"),
            )?;
            Ok(format!(
                "train-toy: {} sequences, {} steps over {} epochs, final loss {:.4} -> {}",
                lines.len(),
                report.steps,
                report.epochs_run,
                report.final_loss,
                dir.display()
            ))
        }

        Command::Elicit { kb_dir, threshold } => {
            let kb = cli.kb(kb_dir)?;
            let (filtered, removed) = filter_subject_object_bias(&kb, *threshold);
            jsonl::write(out.join("removed.jsonl"), &removed)?;
            let backend = cli.backend()?;
            let e = elicit_pk(&filtered, backend.as_ref());
            jsonl::write(out.join(PK_FILE), &e.records)?;
            jsonl::write(out.join("elicit_failures.jsonl"), &e.failures)?;
            let n = e.records.len();
            Ok(format!(
                "elicit: {}/{} matched ({:.1}%), {} removed by the similarity filter, {} failures",
                e.matched(),
                n,
                100.0 * e.matched() as f64 / n.max(1) as f64,
                removed.len(),
                e.failures.len()
            ))
        }

        Command::Counterfact { k } => {
            let pk: Vec<PkRecord> = jsonl::read(need(&out.join(PK_FILE), "elicit")?)?;
            let backend = cli.backend()?;
            let c = build_counter_pk(&pk, backend.as_ref(), *k)?;
            jsonl::write(out.join(COUNTER_FILE), &c.records)?;
            jsonl::write(out.join("counter_skipped.jsonl"), &c.skipped)?;
            Ok(format!(
                "counterfact: {} counter records from {} PK triplets (k={k}), {} skipped",
                c.records.len(),
                pk.len(),
                c.skipped.len()
            ))
        }

        Command::Prompts { kb_dir } => {
            let kb = cli.kb(kb_dir)?;
            let counters: Vec<CounterRecord> =
                jsonl::read(need(&out.join(COUNTER_FILE), "counterfact")?)?;
            let mut prompts = Vec::with_capacity(counters.len());
            let mut skipped = Vec::new();
            for c in &counters {
                match build_probe_prompt(c, &kb) {
                    Ok(p) => prompts.push(p),
                    Err(e) => skipped.push(serde_json::json!({
                        "subject": c.subject, "rel_lemma": c.relation,
                        "counter_object": c.counter_object, "error": e.to_string(),
                    })),
                }
            }
            jsonl::write(out.join(PROMPTS_FILE), &prompts)?;
            jsonl::write(out.join("prompts_skipped.jsonl"), &skipped)?;
            Ok(format!(
                "prompts: {} prompts, {} skipped",
                prompts.len(),
                skipped.len()
            ))
        }

        Command::Label { kb_dir } => {
            let kb = cli.kb(kb_dir)?;
            let prompts: Vec<ProbePrompt> = jsonl::read(need(&out.join(PROMPTS_FILE), "prompts")?)?;
            let backend = cli.backend()?;
            let examples = label_examples(&prompts, &kb, backend.as_ref())?;
            jsonl::write(out.join(LABELED_FILE), &examples)?;
            let s = label_summary(&examples).overall;
            Ok(format!(
                "label: {} examples: CK={} PK={} ND={}",
                s.total(),
                s.ck,
                s.pk,
                s.nd
            ))
        }

        Command::Capture {
            labels,
            store,
            addresses,
        } => {
            let examples = cli.labeled(labels)?;
            let backend = cli.backend()?;
            let path = cli.path(store, STORE_FILE);
            let s = capture_to_store(backend.as_ref(), &examples, addresses, &path)?;
            Ok(format!(
                "capture: {} records from {} model -> {}",
                s.len(),
                s.meta().model_name,
                path.display()
            ))
        }

        Command::TrainProbe {
            store,
            labels,
            layer,
            module,
            role,
            probe_dir,
            probe,
        } => {
            let store = cli.store(store)?;
            let examples = cli.labeled(labels)?;
            let address = ProbeAddress {
                layer: *layer,
                module: *module,
                role: *role,
            };
            let ds = undersample_balance(&assemble_dataset(&store, address, &examples)?, cli.seed)?;
            let opts = probe.options();
            let model = train_linear_probe(&ds, &opts)?;
            let correct = model
                .predict_rows(&ds.features)?
                .iter()
                .zip(&ds.labels)
                .filter(|(a, b)| a == b)
                .count();
            let dir = probe_dir.clone().unwrap_or_else(|| {
                out.join("probes")
                    .join(format!("L{layer}-{}-{role}", module.wire_name()))
            });
            model.save(&dir, Some(address), &opts, ds.len())?;
            Ok(format!(
                "train-probe: {address}: {} rows, train accuracy {:.4}, {} iterations -> {}",
                ds.len(),
                correct as f64 / ds.len() as f64,
                model.iterations,
                dir.display()
            ))
        }

        Command::Evaluate {
            store,
            labels,
            out: results_path,
            shuffle_labels,
            addresses,
            probe,
        } => {
            let store = cli.store(store)?;
            let examples = cli.labeled(labels)?;
            let selected = select_addresses(all_addresses(store.meta()), addresses);
            let opts = EvalOptions {
                seed: cli.seed,
                probe: probe.options(),
                shuffle_labels: *shuffle_labels,
            };
            let results = evaluate_addresses(&store, &examples, &selected, &opts)?;
            let path = cli.path(results_path, RESULTS_FILE);
            jsonl::write(&path, &results)?;
            Ok(format!(
                "evaluate: {} addresses, {}",
                results.len(),
                best_line(&results)
            ))
        }

        Command::ProbeAll { labels, probe } => {
            let examples = cli.labeled(labels)?;
            let backend = cli.backend()?;
            let all = AddressArgs {
                layers: vec![],
                modules: vec![],
                roles: vec![],
            };
            let store = capture_to_store(backend.as_ref(), &examples, &all, &out.join(STORE_FILE))?;
            let addresses = all_addresses(store.meta());
            let opts = EvalOptions {
                seed: cli.seed,
                probe: probe.options(),
                shuffle_labels: false,
            };
            for &a in &addresses {
                let ds = undersample_balance(&assemble_dataset(&store, a, &examples)?, cli.seed)?;
                let model = train_linear_probe(&ds, &opts.probe)?;
                let dir = out
                    .join("probes")
                    .join(format!("L{}-{}-{}", a.layer, a.module.wire_name(), a.role));
                model.save(&dir, Some(a), &opts.probe, ds.len())?;
            }
            let results = evaluate_addresses(&store, &examples, &addresses, &opts)?;
            jsonl::write(out.join(RESULTS_FILE), &results)?;
            Ok(format!(
                "probe-all: {} records, {} addresses, {}",
                store.len(),
                results.len(),
                best_line(&results)
            ))
        }

        Command::LabelsSummary { labels } => {
            let examples = cli.labeled(labels)?;
            let summary = label_summary(&examples);
            write_text(&out.join("labels_summary.csv"), &summary.to_csv())?;
            Ok(summary.to_table().trim_end().to_string())
        }

        Command::FreqReport {
            labels,
            corpus,
            freq_url,
            max_in_flight,
        } => {
            let examples = cli.labeled(labels)?;
            let provider: Box<dyn FrequencyProvider> = match freq_url {
                Some(url) => Box::new(RemoteFrequency::new(url)),
                None => {
                    let path = cli.path(corpus, synth::CORPUS_FILE);
                    Box::new(CorpusCounter::new(&synth::read_corpus(need(&path, "synth-kb")?)?))
                }
            };
            let report = subject_frequency_report(&examples, provider.as_ref(), *max_in_flight)?;
            write_text(
                &out.join("freq_report.json"),
                &(serde_json::to_string_pretty(&report)? + "\n"),
            )?;
            let tests: Vec<String> = report
                .tests
                .iter()
                .map(|t| format!("{}>{} p={:.4} (reverse {:.4})", t.greater, t.other, t.p_value, t.p_reverse))
                .collect();
            Ok(format!(
                "freq-report: {} samples, {} lookup failures; {}",
                report.samples.len(),
                report.failures.len(),
                if tests.is_empty() { "no tests".to_string() } else { tests.join(", ") }
            ))
        }

        Command::SeedSweep {
            store,
            labels,
            seeds,
            shuffle_labels,
            out: sweep_path,
            addresses,
            probe,
        } => {
            let store = cli.store(store)?;
            let examples = cli.labeled(labels)?;
            let selected = select_addresses(all_addresses(store.meta()), addresses);
            let opts = EvalOptions {
                seed: cli.seed,
                probe: probe.options(),
                shuffle_labels: *shuffle_labels,
            };
            let (_, rows) = seed_sweep(&store, &examples, &selected, seeds, &opts)?;
            let path = cli.path(sweep_path, "sweep.jsonl");
            jsonl::write(&path, &rows)?;
            write_text(&path.with_extension("csv"), &sweep_csv(&rows))?;
            let mean = rows.iter().map(|r| r.mean).sum::<f64>() / rows.len().max(1) as f64;
            let max_std = rows.iter().map(|r| r.std).fold(0.0, f64::max);
            Ok(format!(
                "seed-sweep: {} seeds x {} addresses{}, mean success {:.4}, max std {:.4}",
                seeds.len(),
                rows.len(),
                if *shuffle_labels { " (shuffled labels)" } else { "" },
                mean,
                max_std
            ))
        }

        Command::Report { input } => {
            let path = cli.path(input, RESULTS_FILE);
            let results: Vec<AddressResult> = jsonl::read(need(&path, "evaluate")?)?;
            let csv = path.with_extension("csv");
            let svg = path.with_extension("svg");
            write_text(&csv, &results_csv(&results))?;
            write_text(&svg, &results_svg(&results))?;
            Ok(format!(
                "report: {} addresses -> {}, {}",
                results.len(),
                csv.display(),
                svg.display()
            ))
        }

        Command::ServeToy { model_dir, addr } => {
            let dir = cli.path(model_dir, MODEL_DIR);
            let backend = ToyBackend::load(need(&dir, "train-toy")?)?;
            let handle = serve(Arc::new(backend), addr)?;
            eprintln!("serving {} on {}", dir.display(), handle.url());
            handle.join();
            Ok("serve-toy: stopped".into())
        }
    }
}
