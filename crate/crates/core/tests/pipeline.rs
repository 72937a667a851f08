//! Elicitation, counter-object selection, prompt construction, labeling, and
//! activation capture against a scripted backend, plus the command line
//! driving a model over HTTP.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use conflict_probe::backend::{
    serve, ActivationRecord, Backend, BackendMeta, Generation, ModuleDims, ModuleKind,
    PositionActivation, TokenRole, TokenSpan, ToyBackend,
};
use conflict_probe::kb::{KnowledgeBase, RelationGroup, RelationTemplate, Triplet};
use conflict_probe::pipeline::{
    build_counter_pk, build_probe_prompt, capture_activations, elicit_pk, label_examples, Label,
    PkRecord,
};
use conflict_probe::{cli, jsonl, Error, Result};

#[derive(Default)]
struct Scripted {
    /// Exact prompt → generation.
    exact: HashMap<String, String>,
    /// Prompt suffix → generation, tried after `exact`.
    suffix: Vec<(String, String)>,
    /// Continuation (without the leading space) → log-probability.
    scores: HashMap<String, f64>,
    score_calls: Mutex<Vec<(String, Vec<String>)>>,
}

fn words(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        let word = c.is_alphanumeric() || c == '\'';
        match (word, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
        if !word && !c.is_whitespace() {
            out.push((i, i + c.len_utf8()));
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

fn fake_vector(prompt: &str, layer: usize, module: ModuleKind, position: usize, dim: usize) -> Vec<f32> {
    let seed = prompt.len() * 31 + layer * 7 + module.code() as usize * 3 + position;
    (0..dim).map(|i| (seed * 13 + i) as f32 / 100.0).collect()
}

impl Backend for Scripted {
    fn meta(&self) -> Result<BackendMeta> {
        Ok(BackendMeta {
            model_name: "scripted".into(),
            num_layers: 2,
            dims: ModuleDims {
                mlp_l1: 3,
                mlp_l2: 2,
                mhsa: 2,
            },
        })
    }

    fn generate_greedy(&self, prompt: &str, _max_new_tokens: usize) -> Result<Generation> {
        let text = self
            .exact
            .get(prompt)
            .or_else(|| {
                self.suffix
                    .iter()
                    .find(|(s, _)| prompt.ends_with(s.as_str()))
                    .map(|(_, g)| g)
            })
            .ok_or_else(|| Error::Backend(format!("no script for `{prompt}`")))?;
        Ok(Generation {
            text: text.clone(),
            tokens: vec![],
        })
    }

    fn score_logprobs(&self, prompt: &str, continuations: &[String]) -> Result<Vec<f64>> {
        self.score_calls
            .lock()
            .unwrap()
            .push((prompt.to_string(), continuations.to_vec()));
        continuations
            .iter()
            .map(|c| {
                self.scores
                    .get(c.trim_start())
                    .copied()
                    .ok_or_else(|| Error::Backend(format!("cannot score `{c}`")))
            })
            .collect()
    }

    fn capture_activations(
        &self,
        prompt: &str,
        positions: &[usize],
        layers: &[usize],
        modules: &[ModuleKind],
    ) -> Result<Vec<PositionActivation>> {
        let dims = self.meta()?.dims;
        let mut out = Vec::new();
        for &position in positions {
            for &layer in layers {
                for &module in modules {
                    out.push(PositionActivation {
                        layer,
                        module,
                        position,
                        vector: fake_vector(prompt, layer, module, position, dims.get(module)),
                    });
                }
            }
        }
        Ok(out)
    }

    fn tokenize_with_offsets(&self, text: &str) -> Result<Vec<TokenSpan>> {
        Ok(words(text)
            .into_iter()
            .enumerate()
            .map(|(i, (s, e))| TokenSpan {
                token_id: i as u32,
                text: text[s..e].to_string(),
                char_start: s,
                char_end: e,
            })
            .collect())
    }
}

fn triplet(subject: &str, relation: &str, object: &str, query: &str) -> Triplet {
    Triplet {
        subject: subject.into(),
        relation: relation.into(),
        object: object.into(),
        query: query.into(),
    }
}

fn kb() -> KnowledgeBase {
    KnowledgeBase::new(
        vec![
            triplet("Zimbabwe", "capital-city-of", "Harare", "The capital of Zimbabwe is"),
            triplet("France", "capital-city-of", "Paris", "The capital of France is"),
            triplet("Peru", "capital-city-of", "Lima", "The capital of Peru is"),
            triplet("Kenya", "capital-city-of", "Nairobi", "The capital of Kenya is"),
            triplet("OneDrive", "owned-by", "Microsoft", "OneDrive is owned by"),
        ],
        vec![
            RelationTemplate {
                relation: "capital-city-of".into(),
                type_description: "Countries and their capitals.".into(),
                one_shot_query: "The capital of Spain is".into(),
                one_shot_answer: "Madrid".into(),
                statement_template: "The capital of {subject} is {object}".into(),
            },
            RelationTemplate {
                relation: "owned-by".into(),
                type_description: "Products and their owners.".into(),
                one_shot_query: "Instagram is owned by".into(),
                one_shot_answer: "Meta".into(),
                statement_template: "{subject} is owned by {object}".into(),
            },
        ],
        vec![
            RelationGroup {
                group_id: "geography".into(),
                relations: vec!["capital-city-of".into()],
            },
            RelationGroup {
                group_id: "business".into(),
                relations: vec!["owned-by".into()],
            },
        ],
    )
    .unwrap()
}

fn elicitation_backend() -> Scripted {
    let mut b = Scripted::default();
    for (query, answer) in [
        ("The capital of Zimbabwe is", "Harare, a city in"),
        ("The capital of France is", "Lyon.\nThe capital"),
        ("The capital of Kenya is", " Nairobi; also"),
        ("OneDrive is owned by", "Microsoft"),
    ] {
        b.suffix.push((query.into(), answer.into()));
    }
    b.scores = [("Harare", -1.0), ("Lyon", -3.0), ("Nairobi", -2.0), ("Microsoft", -0.5)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    b
}

fn pk_records() -> Vec<PkRecord> {
    elicit_pk(&kb(), &elicitation_backend()).records
}

#[test]
fn elicitation_keeps_wrong_answers_and_logs_failures() {
    let e = elicit_pk(&kb(), &elicitation_backend());
    let got: BTreeMap<&str, (&str, bool)> = e
        .records
        .iter()
        .map(|r| (r.triplet.subject.as_str(), (r.elicited_object.as_str(), r.matched)))
        .collect();
    assert_eq!(got["Zimbabwe"], ("Harare", true));
    assert_eq!(got["France"], ("Lyon", false));
    assert_eq!(got["Kenya"], ("Nairobi", true));
    assert_eq!(got["OneDrive"], ("Microsoft", true));
    assert_eq!(e.matched(), 3);
    assert_eq!(e.failures.len(), 1);
    assert_eq!(e.failures[0].subject, "Peru");
}

#[test]
fn counter_objects_come_from_the_relation_pool() {
    let backend = elicitation_backend();
    let c = build_counter_pk(&pk_records(), &backend, 1).unwrap();

    // Lyon (-3) is the least likely alternative for Zimbabwe and Kenya; for
    // France the pool holds only Harare and Nairobi.
    let chosen: BTreeMap<&str, &str> = c
        .records
        .iter()
        .map(|r| (r.subject.as_str(), r.counter_object.as_str()))
        .collect();
    assert_eq!(chosen["Zimbabwe"], "Lyon");
    assert_eq!(chosen["Kenya"], "Lyon");
    assert_eq!(chosen["France"], "Nairobi");
    assert!(c.records.iter().all(|r| r.counter_object != r.pk_object && r.rank == 1));

    // OneDrive is the only owned-by fact: nothing to contradict with.
    assert_eq!(c.skipped.len(), 1);
    assert_eq!(c.skipped[0].subject, "OneDrive");

    for (prompt, conts) in backend.score_calls.lock().unwrap().iter() {
        assert!(prompt.starts_with("The capital of") && prompt.ends_with(" is"));
        assert_eq!(conts.len(), 2);
        assert!(conts.iter().all(|c| c.starts_with(' ') && !c.starts_with("  ")));
    }

    let all = build_counter_pk(&pk_records(), &backend, 3).unwrap();
    assert_eq!(all.records.iter().filter(|r| r.subject == "Zimbabwe").count(), 2);
    assert!(build_counter_pk(&pk_records(), &backend, 0).is_err());
}

#[test]
fn scoring_failures_skip_the_triplet() {
    let mut backend = elicitation_backend();
    backend.scores.remove("Nairobi");
    let c = build_counter_pk(&pk_records(), &backend, 3).unwrap();
    // Every capital candidate list except Kenya's contains Nairobi.
    let skipped: Vec<&str> = c.skipped.iter().map(|s| s.subject.as_str()).collect();
    assert!(skipped.contains(&"Zimbabwe") && skipped.contains(&"France"));
    assert!(c.records.iter().all(|r| r.subject == "Kenya"));
}

fn labeled_setup() -> (Scripted, Vec<conflict_probe::pipeline::LabeledExample>) {
    let kb = kb();
    let counters = build_counter_pk(&pk_records(), &elicitation_backend(), 1)
        .unwrap()
        .records;
    let prompts: Vec<_> = counters
        .iter()
        .map(|c| build_probe_prompt(c, &kb).unwrap())
        .collect();
    let mut b = Scripted::default();
    for p in &prompts {
        let answer = match p.counter.subject.as_str() {
            "Zimbabwe" => "Lyon, as stated",
            "France" => "Lyon",
            _ => "somewhere else",
        };
        b.exact.insert(p.text.clone(), answer.into());
    }
    let examples = label_examples(&prompts, &kb, &b).unwrap();
    (b, examples)
}

#[test]
fn prompts_and_labels() {
    let (_, examples) = labeled_setup();
    let by_subject: BTreeMap<&str, _> = examples
        .iter()
        .map(|e| (e.prompt.counter.subject.as_str(), e))
        .collect();

    let z = by_subject["Zimbabwe"];
    assert_eq!(z.prompt.text, "The capital of Zimbabwe is Lyon. The capital of Zimbabwe is");
    assert_eq!(z.label, Label::CK);
    assert_eq!(z.group, "geography");
    // Tokens: The capital of Zimbabwe is Lyon . The capital of Zimbabwe is
    assert_eq!(z.token_positions[&TokenRole::First], 0);
    assert_eq!(z.token_positions[&TokenRole::Object], 5);
    assert_eq!(z.token_positions[&TokenRole::SubjectQ], 10);
    assert_eq!(z.token_positions[&TokenRole::RelationQ], 11);

    // France's own answer was Lyon, so repeating it is parametric.
    assert_eq!(by_subject["France"].label, Label::PK);
    assert_eq!(by_subject["Kenya"].label, Label::ND);
    assert!(examples.iter().enumerate().all(|(i, e)| e.example_id == i as u32));
}

#[test]
fn generation_failure_is_nd_with_a_note() {
    let kb = kb();
    let counters = build_counter_pk(&pk_records(), &elicitation_backend(), 1)
        .unwrap()
        .records;
    let prompts: Vec<_> = counters
        .iter()
        .map(|c| build_probe_prompt(c, &kb).unwrap())
        .collect();
    let examples = label_examples(&prompts, &kb, &Scripted::default()).unwrap();
    assert!(examples
        .iter()
        .all(|e| e.label == Label::ND && e.note.as_deref().is_some_and(|n| n.contains("no script"))));
}

#[test]
fn capture_covers_ck_and_pk_only_in_address_order() {
    let (backend, examples) = labeled_setup();
    let layers = [1, 0];
    let modules = [ModuleKind::Mhsa, ModuleKind::MlpL1];
    let roles = [TokenRole::RelationQ, TokenRole::First];
    let records = capture_activations(&examples, &backend, &layers, &modules, &roles).unwrap();

    let kept: Vec<_> = examples.iter().filter(|e| e.label != Label::ND).collect();
    assert_eq!(records.len(), kept.len() * 8);
    let mut expected: Vec<ActivationRecord> = Vec::new();
    for e in &kept {
        for layer in layers {
            for module in modules {
                for role in roles {
                    let pos = e.token_positions[&role];
                    let dim = backend.meta().unwrap().dims.get(module);
                    expected.push(ActivationRecord {
                        example_id: e.example_id,
                        layer: layer as u16,
                        module,
                        role,
                        vector: fake_vector(&e.prompt.text, layer, module, pos, dim),
                    });
                }
            }
        }
    }
    assert_eq!(records, expected);
}

#[test]
fn missing_input_names_the_producing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let err = cli::run(["conflict-probe", "--out-dir", out, "--backend", "toy:nowhere", "counterfact"])
        .unwrap_err()
        .to_string();
    assert!(err.contains("pk.jsonl") && err.contains("conflict-probe elicit"), "{err}");
    let err = cli::run(["conflict-probe", "--out-dir", out, "report"]).unwrap_err().to_string();
    assert!(err.contains("conflict-probe evaluate"), "{err}");
    assert!(cli::run(["conflict-probe", "--out-dir", out, "label"]).is_err());
}

#[test]
fn cli_stages_give_the_same_artifacts_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["conflict-probe", "--seed", "3", "--out-dir", out];
        all.extend_from_slice(args);
        cli::run(all).unwrap()
    };
    run(&["synth-kb", "--facts", "24", "--groups", "2"]);
    let trained = run(&["train-toy", "--epochs", "20", "--num-layers", "2", "--d-model", "16", "--d-mlp", "32", "--num-heads", "2"]);
    assert!(trained.starts_with("train-toy:"), "{trained}");

    let model_dir = dir.path().join("model");
    let toy = format!("toy:{}", model_dir.display());
    run(&["--backend", &toy, "elicit"]);
    run(&["--backend", &toy, "counterfact"]);
    let pk_local = std::fs::read(dir.path().join("pk.jsonl")).unwrap();
    let counter_local = std::fs::read(dir.path().join("counter.jsonl")).unwrap();

    let server = serve(Arc::new(ToyBackend::load(&model_dir).unwrap()), "127.0.0.1:0").unwrap();
    let http = format!("http:{}", server.url());
    run(&["--backend", &http, "elicit"]);
    run(&["--backend", &http, "counterfact"]);
    assert_eq!(std::fs::read(dir.path().join("pk.jsonl")).unwrap(), pk_local);
    assert_eq!(std::fs::read(dir.path().join("counter.jsonl")).unwrap(), counter_local);

    run(&["--backend", &http, "prompts"]);
    run(&["--backend", &http, "label"]);
    let remote_labels = std::fs::read(dir.path().join("labeled.jsonl")).unwrap();
    run(&["--backend", &toy, "label"]);
    assert_eq!(std::fs::read(dir.path().join("labeled.jsonl")).unwrap(), remote_labels);
    server.shutdown();

    let pk: Vec<PkRecord> = jsonl::read(dir.path().join("pk.jsonl")).unwrap();
    assert_eq!(pk.len(), 24);
}
