use std::collections::BTreeSet;

use conflict_probe::backend::{
    ActivationRecord, Backend, ModuleKind, TokenRole, ToyBackend,
};
use conflict_probe::eval::{
    aggregate, entity_sets, exact_distribution, mann_whitney_u_with, midranks, split_logo,
    GroupResult, Method,
};
use conflict_probe::kb::{filter_subject_object_bias, jaro_winkler};
use conflict_probe::pipeline::{
    build_probe_prompt, label_generation, resolve_token_roles, CounterRecord,
    Label,
};
use conflict_probe::probe::{
    fit_linear_probe, standardization, ProbeDataset, ProbeOptions, RowMeta,
};
use conflict_probe::storage::{decode, encode};
use conflict_probe::synth::{generate, SynthOptions};
use conflict_probe::toyformer::{split, ToyConfig, ToyModel, ToyState, Vocab};
use ndarray::Array2;
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    "[A-Z][a-z]{1,7}"
}

fn record() -> impl Strategy<Value = ActivationRecord> {
    (
        any::<u32>(),
        any::<u16>(),
        0u8..3,
        0u8..4,
        prop::collection::vec(any::<u32>(), 0..40),
    )
        .prop_map(|(example_id, layer, m, r, bits)| ActivationRecord {
            example_id,
            layer,
            module: ModuleKind::from_code(m).unwrap(),
            role: TokenRole::from_code(r).unwrap(),
            // Arbitrary bit patterns, NaN payloads included.
            vector: bits.into_iter().map(f32::from_bits).collect(),
        })
}

fn same_bits(a: &ActivationRecord, b: &ActivationRecord) -> bool {
    a.example_id == b.example_id
        && a.layer == b.layer
        && a.module == b.module
        && a.role == b.role
        && a.vector.len() == b.vector.len()
        && a.vector.iter().zip(&b.vector).all(|(x, y)| x.to_bits() == y.to_bits())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn storage_round_trip_is_bitwise(records in prop::collection::vec(record(), 0..30)) {
        let bytes = encode(&records);
        prop_assert_eq!(&bytes, &encode(&records));
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for ((_, b), a) in back.iter().zip(&records) {
            prop_assert!(same_bits(a, b));
        }
    }

    #[test]
    fn any_truncation_is_detected(records in prop::collection::vec(record(), 1..8), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&records);
        let cut = cut.index(bytes.len());
        prop_assert!(decode(&bytes[..cut]).is_err());
    }

    #[test]
    fn jaro_winkler_is_one_iff_equal_after_folding(a in "[a-zA-Z]{0,8}", b in "[a-zA-Z]{0,8}") {
        let s = jaro_winkler(&a, &b);
        prop_assert_eq!(s == 1.0, a.to_lowercase() == b.to_lowercase());
        prop_assert_eq!(jaro_winkler(&a, &a.to_uppercase()), 1.0);
    }

    #[test]
    fn synthetic_kb_filtering_is_idempotent_and_groups_partition(seed in 0u64..1000, groups in 2usize..5) {
        let s = generate(&SynthOptions { facts: 40, groups, seed, ..SynthOptions::default() }).unwrap();
        let (once, _) = filter_subject_object_bias(&s.kb, 0.8);
        let (twice, removed) = filter_subject_object_bias(&once, 0.8);
        prop_assert_eq!(&once, &twice);
        prop_assert!(removed.is_empty());

        let mut seen = BTreeSet::new();
        let mut total = 0;
        for g in &s.kb.groups {
            total += g.relations.len();
            seen.extend(g.relations.iter().cloned());
        }
        prop_assert_eq!(total, seen.len());
        prop_assert_eq!(seen, s.kb.templates.keys().cloned().collect::<BTreeSet<_>>());
    }

    #[test]
    fn token_spans_tile_the_text(parts in prop::collection::vec(("[A-Za-z]{1,6}", "[ ,.;']{0,2}"), 0..8)) {
        let text: String = parts.iter().map(|(w, p)| format!("{w}{p} ")).collect();
        let spans = split(&text);
        let mut last = 0;
        for &(s, e) in &spans {
            prop_assert!(s >= last && e > s);
            prop_assert!(text[last..s].chars().all(char::is_whitespace));
            last = e;
        }
        prop_assert!(text[last..].chars().all(char::is_whitespace));
    }

    #[test]
    fn token_roles_are_ordered(subject in word(), second in prop::option::of(word()), object in word(), counter in word(), rel in "(owned by|located in|a citizen of)") {
        let subject = match second { Some(w) => format!("{subject} {w}"), None => subject };
        let kb = conflict_probe::kb::KnowledgeBase::new(
            vec![conflict_probe::kb::Triplet {
                subject: subject.clone(),
                relation: "r".into(),
                object: object.clone(),
                query: format!("{subject} is {rel}"),
            }],
            vec![conflict_probe::kb::RelationTemplate {
                relation: "r".into(),
                type_description: "d".into(),
                one_shot_query: "q".into(),
                one_shot_answer: "a".into(),
                statement_template: format!("{{subject}} is {rel} {{object}}"),
            }],
            vec![conflict_probe::kb::RelationGroup { group_id: "g".into(), relations: vec!["r".into()] }],
        ).unwrap();
        let record = CounterRecord {
            subject, relation: "r".into(), pk_object: object, counter_object: counter,
            rank: 1, probability: 0.1,
        };
        let prompt = build_probe_prompt(&record, &kb).unwrap();
        let vocab = Vocab::from_corpus(&[prompt.text.as_str()]);
        let roles = resolve_token_roles(&prompt, &vocab.tokenize(&prompt.text).unwrap()).unwrap();
        prop_assert_eq!(roles[&TokenRole::First], 0);
        prop_assert!(roles[&TokenRole::First] <= roles[&TokenRole::Object]);
        prop_assert!(roles[&TokenRole::Object] < roles[&TokenRole::SubjectQ]);
        prop_assert!(roles[&TokenRole::SubjectQ] < roles[&TokenRole::RelationQ]);
    }

    #[test]
    fn labels_partition_generations(generated in "(The )?[A-Za-z]{0,6}( [a-z]{1,4})?", counter in word(), pk in word()) {
        let label = label_generation(&generated, &counter, &pk);
        let counter_hit = conflict_probe::pipeline::match_object(&generated, &counter);
        let pk_hit = conflict_probe::pipeline::match_object(&generated, &pk);
        let expected = if counter_hit { Label::CK } else if pk_hit { Label::PK } else { Label::ND };
        prop_assert_eq!(label, expected);
    }

    #[test]
    fn aggregate_stays_within_group_rates(groups in prop::collection::vec((0.0f64..=1.0, 1usize..500), 1..9)) {
        let gs: Vec<GroupResult> = groups.iter().enumerate()
            .map(|(i, &(p, n))| GroupResult::new(format!("g{i}"), p, n).unwrap())
            .collect();
        let agg = aggregate(&gs).unwrap();
        let lo = gs.iter().map(|g| g.p).fold(f64::INFINITY, f64::min);
        let hi = gs.iter().map(|g| g.p).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(agg.p >= lo - 1e-12 && agg.p <= hi + 1e-12);
        prop_assert!((agg.ci_high - agg.ci_low - 2.0 * 1.96 * agg.wse).abs() < 1e-12);
        if gs.len() == 1 {
            prop_assert!((agg.wse - gs[0].se).abs() < 1e-15);
        }
    }

    #[test]
    fn mann_whitney_u_values_complement(a in prop::collection::vec(0u8..6, 1..9), b in prop::collection::vec(0u8..6, 1..9)) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let r = mann_whitney_u_with(&a, &b, Method::Exact).unwrap();
        prop_assert_eq!(r.u_a + r.u_b, (a.len() * b.len()) as f64);
        // P(U >= u) + P(U <= u) = 1 + P(U = u)
        prop_assert!(r.p_greater + r.p_less >= 1.0 - 1e-12);
        let swapped = mann_whitney_u_with(&b, &a, Method::Exact).unwrap();
        prop_assert!((swapped.p_greater - r.p_less).abs() < 1e-12);

        let mut all = a.clone();
        all.extend(&b);
        let total: f64 = exact_distribution(&midranks(&all), a.len()).values().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}

fn dataset(features: Array2<f64>, labels: Vec<u8>) -> ProbeDataset {
    let rows = (0..labels.len())
        .map(|i| RowMeta {
            example_id: i as u32,
            group: "g".into(),
            subject: format!("s{i}"),
            pk_object: String::new(),
            counter_object: String::new(),
        })
        .collect();
    ProbeDataset::new(features, labels, rows).unwrap()
}

fn probe_data() -> impl Strategy<Value = (Array2<f64>, Vec<u8>)> {
    (8usize..40, 1usize..6).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-5.0f64..5.0, n * d),
            prop::collection::vec(0u8..2, n),
        )
            .prop_map(move |(x, mut y)| {
                y[0] = 0;
                y[1] = 0;
                y[2] = 1;
                y[3] = 1;
                (Array2::from_shape_vec((n, d), x).unwrap(), y)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn probe_loss_never_increases((x, y) in probe_data()) {
        let (_, losses) = fit_linear_probe(&dataset(x, y), &ProbeOptions::default()).unwrap();
        prop_assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn standardized_columns_are_unit((x, _) in probe_data()) {
        let (mean, scale) = standardization(&x);
        for (j, col) in x.columns().into_iter().enumerate() {
            let z: Vec<f64> = col.iter().map(|v| (v - mean[j]) / scale[j]).collect();
            let m = z.iter().sum::<f64>() / z.len() as f64;
            let sd = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((sd - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn probe_predictions_ignore_affine_rescaling((x, y) in probe_data(), scale in prop::collection::vec(0.1f64..50.0, 6), shift in prop::collection::vec(-100.0f64..100.0, 6)) {
        let ds = dataset(x.clone(), y.clone());
        let mut moved = x.clone();
        for (j, mut col) in moved.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v * scale[j] + shift[j]);
        }
        let ds2 = dataset(moved.clone(), y);
        let opts = ProbeOptions::default();
        let (a, _) = fit_linear_probe(&ds, &opts).unwrap();
        let (b, _) = fit_linear_probe(&ds2, &opts).unwrap();
        prop_assert_eq!(a.predict_rows(&x).unwrap(), b.predict_rows(&moved).unwrap());
    }

    #[test]
    fn logo_splits_are_disjoint_and_balanced(
        rows in prop::collection::vec((0usize..3, 0usize..12, 0usize..6, 0usize..6, 0u8..2), 24..60),
        seed in any::<u64>(),
    ) {
        let meta: Vec<RowMeta> = rows.iter().enumerate().map(|(i, &(g, s, o, c, _))| RowMeta {
            example_id: i as u32,
            group: format!("group{g}"),
            // Case and article variants of the same entity must count as one.
            subject: if s % 2 == 0 { format!("The Subject{s}") } else { format!("subject{s}") },
            pk_object: format!("Obj{o}"),
            counter_object: format!("obj{}", c + 3),
        }).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.4).collect();
        let ds = ProbeDataset::new(Array2::zeros((rows.len(), 1)), labels, meta).unwrap();
        for g in ds.groups() {
            let Ok((train, test)) = split_logo(&ds, g, seed) else { continue };
            let all: Vec<usize> = (0..train.len()).collect();
            let (ts, to) = entity_sets(&train, &all);
            let all: Vec<usize> = (0..test.len()).collect();
            let (es, eo) = entity_sets(&test, &all);
            prop_assert!(ts.is_disjoint(&es));
            prop_assert!(to.is_disjoint(&eo));
            prop_assert!(test.rows.iter().all(|r| r.group == g));
            prop_assert!(train.rows.iter().all(|r| r.group != g));
            prop_assert_eq!(train.class_counts()[0], train.class_counts()[1]);
            prop_assert_eq!(test.class_counts()[0], test.class_counts()[1]);
        }
    }
}

fn toy_backend() -> ToyBackend {
    let corpus = ["a b c d e f g h"];
    let vocab = Vocab::from_corpus(&corpus);
    let config = ToyConfig {
        num_layers: 1,
        d_model: 8,
        d_mlp: 16,
        num_heads: 2,
        context_len: 16,
        seed: 9,
    };
    ToyBackend::new(ToyModel::new(ToyState::init(config, vocab.len()).unwrap(), vocab), "p")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn candidate_scores_are_permutation_equivariant(cands in prop::collection::btree_set("[a-h]( [a-h]){0,2}", 2..6), rot in 0usize..6) {
        let backend = toy_backend();
        let cands: Vec<String> = cands.into_iter().map(|c| format!(" {c}")).collect();
        let mut rotated = cands.clone();
        rotated.rotate_left(rot % cands.len());
        let a = backend.score_candidates("a b", &cands).unwrap();
        let b = backend.score_candidates("a b", &rotated).unwrap();
        for (c, p) in rotated.iter().zip(&b) {
            let i = cands.iter().position(|x| x == c).unwrap();
            prop_assert_eq!(a[i], *p);
        }
    }

    #[test]
    fn generation_is_a_pure_function(prompt in "[a-h]( [a-h]){0,5}", n in 1usize..6) {
        let backend = toy_backend();
        prop_assert_eq!(backend.generate_greedy(&prompt, n).unwrap(), backend.generate_greedy(&prompt, n).unwrap());
    }
}
