//! Subject-frequency analysis against a fixture count service.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use conflict_probe::eval::{subject_frequency_report, CorpusCounter, RemoteFrequency};
use conflict_probe::pipeline::{CounterRecord, Label, LabeledExample, ProbePrompt, Span};

fn example(id: u32, subject: &str, label: Label) -> LabeledExample {
    let span = Span { start: 0, end: 1 };
    LabeledExample {
        example_id: id,
        prompt: ProbePrompt {
            text: format!("{subject} x. {subject} y"),
            object_span: span,
            subject_span: span,
            relation_span: span,
            first_span: span,
            counter: CounterRecord {
                subject: subject.into(),
                relation: "located-in".into(),
                pk_object: "A".into(),
                counter_object: "B".into(),
                rank: 1,
                probability: 0.1,
            },
        },
        generated: String::new(),
        label,
        group: "geography".into(),
        token_positions: BTreeMap::new(),
        note: None,
    }
}

struct Fixture {
    url: String,
    peak: Arc<AtomicUsize>,
    server: Arc<tiny_http::Server>,
}

impl Drop for Fixture {
    fn drop(&mut self) {
        self.server.unblock();
    }
}

/// `GET /count?q=..` answering from `counts`; unknown subjects get a 500,
/// and "Broken" gets a body without a count. Each request is handled on its
/// own thread after a short delay so concurrent lookups overlap.
fn fixture(counts: HashMap<String, u64>) -> Fixture {
    let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let in_flight = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let counts = Arc::new(counts);
    {
        let (server, in_flight, peak) = (server.clone(), in_flight.clone(), peak.clone());
        std::thread::spawn(move || {
            for request in server.incoming_requests() {
                let (in_flight, peak, counts) = (in_flight.clone(), peak.clone(), counts.clone());
                std::thread::spawn(move || {
                    let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(20));
                    let parsed = query_q(request.url());
                    let (status, body) = match parsed.as_deref() {
                        Some("Broken") => (200, r#"{"hits": 3}"#.to_string()),
                        Some(q) => match counts.get(q) {
                            Some(c) => (200, format!(r#"{{"count": {c}}}"#)),
                            None => (500, r#"{"error": "unknown"}"#.to_string()),
                        },
                        None => (400, "{}".to_string()),
                    };
                    in_flight.fetch_sub(1, Ordering::SeqCst);
                    let _ = request.respond(
                        tiny_http::Response::from_string(body).with_status_code(status),
                    );
                });
            }
        });
    }
    Fixture { url, peak, server }
}

/// The decoded `q` parameter of `/count?q=...`.
fn query_q(path: &str) -> Option<String> {
    let url = url::Url::parse(&format!("http://fixture{path}")).ok()?;
    if url.path() != "/count" {
        return None;
    }
    url.query_pairs().find(|(k, _)| k == "q").map(|(_, v)| v.into_owned())
}

fn fixture_counts() -> HashMap<String, u64> {
    [
        ("Zürich", 900),
        ("New York", 1200),
        ("Oslo", 700),
        ("Harare", 40),
        ("Lima", 55),
        ("Tiny Town", 2),
        ("Obscure", 1),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn examples() -> Vec<LabeledExample> {
    vec![
        example(0, "Zürich", Label::PK),
        example(1, "New York", Label::PK),
        example(2, "Oslo", Label::PK),
        example(3, "Harare", Label::CK),
        example(4, "Lima", Label::CK),
        example(5, "Tiny Town", Label::ND),
        example(6, "Obscure", Label::ND),
        example(7, "Zürich", Label::CK),
        example(8, "Missing", Label::PK),
        example(9, "Broken", Label::CK),
    ]
}

#[test]
fn remote_counts_are_reported_verbatim() {
    let f = fixture(fixture_counts());
    let provider = RemoteFrequency::new(&f.url);
    let report = subject_frequency_report(&examples(), &provider, 3).unwrap();

    let counts = fixture_counts();
    for s in &report.samples {
        assert_eq!(s.count, counts[&s.subject], "{}", s.subject);
    }
    assert_eq!(report.samples.len(), 8);
    assert_eq!(report.distributions[&Label::PK], vec![900, 1200, 700]);
    assert_eq!(report.distributions[&Label::CK], vec![40, 55, 900]);
    assert_eq!(report.distributions[&Label::ND], vec![2, 1]);

    let mut failed: Vec<&str> = report.failures.iter().map(|f| f.subject.as_str()).collect();
    failed.sort();
    assert_eq!(failed, ["Broken", "Missing"]);

    let nd = report.tests.iter().find(|t| t.other == Label::ND).unwrap();
    assert_eq!((nd.n_greater, nd.n_other, nd.u), (3, 2, 6.0));
    assert!(nd.exact);
    assert!((nd.p_value - 0.1).abs() < 1e-12);
    assert!(f.peak.load(Ordering::SeqCst) <= 3);
}

#[test]
fn lookups_respect_the_in_flight_bound() {
    let many: HashMap<String, u64> = (0..24).map(|i| (format!("S{i}"), i)).collect();
    let f = fixture(many.clone());
    let ex: Vec<_> = (0..24)
        .map(|i| example(i, &format!("S{i}"), if i % 2 == 0 { Label::PK } else { Label::CK }))
        .collect();
    let report = subject_frequency_report(&ex, &RemoteFrequency::new(&f.url), 2).unwrap();
    assert_eq!(report.samples.len(), 24);
    assert!(f.peak.load(Ordering::SeqCst) <= 2);
    let f = fixture(many);
    subject_frequency_report(&ex, &RemoteFrequency::new(&f.url), 6).unwrap();
    assert!(f.peak.load(Ordering::SeqCst) > 1);
}

#[test]
fn corpus_counter_is_the_default_provider() {
    let corpus = ["Oslo is in Norway", "Oslo, Oslo and Lima", "Lima is far"];
    let ex = vec![
        example(0, "Oslo", Label::PK),
        example(1, "Lima", Label::CK),
        example(2, "Quito", Label::ND),
    ];
    let report = subject_frequency_report(&ex, &CorpusCounter::new(&corpus), 4).unwrap();
    let got: Vec<(&str, u64)> = report.samples.iter().map(|s| (s.subject.as_str(), s.count)).collect();
    assert_eq!(got, [("Oslo", 3), ("Lima", 2), ("Quito", 0)]);
    assert_eq!(report.tests.len(), 2);
}

#[test]
fn unreachable_service_fails_every_lookup() {
    let provider = RemoteFrequency::new("http://127.0.0.1:9");
    let report = subject_frequency_report(&examples(), &provider, 2).unwrap();
    assert!(report.samples.is_empty());
    assert_eq!(report.failures.len(), 9);
    assert!(report.tests.is_empty());
}
