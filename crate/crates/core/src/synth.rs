//! Synthetic knowledge bases and the training corpus that teaches a toy
//! model both the facts and a subject-dependent conflict policy.
//!
//! Subjects are two words: a first word drawn from a small shared pool and
//! an invented surname. Every subject gets a corpus frequency from a skewed
//! distribution. Frequent subjects are trained to keep their memorized object
//! when the context contradicts it; rare subjects are trained to copy the
//! object stated in the context. The first word never depends on frequency,
//! so the first token of a prompt carries no information about the outcome.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::kb::{render_pk_query, KnowledgeBase, RelationGroup, RelationTemplate, Triplet, GROUP_IDS};

pub const CORPUS_FILE: &str = "corpus.txt";
pub const SUBJECTS_FILE: &str = "subjects.jsonl";

const FIRST_WORDS: [&str; 8] = ["North", "Saint", "Port", "Old", "New", "Upper", "Grand", "Lower"];
const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "dr", "th",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "y"];
const CODAS: [&str; 8] = ["", "n", "r", "s", "l", "x", "nd", "sk"];

/// (relation, type description, statement template) per group.
fn group_relations(group: &str) -> Vec<(&'static str, &'static str, &'static str)> {
    match group {
        "geographic-geopolitic-language" => vec![
            ("capital-city-of", "Answer with the name of a city.", "{subject}'s capital city is {object}"),
            ("located-in", "Answer with the name of a country.", "{subject} is located in {object}"),
        ],
        "corporate-products-employment" => vec![
            ("owned-by", "Answer with the name of a company.", "{subject} is owned by {object}"),
            ("product-manufacture-by", "Answer with the name of a manufacturer.", "{subject} is a product manufactured by {object}"),
        ],
        "media" => vec![("premiere-on", "Answer with the name of a network.", "{subject} premiered on {object}")],
        "religion" => vec![("official-religion", "Answer with the name of a religion.", "{subject}'s official religion is {object}")],
        "hierarchy" => vec![("is-subclass", "Answer with the name of a category.", "{subject} is a subclass of {object}")],
        "naming-reference" => vec![("is-name-after", "Answer with the name of a person.", "{subject} is named after {object}")],
        "occupy-position" => vec![("play-in-position", "Answer with the name of a position.", "{subject} plays in the position of {object}")],
        "play-instrument" => vec![("play-the", "Answer with the name of an instrument.", "{subject} plays the {object}")],
        _ => vec![],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub facts: usize,
    pub groups: usize,
    pub seed: u64,
    /// Share of subjects in the frequent tier.
    pub frequent_share: f64,
    /// Conflict sequences per fact in the corpus.
    pub conflicts_per_fact: usize,
    /// Share of facts that reuse a subject from another group.
    pub shared_subject_share: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            facts: 200,
            groups: 4,
            seed: 7,
            frequent_share: 0.4,
            conflicts_per_fact: 3,
            shared_subject_share: 0.05,
        }
    }
}

/// Per-subject bookkeeping written next to the knowledge base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectInfo {
    pub subject: String,
    /// Number of plain fact statements about the subject in the corpus.
    pub frequency: usize,
    /// Whether the corpus teaches the model to keep its memorized object.
    pub keeps_memory: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthKb {
    pub kb: KnowledgeBase,
    pub corpus: Vec<String>,
    pub subjects: Vec<SubjectInfo>,
}

struct Namer {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

impl Namer {
    fn word(&mut self, syllables: usize) -> String {
        loop {
            let mut w = String::new();
            for i in 0..syllables {
                w.push_str(ONSETS.choose(&mut self.rng).expect("non-empty"));
                w.push_str(VOWELS.choose(&mut self.rng).expect("non-empty"));
                if i + 1 == syllables {
                    w.push_str(CODAS.choose(&mut self.rng).expect("non-empty"));
                }
            }
            let mut chars = w.chars();
            let cap: String = chars
                .next()
                .map(|c| c.to_uppercase().chain(chars).collect())
                .unwrap_or_default();
            if !FIRST_WORDS.contains(&cap.as_str()) && self.used.insert(cap.to_lowercase()) {
                return cap;
            }
        }
    }
}

/// Generates a knowledge base, its templates and groups, and a training corpus.
pub fn generate(opts: &SynthOptions) -> Result<SynthKb> {
    if opts.groups == 0 || opts.groups > GROUP_IDS.len() {
        return Err(Error::Config(format!(
            "groups must be between 1 and {}",
            GROUP_IDS.len()
        )));
    }
    if opts.facts < opts.groups {
        return Err(Error::Config("need at least one fact per group".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut namer = Namer {
        rng: ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1)),
        used: BTreeSet::new(),
    };

    let mut templates = Vec::new();
    let mut groups = Vec::new();
    let mut relations: Vec<(&str, &str)> = Vec::new(); // (group, relation)
    for &gid in &GROUP_IDS[..opts.groups] {
        let rels = group_relations(gid);
        groups.push(RelationGroup {
            group_id: gid.to_string(),
            relations: rels.iter().map(|r| r.0.to_string()).collect(),
        });
        for (rel, desc, statement) in rels {
            let shot_subject = format!("{} {}", FIRST_WORDS[templates.len() % FIRST_WORDS.len()], namer.word(2));
            let shot_object = namer.word(2);
            let query_template = statement.replace(" {object}", "");
            templates.push(RelationTemplate {
                relation: rel.to_string(),
                type_description: desc.to_string(),
                one_shot_query: query_template.replace("{subject}", &shot_subject),
                one_shot_answer: shot_object,
                statement_template: statement.to_string(),
            });
            relations.push((gid, rel));
        }
    }

    // Object pools, disjoint across relations.
    let per_relation = opts.facts.div_ceil(relations.len());
    let pool_size = (per_relation / 5).max(6);
    let pools: BTreeMap<&str, Vec<String>> = relations
        .iter()
        .map(|&(_, rel)| (rel, (0..pool_size).map(|_| namer.word(2)).collect()))
        .collect();

    let mut triplets = Vec::with_capacity(opts.facts);
    let mut subject_group: Vec<(String, &str)> = Vec::new();
    let mut seen_pairs = BTreeSet::new();
    for i in 0..opts.facts {
        let (gid, rel) = relations[i % relations.len()];
        let reuse = rng.random_bool(opts.shared_subject_share.clamp(0.0, 1.0));
        let reusable: Vec<&String> = subject_group
            .iter()
            .filter(|(_, g)| *g != gid)
            .map(|(s, _)| s)
            .collect();
        let subject = match reusable.choose(&mut rng) {
            Some(s) if reuse && !seen_pairs.contains(&((*s).clone(), rel)) => (*s).clone(),
            _ => {
                let first = FIRST_WORDS.choose(&mut rng).expect("non-empty");
                format!("{first} {}", namer.word(3))
            }
        };
        seen_pairs.insert((subject.clone(), rel));
        subject_group.push((subject.clone(), gid));
        let object = pools[rel].choose(&mut rng).expect("non-empty pool").clone();
        let template = templates
            .iter()
            .find(|t| t.relation == rel)
            .expect("template exists");
        let query = template
            .statement_template
            .replace(" {object}", "")
            .replace("{subject}", &subject);
        triplets.push(Triplet {
            subject,
            relation: rel.to_string(),
            object,
            query,
        });
    }

    let mut subjects: BTreeMap<String, SubjectInfo> = BTreeMap::new();
    for t in &triplets {
        if subjects.contains_key(&t.subject) {
            continue;
        }
        let keeps_memory = rng.random_bool(opts.frequent_share.clamp(0.0, 1.0));
        let frequency = if keeps_memory {
            rng.random_range(4..=8)
        } else {
            1
        };
        subjects.insert(
            t.subject.clone(),
            SubjectInfo {
                subject: t.subject.clone(),
                frequency,
                keeps_memory,
            },
        );
    }

    let kb = KnowledgeBase::new(triplets, templates, groups)?;
    let corpus = build_corpus(&kb, &subjects, &pools, opts.conflicts_per_fact, &mut rng)?;
    Ok(SynthKb {
        kb,
        corpus,
        subjects: subjects.into_values().collect(),
    })
}

fn build_corpus(
    kb: &KnowledgeBase,
    subjects: &BTreeMap<String, SubjectInfo>,
    pools: &BTreeMap<&str, Vec<String>>,
    conflicts_per_fact: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    let mut corpus = Vec::new();
    for t in &kb.triplets {
        let info = &subjects[&t.subject];
        let template = kb.template(&t.relation)?;
        let statement = template.statement(&t.subject, &t.object);
        for _ in 0..info.frequency {
            corpus.push(statement.clone());
        }
        corpus.push(format!("{} {}", render_pk_query(template, t), t.object));
        let others: Vec<&String> = pools[t.relation.as_str()]
            .iter()
            .filter(|o| **o != t.object)
            .collect();
        for _ in 0..conflicts_per_fact {
            let Some(&counter) = others.choose(rng) else {
                break;
            };
            let answer = if info.keeps_memory { &t.object } else { counter };
            corpus.push(format!(
                "{}. {} {}",
                template.statement(&t.subject, counter),
                t.query,
                answer
            ));
        }
    }
    corpus.shuffle(rng);
    Ok(corpus)
}

impl SynthKb {
    /// Writes the knowledge base files, `corpus.txt`, and `subjects.jsonl`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.kb.save_dir(dir)?;
        let path = dir.join(CORPUS_FILE);
        let mut text = self.corpus.join("\n\n");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        jsonl::write(dir.join(SUBJECTS_FILE), &self.subjects)
    }
}

/// Reads a corpus file: one training sequence per paragraph, paragraphs
/// separated by blank lines. Sequences may span several lines.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() {
            if !current.is_empty() {
                out.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        out.push(current.join("\n"));
    }
    Ok(out)
}
