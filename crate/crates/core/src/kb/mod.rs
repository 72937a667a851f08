//! Knowledge base of (subject, relation, object) facts, relation templates,
//! relation groups, and the subject/object similarity filter.

mod jaro_winkler;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub use jaro_winkler::{jaro, jaro_winkler};

/// Similarity threshold above which a subject is considered to leak its object.
pub const DEFAULT_BIAS_THRESHOLD: f64 = 0.8;

pub const SUBJECT_SLOT: &str = "{subject}";
pub const OBJECT_SLOT: &str = "{object}";

/// The eight relation group identifiers.
pub const GROUP_IDS: [&str; 8] = [
    "geographic-geopolitic-language",
    "corporate-products-employment",
    "media",
    "religion",
    "hierarchy",
    "naming-reference",
    "occupy-position",
    "play-instrument",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    #[serde(rename = "rel_lemma", alias = "rel")]
    pub relation: String,
    pub object: String,
    /// Natural-language query ending right before the object.
    pub query: String,
}

impl Triplet {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, value) in [
            ("subject", &self.subject),
            ("rel_lemma", &self.relation),
            ("object", &self.object),
        ] {
            if value.trim().is_empty() {
                return Err(format!("field `{name}` is empty"));
            }
        }
        if !self.query.contains(self.subject.as_str()) {
            return Err(format!(
                "field `query` does not contain the subject `{}`",
                self.subject
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTemplate {
    #[serde(rename = "rel_lemma")]
    pub relation: String,
    pub type_description: String,
    pub one_shot_query: String,
    pub one_shot_answer: String,
    /// Declarative statement with exactly one `{subject}` and one `{object}` slot.
    pub statement_template: String,
}

impl RelationTemplate {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for slot in [SUBJECT_SLOT, OBJECT_SLOT] {
            let n = self.statement_template.matches(slot).count();
            if n != 1 {
                return Err(format!(
                    "statement_template must contain {slot} exactly once (found {n})"
                ));
            }
        }
        Ok(())
    }

    /// Fills the statement template.
    pub fn statement(&self, subject: &str, object: &str) -> String {
        self.statement_template
            .replace(SUBJECT_SLOT, subject)
            .replace(OBJECT_SLOT, object)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationGroup {
    pub group_id: String,
    pub relations: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub triplets: Vec<Triplet>,
    pub templates: BTreeMap<String, RelationTemplate>,
    pub groups: Vec<RelationGroup>,
}

/// One triplet dropped by [`filter_subject_object_bias`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalEntry {
    pub subject: String,
    pub rel_lemma: String,
    pub object: String,
    pub similarity: f64,
}

pub const KB_FILE: &str = "kb.jsonl";
pub const TEMPLATES_FILE: &str = "templates.jsonl";
pub const GROUPS_FILE: &str = "groups.jsonl";

impl KnowledgeBase {
    /// Builds and validates a knowledge base from in-memory parts.
    pub fn new(
        triplets: Vec<Triplet>,
        templates: Vec<RelationTemplate>,
        groups: Vec<RelationGroup>,
    ) -> Result<Self> {
        let mut by_rel = BTreeMap::new();
        for t in templates {
            t.validate()
                .map_err(|m| Error::Kb(format!("template `{}`: {m}", t.relation)))?;
            if by_rel.insert(t.relation.clone(), t).is_some() {
                return Err(Error::Kb("duplicate relation template".into()));
            }
        }
        let kb = KnowledgeBase {
            triplets,
            templates: by_rel,
            groups,
        };
        kb.check_groups()?;
        for (i, t) in kb.triplets.iter().enumerate() {
            t.validate()
                .map_err(|m| Error::Kb(format!("triplet {}: {m}", i + 1)))?;
            kb.check_relation(&t.relation)?;
        }
        Ok(kb)
    }

    fn check_groups(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            for r in &g.relations {
                if !seen.insert(r.as_str()) {
                    return Err(Error::Kb(format!(
                        "relation `{r}` belongs to more than one group"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_relation(&self, relation: &str) -> Result<()> {
        if !self.templates.contains_key(relation) {
            return Err(Error::Kb(format!("relation `{relation}` has no template")));
        }
        if !self
            .groups
            .iter()
            .any(|g| g.relations.iter().any(|r| r == relation))
        {
            return Err(Error::Kb(format!("relation `{relation}` has no group")));
        }
        Ok(())
    }

    /// Loads the triplet, template, and group files. Triplet lines that break
    /// an invariant are reported with their line number.
    pub fn load(
        kb_path: impl AsRef<Path>,
        templates_path: impl AsRef<Path>,
        groups_path: impl AsRef<Path>,
    ) -> Result<Self> {
        let kb_path = kb_path.as_ref();
        let templates: Vec<RelationTemplate> = jsonl::read(templates_path)?;
        let groups: Vec<RelationGroup> = jsonl::read(groups_path)?;
        let triplets: Vec<Triplet> = jsonl::read(kb_path)?;
        let kb = KnowledgeBase::new(Vec::new(), templates, groups)?;
        let mut checked = Vec::with_capacity(triplets.len());
        for (i, t) in triplets.into_iter().enumerate() {
            let line_error = |message: String| Error::Parse {
                file: kb_path.display().to_string(),
                line: i + 1,
                message,
            };
            t.validate().map_err(line_error)?;
            kb.check_relation(&t.relation)
                .map_err(|e| line_error(e.to_string()))?;
            checked.push(t);
        }
        Ok(KnowledgeBase {
            triplets: checked,
            ..kb
        })
    }

    /// Loads `kb.jsonl`, `templates.jsonl`, and `groups.jsonl` from one directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::load(
            dir.join(KB_FILE),
            dir.join(TEMPLATES_FILE),
            dir.join(GROUPS_FILE),
        )
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        jsonl::write(dir.join(KB_FILE), &self.triplets)?;
        let templates: Vec<_> = self.templates.values().cloned().collect();
        jsonl::write(dir.join(TEMPLATES_FILE), &templates)?;
        jsonl::write(dir.join(GROUPS_FILE), &self.groups)
    }

    pub fn template(&self, relation: &str) -> Result<&RelationTemplate> {
        self.templates
            .get(relation)
            .ok_or_else(|| Error::UnknownRelation(relation.to_string()))
    }

    /// Returns the group owning `relation`.
    pub fn group_of(&self, relation: &str) -> Result<&str> {
        self.groups
            .iter()
            .find(|g| g.relations.iter().any(|r| r == relation))
            .map(|g| g.group_id.as_str())
            .ok_or_else(|| Error::UnknownRelation(relation.to_string()))
    }

    /// Relations that appear in at least one group.
    pub fn relations(&self) -> BTreeSet<&str> {
        self.groups
            .iter()
            .flat_map(|g| g.relations.iter().map(String::as_str))
            .collect()
    }
}

/// Removes every triplet whose subject and object have Jaro-Winkler
/// similarity `>= threshold`. Returns the filtered base and a removal log.
pub fn filter_subject_object_bias(
    kb: &KnowledgeBase,
    threshold: f64,
) -> (KnowledgeBase, Vec<RemovalEntry>) {
    let mut kept = Vec::with_capacity(kb.triplets.len());
    let mut removed = Vec::new();
    for t in &kb.triplets {
        let similarity = jaro_winkler(&t.subject, &t.object);
        if similarity >= threshold {
            removed.push(RemovalEntry {
                subject: t.subject.clone(),
                rel_lemma: t.relation.clone(),
                object: t.object.clone(),
                similarity,
            });
        } else {
            kept.push(t.clone());
        }
    }
    let filtered = KnowledgeBase {
        triplets: kept,
        templates: kb.templates.clone(),
        groups: kb.groups.clone(),
    };
    (filtered, removed)
}

/// Renders the parametric-knowledge elicitation prompt: the relation's type
/// description, its one-shot query and answer, then the triplet's query.
pub fn render_pk_query(template: &RelationTemplate, triplet: &Triplet) -> String {
    format!(
        "{}\n{} {}\n{}",
        template.type_description.trim(),
        template.one_shot_query.trim(),
        template.one_shot_answer.trim(),
        triplet.query.trim()
    )
}
