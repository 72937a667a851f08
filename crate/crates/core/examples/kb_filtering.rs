//! Builds a small knowledge base by hand and drops the facts whose object can
//! be guessed from the subject's surface form.
//!
//! ```bash
//! cargo run --example kb_filtering
//! ```

use conflict_probe::kb::{
    filter_subject_object_bias, jaro_winkler, KnowledgeBase, RelationGroup, RelationTemplate,
    Triplet, DEFAULT_BIAS_THRESHOLD,
};

fn fact(subject: &str, relation: &str, object: &str, query: &str) -> Triplet {
    Triplet {
        subject: subject.into(),
        relation: relation.into(),
        object: object.into(),
        query: query.into(),
    }
}

fn main() -> anyhow::Result<()> {
    let templates = vec![
        RelationTemplate {
            relation: "product-manufacture-by".into(),
            type_description: "Products and the companies that make them.".into(),
            one_shot_query: "Walkman is produced by".into(),
            one_shot_answer: "Sony".into(),
            statement_template: "{subject} is produced by {object}".into(),
        },
        RelationTemplate {
            relation: "capital-city-of".into(),
            type_description: "Countries and their capital cities.".into(),
            one_shot_query: "The capital of France is".into(),
            one_shot_answer: "Paris".into(),
            statement_template: "The capital of {subject} is {object}".into(),
        },
    ];
    let triplets = vec![
        fact("Nokia Lumia 800", "product-manufacture-by", "Nokia", "Nokia Lumia 800 is produced by"),
        fact("iPod", "product-manufacture-by", "Apple", "iPod is produced by"),
        fact("Microsoft Word", "product-manufacture-by", "Microsoft", "Microsoft Word is produced by"),
        fact("Zimbabwe", "capital-city-of", "Harare", "The capital of Zimbabwe is"),
        fact("Luxembourg", "capital-city-of", "Luxembourg", "The capital of Luxembourg is"),
    ];
    let groups = vec![
        RelationGroup {
            group_id: "products".into(),
            relations: vec!["product-manufacture-by".into()],
        },
        RelationGroup {
            group_id: "geography".into(),
            relations: vec!["capital-city-of".into()],
        },
    ];
    let kb = KnowledgeBase::new(triplets, templates, groups)?;

    for t in &kb.triplets {
        println!(
            "{:<18} {:<12} {:.3}",
            t.subject,
            t.object,
            jaro_winkler(&t.subject, &t.object)
        );
    }
    let (kept, removed) = filter_subject_object_bias(&kb, DEFAULT_BIAS_THRESHOLD);
    println!("\nthreshold {DEFAULT_BIAS_THRESHOLD}: kept {}, removed {}", kept.triplets.len(), removed.len());
    for r in &removed {
        println!("  removed {} -> {} ({:.3})", r.subject, r.object, r.similarity);
    }
    Ok(())
}
