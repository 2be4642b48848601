//! Build an application corpus: match problems to knowledge, then generate
//! worked examples for whatever stayed unmatched.
//!
//! The model here is a scripted function, so the run is offline and
//! repeatable. Swap in an HTTP backend to run against a real endpoint.
//!
//! ```bash
//! cargo run --example build_applications
//! ```

use std::sync::Arc;

use ragplus::construction::{
    BuildMode, ConstructionConfig, Constructor, ProblemInstance, ReviewOverrides,
};
use ragplus::corpus::{KnowledgeCorpus, KnowledgeItem};
use ragplus::llm::{BackendError, ChatRequest, Gateway, ModelConfig, ProfileClass, RetryPolicy};
use ragplus::template::TemplateSet;

fn scripted(request: &ChatRequest) -> Result<String, BackendError> {
    let prompt = &request.messages[0].content;
    let reply = if prompt.starts_with("Assign") {
        if prompt.contains("heater") || prompt.contains("resistor") {
            "circuits"
        } else {
            "mechanics"
        }
    } else if prompt.starts_with("Problem:") {
        if prompt.contains("heater") {
            "power"
        } else if prompt.contains("resistor") {
            "ohm"
        } else {
            "newton2"
        }
    } else if prompt.starts_with("Decide") {
        "procedural"
    } else {
        "Worked example: a 2 kg cart pushed with 6 N accelerates at 3 m/s^2."
    };
    Ok(reply.into())
}

fn main() -> ragplus::Result<()> {
    let knowledge = KnowledgeCorpus::from_items([
        KnowledgeItem::new("ohm", "Current equals voltage divided by resistance.")
            .with_category("circuits"),
        KnowledgeItem::new("power", "Electrical power equals voltage times current.")
            .with_category("circuits"),
        KnowledgeItem::new("newton2", "Net force equals mass times acceleration.")
            .with_category("mechanics"),
        KnowledgeItem::new("newton3", "Forces come in equal and opposite pairs.")
            .with_category("mechanics"),
    ])?;
    let problems = vec![
        ProblemInstance {
            id: "p1".into(),
            text: "A 12 V source drives a 4 ohm resistor.".into(),
            category: None,
        },
        ProblemInstance {
            id: "p2".into(),
            text: "A 2 kW heater runs on 230 V.".into(),
            category: None,
        },
        ProblemInstance {
            id: "p3".into(),
            text: "A 3 kg box accelerates at 2 m/s^2.".into(),
            category: None,
        },
    ];

    let gateway = Gateway::new(Arc::new(scripted))
        .with_model("builder", ModelConfig::new(ProfileClass::Deterministic))
        .with_retry(RetryPolicy::immediate(1));
    let templates = TemplateSet::builtin();
    let mut config = ConstructionConfig::new("builder");
    config.categories = vec!["circuits".into(), "mechanics".into()];

    let out = Constructor::new(&gateway, &templates, &config).build(
        &knowledge,
        Some(&problems),
        BuildMode::Hybrid,
        None,
        &ReviewOverrides::default(),
    )?;

    let before = out.matched_coverage.as_ref().map_or(0.0, |c| c.fraction);
    println!("coverage: {before:.2} -> {:.2}", out.coverage.fraction);
    for link in out.store.records() {
        println!("  {} -> {}", link.knowledge_id, link.application_id);
    }
    for entry in &out.report.entries {
        println!("  report {:?} {}: {}", entry.kind, entry.id, entry.reason);
    }
    println!("{} decisions flagged for review", out.review.len());
    Ok(())
}
