//! Build a TF-IDF index, persist it and run top-k cosine search.
//!
//! ```bash
//! cargo run --example tfidf_search -- "what is the force on a body"
//! ```

use ragplus::corpus::{chunk_corpus, KnowledgeCorpus, KnowledgeItem, WhitespaceTokenizer};
use ragplus::retrieval::{Index, Retriever};

fn main() -> ragplus::Result<()> {
    let query = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "force equals mass times acceleration".into());
    let knowledge = KnowledgeCorpus::from_items([
        KnowledgeItem::new(
            "newton2",
            "The net force on a body equals its mass times its acceleration.",
        ),
        KnowledgeItem::new(
            "newton3",
            "Every action has an equal and opposite reaction force.",
        ),
        KnowledgeItem::new("ohm", "Current equals voltage divided by resistance."),
        KnowledgeItem::new(
            "bayes",
            "The posterior is proportional to the likelihood times the prior.",
        ),
    ])?;
    let index = Index::build(&chunk_corpus(&knowledge, 800, &WhitespaceTokenizer))?;
    println!(
        "{} chunks, provider {}",
        index.doc_count(),
        index.provider_tag()
    );
    for term in ["force", "times", "prior"] {
        println!("  idf({term}) = {:.4}", index.idf(term).unwrap_or(0.0));
    }

    let result = index.search(&query, 3)?;
    println!("\nquery: {}", result.query_echo);
    for (rank, hit) in result.ranked.iter().enumerate() {
        println!(
            "  {}. {:<8} {:.4}  {}",
            rank + 1,
            hit.knowledge_id,
            hit.score,
            hit.text
        );
    }

    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("index.jsonl");
    index.save(&path)?;
    let again = Index::load(&path)?.search(&query, 3)?;
    assert_eq!(again, result);
    println!("\nreloaded index gives the same ranking");
    Ok(())
}
