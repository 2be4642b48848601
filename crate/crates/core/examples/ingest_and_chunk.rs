//! Load a knowledge file and split it into retrieval chunks.
//!
//! ```bash
//! cargo run --example ingest_and_chunk
//! ```

use ragplus::corpus::{self, WhitespaceTokenizer};

const KNOWLEDGE: &str = r#"{"id":"ohm","text":"Ohm's law: the current through a conductor equals the voltage across it divided by its resistance. It holds for ohmic materials at fixed temperature.","category":"physics"}
{"id":"newton2","text":"Newton's second law: the net force on a body equals its mass times its acceleration.","kind":"conceptual","category":"physics"}
{"id":"bayes","text":"Bayes' rule: the posterior is proportional to the likelihood times the prior.","category":"statistics"}
"#;

fn main() -> ragplus::Result<()> {
    let knowledge = corpus::ingest(KNOWLEDGE.as_bytes(), "inline")?;
    println!("{} knowledge items", knowledge.len());
    for item in knowledge.iter() {
        println!(
            "  {:<8} kind={:<12} category={}",
            item.id,
            item.kind.as_str(),
            item.category.as_deref().unwrap_or("-")
        );
    }

    // A small budget forces multi-chunk items; cuts prefer sentence ends.
    let chunks = corpus::chunk_corpus(&knowledge, 16, &WhitespaceTokenizer);
    println!("\n{} chunks at 16 tokens", chunks.len());
    for c in &chunks {
        println!("  {:<10} {:>2} tokens  {}", c.id(), c.token_count, c.text);
    }

    // Duplicate ids are rejected with both locations.
    let dup = "{\"id\":\"x\",\"text\":\"a\"}\n{\"id\":\"x\",\"text\":\"b\"}\n";
    match corpus::ingest(dup.as_bytes(), "dup.jsonl") {
        Err(e) => println!("\nrejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
