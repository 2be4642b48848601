//! Majority voting over sampled category labels.
//!
//! ```bash
//! cargo run --example self_consistency_voting
//! ```

use ragplus::construction::{map_to_category, tally_relevance, tally_votes};

fn main() {
    let categories = vec![
        "algebra".to_string(),
        "geometry".to_string(),
        "probability".to_string(),
    ];
    let replies = [
        "Algebra",
        "This is a geometry problem.",
        "algebra",
        "I am not sure.",
        "geometry",
    ];
    let mapped: Vec<Option<&str>> = replies
        .iter()
        .map(|r| map_to_category(r, &categories))
        .collect();
    for (reply, label) in replies.iter().zip(&mapped) {
        println!("{reply:<30} -> {}", label.unwrap_or("(abstain)"));
    }
    let vote = tally_votes(&mapped);
    println!("\ntally {:?}", vote.tally);
    println!("winner {:?} (tie: {})", vote.label, vote.tie);

    let all_abstain = tally_votes::<&str>(&[None, None, None]);
    println!("all abstain -> {:?}", all_abstain.label);

    // Relevance: each sample lists knowledge ids; keep ids named by at
    // least half of the samples.
    let samples = vec![
        "k1, k2".to_string(),
        "[k1]".to_string(),
        "k1; k9".to_string(),
    ];
    let r = tally_relevance(&samples, &["k1", "k2", "k3"], 0.5);
    println!("\nrelevance shares {:?}", r.shares);
    println!("selected {:?}, invalid {:?}", r.selected, r.invalid);
}
