//! Record model replies as fixtures, then replay them offline.
//!
//! ```bash
//! cargo run --example replay_gateway
//! ```

use std::sync::Arc;

use ragplus::llm::{
    BackendError, ChatRequest, Gateway, Message, ModelConfig, ProfileClass, RecordingBackend,
    ReplayBackend, RetryPolicy,
};

fn echo(request: &ChatRequest) -> Result<String, BackendError> {
    let prompt = &request.messages.last().expect("message").content;
    Ok(format!(
        "you said {} words",
        prompt.split_whitespace().count()
    ))
}

fn main() -> ragplus::Result<()> {
    let fixtures = tempfile::tempdir().expect("tempdir");
    let messages = [Message::user("Which law relates force and acceleration?")];

    let recorder = Gateway::new(Arc::new(RecordingBackend::new(echo, fixtures.path())))
        .with_model("demo", ModelConfig::new(ProfileClass::Deterministic))
        .with_retry(RetryPolicy::immediate(1));
    let live = recorder.complete("demo", &messages)?;
    let profile = recorder.profile_for("demo")?;
    println!(
        "live:   {:?} (temperature {}, top_p {})",
        live.text,
        profile.temperature(),
        profile.top_p()
    );

    let replay = Gateway::new(Arc::new(ReplayBackend::new(fixtures.path())))
        .with_model("demo", ModelConfig::new(ProfileClass::Deterministic))
        .with_retry(RetryPolicy::immediate(1));
    let again = replay.complete("demo", &messages)?;
    println!("replay: {:?}", again.text);
    assert_eq!(live.text, again.text);

    // A request that was never recorded fails with its fingerprint.
    match replay.complete("demo", &[Message::user("something new")]) {
        Err(e) => println!("miss:   {e}"),
        Ok(_) => unreachable!(),
    }

    // The long-form profile keeps temperature 1 for reasoning models.
    let long = Gateway::new(Arc::new(echo))
        .with_model("reasoner", ModelConfig::new(ProfileClass::LongForm));
    let p = long.profile_for("reasoner")?;
    println!(
        "long-form profile: temperature {}, top_p {}",
        p.temperature(),
        p.top_p()
    );
    Ok(())
}
