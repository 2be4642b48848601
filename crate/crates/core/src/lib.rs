pub mod alignment;
pub mod cli;
pub mod construction;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod jsonl;
pub mod llm;
pub mod retrieval;
pub mod strategies;
pub mod template;

pub use error::{Error, Result};
