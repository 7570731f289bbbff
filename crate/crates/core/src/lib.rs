pub mod abstraction;
pub mod clock;
pub mod config;
pub mod consensus;
pub mod embed;
pub mod evaluation;
pub mod graph;
pub mod hitl;
pub mod ingestion;
pub mod llm;
pub mod pipeline;
pub mod prompts;
pub mod text;
