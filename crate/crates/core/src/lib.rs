//! Slang benchmark construction, causal-intervention prompting and
//! evaluation.

pub mod counterfactual;
pub mod exec;
pub mod filterpipe;
pub mod focus;
pub mod harness;
pub mod ingest;
pub mod llmclient;
pub mod metrics;
pub mod prompts;
pub mod standardize;
pub mod text;
