pub mod answering;
pub mod cli;
pub mod consolidation;
pub mod embedding;
pub mod evaluation;
pub mod evolution;
pub mod extraction;
pub mod gateway;
pub mod prompts;
pub mod retrieval;
pub mod store;
pub mod text;
