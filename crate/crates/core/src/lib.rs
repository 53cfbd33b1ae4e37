//! Extraction pipeline and scoring harness for structured medical orders
//! from doctor-patient transcripts: corpus loading, prompt assembly,
//! model completion (endpoint, mock, or replay), line-format parsing with
//! repair, four-metric scoring, and error-analysis audits.

pub mod audit;
pub mod config;
pub mod corpus;
pub mod llm;
pub mod parser;
pub mod pipeline;
pub mod promptkit;
pub mod scorer;
