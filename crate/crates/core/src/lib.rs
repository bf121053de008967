//! Building blocks for retrieval-augmented question answering: corpus
//! ingestion, synthetic QA data generation, sparse and dense retrieval,
//! retriever and generator training, pipelines, evaluation and serving
//! support.

pub mod corpus;
pub mod datagen;
pub mod error;
pub mod generation;
pub mod generator_train;
pub mod evaluation;
pub mod llm;
pub mod nn;
pub mod pipeline;
pub mod retrieval;
pub mod retriever_train;
pub mod session;
pub mod synthetic;
pub mod tokenizer;
pub mod workflow;

pub use error::{Result, RqaError};
