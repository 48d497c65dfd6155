//! Corpus rephrasing pipeline for synthetic pre-training data.
//!
//! Raw JSON Lines shards flow through these stages:
//!
//! 1. [`preprocessor`] splits documents into passages of bounded estimated
//!    token length ([`token_estimator`] supplies the estimate).
//! 2. [`prompt_engine`] renders each passage into a style template.
//! 3. [`inference`] drives a completion endpoint with length-sorted
//!    scheduling, bounded concurrency, retries and checkpoint/resume.
//! 4. [`postprocessor`] cleans completions, filters them and reassembles
//!    documents.
//!
//! [`quality_filter`] and [`mixer`] build the derived training corpora, and
//! [`pipeline`] wires all stages behind a single [`config::PipelineConfig`].

pub mod config;
pub mod corpus_io;
pub mod inference;
pub mod mixer;
pub mod pipeline;
pub mod postprocessor;
pub mod preprocessor;
pub mod prompt_engine;
pub mod quality_filter;
pub mod synthetic;
pub mod token_estimator;
mod util;

pub use corpus_io::{Document, Provenance, ShardManifest};
pub use preprocessor::{Passage, SplitConfig};
pub use token_estimator::TokenEstimator;
