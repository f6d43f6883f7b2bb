//! Corpus, classifier, training drivers, persistence, benchmarks and demos.

pub mod bench;
pub mod checkpoint;
pub mod classifier;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod demos;
pub mod metrics;
pub mod train;
pub mod wav;
