//! Viseme-level inspection toolkit for frame-aligned speech embeddings.
//!
//! The pipeline: parse forced alignments and collapse phonemes onto viseme
//! classes ([`alignment`]), pool frame embeddings into per-token features
//! ([`features`]), embed them in 2-D with Barnes-Hut t-SNE ([`tsne`]), train
//! shallow MLP probes per layer and condition ([`probe`]), score them
//! ([`metrics`]), and emit deterministic SVG/CSV reports ([`report`]).

pub mod alignment;
pub mod features;
pub mod ioutil;
pub mod metrics;
pub mod probe;
pub mod report;
pub mod run;
pub mod seed;
pub mod tsne;
