//! Corpora, metrics, significance tests and experiment orchestration.

pub mod corpus;
pub mod experiment;
pub mod lossless;
pub mod metrics;
pub mod pipeline;

pub use corpus::{check_disjoint, generate_corpus, CorpusKind, CorpusSpec, Split};
pub use experiment::{
    parse_trace, run_experiment, summarize_traces, write_outputs, Drafter, ExperimentMatrix, ExperimentResult,
    ModelSet, RunReport, TraceRecord,
};
pub use metrics::{block_efficiency, positional_profile, speedup, welch_t_test, ProfileBucket, SignificanceResult};
