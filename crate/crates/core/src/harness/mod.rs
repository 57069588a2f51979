//! Continual experiment orchestration: synthetic corpus, slices, the
//! session loop, evaluation protocols, controls and the sensitivity sweep.

mod config;
mod corpus;
mod experiment;
mod split;
mod store;

pub use config::{
    Adaptation, AdaptationConfig, CorpusConfig, DocidConfig, ExperimentConfig, MemoryConfig, Protocol, RunConfig,
    VocabLayout,
};
pub use corpus::{make_synthetic_corpus, slice_sizes, Corpus, QueryKind, QueryRecord, MIN_SLICE_DOCS};
pub use experiment::{
    run_continual, run_controls, sensitivity_sweep, stream_seed, sweep_table, ContinualRun, ControlReport,
    Experiment, QueryOutcome, RunOptions, SessionOutcome, SessionState, Stage2Summary, Stream, SweepRow,
};
pub use split::{split_corpus, ContinualSplit};
pub use store::RunDir;
