//! Bidirectional schema linking for Text-to-SQL.
//!
//! The crate is organised around a small pipeline:
//!
//! * [`corpus`] loads benchmark rows and introspects SQLite databases,
//!   including distinct sample values per column.
//! * [`augment`] enriches a question with subquestions and keywords.
//! * [`linker`] runs the table-first and column-first retrieval paths and
//!   merges them into one [`SchemaSubset`].
//! * [`sqlscope`] extracts the gold schema referenced by a reference query.
//! * [`metrics`] scores retrieved subsets against gold subsets.
//! * [`sqlgen`] generates SQL under a schema setting and scores execution
//!   accuracy.
//! * [`run`] and [`report`] orchestrate dataset-scale runs and render
//!   summaries.
//!
//! All LLM traffic goes through [`backend::LlmClient`], which handles
//! caching, replay, rate limiting, retries and telemetry.

pub mod augment;
pub mod backend;
pub mod config;
pub mod corpus;
pub mod linker;
pub mod metrics;
pub mod prompts;
pub mod report;
pub mod run;
pub mod sqlgen;
pub mod sqlscope;
pub mod subset;

pub use augment::AugmentedQuestion;
pub use corpus::{BenchmarkExample, ColumnDef, DatabaseSchema, Difficulty, TableDef};
pub use linker::LinkingResult;
pub use metrics::LinkingScore;
pub use run::RunRecord;
pub use sqlscope::ScopeReport;
pub use subset::SchemaSubset;
