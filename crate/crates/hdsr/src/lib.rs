//! File formats, configuration and experiment pipelines around `hdsr-core`.
//!
//! The `hdsr` binary exposes five commands (`generate`, `train`, `evaluate`,
//! `finetune`, `analyze`); each is also available as a function in
//! [`pipeline`].

pub mod atomic;
pub mod checkpoint;
pub mod cli;
pub mod cohort_io;
pub mod config;
pub mod pipeline;

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "HDSR_THREADS";
