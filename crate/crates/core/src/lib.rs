//! Compression of DAG-structured multi-agent workflows.
//!
//! A workflow is a directed acyclic graph of LLM-backed operators. This crate
//! scores nodes by structural and empirical importance, removes or cheapens
//! the least useful ones under a fixed accuracy tolerance, optionally runs a
//! local structural search, and reports the resulting cost economics.

pub mod compressor;
pub mod config;
pub mod eval;
pub mod graph;
pub mod importance;
pub mod money;
pub mod report;
pub mod runlog;
pub mod runner;
pub mod tuner;
