//! Command-line front end: experiment specs and the `run`, `compare` and
//! `ablate` commands.

// `!(x > 0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod spec;

pub use commands::{cmd_ablate, cmd_compare, cmd_run, Options, Outcome};
pub use spec::ExperimentSpec;
