//! Experiment drivers behind the command-line front end.

pub mod check;
pub mod describe;
pub mod sweep;

pub use check::{check_oracles, CheckLevel, CheckReport};
pub use describe::describe;
pub use sweep::{gd_reference_step, run_sweep, ResultRow, SweepKind, SweepResult, SweepSpec};
