//! Reference solutions, per-iterate metrics, traces and property checks.

pub mod checks;
pub mod reference;
pub mod trace;

pub use checks::{property_suite, CheckFamily, CheckResult, SuiteOptions, SuiteReport};
pub use reference::{solve_reference, ReferenceSolution, SolveMeta, DEFAULT_TOLERANCE};
pub use trace::{evaluate, run_traced, IterateTrace, Metrics, TraceRecorder, TraceRow, TRACE_HEADER};
