//! Independent reference implementations for `sparsedet3d`, the acceptance
//! criteria built on them, and throughput benchmarks.

pub mod bench;
pub mod criteria;
pub mod reference;
pub mod suites;

pub use bench::{run_bench, to_tsv, BenchConfig, BenchRow};
pub use criteria::{all_criteria, Outcome};
pub use suites::run_oracles;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/oracles.md")]
mod guide {}
