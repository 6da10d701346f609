//! Experiment engine: workloads, benchmarks, cost model, sweeps and reports.

pub mod bench;
pub mod compare;
pub mod cost;
pub mod report;
pub mod selfcheck;
pub mod sweep;
mod workload;

pub use bench::{aggregate, run_benchmark, Benchmark, RunRecord, Summary};
pub use compare::{compare_selectors, overlap_by_distance, CompareRow, OverlapReport};
pub use cost::{cost_iteration_time, modeled_throughput, HardwareModel};
pub use selfcheck::{check_case, run_selfcheck, CaseReport, SelfcheckConfig, SelfcheckReport};
pub use sweep::{choose_plateau, GridCell, SweepConfig, SweepReport, Sweeper};
pub use workload::{Workload, WorkloadKind};
