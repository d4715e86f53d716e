//! Synthetic articulated scenes with analytic ground truth, cost accounting
//! and benchmarks for the enarf engine.

pub mod alloc;
pub mod bench;
pub mod cost;
pub mod dataset;
pub mod oracle;
pub mod run;
pub mod scene;

#[global_allocator]
static GLOBAL: alloc::TrackingAllocator = alloc::TrackingAllocator;
