//! Desk-scale discrete-event simulator and policy engine for swap-based
//! memory optimization of dynamic operator sequences.
//!
//! The pipeline mirrors a training system that cannot assume a static
//! graph: [`trace`] models per-iteration operator/tensor sequences that
//! drift over time, [`profiler`] detects drift and reconstructs no-swap
//! memory usage, [`policy`] turns profiles into a swap schedule, and
//! [`executor`] re-binds that schedule onto later iterations by fuzzy
//! tensor matching. [`runtime`] executes iterations on a simulated device
//! with a host clock, serial compute and transfer streams, an arena
//! allocator, and OOM recovery. [`scenario`] wires the staged loop
//! together and runs scale sweeps.

pub mod error;
pub mod executor;
pub mod policy;
pub mod profiler;
pub mod runtime;
pub mod scenario;
pub mod trace;

pub use error::{Result, SimError};
