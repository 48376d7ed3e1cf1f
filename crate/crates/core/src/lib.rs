// SPDX-License-Identifier: Apache-2.0

//! Simulation and analysis of single-stepping side channels against a
//! WebAssembly interpreter: trace synthesis, preprocessing, fingerprint
//! profiling, template matching and recall scoring.

pub mod bytecode;
pub mod config;
pub mod machine;
pub mod matcher;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod profiler;
pub mod trace;
pub mod workloads;
