// SPDX-License-Identifier: Apache-2.0

//! Leakage model of a threaded-dispatch interpreter under single-stepping.

pub mod handlers;
pub mod layout;
pub mod mitigation;
pub mod noise;
pub mod synth;

pub use handlers::{
    default_handler_specs, handler_from_template, HandlerSpec, HandlerSpecError, HandlerTable, NativeStep, StackRef,
    StepKind,
};
pub use layout::{build_layout, LayoutConfig, LayoutError, MemoryLayout, PageClass, PAGE_SIZE};
pub use mitigation::{apply_layout_mitigation, apply_mitigation, MitigationConfig};
pub use noise::{NoiseConfigError, NoiseModel};
pub use synth::{synthesize_trace, SynthError};
