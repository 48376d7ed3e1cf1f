// SPDX-License-Identifier: Apache-2.0

//! Turns a retired-opcode stream into the attacker's view of it.
//!
//! Emission order: each opcode's events start with the dispatch that enters
//! it (the previous handler's optable read and indirect jump), continue with
//! its own body, and end with its own bytecode fetch. The optable read is
//! therefore the first event of every opcode and the region boundary. The
//! very first opcode is entered through the same tail shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::bytecode::{ExecContext, Label, Opcode, OpcodeTrace};
use crate::trace::{AccessMode, FrameNumber, SideChannelTrace, StepEvent, TruthBoundary};

use super::handlers::{HandlerSpec, HandlerTable, NativeStep, StackRef, StepKind, STORE_LATENCY, WRITE_PF};
use super::layout::{MemoryLayout, PageClass};
use super::noise::{filler_burst, NoiseConfigError, NoiseModel};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("no handler spec for opcode {0}")]
    MissingSpec(Opcode),
    #[error("opcode trace has {executed} opcodes but {contexts} contexts")]
    ContextMismatch { executed: usize, contexts: usize },
    #[error(transparent)]
    Noise(#[from] NoiseConfigError),
}

struct Emitter<'a> {
    noise: &'a NoiseModel,
    layout: &'a MemoryLayout,
    rng: ChaCha8Rng,
    jitter: Option<Normal<f64>>,
    events: Vec<StepEvent>,
    truth: Vec<TruthBoundary>,
}

impl Emitter<'_> {
    fn push(&mut self, page: FrameNumber, mode: AccessMode, pf_count: u32, base: u32, boundary: Option<Label>) {
        let latency = self.noise.measure(base, &mut self.rng, self.jitter.as_ref());
        let ev = StepEvent {
            page,
            mode,
            pf_count,
            latency,
        };
        let merge = self.noise.multistep_prob > 0.0 && self.rng.random_bool(self.noise.multistep_prob);
        match self.events.last_mut() {
            // The interrupt fired late: this instruction retires in the same step.
            Some(prev) if merge => {
                prev.latency += ev.latency;
                prev.pf_count += ev.pf_count;
            }
            _ => {
                if let Some(label) = boundary {
                    self.truth.push(TruthBoundary {
                        index: self.events.len(),
                        label,
                    });
                }
                self.events.push(ev);
            }
        }
        if self.noise.ctx_switch_rate > 0.0 && self.rng.random_bool(self.noise.ctx_switch_rate) {
            let len = self.noise.burst_len(&mut self.rng);
            let burst = filler_burst(self.layout, self.noise, len, &mut self.rng, self.jitter.as_ref());
            self.events.extend(burst);
        }
    }

    fn step(&mut self, step: &NativeStep, op: Opcode, ctx: &ExecContext, boundary: Option<Label>) {
        let page = match step.kind {
            StepKind::RegOp | StepKind::ExecBranch => self.layout.handler_page(op),
            StepKind::Load | StepKind::Store => self.data_page(step, ctx),
        };
        self.push(page, step.mode(), step.pf_count, step.base_latency, boundary);
    }

    fn data_page(&self, step: &NativeStep, ctx: &ExecContext) -> FrameNumber {
        let l = self.layout;
        match step.target {
            PageClass::Optable => l.optable_page,
            PageClass::Stack => {
                let slot = match step.stack_ref {
                    StackRef::Local => ctx.local_slot.unwrap_or(ctx.stack_top),
                    StackRef::Top => ctx.stack_top.saturating_sub(1),
                };
                l.stack_page_for_slot(slot)
            }
            PageClass::Bytecode => l.bytecode_page_for_pc(ctx.pc as usize),
            PageClass::LinearMem => l.linear_page_for_addr(ctx.mem_addr.unwrap_or(0)),
            PageClass::Marker => l.marker_page,
            PageClass::HandlerCode | PageClass::Other => l.globals_page,
        }
    }
}

/// Synthesizes the side-channel trace of `opcodes` running on the modeled
/// interpreter. Truth boundaries mark every optable read: the opcode for a
/// dispatch, NULL for the extra reads inside `call` and `memory.grow`.
pub fn synthesize_trace(
    opcodes: &OpcodeTrace,
    layout: &MemoryLayout,
    specs: &HandlerTable,
    noise: &NoiseModel,
    profiling_markers: bool,
) -> Result<SideChannelTrace, SynthError> {
    noise.validate()?;
    if opcodes.contexts.len() != opcodes.executed.len() {
        return Err(SynthError::ContextMismatch {
            executed: opcodes.executed.len(),
            contexts: opcodes.contexts.len(),
        });
    }
    for &op in &opcodes.unique_opcodes() {
        if !specs.contains(op) {
            return Err(SynthError::MissingSpec(op));
        }
    }

    let mut variant_rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
    variant_rng.set_stream(1);
    let mut em = Emitter {
        noise,
        layout,
        rng: ChaCha8Rng::seed_from_u64(noise.rng_seed),
        jitter: noise.jitter_dist(),
        events: Vec::with_capacity(opcodes.len() * 10),
        truth: Vec::with_capacity(opcodes.len()),
    };

    let mut prev: Option<&HandlerSpec> = None;
    for (&op, ctx) in opcodes.executed.iter().zip(&opcodes.contexts) {
        let variants = specs.variants(op);
        let spec = match variants.len() {
            1 => &variants[0],
            n => &variants[variant_rng.random_range(0..n)],
        };
        if profiling_markers {
            em.push(layout.marker_page, AccessMode::W, WRITE_PF, STORE_LATENCY, None);
        }
        let entry = prev.unwrap_or(spec);
        let n = entry.steps.len();
        em.step(&entry.steps[n - 2], op, ctx, Some(Label::Op(op)));
        // The indirect jump faults on the handler being entered.
        em.step(&entry.steps[n - 1], op, ctx, None);
        for step in spec.body() {
            let boundary = (step.kind == StepKind::Load && step.target == PageClass::Optable).then_some(Label::Null);
            em.step(step, op, ctx, boundary);
        }
        em.step(&spec.steps[spec.tail_start()], op, ctx, None);
        prev = Some(spec);
    }

    Ok(SideChannelTrace {
        events: em.events,
        truth: Some(em.truth),
        layout_seed: layout.seed,
    })
}
