// SPDX-License-Identifier: Apache-2.0

//! Native handler templates: the x86-64 instruction shape each opcode
//! handler retires, one [`NativeStep`] per single-step.

use std::collections::BTreeMap;

use crate::bytecode::Opcode;
use crate::trace::AccessMode;

use super::layout::PageClass;

pub const REG_OP_LATENCY: u32 = 5280;
pub const LOAD_LATENCY: u32 = 5540;
pub const STORE_LATENCY: u32 = 5400;
pub const EXEC_BRANCH_LATENCY: u32 = 5309;

pub const EXEC_PF: u32 = 5;
pub const STACK_READ_PF: u32 = 7;
pub const READ_PF: u32 = 8;
pub const WRITE_PF: u32 = 9;

/// Latencies of the shared dispatch tail `goto *handle_table[*frame_ip++]`.
const TAIL_BYTECODE_LATENCY: u32 = 5664;
const TAIL_OPTABLE_LATENCY: u32 = 5540;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum StepKind {
    RegOp,
    Load,
    Store,
    ExecBranch,
}

/// Which stack slot a STACK access touches.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum StackRef {
    /// Near the operand-stack top.
    Top,
    /// The local variable named by the instruction.
    Local,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NativeStep {
    pub kind: StepKind,
    /// Data page class for loads and stores; `HandlerCode` for the rest.
    pub target: PageClass,
    pub stack_ref: StackRef,
    pub base_latency: u32,
    pub pf_count: u32,
}

impl NativeStep {
    pub fn reg_op(latency: u32) -> Self {
        NativeStep {
            kind: StepKind::RegOp,
            target: PageClass::HandlerCode,
            stack_ref: StackRef::Top,
            base_latency: latency,
            pf_count: EXEC_PF,
        }
    }

    pub fn branch(latency: u32) -> Self {
        NativeStep {
            kind: StepKind::ExecBranch,
            ..NativeStep::reg_op(latency)
        }
    }

    pub fn load(target: PageClass, latency: u32) -> Self {
        NativeStep {
            kind: StepKind::Load,
            target,
            stack_ref: StackRef::Top,
            base_latency: latency,
            pf_count: if target == PageClass::Stack { STACK_READ_PF } else { READ_PF },
        }
    }

    pub fn store(target: PageClass, latency: u32) -> Self {
        NativeStep {
            kind: StepKind::Store,
            target,
            stack_ref: StackRef::Top,
            base_latency: latency,
            pf_count: WRITE_PF,
        }
    }

    pub fn mode(&self) -> AccessMode {
        match self.kind {
            StepKind::Load => AccessMode::R,
            StepKind::Store => AccessMode::W,
            StepKind::RegOp | StepKind::ExecBranch => AccessMode::E,
        }
    }

    fn is_optable_load(&self) -> bool {
        self.kind == StepKind::Load && self.target == PageClass::Optable
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HandlerSpec {
    pub opcode: Opcode,
    /// Body followed by the three-step dispatch tail.
    pub steps: Vec<NativeStep>,
    /// Optable-page reads inside the body (besides the dispatch read).
    pub extra_optable_accesses: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HandlerSpecError {
    #[error("{0}: handler does not end with the dispatch tail")]
    MissingTail(Opcode),
    #[error("{0}: extra_optable_accesses disagrees with the body")]
    ExtraOptableMismatch(Opcode),
    #[error("{op}: {loads} stack loads / {stores} stack stores inconsistent with its stack effect")]
    StackEffect { op: Opcode, loads: usize, stores: usize },
    #[error("bad template token `{0}`")]
    Template(String),
}

impl HandlerSpec {
    /// Index where the dispatch tail begins.
    pub fn tail_start(&self) -> usize {
        self.steps.len() - 3
    }

    pub fn body(&self) -> &[NativeStep] {
        &self.steps[..self.tail_start()]
    }

    pub fn validate(&self) -> Result<(), HandlerSpecError> {
        let op = self.opcode;
        let n = self.steps.len();
        if n < 3 {
            return Err(HandlerSpecError::MissingTail(op));
        }
        let tail = &self.steps[n - 3..];
        let tail_ok = tail[0].kind == StepKind::Load
            && tail[0].target == PageClass::Bytecode
            && tail[1].is_optable_load()
            && tail[2].kind == StepKind::ExecBranch;
        if !tail_ok {
            return Err(HandlerSpecError::MissingTail(op));
        }
        let extra = self.body().iter().filter(|s| s.is_optable_load()).count();
        if extra != self.extra_optable_accesses as usize {
            return Err(HandlerSpecError::ExtraOptableMismatch(op));
        }
        // Calls and returns move a runtime-dependent number of values.
        if matches!(op, Opcode::Call | Opcode::Return) {
            return Ok(());
        }
        let stack = |kind| {
            self.steps
                .iter()
                .filter(|s| s.kind == kind && s.target == PageClass::Stack)
                .count()
        };
        let (loads, stores) = (stack(StepKind::Load), stack(StepKind::Store));
        let e = op.stack_effect();
        let produces = (e.pushes + e.local_writes) as usize;
        let consumes = (e.pops + e.local_reads) as usize;
        if loads > consumes || stores > produces || (produces > 0 && stores == 0) {
            return Err(HandlerSpecError::StackEffect { op, loads, stores });
        }
        Ok(())
    }
}

/// Handler templates for every opcode. Each opcode has one or more
/// semantically equivalent variants; synthesis picks one per execution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HandlerTable {
    variants: BTreeMap<Opcode, Vec<HandlerSpec>>,
}

impl HandlerTable {
    pub fn new(variants: BTreeMap<Opcode, Vec<HandlerSpec>>) -> Self {
        HandlerTable { variants }
    }

    pub fn from_specs(specs: impl IntoIterator<Item = HandlerSpec>) -> Self {
        let mut variants: BTreeMap<Opcode, Vec<HandlerSpec>> = BTreeMap::new();
        for spec in specs {
            variants.entry(spec.opcode).or_default().push(spec);
        }
        HandlerTable { variants }
    }

    /// The primary (first) variant.
    pub fn get(&self, op: Opcode) -> Option<&HandlerSpec> {
        self.variants.get(&op).and_then(|v| v.first())
    }

    pub fn variants(&self, op: Opcode) -> &[HandlerSpec] {
        self.variants.get(&op).map_or(&[], Vec::as_slice)
    }

    pub fn variants_mut(&mut self) -> impl Iterator<Item = (&Opcode, &mut Vec<HandlerSpec>)> {
        self.variants.iter_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Opcode, &Vec<HandlerSpec>)> {
        self.variants.iter()
    }

    pub fn contains(&self, op: Opcode) -> bool {
        self.variants.get(&op).is_some_and(|v| !v.is_empty())
    }

    pub fn validate(&self) -> Result<(), HandlerSpecError> {
        self.variants.values().flatten().try_for_each(HandlerSpec::validate)
    }
}

/// Parses a body template and appends the dispatch tail.
///
/// Tokens: `x` register op, `j` in-handler branch, `s`/`S` stack load/store,
/// `l`/`L` local-variable load/store, `b` bytecode load, `o` optable load,
/// `m`/`M` linear-memory load/store, `g`/`G` globals load/store. A `:N`
/// suffix overrides the base latency.
pub fn handler_from_template(op: Opcode, body: &str) -> Result<HandlerSpec, HandlerSpecError> {
    let mut steps = Vec::new();
    for tok in body.split_whitespace() {
        let (code, latency) = match tok.split_once(':') {
            Some((c, l)) => (c, Some(l.parse::<u32>().map_err(|_| HandlerSpecError::Template(tok.into()))?)),
            None => (tok, None),
        };
        let lat = |default| latency.unwrap_or(default);
        let step = match code {
            "x" => NativeStep::reg_op(lat(REG_OP_LATENCY)),
            "j" => NativeStep::branch(lat(EXEC_BRANCH_LATENCY)),
            "s" => NativeStep::load(PageClass::Stack, lat(LOAD_LATENCY)),
            "S" => NativeStep::store(PageClass::Stack, lat(STORE_LATENCY)),
            "l" => NativeStep {
                stack_ref: StackRef::Local,
                ..NativeStep::load(PageClass::Stack, lat(LOAD_LATENCY))
            },
            "L" => NativeStep {
                stack_ref: StackRef::Local,
                ..NativeStep::store(PageClass::Stack, lat(STORE_LATENCY))
            },
            "b" => NativeStep::load(PageClass::Bytecode, lat(LOAD_LATENCY)),
            "o" => NativeStep::load(PageClass::Optable, lat(LOAD_LATENCY)),
            "m" => NativeStep::load(PageClass::LinearMem, lat(LOAD_LATENCY)),
            "M" => NativeStep::store(PageClass::LinearMem, lat(STORE_LATENCY)),
            "g" => NativeStep::load(PageClass::Other, lat(LOAD_LATENCY)),
            "G" => NativeStep::store(PageClass::Other, lat(STORE_LATENCY)),
            _ => return Err(HandlerSpecError::Template(tok.into())),
        };
        steps.push(step);
    }
    let extra = steps.iter().filter(|s| s.is_optable_load()).count() as u32;
    steps.extend(dispatch_tail());
    Ok(HandlerSpec {
        opcode: op,
        steps,
        extra_optable_accesses: extra,
    })
}

/// Bytecode fetch, optable lookup, indirect jump.
pub fn dispatch_tail() -> [NativeStep; 3] {
    [
        NativeStep::load(PageClass::Bytecode, TAIL_BYTECODE_LATENCY),
        NativeStep::load(PageClass::Optable, TAIL_OPTABLE_LATENCY),
        NativeStep::branch(EXEC_BRANCH_LATENCY),
    ]
}

/// Body templates of the stock interpreter build.
///
/// `i32.add` reproduces the eight-instruction handler
/// (`endbr64; sub rbx,4; mov eax,[rbx]; add rbp,1; add [rbx-4],eax; movzbl; mov rax,[r10+rax*8]; jmp rax`).
/// Handlers of one shape differ only in the latency of their ALU step.
pub const DEFAULT_TEMPLATES: &[(Opcode, &str)] = {
    use Opcode::*;
    &[
        (Nop, "x:5651 x:5526"),
        (Block, "x:5651 b:5600 x:5296 x:5310 x:5526"),
        (Loop, "x:5651 b:5600 x:5296 x:5526"),
        (If, "x:5651 s:5404 x:5296 b:5600 j:5330 x:5526"),
        (Else, "x:5651 x:5305 x:5290 j:5330 x:5526"),
        (End, "x:5651 x:5290 x:5300 x:5526"),
        (Br, "x:5651 b:5600 x:5300 x:5296 j:5330 x:5526"),
        (BrIf, "x:5651 s:5404 x:5296 b:5600 x:5300 j:5330 x:5526"),
        (Return, "x:5651 x:5300 s:5404 S:5400 x:5296 x:5310 j:5330 x:5526"),
        (Call, "x:5651 b:5600 x:5300 o:5560 x:5310 s:5404 S:5400 S:5402 x:5296 j:5330 x:5526"),
        (Drop, "x:5651 x:5365 x:5526"),
        (Select, "x:5651 x:5365 s:5404 x:5292 j:5330 s:5410 x:5526 S:5400"),
        (LocalGet, "x:5651 b:5600 x:5300 l:5420 x:5526 S:5400"),
        (LocalSet, "x:5651 b:5600 x:5460 s:5404 x:5526 L:5560"),
        (LocalTee, "x:5651 b:5600 x:5300 s:5404 x:5690 L:5400"),
        (GlobalGet, "x:5651 b:5600 x:5300 x:5310 g:5450 x:5526 S:5400"),
        (GlobalSet, "x:5651 b:5600 x:5300 x:5310 s:5404 x:5526 G:5400"),
        (I32Load, "x:5651 b:5600 s:5404 x:5300 m:5590 x:5526 S:5400"),
        (I64Load, "x:5651 b:5600 s:5404 x:5300 m:5590 x:5340 x:5526 S:5400"),
        (I32Store, "x:5651 b:5600 s:5404 s:5410 x:5300 x:5526 M:5420"),
        (I64Store, "x:5651 b:5600 s:5404 s:5410 x:5300 x:5340 x:5526 M:5420"),
        (MemoryGrow, "x:5651 s:5404 x:5300 o:5560 x:5310 x:5296 x:5320 S:5400 x:5526"),
        (I32Const, "x:5651 b:5600 x:5526 S:5400"),
        (I64Const, "x:5651 b:5600 b:5610 x:5526 S:5400"),
        (I32Eqz, "x:5651 s:5404 x:5300 x:5292 x:5526 S:5400"),
        (I64Eqz, "x:5651 s:5404 x:5300 x:5292 x:5340 x:5526 S:5400"),
        // Comparisons: cmp, setcc, movzx, store.
        (I32Eq, "x:5651 x:5365 s:5404 x:5526 s:5410 x:5290 x:5300 S:5400"),
        (I32Ne, "x:5651 x:5365 s:5404 x:5526 s:5410 x:5290 x:5420 S:5400"),
        (I32LtS, "x:5651 x:5365 s:5404 x:5526 s:5410 x:5290 x:5540 S:5400"),
        (I32GtS, "x:5651 x:5365 s:5404 x:5526 s:5410 x:5290 x:5660 S:5400"),
        (I32LeS, "x:5651 x:5365 s:5404 x:5526 s:5410 x:5290 x:5780 S:5400"),
        (I32GeS, "x:5651 x:5365 s:5404 x:5526 s:5410 x:5290 x:5900 S:5400"),
        (I64Eq, "x:5651 x:5365 s:5404 x:5340 x:5526 s:5410 x:5290 x:5300 S:5400"),
        (I64Ne, "x:5651 x:5365 s:5404 x:5340 x:5526 s:5410 x:5290 x:5420 S:5400"),
        (I64LtS, "x:5651 x:5365 s:5404 x:5340 x:5526 s:5410 x:5290 x:5540 S:5400"),
        (I64GtS, "x:5651 x:5365 s:5404 x:5340 x:5526 s:5410 x:5290 x:5660 S:5400"),
        (I64LeS, "x:5651 x:5365 s:5404 x:5340 x:5526 s:5410 x:5290 x:5780 S:5400"),
        (I64GeS, "x:5651 x:5365 s:5404 x:5340 x:5526 s:5410 x:5290 x:5900 S:5400"),
        // Read-modify-write binops: the ALU op is the store to [rbx-4].
        (I32Add, "x:5651 x:5365 s:5404 x:5526 S:5400"),
        (I32Sub, "x:5651 x:5365 s:5404 x:5526 S:5520"),
        (I32And, "x:5651 x:5365 s:5404 x:5526 S:5640"),
        (I32Or, "x:5651 x:5365 s:5404 x:5526 S:5760"),
        (I32Xor, "x:5651 x:5365 s:5404 x:5526 S:5880"),
        (I64Add, "x:5651 x:5365 s:5404 s:5408 x:5526 x:5300 S:5400"),
        (I64Sub, "x:5651 x:5365 s:5404 s:5408 x:5526 x:5300 S:5520"),
        (I64And, "x:5651 x:5365 s:5404 s:5408 x:5526 x:5300 S:5640"),
        (I64Or, "x:5651 x:5365 s:5404 s:5408 x:5526 x:5300 S:5760"),
        (I64Xor, "x:5651 x:5365 s:5404 s:5408 x:5526 x:5300 S:5880"),
        (I32Mul, "x:5651 x:5365 s:5404 s:5408 x:5526 x:5790 S:5400"),
        (I64Mul, "x:5651 x:5365 s:5404 s:5408 x:5526 x:5300 x:5820 S:5400"),
        (I32DivS, "x:5651 x:5365 s:5404 s:5410 x:5290 j:5330 x:5282 x:6480 x:5526 S:5400"),
        (I32RemS, "x:5651 x:5365 s:5404 s:5410 x:5290 j:5330 x:5282 x:6480 x:5300 x:5526 S:5400"),
        (I64DivS, "x:5651 x:5365 s:5404 s:5410 x:5290 j:5330 x:5282 x:6720 x:5526 S:5400"),
        (I64RemS, "x:5651 x:5365 s:5404 s:5410 x:5290 j:5330 x:5282 x:6720 x:5300 x:5526 S:5400"),
        // Shifts: the RMW form `shl [rbx-4], cl`.
        (I32Shl, "x:5651 x:5365 s:5404 x:5526 S:6000"),
        (I32ShrS, "x:5651 x:5365 s:5404 x:5526 S:6120"),
        (I64Shl, "x:5651 x:5365 s:5404 s:5408 x:5526 x:5300 S:6000"),
        (I64ShrS, "x:5651 x:5365 s:5404 s:5408 x:5526 x:5300 S:6120"),
    ]
};

/// The stock interpreter's handler table.
pub fn default_handler_specs() -> HandlerTable {
    HandlerTable::from_specs(
        DEFAULT_TEMPLATES
            .iter()
            .map(|&(op, body)| handler_from_template(op, body).expect("built-in templates parse")),
    )
}
