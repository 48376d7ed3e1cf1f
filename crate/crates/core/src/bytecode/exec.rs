// SPDX-License-Identifier: Apache-2.0

//! Reference stack-machine interpreter producing the ground-truth opcode stream.

use super::module::{FlatModule, MAX_MEMORY_PAGES};
use super::opcode::Opcode;

pub const WASM_PAGE_SIZE: usize = 65536;
pub const MAX_CALL_DEPTH: usize = 1024;

/// Why execution stopped early.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum Trap {
    #[error("operand stack underflow at instruction {pc}")]
    StackUnderflow { pc: usize },
    #[error("out-of-bounds memory access at address {addr} (instruction {pc})")]
    OutOfBounds { pc: usize, addr: u64 },
    #[error("integer division by zero at instruction {pc}")]
    DivisionByZero { pc: usize },
    #[error("integer overflow at instruction {pc}")]
    IntegerOverflow { pc: usize },
    #[error("call stack exhausted at instruction {pc}")]
    CallStackExhausted { pc: usize },
}

/// Interpreter state observed when an opcode retired. The machine model uses
/// it to place stack and linear-memory accesses on concrete pages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExecContext {
    /// Instruction index of the opcode.
    pub pc: u32,
    /// Absolute stack slot count (locals plus operands of every frame) before the opcode ran.
    pub stack_top: u32,
    /// Absolute slot of the local touched by `local.*`.
    pub local_slot: Option<u32>,
    /// Effective linear-memory address of a load or store.
    pub mem_addr: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OpcodeTrace {
    /// Retired opcodes in dynamic order.
    pub executed: Vec<Opcode>,
    /// One context per retired opcode.
    pub contexts: Vec<ExecContext>,
    pub step_limit_hit: bool,
    pub trap: Option<Trap>,
    /// Operand-stack depth of the entry frame when execution finished.
    pub final_depth: usize,
}

impl OpcodeTrace {
    pub fn len(&self) -> usize {
        self.executed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.executed.is_empty()
    }

    pub fn unique_opcodes(&self) -> std::collections::BTreeSet<Opcode> {
        self.executed.iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Ctrl {
    op: Opcode,
    start: usize,
    height: usize,
}

#[derive(Debug)]
struct Frame {
    return_pc: usize,
    region_end: usize,
    locals_base: usize,
    operand_base: usize,
    results: u32,
    ctrl: Vec<Ctrl>,
}

struct Machine<'m> {
    module: &'m FlatModule,
    stack: Vec<i64>,
    frames: Vec<Frame>,
    globals: Vec<i64>,
    memory: Vec<u8>,
}

enum Flow {
    Next,
    Jump(usize),
    Finish,
}

/// Runs `module` from its entry region until it ends, traps, or retires
/// `step_limit` opcodes.
pub fn execute(module: &FlatModule, step_limit: usize) -> OpcodeTrace {
    let locals = module.locals_count as usize;
    let mut m = Machine {
        module,
        stack: vec![0; locals],
        frames: vec![Frame {
            return_pc: usize::MAX,
            region_end: module.entry_end(),
            locals_base: 0,
            operand_base: locals,
            results: 0,
            ctrl: Vec::new(),
        }],
        globals: vec![0; module.globals_count as usize],
        memory: vec![0; module.initial_memory_pages as usize * WASM_PAGE_SIZE],
    };

    let mut trace = OpcodeTrace::default();
    let mut pc = 0usize;
    loop {
        let frame_end = m.frames.last().expect("at least one frame").region_end;
        if pc >= frame_end {
            match m.do_return() {
                Ok(Some(ret)) => {
                    pc = ret;
                    continue;
                }
                Ok(None) => break,
                Err(t) => {
                    trace.trap = Some(t(pc));
                    break;
                }
            }
        }
        if trace.executed.len() >= step_limit {
            trace.step_limit_hit = true;
            break;
        }
        let op = module.instructions[pc].op;
        let mut ctx = ExecContext {
            pc: pc as u32,
            stack_top: m.stack.len() as u32,
            ..ExecContext::default()
        };
        match m.step(pc, &mut ctx) {
            Ok(flow) => {
                trace.executed.push(op);
                trace.contexts.push(ctx);
                match flow {
                    Flow::Next => pc += 1,
                    Flow::Jump(target) => pc = target,
                    Flow::Finish => break,
                }
            }
            Err(trap) => {
                trace.trap = Some(trap);
                break;
            }
        }
    }
    let base = m.frames.first().map_or(0, |f| f.operand_base);
    trace.final_depth = m.stack.len().saturating_sub(base);
    trace
}

impl Machine<'_> {
    fn frame(&self) -> &Frame {
        self.frames.last().expect("at least one frame")
    }

    fn pop(&mut self, pc: usize) -> Result<i64, Trap> {
        if self.stack.len() <= self.frame().operand_base {
            return Err(Trap::StackUnderflow { pc });
        }
        Ok(self.stack.pop().expect("checked above"))
    }

    fn pop2(&mut self, pc: usize) -> Result<(i64, i64), Trap> {
        let b = self.pop(pc)?;
        let a = self.pop(pc)?;
        Ok((a, b))
    }

    fn push(&mut self, v: i64) {
        self.stack.push(v);
    }

    /// Returns from the current frame. `Ok(None)` when the entry frame finished.
    #[allow(clippy::type_complexity)]
    fn do_return(&mut self) -> Result<Option<usize>, fn(usize) -> Trap> {
        let frame = self.frames.pop().expect("at least one frame");
        if self.frames.is_empty() {
            self.frames.push(frame);
            return Ok(None);
        }
        let results = frame.results as usize;
        if self.stack.len() < frame.operand_base + results {
            return Err(|pc| Trap::StackUnderflow { pc });
        }
        let tail = self.stack.split_off(self.stack.len() - results);
        self.stack.truncate(frame.locals_base);
        self.stack.extend(tail);
        Ok(Some(frame.return_pc))
    }

    fn local_slot(&self, idx: i64) -> usize {
        self.frame().locals_base + idx as usize
    }

    fn effective_addr(&mut self, pc: usize, offset: i64) -> Result<u64, Trap> {
        let base = self.pop(pc)? as u32 as u64;
        Ok(base + offset as u64)
    }

    fn check_bounds(&self, pc: usize, addr: u64, width: u64) -> Result<usize, Trap> {
        if addr + width > self.memory.len() as u64 {
            Err(Trap::OutOfBounds { pc, addr })
        } else {
            Ok(addr as usize)
        }
    }

    /// Unwinds to the `depth`-th enclosing block and returns the new pc.
    fn branch(&mut self, depth: usize) -> usize {
        let frame = self.frames.last_mut().expect("at least one frame");
        let target_idx = frame.ctrl.len() - 1 - depth;
        let target = frame.ctrl[target_idx];
        self.stack.truncate(target.height);
        let module = self.module;
        if target.op == Opcode::Loop {
            frame.ctrl.truncate(target_idx + 1);
            target.start + 1
        } else {
            frame.ctrl.truncate(target_idx);
            let end = module.if_end[target.start]
                .or(module.partner[target.start])
                .expect("validated block has an end");
            end + 1
        }
    }

    fn step(&mut self, pc: usize, ctx: &mut ExecContext) -> Result<Flow, Trap> {
        use Opcode::*;
        let module = self.module;
        let instr = &module.instructions[pc];
        let imm = instr.imms.first().copied().unwrap_or(0);

        macro_rules! bin32 {
            ($f:expr) => {{
                let (a, b) = self.pop2(pc)?;
                let f: fn(i32, i32) -> i32 = $f;
                self.push(f(a as i32, b as i32) as i64);
            }};
        }
        macro_rules! bin64 {
            ($f:expr) => {{
                let (a, b) = self.pop2(pc)?;
                let f: fn(i64, i64) -> i64 = $f;
                self.push(f(a, b));
            }};
        }
        macro_rules! cmp32 {
            ($f:expr) => {{
                let (a, b) = self.pop2(pc)?;
                let f: fn(i32, i32) -> bool = $f;
                self.push(f(a as i32, b as i32) as i64);
            }};
        }
        macro_rules! cmp64 {
            ($f:expr) => {{
                let (a, b) = self.pop2(pc)?;
                let f: fn(i64, i64) -> bool = $f;
                self.push(f(a, b) as i64);
            }};
        }

        match instr.op {
            Nop => {}
            Block | Loop => {
                let height = self.stack.len();
                self.frames.last_mut().unwrap().ctrl.push(Ctrl {
                    op: instr.op,
                    start: pc,
                    height,
                });
            }
            If => {
                let cond = self.pop(pc)?;
                let height = self.stack.len();
                if cond as i32 != 0 {
                    self.frames.last_mut().unwrap().ctrl.push(Ctrl {
                        op: If,
                        start: pc,
                        height,
                    });
                } else {
                    // Skip to the else-arm (keeping the block open) or past `end`.
                    let partner = module.partner[pc].expect("validated if has a partner");
                    if module.instructions[partner].op == Else {
                        self.frames.last_mut().unwrap().ctrl.push(Ctrl {
                            op: If,
                            start: pc,
                            height,
                        });
                    }
                    return Ok(Flow::Jump(partner + 1));
                }
            }
            Else => {
                // Reached only at the end of a taken then-arm.
                let frame = self.frames.last_mut().unwrap();
                let ctrl = frame.ctrl.pop().expect("validated else inside if");
                self.stack.truncate(ctrl.height);
                let end = module.partner[pc].expect("validated else has an end");
                return Ok(Flow::Jump(end + 1));
            }
            End => {
                self.frames.last_mut().unwrap().ctrl.pop();
            }
            Br => return Ok(Flow::Jump(self.branch(imm as usize))),
            BrIf => {
                let cond = self.pop(pc)?;
                if cond as i32 != 0 {
                    return Ok(Flow::Jump(self.branch(imm as usize)));
                }
            }
            Return => {
                return match self.do_return() {
                    Ok(Some(ret)) => Ok(Flow::Jump(ret)),
                    Ok(None) => Ok(Flow::Finish),
                    Err(t) => Err(t(pc)),
                };
            }
            Call => {
                if self.frames.len() >= MAX_CALL_DEPTH {
                    return Err(Trap::CallStackExhausted { pc });
                }
                let func = &module.functions[imm as usize];
                let params = func.params as usize;
                if self.stack.len() < self.frame().operand_base + params {
                    return Err(Trap::StackUnderflow { pc });
                }
                let locals_base = self.stack.len() - params;
                let locals = module.locals_count as usize;
                self.stack.resize(locals_base + locals, 0);
                self.frames.push(Frame {
                    return_pc: pc + 1,
                    region_end: func.end,
                    locals_base,
                    operand_base: locals_base + locals,
                    results: func.results,
                    ctrl: Vec::new(),
                });
                return Ok(Flow::Jump(func.start));
            }
            Drop => {
                self.pop(pc)?;
            }
            Select => {
                let c = self.pop(pc)?;
                let (a, b) = self.pop2(pc)?;
                self.push(if c as i32 != 0 { a } else { b });
            }
            LocalGet => {
                let slot = self.local_slot(imm);
                ctx.local_slot = Some(slot as u32);
                let v = self.stack[slot];
                self.push(v);
            }
            LocalSet => {
                let slot = self.local_slot(imm);
                ctx.local_slot = Some(slot as u32);
                let v = self.pop(pc)?;
                self.stack[slot] = v;
            }
            LocalTee => {
                let slot = self.local_slot(imm);
                ctx.local_slot = Some(slot as u32);
                let v = self.pop(pc)?;
                self.stack[slot] = v;
                self.push(v);
            }
            GlobalGet => {
                let v = self.globals[imm as usize];
                self.push(v);
            }
            GlobalSet => {
                let v = self.pop(pc)?;
                self.globals[imm as usize] = v;
            }
            I32Load | I64Load => {
                let addr = self.effective_addr(pc, imm)?;
                let width = if instr.op == I32Load { 4 } else { 8 };
                let at = self.check_bounds(pc, addr, width)?;
                ctx.mem_addr = Some(addr as u32);
                let v = if width == 4 {
                    i32::from_le_bytes(self.memory[at..at + 4].try_into().unwrap()) as i64
                } else {
                    i64::from_le_bytes(self.memory[at..at + 8].try_into().unwrap())
                };
                self.push(v);
            }
            I32Store | I64Store => {
                let v = self.pop(pc)?;
                let addr = self.effective_addr(pc, imm)?;
                let width = if instr.op == I32Store { 4 } else { 8 };
                let at = self.check_bounds(pc, addr, width)?;
                ctx.mem_addr = Some(addr as u32);
                if width == 4 {
                    self.memory[at..at + 4].copy_from_slice(&(v as i32).to_le_bytes());
                } else {
                    self.memory[at..at + 8].copy_from_slice(&v.to_le_bytes());
                }
            }
            MemoryGrow => {
                let delta = self.pop(pc)? as i32;
                let pages = self.memory.len() / WASM_PAGE_SIZE;
                let grown = pages as i64 + delta as i64;
                if delta < 0 || grown > MAX_MEMORY_PAGES as i64 {
                    self.push(-1);
                } else {
                    self.memory.resize(grown as usize * WASM_PAGE_SIZE, 0);
                    self.push(pages as i64);
                }
            }
            I32Const => self.push(imm as i32 as i64),
            I64Const => self.push(imm),
            I32Eqz => {
                let a = self.pop(pc)?;
                self.push((a as i32 == 0) as i64);
            }
            I64Eqz => {
                let a = self.pop(pc)?;
                self.push((a == 0) as i64);
            }
            I32Eq => cmp32!(|a, b| a == b),
            I32Ne => cmp32!(|a, b| a != b),
            I32LtS => cmp32!(|a, b| a < b),
            I32GtS => cmp32!(|a, b| a > b),
            I32LeS => cmp32!(|a, b| a <= b),
            I32GeS => cmp32!(|a, b| a >= b),
            I64Eq => cmp64!(|a, b| a == b),
            I64Ne => cmp64!(|a, b| a != b),
            I64LtS => cmp64!(|a, b| a < b),
            I64GtS => cmp64!(|a, b| a > b),
            I64LeS => cmp64!(|a, b| a <= b),
            I64GeS => cmp64!(|a, b| a >= b),
            I32Add => bin32!(|a, b| a.wrapping_add(b)),
            I32Sub => bin32!(|a, b| a.wrapping_sub(b)),
            I32Mul => bin32!(|a, b| a.wrapping_mul(b)),
            I32And => bin32!(|a, b| a & b),
            I32Or => bin32!(|a, b| a | b),
            I32Xor => bin32!(|a, b| a ^ b),
            I32Shl => bin32!(|a, b| a.wrapping_shl(b as u32 & 31)),
            I32ShrS => bin32!(|a, b| a.wrapping_shr(b as u32 & 31)),
            I64Add => bin64!(|a, b| a.wrapping_add(b)),
            I64Sub => bin64!(|a, b| a.wrapping_sub(b)),
            I64Mul => bin64!(|a, b| a.wrapping_mul(b)),
            I64And => bin64!(|a, b| a & b),
            I64Or => bin64!(|a, b| a | b),
            I64Xor => bin64!(|a, b| a ^ b),
            I64Shl => bin64!(|a, b| a.wrapping_shl(b as u32 & 63)),
            I64ShrS => bin64!(|a, b| a.wrapping_shr(b as u32 & 63)),
            I32DivS | I32RemS => {
                let (a, b) = self.pop2(pc)?;
                let (a, b) = (a as i32, b as i32);
                if b == 0 {
                    return Err(Trap::DivisionByZero { pc });
                }
                let v = if instr.op == I32DivS {
                    a.checked_div(b).ok_or(Trap::IntegerOverflow { pc })?
                } else {
                    a.wrapping_rem(b)
                };
                self.push(v as i64);
            }
            I64DivS | I64RemS => {
                let (a, b) = self.pop2(pc)?;
                if b == 0 {
                    return Err(Trap::DivisionByZero { pc });
                }
                let v = if instr.op == I64DivS {
                    a.checked_div(b).ok_or(Trap::IntegerOverflow { pc })?
                } else {
                    a.wrapping_rem(b)
                };
                self.push(v);
            }
        }
        Ok(Flow::Next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::parse_flat_module;
    use Opcode::*;

    fn run(src: &str) -> OpcodeTrace {
        execute(&parse_flat_module(src).unwrap(), 1_000_000)
    }

    #[test]
    fn straight_line_code() {
        let t = run("i32.const 5\ni32.const 7\ni32.add\ndrop");
        assert_eq!(t.executed, vec![I32Const, I32Const, I32Add, Drop]);
        assert_eq!(t.final_depth, 0);
        assert!(t.trap.is_none());
        assert!(!t.step_limit_hit);
    }

    #[test]
    fn counted_loop_runs_body_three_times() {
        // local0 = 3; loop { local0 -= 1; br_if 0 (local0 != 0) }
        let src = ".locals 1
i32.const 3
local.set 0
loop
local.get 0
i32.const 1
i32.sub
local.tee 0
br_if 0
end";
        let t = run(src);
        // Hand-stepped: 2 setup ops, then 3 iterations of
        // [loop, local.get, i32.const, i32.sub, local.tee, br_if] (loop re-entered
        // via the branch target `loop+1`, so `loop` itself runs once), then `end`.
        let mut expected = vec![I32Const, LocalSet, Loop];
        for _ in 0..3 {
            expected.extend([LocalGet, I32Const, I32Sub, LocalTee, BrIf]);
        }
        expected.push(End);
        assert_eq!(t.executed, expected);
        assert_eq!(t.final_depth, 0);
    }

    #[test]
    fn if_else_paths() {
        let t = run("i32.const 0\nif\ni32.const 1\ndrop\nelse\nnop\nend");
        assert_eq!(t.executed, vec![I32Const, If, Nop, End]);
        let t = run("i32.const 1\nif\nnop\nelse\ni32.const 1\ndrop\nend");
        assert_eq!(t.executed, vec![I32Const, If, Nop, Else]);
        let t = run("i32.const 0\nif\nnop\nend\nnop");
        assert_eq!(t.executed, vec![I32Const, If, Nop]);
    }

    #[test]
    fn call_and_return_values() {
        let src = ".locals 2
.globals 1
i32.const 6
call @sq
global.set 0
return
@sq: 1 1
local.get 0
local.get 0
i32.mul
";
        let module = parse_flat_module(src).unwrap();
        let t = execute(&module, 100);
        assert_eq!(
            t.executed,
            vec![I32Const, Call, LocalGet, LocalGet, I32Mul, GlobalSet, Return]
        );
        assert_eq!(t.final_depth, 0);
        // Callee locals sit above the caller's two locals and one operand.
        assert_eq!(t.contexts[2].local_slot, Some(2));
    }

    #[test]
    fn traps_end_trace_cleanly() {
        let t = run("i32.const 1\ni32.const 0\ni32.div_s\ndrop");
        assert_eq!(t.executed, vec![I32Const, I32Const]);
        assert_eq!(t.trap, Some(Trap::DivisionByZero { pc: 2 }));

        let t = run("i32.add");
        assert_eq!(t.trap, Some(Trap::StackUnderflow { pc: 0 }));
        assert!(t.executed.is_empty());

        let t = run(".memory 1\ni32.const 65534\ni32.load 0\ndrop");
        assert!(matches!(t.trap, Some(Trap::OutOfBounds { pc: 1, .. })));

        let t = run("i32.const -2147483648\ni32.const -1\ni32.div_s");
        assert_eq!(t.trap, Some(Trap::IntegerOverflow { pc: 2 }));

        let t = run("i32.const -2147483648\ni32.const -1\ni32.rem_s\ndrop");
        assert!(t.trap.is_none());
    }

    #[test]
    fn step_limit() {
        let t = execute(&parse_flat_module("loop\nbr 0\nend").unwrap(), 10);
        assert_eq!(t.executed.len(), 10);
        assert!(t.step_limit_hit);
    }

    #[test]
    fn memory_ops_and_grow() {
        let src = ".memory 1
i32.const 8
i64.const 1234567890123
i64.store 0
i32.const 8
i64.load 0
i64.const 1234567890123
i64.eq
drop
i32.const 2
memory.grow
drop";
        let t = run(src);
        assert!(t.trap.is_none());
        assert_eq!(t.contexts[2].mem_addr, Some(8));
        assert_eq!(t.contexts[4].mem_addr, Some(8));
        assert_eq!(t.final_depth, 0);
    }

    #[test]
    fn recursion_exhausts_call_stack() {
        let t = run("call @f\n@f:\ncall @f");
        assert!(matches!(t.trap, Some(Trap::CallStackExhausted { .. })));
    }

    #[test]
    fn deterministic() {
        let m = parse_flat_module(crate::workloads::AES_LIKE).unwrap();
        assert_eq!(execute(&m, 5000), execute(&m, 5000));
    }
}
