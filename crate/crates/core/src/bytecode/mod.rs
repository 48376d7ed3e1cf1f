// SPDX-License-Identifier: Apache-2.0

//! A Wasm-subset bytecode: opcodes, the flat module format and a reference
//! interpreter.

mod exec;
mod module;
mod opcode;

pub use exec::{execute, ExecContext, OpcodeTrace, Trap, MAX_CALL_DEPTH, WASM_PAGE_SIZE};
pub use module::{parse_flat_module, FlatModule, Function, Instr, ParseError, MAX_GLOBALS, MAX_LOCALS, MAX_MEMORY_PAGES};
pub use opcode::{Family, Label, Opcode, StackEffect, UnknownMnemonic};

/// Width-insensitive family of `op`.
pub fn opcode_family(op: Opcode) -> Family {
    op.family()
}
