// SPDX-License-Identifier: Apache-2.0

use std::fmt;
use std::str::FromStr;

/// Width-insensitive opcode group. `i32.add` and `i64.add` share the family `add`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Family(&'static str);

impl Family {
    pub fn name(self) -> &'static str {
        self.0
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0)
    }
}

/// Static operand-stack effect of an opcode, used to check handler templates.
///
/// Control opcodes whose effect depends on runtime state (`call`, `br`, ...)
/// report their fixed part only.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct StackEffect {
    pub pops: u8,
    pub pushes: u8,
    pub local_reads: u8,
    pub local_writes: u8,
}

macro_rules! opcodes {
    ($( $variant:ident = $code:literal, $mnem:literal, $family:literal, imm $imm:literal, ($pops:literal, $pushes:literal, $lr:literal, $lw:literal); )*) => {
        /// The supported subset of Wasm MVP opcodes.
        #[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        #[repr(u8)]
        pub enum Opcode {
            $( $variant = $code, )*
        }

        impl Opcode {
            /// Every supported opcode, in ascending code order.
            pub const ALL: &'static [Opcode] = &[ $( Opcode::$variant, )* ];

            pub fn code(self) -> u8 {
                self as u8
            }

            pub fn mnemonic(self) -> &'static str {
                match self { $( Opcode::$variant => $mnem, )* }
            }

            pub fn family(self) -> Family {
                match self { $( Opcode::$variant => Family($family), )* }
            }

            /// Number of immediates the flat text format requires.
            pub fn immediate_count(self) -> usize {
                match self { $( Opcode::$variant => $imm, )* }
            }

            pub fn stack_effect(self) -> StackEffect {
                match self {
                    $( Opcode::$variant => StackEffect {
                        pops: $pops, pushes: $pushes, local_reads: $lr, local_writes: $lw,
                    }, )*
                }
            }

            pub fn from_code(code: u8) -> Option<Opcode> {
                match code { $( $code => Some(Opcode::$variant), )* _ => None }
            }

            pub fn from_mnemonic(s: &str) -> Option<Opcode> {
                match s { $( $mnem => Some(Opcode::$variant), )* _ => None }
            }
        }
    };
}

opcodes! {
    Nop = 0x01, "nop", "nop", imm 0, (0, 0, 0, 0);
    Block = 0x02, "block", "block", imm 0, (0, 0, 0, 0);
    Loop = 0x03, "loop", "loop", imm 0, (0, 0, 0, 0);
    If = 0x04, "if", "if", imm 0, (1, 0, 0, 0);
    Else = 0x05, "else", "else", imm 0, (0, 0, 0, 0);
    End = 0x0b, "end", "end", imm 0, (0, 0, 0, 0);
    Br = 0x0c, "br", "br", imm 1, (0, 0, 0, 0);
    BrIf = 0x0d, "br_if", "br_if", imm 1, (1, 0, 0, 0);
    Return = 0x0f, "return", "return", imm 0, (0, 0, 0, 0);
    Call = 0x10, "call", "call", imm 1, (0, 0, 0, 0);
    Drop = 0x1a, "drop", "drop", imm 0, (1, 0, 0, 0);
    Select = 0x1b, "select", "select", imm 0, (3, 1, 0, 0);
    LocalGet = 0x20, "local.get", "local.get", imm 1, (0, 1, 1, 0);
    LocalSet = 0x21, "local.set", "local.set", imm 1, (1, 0, 0, 1);
    LocalTee = 0x22, "local.tee", "local.tee", imm 1, (1, 1, 0, 1);
    GlobalGet = 0x23, "global.get", "global.get", imm 1, (0, 1, 0, 0);
    GlobalSet = 0x24, "global.set", "global.set", imm 1, (1, 0, 0, 0);
    I32Load = 0x28, "i32.load", "load", imm 1, (1, 1, 0, 0);
    I64Load = 0x29, "i64.load", "load", imm 1, (1, 1, 0, 0);
    I32Store = 0x36, "i32.store", "store", imm 1, (2, 0, 0, 0);
    I64Store = 0x37, "i64.store", "store", imm 1, (2, 0, 0, 0);
    MemoryGrow = 0x40, "memory.grow", "memory.grow", imm 0, (1, 1, 0, 0);
    I32Const = 0x41, "i32.const", "const", imm 1, (0, 1, 0, 0);
    I64Const = 0x42, "i64.const", "const", imm 1, (0, 1, 0, 0);
    I32Eqz = 0x45, "i32.eqz", "eqz", imm 0, (1, 1, 0, 0);
    I32Eq = 0x46, "i32.eq", "eq", imm 0, (2, 1, 0, 0);
    I32Ne = 0x47, "i32.ne", "ne", imm 0, (2, 1, 0, 0);
    I32LtS = 0x48, "i32.lt_s", "lt_s", imm 0, (2, 1, 0, 0);
    I32GtS = 0x4a, "i32.gt_s", "gt_s", imm 0, (2, 1, 0, 0);
    I32LeS = 0x4c, "i32.le_s", "le_s", imm 0, (2, 1, 0, 0);
    I32GeS = 0x4e, "i32.ge_s", "ge_s", imm 0, (2, 1, 0, 0);
    I64Eqz = 0x50, "i64.eqz", "eqz", imm 0, (1, 1, 0, 0);
    I64Eq = 0x51, "i64.eq", "eq", imm 0, (2, 1, 0, 0);
    I64Ne = 0x52, "i64.ne", "ne", imm 0, (2, 1, 0, 0);
    I64LtS = 0x53, "i64.lt_s", "lt_s", imm 0, (2, 1, 0, 0);
    I64GtS = 0x55, "i64.gt_s", "gt_s", imm 0, (2, 1, 0, 0);
    I64LeS = 0x57, "i64.le_s", "le_s", imm 0, (2, 1, 0, 0);
    I64GeS = 0x59, "i64.ge_s", "ge_s", imm 0, (2, 1, 0, 0);
    I32Add = 0x6a, "i32.add", "add", imm 0, (2, 1, 0, 0);
    I32Sub = 0x6b, "i32.sub", "sub", imm 0, (2, 1, 0, 0);
    I32Mul = 0x6c, "i32.mul", "mul", imm 0, (2, 1, 0, 0);
    I32DivS = 0x6d, "i32.div_s", "div_s", imm 0, (2, 1, 0, 0);
    I32RemS = 0x6f, "i32.rem_s", "rem_s", imm 0, (2, 1, 0, 0);
    I32And = 0x71, "i32.and", "and", imm 0, (2, 1, 0, 0);
    I32Or = 0x72, "i32.or", "or", imm 0, (2, 1, 0, 0);
    I32Xor = 0x73, "i32.xor", "xor", imm 0, (2, 1, 0, 0);
    I32Shl = 0x74, "i32.shl", "shl", imm 0, (2, 1, 0, 0);
    I32ShrS = 0x75, "i32.shr_s", "shr_s", imm 0, (2, 1, 0, 0);
    I64Add = 0x7c, "i64.add", "add", imm 0, (2, 1, 0, 0);
    I64Sub = 0x7d, "i64.sub", "sub", imm 0, (2, 1, 0, 0);
    I64Mul = 0x7e, "i64.mul", "mul", imm 0, (2, 1, 0, 0);
    I64DivS = 0x7f, "i64.div_s", "div_s", imm 0, (2, 1, 0, 0);
    I64RemS = 0x81, "i64.rem_s", "rem_s", imm 0, (2, 1, 0, 0);
    I64And = 0x83, "i64.and", "and", imm 0, (2, 1, 0, 0);
    I64Or = 0x84, "i64.or", "or", imm 0, (2, 1, 0, 0);
    I64Xor = 0x85, "i64.xor", "xor", imm 0, (2, 1, 0, 0);
    I64Shl = 0x86, "i64.shl", "shl", imm 0, (2, 1, 0, 0);
    I64ShrS = 0x87, "i64.shr_s", "shr_s", imm 0, (2, 1, 0, 0);
}

impl Opcode {
    /// Opcodes that open a structured-control block.
    pub fn opens_block(self) -> bool {
        matches!(self, Opcode::Block | Opcode::Loop | Opcode::If)
    }

    /// True for opcodes operating on 64-bit values.
    pub fn is_wide(self) -> bool {
        self.mnemonic().starts_with("i64.")
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown mnemonic `{0}`")]
pub struct UnknownMnemonic(pub String);

impl FromStr for Opcode {
    type Err = UnknownMnemonic;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Opcode::from_mnemonic(s).ok_or_else(|| UnknownMnemonic(s.to_string()))
    }
}

/// The label of a trace region: either the opcode it dispatches or `NULL`
/// for continuation regions that belong to the preceding opcode.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Op(Opcode),
    Null,
}

impl Label {
    pub const NULL_NAME: &'static str = "NULL";

    pub fn is_null(self) -> bool {
        matches!(self, Label::Null)
    }

    pub fn opcode(self) -> Option<Opcode> {
        match self {
            Label::Op(op) => Some(op),
            Label::Null => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Op(op) => op.mnemonic(),
            Label::Null => Self::NULL_NAME,
        }
    }

    /// Family name used for width-insensitive comparison; `NULL` is its own family.
    pub fn family_name(self) -> &'static str {
        match self {
            Label::Op(op) => op.family().name(),
            Label::Null => Self::NULL_NAME,
        }
    }
}

impl From<Opcode> for Label {
    fn from(op: Opcode) -> Self {
        Label::Op(op)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = UnknownMnemonic;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == Self::NULL_NAME {
            Ok(Label::Null)
        } else {
            s.parse().map(Label::Op)
        }
    }
}
