// SPDX-License-Identifier: Apache-2.0

//! Line-oriented flat module format.
//!
//! ```text
//! .locals 4          # locals per frame
//! .globals 1
//! .memory 1          # initial linear-memory pages (64 KiB each)
//! i32.const 2
//! call @square
//! drop
//! return
//! @square: 1 1       # label, parameter count, result count
//! local.get 0
//! local.get 0
//! i32.mul
//! return
//! ```
//!
//! Everything before the first label is the entry region. Each label opens a
//! function region that runs up to the next label or end of file.

use std::fmt::Write as _;

use super::opcode::Opcode;

/// Upper bound on locals per frame accepted by the parser.
pub const MAX_LOCALS: u32 = 1024;
pub const MAX_GLOBALS: u32 = 1024;
pub const MAX_MEMORY_PAGES: u32 = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instr {
    pub op: Opcode,
    /// For `call` the single immediate is the callee's function index.
    pub imms: Vec<i64>,
}

impl Instr {
    pub fn new(op: Opcode, imms: Vec<i64>) -> Self {
        Instr { op, imms }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    /// Index of the first instruction of the function body.
    pub start: usize,
    /// One past the last instruction.
    pub end: usize,
    pub params: u32,
    pub results: u32,
}

/// A validated flat module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatModule {
    pub instructions: Vec<Instr>,
    pub locals_count: u32,
    pub globals_count: u32,
    pub initial_memory_pages: u32,
    pub functions: Vec<Function>,
    /// For every structured-control instruction, the index of its partner:
    /// `block`/`loop` → `end`, `if` → `else` or `end`, `else` → `end`.
    pub(crate) partner: Vec<Option<usize>>,
    /// For `if` with an `else`, the matching `end`.
    pub(crate) if_end: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: `{mnemonic}` takes {expected} immediate(s), found {found}")]
    ImmediateArity {
        line: usize,
        mnemonic: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: unbalanced control structure: {msg}")]
    Unbalanced { line: usize, msg: String },
    #[error("line {line}: branch depth {depth} exceeds nesting depth {nesting}")]
    BranchDepth {
        line: usize,
        depth: i64,
        nesting: usize,
    },
    #[error("line {line}: index {index} out of range for {what} (limit {limit})")]
    IndexOutOfRange {
        line: usize,
        what: &'static str,
        index: i64,
        limit: u32,
    },
    #[error("line {line}: unknown function label `@{name}`")]
    UnknownLabel { line: usize, name: String },
    #[error("line {line}: duplicate function label `@{name}`")]
    DuplicateLabel { line: usize, name: String },
}

impl FlatModule {
    /// The entry region, `[0, start of first function)`.
    pub fn entry_end(&self) -> usize {
        self.functions
            .first()
            .map_or(self.instructions.len(), |f| f.start)
    }

    pub fn function_by_name(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    /// Renders the module back into the text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, ".locals {}", self.locals_count);
        let _ = writeln!(out, ".globals {}", self.globals_count);
        let _ = writeln!(out, ".memory {}", self.initial_memory_pages);
        for (idx, instr) in self.instructions.iter().enumerate() {
            for f in self.functions.iter().filter(|f| f.start == idx) {
                let _ = writeln!(out, "@{}: {} {}", f.name, f.params, f.results);
            }
            out.push_str(instr.op.mnemonic());
            if instr.op == Opcode::Call {
                let _ = write!(out, " @{}", self.functions[instr.imms[0] as usize].name);
            } else {
                for imm in &instr.imms {
                    let _ = write!(out, " {imm}");
                }
            }
            out.push('\n');
        }
        // Empty trailing functions.
        for f in self
            .functions
            .iter()
            .filter(|f| f.start == self.instructions.len())
        {
            let _ = writeln!(out, "@{}: {} {}", f.name, f.params, f.results);
        }
        out
    }

    /// Set of distinct opcodes appearing in the module source.
    pub fn static_opcodes(&self) -> std::collections::BTreeSet<Opcode> {
        self.instructions.iter().map(|i| i.op).collect()
    }
}

struct RawFunction {
    name: String,
    start: usize,
    params: u32,
    results: u32,
    line: usize,
}

/// Parses and validates a module in the flat text format.
pub fn parse_flat_module(text: &str) -> Result<FlatModule, ParseError> {
    let mut instructions = Vec::new();
    let mut lines = Vec::new();
    let mut call_targets: Vec<(usize, String)> = Vec::new();
    let mut raw_functions: Vec<RawFunction> = Vec::new();
    let mut locals_count = 0u32;
    let mut globals_count = 0u32;
    let mut initial_memory_pages = 0u32;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let head = tokens.next().expect("non-empty line has a token");

        if let Some(directive) = head.strip_prefix('.') {
            let value = parse_directive_value(line, directive, tokens)?;
            match directive {
                "locals" => locals_count = bounded(line, "locals", value, MAX_LOCALS)?,
                "globals" => globals_count = bounded(line, "globals", value, MAX_GLOBALS)?,
                "memory" => {
                    initial_memory_pages = bounded(line, "memory pages", value, MAX_MEMORY_PAGES)?
                }
                other => {
                    return Err(ParseError::Syntax {
                        line,
                        msg: format!("unknown directive `.{other}`"),
                    })
                }
            }
            continue;
        }

        if let Some(label) = head.strip_prefix('@') {
            let name = label.strip_suffix(':').ok_or_else(|| ParseError::Syntax {
                line,
                msg: "label definitions end with `:`".into(),
            })?;
            check_label_name(line, name)?;
            if raw_functions.iter().any(|f| f.name == name) {
                return Err(ParseError::DuplicateLabel {
                    line,
                    name: name.to_string(),
                });
            }
            let rest: Vec<&str> = tokens.collect();
            let (params, results) = match rest.as_slice() {
                [] => (0, 0),
                [p, r] => (parse_count(line, p)?, parse_count(line, r)?),
                _ => {
                    return Err(ParseError::Syntax {
                        line,
                        msg: "label takes either no counts or `<params> <results>`".into(),
                    })
                }
            };
            raw_functions.push(RawFunction {
                name: name.to_string(),
                start: instructions.len(),
                params,
                results,
                line,
            });
            continue;
        }

        let op = Opcode::from_mnemonic(head).ok_or_else(|| ParseError::UnknownMnemonic {
            line,
            mnemonic: head.to_string(),
        })?;
        let args: Vec<&str> = tokens.collect();
        if args.len() != op.immediate_count() {
            return Err(ParseError::ImmediateArity {
                line,
                mnemonic: op.mnemonic(),
                expected: op.immediate_count(),
                found: args.len(),
            });
        }
        let imms = if op == Opcode::Call {
            let target = args[0].strip_prefix('@').ok_or_else(|| ParseError::Syntax {
                line,
                msg: "call takes a `@label` immediate".into(),
            })?;
            call_targets.push((instructions.len(), target.to_string()));
            vec![0]
        } else {
            args.iter()
                .map(|a| {
                    a.parse::<i64>().map_err(|_| ParseError::Syntax {
                        line,
                        msg: format!("invalid integer immediate `{a}`"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?
        };
        instructions.push(Instr { op, imms });
        lines.push(line);
    }

    let mut functions = Vec::with_capacity(raw_functions.len());
    for (i, f) in raw_functions.iter().enumerate() {
        let end = raw_functions
            .get(i + 1)
            .map_or(instructions.len(), |next| next.start);
        if f.params > locals_count {
            return Err(ParseError::IndexOutOfRange {
                line: f.line,
                what: "function parameters",
                index: f.params as i64,
                limit: locals_count,
            });
        }
        functions.push(Function {
            name: f.name.clone(),
            start: f.start,
            end,
            params: f.params,
            results: f.results,
        });
    }

    for (idx, name) in call_targets {
        let target = functions
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| ParseError::UnknownLabel {
                line: lines[idx],
                name,
            })?;
        instructions[idx].imms[0] = target as i64;
    }

    let mut module = FlatModule {
        instructions,
        locals_count,
        globals_count,
        initial_memory_pages,
        functions,
        partner: Vec::new(),
        if_end: Vec::new(),
    };
    validate(&mut module, &lines)?;
    Ok(module)
}

fn check_label_name(line: usize, name: &str) -> Result<(), ParseError> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(ParseError::Syntax {
            line,
            msg: format!("invalid label name `{name}`"),
        })
    }
}

fn parse_count(line: usize, tok: &str) -> Result<u32, ParseError> {
    tok.parse::<u32>().map_err(|_| ParseError::Syntax {
        line,
        msg: format!("expected a non-negative count, found `{tok}`"),
    })
}

fn parse_directive_value<'a>(
    line: usize,
    directive: &str,
    mut tokens: impl Iterator<Item = &'a str>,
) -> Result<i64, ParseError> {
    let value = tokens.next().ok_or_else(|| ParseError::Syntax {
        line,
        msg: format!("`.{directive}` needs a value"),
    })?;
    if tokens.next().is_some() {
        return Err(ParseError::Syntax {
            line,
            msg: format!("`.{directive}` takes a single value"),
        });
    }
    value.parse::<i64>().map_err(|_| ParseError::Syntax {
        line,
        msg: format!("invalid value `{value}`"),
    })
}

fn bounded(line: usize, what: &'static str, value: i64, limit: u32) -> Result<u32, ParseError> {
    if value < 0 || value > limit as i64 {
        return Err(ParseError::IndexOutOfRange {
            line,
            what,
            index: value,
            limit,
        });
    }
    Ok(value as u32)
}

fn validate(module: &mut FlatModule, lines: &[usize]) -> Result<(), ParseError> {
    let n = module.instructions.len();
    let mut partner = vec![None; n];
    let mut if_end = vec![None; n];

    let mut regions = vec![(0, module.entry_end())];
    regions.extend(module.functions.iter().map(|f| (f.start, f.end)));

    for (start, end) in regions {
        // (opener index, else index)
        let mut open: Vec<(usize, Option<usize>)> = Vec::new();
        for (idx, (instr, &line)) in module.instructions[start..end].iter().zip(&lines[start..end]).enumerate() {
            let idx = start + idx;
            match instr.op {
                Opcode::Block | Opcode::Loop | Opcode::If => open.push((idx, None)),
                Opcode::Else => {
                    let top = open.last_mut().ok_or_else(|| ParseError::Unbalanced {
                        line,
                        msg: "`else` outside of `if`".into(),
                    })?;
                    if module.instructions[top.0].op != Opcode::If || top.1.is_some() {
                        return Err(ParseError::Unbalanced {
                            line,
                            msg: "`else` does not follow an open `if`".into(),
                        });
                    }
                    top.1 = Some(idx);
                }
                Opcode::End => {
                    let (opener, els) = open.pop().ok_or_else(|| ParseError::Unbalanced {
                        line,
                        msg: "`end` without an open block".into(),
                    })?;
                    match els {
                        Some(e) => {
                            partner[opener] = Some(e);
                            partner[e] = Some(idx);
                            if_end[opener] = Some(idx);
                        }
                        None => partner[opener] = Some(idx),
                    }
                }
                Opcode::Br | Opcode::BrIf => {
                    let depth = instr.imms[0];
                    if depth < 0 || depth as usize >= open.len() {
                        return Err(ParseError::BranchDepth {
                            line,
                            depth,
                            nesting: open.len(),
                        });
                    }
                }
                Opcode::LocalGet | Opcode::LocalSet | Opcode::LocalTee => {
                    check_index(line, "locals", instr.imms[0], module.locals_count)?
                }
                Opcode::GlobalGet | Opcode::GlobalSet => {
                    check_index(line, "globals", instr.imms[0], module.globals_count)?
                }
                Opcode::I32Load | Opcode::I64Load | Opcode::I32Store | Opcode::I64Store => {
                    let offset = instr.imms[0];
                    if !(0..=u32::MAX as i64).contains(&offset) {
                        return Err(ParseError::Syntax {
                            line,
                            msg: format!("memory offset {offset} out of range"),
                        });
                    }
                }
                Opcode::I32Const => {
                    let v = instr.imms[0];
                    if v < i32::MIN as i64 || v > u32::MAX as i64 {
                        return Err(ParseError::Syntax {
                            line,
                            msg: format!("i32 constant {v} out of range"),
                        });
                    }
                }
                _ => {}
            }
        }
        if let Some(&(opener, _)) = open.last() {
            return Err(ParseError::Unbalanced {
                line: lines[opener],
                msg: format!("`{}` is never closed", module.instructions[opener].op),
            });
        }
    }

    module.partner = partner;
    module.if_end = if_end;
    Ok(())
}

fn check_index(line: usize, what: &'static str, index: i64, limit: u32) -> Result<(), ParseError> {
    if index < 0 || index >= limit as i64 {
        Err(ParseError::IndexOutOfRange {
            line,
            what,
            index,
            limit,
        })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_line() {
        let m = parse_flat_module("i32.const 2\ni32.const 3\ni32.add\ndrop").unwrap();
        assert_eq!(m.instructions.len(), 4);
        let imms: Vec<_> = m.instructions.iter().map(|i| i.imms.clone()).collect();
        assert_eq!(imms, vec![vec![2], vec![3], vec![], vec![]]);
    }

    #[test]
    fn minimal_block() {
        let m = parse_flat_module("block\nend").unwrap();
        assert_eq!(m.instructions.len(), 2);
        assert_eq!(m.partner[0], Some(1));
    }

    #[test]
    fn branch_depth_exceeds_nesting() {
        let err = parse_flat_module("br 1").unwrap_err();
        assert!(matches!(err, ParseError::BranchDepth { line: 1, depth: 1, nesting: 0 }));
        let err = parse_flat_module("block\nbr_if 1\nend").unwrap_err();
        assert!(matches!(err, ParseError::BranchDepth { line: 2, .. }));
    }

    #[test]
    fn reports_line_numbers() {
        let err = parse_flat_module("# header\n\ni32.const 1\ni32.frob\n").unwrap_err();
        assert_eq!(
            err,
            ParseError::UnknownMnemonic {
                line: 4,
                mnemonic: "i32.frob".into()
            }
        );
        let err = parse_flat_module("i32.const\n").unwrap_err();
        assert!(matches!(err, ParseError::ImmediateArity { line: 1, expected: 1, found: 0, .. }));
        let err = parse_flat_module("i32.add 4\n").unwrap_err();
        assert!(matches!(err, ParseError::ImmediateArity { expected: 0, found: 1, .. }));
        let err = parse_flat_module("i32.const x\n").unwrap_err();
        assert!(matches!(err, ParseError::Syntax { line: 1, .. }));
    }

    #[test]
    fn unbalanced_control() {
        assert!(matches!(
            parse_flat_module("block\nloop\nend").unwrap_err(),
            ParseError::Unbalanced { line: 1, .. }
        ));
        assert!(matches!(
            parse_flat_module("end").unwrap_err(),
            ParseError::Unbalanced { line: 1, .. }
        ));
        assert!(matches!(
            parse_flat_module("block\nelse\nend").unwrap_err(),
            ParseError::Unbalanced { line: 2, .. }
        ));
        // Blocks may not straddle a function boundary.
        assert!(matches!(
            parse_flat_module("block\n@f:\nend").unwrap_err(),
            ParseError::Unbalanced { .. }
        ));
    }

    #[test]
    fn if_else_partners() {
        let m = parse_flat_module("i32.const 1\nif\nnop\nelse\nnop\nend").unwrap();
        assert_eq!(m.partner[1], Some(3));
        assert_eq!(m.partner[3], Some(5));
        assert_eq!(m.if_end[1], Some(5));
    }

    #[test]
    fn labels_and_calls() {
        let src = ".locals 2\ni32.const 4\ncall @sq\ndrop\nreturn\n@sq: 1 1\nlocal.get 0\nlocal.get 0\ni32.mul\n";
        let m = parse_flat_module(src).unwrap();
        assert_eq!(m.functions.len(), 1);
        assert_eq!(m.functions[0].start, 4);
        assert_eq!(m.functions[0].end, 7);
        assert_eq!(m.instructions[1].imms, vec![0]);
        assert_eq!(m.entry_end(), 4);
        assert!(matches!(
            parse_flat_module("call @nowhere").unwrap_err(),
            ParseError::UnknownLabel { .. }
        ));
        assert!(matches!(
            parse_flat_module("@a:\n@a:\n").unwrap_err(),
            ParseError::DuplicateLabel { line: 2, .. }
        ));
    }

    #[test]
    fn local_and_global_indices_checked() {
        assert!(matches!(
            parse_flat_module(".locals 1\nlocal.get 1").unwrap_err(),
            ParseError::IndexOutOfRange { what: "locals", .. }
        ));
        assert!(parse_flat_module(".globals 2\nglobal.get 1\ndrop").is_ok());
    }

    #[test]
    fn text_round_trip() {
        let src = ".locals 3\n.globals 1\n.memory 1\ni32.const -7\nblock\nloop\nbr 1\nend\nend\ncall @f\nreturn\n@f: 0 0\nnop\n@g:\n";
        let m = parse_flat_module(src).unwrap();
        let again = parse_flat_module(&m.to_text()).unwrap();
        assert_eq!(m, again);
    }
}
