// SPDX-License-Identifier: Apache-2.0

//! Built-in flat modules, selectable by name.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytecode::{execute, parse_flat_module, Opcode};

/// A block-cipher-shaped benchmark: S-box construction, key expansion with an
/// i64 generator, then SubBytes / ShiftRows / MixColumns / AddRoundKey over
/// ten rounds for each block.
pub const AES_LIKE: &str = r#"# AES-shaped workload
.locals 8
.globals 2
.memory 1
# state 0..64, scratch 64..128, round keys 256.., S-box 1024..2048
i32.const 1
memory.grow
drop
i32.const 0
local.set 0
block
  loop
    local.get 0
    i32.const 256
    i32.ge_s
    br_if 1
    local.get 0
    i32.const 2
    i32.shl
    i32.const 1024
    i32.add
    local.get 0
    i32.const 7
    i32.mul
    local.get 0
    i32.const 1
    i32.shl
    i32.xor
    i32.const 99
    i32.xor
    i32.const 255
    i32.and
    i32.store 0
    local.get 0
    i32.const 1
    i32.add
    local.set 0
    br 0
  end
end
# key expansion
i64.const 2463534242
local.set 5
i32.const 0
local.set 0
loop
  local.get 0
  i32.const 2
  i32.shl
  local.get 5
  i64.const 1103515245
  i64.mul
  i64.const 12345
  i64.add
  i64.const 2147483648
  i64.rem_s
  local.tee 5
  i64.const 16
  i64.shr_s
  i64.const 255
  i64.and
  i64.store 256
  local.get 0
  i32.const 1
  i32.add
  local.tee 0
  i32.const 176
  i32.lt_s
  br_if 0
end
i32.const 0
global.set 0
block
  loop
    global.get 0
    i32.const 1    # block count
    i32.ge_s
    br_if 1
    i32.const 0
    local.set 0
    loop
      local.get 0
      i32.const 2
      i32.shl
      local.get 0
      i32.const 17
      i32.mul
      global.get 0
      i32.add
      local.get 0
      i32.const 1
      i32.and
      i32.eqz
      if
        i32.const 90
        local.set 3
      else
        i32.const 165
        local.set 3
      end
      local.get 3
      i32.xor
      i32.const 255
      i32.and
      i32.store 0
      local.get 0
      i32.const 1
      i32.add
      local.tee 0
      i32.const 16
      i32.lt_s
      br_if 0
    end
    i32.const 0
    call @add_round_key
    i32.const 1
    local.set 4
    loop
      call @sub_bytes
      call @shift_rows
      local.get 4
      i32.const 10
      i32.ne
      if
        call @mix_columns
      end
      local.get 4
      call @add_round_key
      local.get 4
      i32.const 1
      i32.add
      local.tee 4
      i32.const 10
      i32.le_s
      br_if 0
    end
    # fold the block into a checksum
    global.get 1
    i32.const 0
    i32.load 0
    i32.const 0
    i32.load 4
    i32.const 0
    i32.load 8
    i32.const 0
    i32.load 12
    i32.gt_s
    select
    i32.or
    i32.const 1
    i32.sub
    global.set 1
    local.get 5
    i64.const 0
    i64.gt_s
    drop
    nop
    global.get 0
    i32.const 1
    i32.add
    global.set 0
    br 0
  end
end
global.get 1
i32.const 0
i32.eq
drop

@xtime: 1 1
local.get 0
i32.const 1
i32.shl
local.get 0
i32.const 7
i32.shr_s
i32.const 1
i32.and
i32.const 27
i32.mul
i32.xor
i32.const 255
i32.and
return

@sub_bytes: 0 0
i32.const 0
local.set 0
loop
  local.get 0
  i32.const 2
  i32.shl
  local.tee 1
  local.get 1
  i32.load 0
  i32.const 2
  i32.shl
  i32.load 1024
  i32.store 0
  local.get 0
  i32.const 1
  i32.add
  local.tee 0
  i32.const 16
  i32.lt_s
  br_if 0
end

@shift_rows: 0 0
i32.const 0
local.set 0
loop
  local.get 0
  i32.const 2
  i32.shl
  i32.const 64
  i32.add
  local.get 0
  i32.const 4
  i32.div_s
  local.get 0
  i32.const 4
  i32.rem_s
  local.tee 2
  i32.add
  i32.const 4
  i32.rem_s
  i32.const 4
  i32.mul
  local.get 2
  i32.add
  i32.const 2
  i32.shl
  i32.load 0
  i32.store 0
  local.get 0
  i32.const 1
  i32.add
  local.tee 0
  i32.const 16
  i32.ne
  br_if 0
end
i32.const 0
local.set 0
loop
  local.get 0
  local.get 0
  i64.load 64
  i64.store 0
  local.get 0
  i32.const 8
  i32.add
  local.tee 0
  i32.const 64
  i32.lt_s
  br_if 0
end

@mix_columns: 0 0
i32.const 0
local.set 0
loop
  local.get 0
  i32.const 4
  i32.shl
  local.set 2
  i32.const 0
  local.set 1
  loop
    local.get 1
    i32.const 2
    i32.shl
    i32.const 64
    i32.add
    local.get 2
    local.get 1
    i32.const 2
    i32.shl
    i32.add
    i32.load 0
    call @xtime
    local.get 2
    local.get 1
    i32.const 1
    i32.add
    i32.const 3
    i32.and
    i32.const 2
    i32.shl
    i32.add
    i32.load 0
    local.tee 3
    call @xtime
    i32.xor
    local.get 3
    i32.xor
    local.get 2
    local.get 1
    i32.const 2
    i32.add
    i32.const 3
    i32.and
    i32.const 2
    i32.shl
    i32.add
    i32.load 0
    i32.xor
    local.get 2
    local.get 1
    i32.const 3
    i32.add
    i32.const 3
    i32.and
    i32.const 2
    i32.shl
    i32.add
    i32.load 0
    i32.xor
    i32.store 0
    local.get 1
    i32.const 1
    i32.add
    local.tee 1
    i32.const 4
    i32.lt_s
    br_if 0
  end
  local.get 2
  i32.const 0
  i64.load 64
  i64.store 0
  local.get 2
  i32.const 0
  i64.load 72
  i64.store 8
  local.get 0
  i32.const 1
  i32.add
  local.tee 0
  i32.const 4
  i32.lt_s
  br_if 0
end

@add_round_key: 1 0
i32.const 0
local.set 1
block
  loop
    local.get 1
    i32.const 16
    i32.ge_s
    br_if 1
    local.get 1
    i32.const 2
    i32.shl
    local.tee 2
    local.get 2
    i32.load 0
    local.get 0
    i32.const 64
    i32.mul
    local.get 2
    i32.add
    i32.load 256
    i32.xor
    i32.store 0
    local.get 1
    i32.const 1
    i32.add
    local.set 1
    br 0
  end
end
"#;

/// [`AES_LIKE`] processing `blocks` blocks.
pub fn aes_like(blocks: u32) -> String {
    AES_LIKE.replacen("i32.const 1    # block count", &format!("i32.const {blocks}    # block count"), 1)
}

/// Trial-division prime counter over `[2, limit)`. Uses 17 distinct opcodes,
/// all of which execute.
pub fn primes(limit: u32) -> String {
    format!(
        r#"# count primes below {limit}
.locals 4
nop
i32.const 2
local.set 0
loop
  i32.const 1
  local.set 3
  i32.const 2
  local.set 1
  block
    loop
      local.get 1
      local.get 1
      i32.mul
      local.get 0
      i32.gt_s
      br_if 1
      local.get 0
      local.get 1
      i32.rem_s
      i32.eqz
      if
        i32.const 0
        local.set 3
      end
      local.get 1
      i32.const 1
      i32.add
      local.set 1
      local.get 3
      br_if 0
    end
  end
  local.get 2
  local.get 3
  i32.add
  local.set 2
  local.get 0
  i32.const 1
  i32.add
  local.tee 0
  i32.const {limit}
  i32.lt_s
  br_if 0
end
local.get 2
drop
"#
    )
}

const I32_BINOPS: &[&str] = &[
    "i32.add", "i32.sub", "i32.mul", "i32.div_s", "i32.rem_s", "i32.and", "i32.or", "i32.xor", "i32.shl", "i32.shr_s",
    "i32.eq", "i32.ne", "i32.lt_s", "i32.gt_s", "i32.le_s", "i32.ge_s",
];
const I64_BINOPS: &[&str] = &[
    "i64.add", "i64.sub", "i64.mul", "i64.div_s", "i64.rem_s", "i64.and", "i64.or", "i64.xor", "i64.shl", "i64.shr_s",
    "i64.eq", "i64.ne", "i64.lt_s", "i64.gt_s", "i64.le_s", "i64.ge_s",
];

/// One self-contained, stack-neutral code fragment exercising a few opcodes.
fn snippet(kind: usize, a: i64, b: i64, out: &mut String) {
    // Divisors and shift counts stay positive and small; addresses stay in page 0.
    let b = b.rem_euclid(29) + 1;
    let addr = (a.rem_euclid(1000)) * 8;
    let _ = match kind {
        0 => writeln!(out, "i32.const {a}\ni32.const {b}\n{}\ndrop", I32_BINOPS[(a.unsigned_abs() as usize) % I32_BINOPS.len()]),
        1 => writeln!(out, "i64.const {a}\ni64.const {b}\n{}\ndrop", I64_BINOPS[(a.unsigned_abs() as usize) % I64_BINOPS.len()]),
        2 => writeln!(out, "i32.const {a}\ni32.eqz\ndrop\ni64.const {b}\ni64.eqz\ndrop"),
        3 => writeln!(out, "i32.const {a}\nlocal.set 1\nlocal.get 1\nlocal.tee 2\nlocal.get 2\ni32.add\nlocal.set 3"),
        4 => writeln!(out, "i32.const {a}\nglobal.set 0\nglobal.get 0\ndrop"),
        5 => writeln!(
            out,
            "i32.const {addr}\ni32.const {a}\ni32.store 0\ni32.const {addr}\ni32.load 0\ndrop\n\
             i32.const {addr}\ni64.const {b}\ni64.store 8\ni32.const {addr}\ni64.load 8\ndrop"
        ),
        6 => writeln!(out, "i32.const {a}\ni32.const {b}\ni32.const {}\nselect\ndrop", a & 1),
        7 => writeln!(out, "block\nloop\ni32.const 0\nbr_if 0\nnop\nend\nend"),
        8 => writeln!(out, "block\ni32.const {a}\ndrop\nbr 0\nend"),
        9 => writeln!(out, "i32.const {}\nif\nnop\nelse\nnop\nend\ni32.const {}\nif\nnop\nelse\nnop\nend", a & 1, 1 - (a & 1)),
        10 => writeln!(out, "i32.const {b}\ncall @leaf\ndrop"),
        11 => writeln!(out, "i32.const 0\nmemory.grow\ndrop"),
        _ => writeln!(out, "nop"),
    };
}

const SNIPPET_KINDS: usize = 12;

const LEAF: &str = "@leaf: 1 1\nlocal.get 0\ni32.const 1\ni32.add\nreturn\n";

/// Profiling module: every supported opcode, each binary operator with
/// several operand values, at the entry level and from nested call frames.
pub fn reference_module(reps: u32) -> String {
    let mut body = String::new();
    for r in 0..reps as i64 {
        for (i, op) in I32_BINOPS.iter().chain(I64_BINOPS).enumerate() {
            let prefix = &op[..3];
            let _ = writeln!(body, "{prefix}.const {}\n{prefix}.const {}\n{op}\ndrop", 100 + 7 * r + i as i64, 3 + r);
        }
        for kind in 2..SNIPPET_KINDS {
            snippet(kind, 40 + r, 5 + r, &mut body);
        }
    }
    let mut out = String::from("# reference profiling module\n.locals 8\n.globals 1\n.memory 1\n");
    out.push_str(&body);
    out.push_str("call @nested\nreturn\n");
    // The same fragments one and two frames deeper.
    let _ = write!(out, "@nested: 0 0\n{body}call @deeper\n@deeper: 0 0\n{body}{LEAF}");
    out
}

/// A random program different from the reference module, built from the
/// same fragments in random order with random operands, looped until it
/// retires about `target_ops` opcodes.
pub fn random_program(seed: u64, target_ops: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let funcs = 4;
    let mut bodies = Vec::new();
    for _ in 0..funcs {
        let mut b = String::new();
        for _ in 0..rng.random_range(20..40) {
            let kind = rng.random_range(0..SNIPPET_KINDS);
            snippet(kind, rng.random_range(-500..500), rng.random_range(0..1000), &mut b);
        }
        bodies.push(b);
    }
    let build = |iters: usize, bodies: &[String], order: &[usize]| {
        let mut out = String::from("# random program\n.locals 5\n.globals 1\n.memory 1\n");
        let _ = writeln!(out, "i32.const {iters}\nlocal.set 4\nblock\nloop\nlocal.get 4\ni32.eqz\nbr_if 1");
        for &f in order {
            let _ = writeln!(out, "call @f{f}");
        }
        out.push_str("local.get 4\ni32.const 1\ni32.sub\nlocal.set 4\nbr 0\nend\nend\n");
        for (i, b) in bodies.iter().enumerate() {
            let _ = write!(out, "@f{i}: 0 0\n{b}");
        }
        out.push_str(LEAF);
        out
    };
    let order: Vec<usize> = (0..8).map(|_| *[0, 1, 2, 3].choose(&mut rng).expect("non-empty")).collect();
    let retired = |iters| execute(&parse_flat_module(&build(iters, &bodies, &order)).expect("generated module parses"), usize::MAX).len();
    let (one, two) = (retired(1), retired(2));
    let per_iter = two - one;
    let iters = (target_ops.saturating_sub(one - per_iter)).div_ceil(per_iter).max(1);
    build(iters, &bodies, &order)
}

/// A named module generator.
pub trait Workload: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    /// Module text. `scale` is the workload's size knob; `seed` only affects
    /// randomized workloads.
    fn generate(&self, seed: u64, scale: u32) -> String;
    fn default_scale(&self) -> u32;
}

struct AesLike;
struct Primes;
struct Reference;
struct Random;

impl Workload for AesLike {
    fn name(&self) -> &'static str {
        "aes_like"
    }
    fn description(&self) -> &'static str {
        "block-cipher rounds over linear memory; scale = blocks"
    }
    fn generate(&self, _seed: u64, scale: u32) -> String {
        aes_like(scale)
    }
    fn default_scale(&self) -> u32 {
        1
    }
}

impl Workload for Primes {
    fn name(&self) -> &'static str {
        "primes"
    }
    fn description(&self) -> &'static str {
        "trial-division prime counter; scale = upper limit"
    }
    fn generate(&self, _seed: u64, scale: u32) -> String {
        primes(scale)
    }
    fn default_scale(&self) -> u32 {
        600
    }
}

impl Workload for Reference {
    fn name(&self) -> &'static str {
        "reference"
    }
    fn description(&self) -> &'static str {
        "profiling module covering every supported opcode; scale = repetitions"
    }
    fn generate(&self, _seed: u64, scale: u32) -> String {
        reference_module(scale)
    }
    fn default_scale(&self) -> u32 {
        4
    }
}

impl Workload for Random {
    fn name(&self) -> &'static str {
        "random"
    }
    fn description(&self) -> &'static str {
        "random fragment program; scale = approximate retired opcodes"
    }
    fn generate(&self, seed: u64, scale: u32) -> String {
        random_program(seed, scale as usize)
    }
    fn default_scale(&self) -> u32 {
        100_000
    }
}

/// Workloads registered by name.
pub struct WorkloadRegistry {
    entries: BTreeMap<&'static str, Box<dyn Workload>>,
}

impl WorkloadRegistry {
    pub fn empty() -> Self {
        WorkloadRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(AesLike));
        r.register(Box::new(Primes));
        r.register(Box::new(Reference));
        r.register(Box::new(Random));
        r
    }

    pub fn register(&mut self, w: Box<dyn Workload>) {
        self.entries.insert(w.name(), w);
    }

    pub fn get(&self, name: &str) -> Option<&dyn Workload> {
        self.entries.get(name).map(|b| b.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

/// Opcodes the reference module retires.
pub fn reference_coverage() -> std::collections::BTreeSet<Opcode> {
    execute(&parse_flat_module(&reference_module(1)).expect("reference parses"), usize::MAX).unique_opcodes()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(src: &str) -> crate::bytecode::OpcodeTrace {
        execute(&parse_flat_module(src).unwrap(), 5_000_000)
    }

    #[test]
    fn aes_like_is_diverse_and_long() {
        let t = run(AES_LIKE);
        assert!(t.trap.is_none(), "{:?}", t.trap);
        assert!(!t.step_limit_hit);
        assert!(t.len() >= 10_000, "{}", t.len());
        assert!(t.unique_opcodes().len() >= 30, "{}", t.unique_opcodes().len());
        assert_eq!(t.final_depth, 0);
        let two = run(&aes_like(2));
        assert!(two.len() > t.len());
    }

    #[test]
    fn primes_uses_exactly_its_source_opcodes() {
        let src = primes(200);
        let m = parse_flat_module(&src).unwrap();
        let t = execute(&m, 5_000_000);
        assert!(t.trap.is_none());
        assert_eq!(t.unique_opcodes(), m.static_opcodes());
        assert_eq!(t.unique_opcodes().len(), 17);
        assert_eq!(t.final_depth, 0);
    }

    #[test]
    fn reference_covers_every_opcode() {
        let cov = reference_coverage();
        for &op in Opcode::ALL {
            assert!(cov.contains(&op), "{op} not exercised");
        }
        let t = run(&reference_module(2));
        assert!(t.trap.is_none(), "{:?}", t.trap);
    }

    #[test]
    fn random_program_reaches_target() {
        let src = random_program(3, 20_000);
        let t = run(&src);
        assert!(t.trap.is_none(), "{:?}", t.trap);
        assert!(t.len() >= 20_000);
        assert_ne!(src, reference_module(4));
        assert_eq!(random_program(3, 20_000), src);
    }

    #[test]
    fn registry_lookup() {
        let r = WorkloadRegistry::builtin();
        assert_eq!(r.names(), vec!["aes_like", "primes", "random", "reference"]);
        let w = r.get("primes").unwrap();
        assert!(w.generate(0, 50).contains("i32.rem_s"));
        assert!(r.get("chess").is_none());
    }
}
