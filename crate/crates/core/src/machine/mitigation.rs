// SPDX-License-Identifier: Apache-2.0

//! Interpreter hardening: junk instructions in handlers, equivalent handler
//! variants and a shuffled handler layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::handlers::{HandlerSpec, HandlerTable, NativeStep, REG_OP_LATENCY};
use super::layout::MemoryLayout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigationConfig {
    /// Probability that a nop is inserted into each gap of a handler body.
    pub nop_insertion_prob: f64,
    pub shuffle_handlers: bool,
    /// Equivalent handler templates per opcode; one is drawn per execution.
    pub variant_count: usize,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        MitigationConfig {
            nop_insertion_prob: 0.0,
            shuffle_handlers: false,
            variant_count: 1,
        }
    }
}

impl MitigationConfig {
    pub fn is_identity(&self) -> bool {
        self.nop_insertion_prob == 0.0 && !self.shuffle_handlers && self.variant_count <= 1
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.nop_insertion_prob) {
            return Err("nop_insertion_prob must lie in [0, 1]".into());
        }
        if self.variant_count == 0 {
            return Err("variant_count must be at least 1".into());
        }
        Ok(())
    }
}

/// Inserts a nop into each body gap (before every body step and before the
/// dispatch tail) with probability `p`.
fn insert_nops(spec: &HandlerSpec, p: f64, rng: &mut ChaCha8Rng) -> HandlerSpec {
    let mut steps = Vec::with_capacity(spec.steps.len() * 2);
    for step in spec.body() {
        if p > 0.0 && rng.random_bool(p) {
            steps.push(NativeStep::reg_op(REG_OP_LATENCY));
        }
        steps.push(*step);
    }
    if p > 0.0 && rng.random_bool(p) {
        steps.push(NativeStep::reg_op(REG_OP_LATENCY));
    }
    steps.extend_from_slice(&spec.steps[spec.tail_start()..]);
    HandlerSpec {
        steps,
        ..spec.clone()
    }
}

/// An equivalent handler: the base body with one extra junk instruction at a
/// random position, so variants differ even without nop insertion.
fn variant_of(spec: &HandlerSpec, rng: &mut ChaCha8Rng) -> HandlerSpec {
    let mut out = spec.clone();
    let pos = rng.random_range(0..=spec.tail_start());
    out.steps.insert(pos, NativeStep::reg_op(REG_OP_LATENCY));
    out
}

/// Hardened handler table. Uses the first variant of each opcode in `specs`
/// as the base template. Deterministic in `seed`.
pub fn apply_mitigation(specs: &HandlerTable, m: &MitigationConfig, seed: u64) -> HandlerTable {
    if m.nop_insertion_prob == 0.0 && m.variant_count <= 1 {
        return specs.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (_, variants) in specs.iter() {
        let base = &variants[0];
        for v in 0..m.variant_count.max(1) {
            let shaped = if v == 0 { base.clone() } else { variant_of(base, &mut rng) };
            out.push(insert_nops(&shaped, m.nop_insertion_prob, &mut rng));
        }
    }
    HandlerTable::from_specs(out)
}

/// Applies the layout part of `m` to `layout`.
pub fn apply_layout_mitigation(layout: &mut MemoryLayout, m: &MitigationConfig, seed: u64) {
    if m.shuffle_handlers {
        layout.shuffle_handlers(seed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::Opcode;
    use crate::machine::{build_layout, default_handler_specs, LayoutConfig};

    #[test]
    fn identity_config_changes_nothing() {
        let t = default_handler_specs();
        let m = MitigationConfig::default();
        assert!(m.is_identity());
        assert_eq!(apply_mitigation(&t, &m, 5), t);
        let mut l = build_layout(1, &LayoutConfig::default()).unwrap();
        let before = l.clone();
        apply_layout_mitigation(&mut l, &m, 5);
        assert_eq!(l, before);
    }

    #[test]
    fn full_insertion_lengthens_every_handler() {
        let t = default_handler_specs();
        let m = MitigationConfig {
            nop_insertion_prob: 1.0,
            ..MitigationConfig::default()
        };
        let h = apply_mitigation(&t, &m, 1);
        h.validate().unwrap();
        for (op, specs) in h.iter() {
            let base = t.get(*op).unwrap();
            assert!(specs[0].steps.len() > base.steps.len(), "{op}");
            assert_eq!(specs[0].steps.len(), 2 * base.body().len() + 1 + 3);
        }
    }

    #[test]
    fn variants_preserve_tail_and_differ() {
        let t = default_handler_specs();
        let m = MitigationConfig {
            variant_count: 3,
            ..MitigationConfig::default()
        };
        let h = apply_mitigation(&t, &m, 2);
        h.validate().unwrap();
        assert_eq!(h.variants(Opcode::I32Add).len(), 3);
        assert_ne!(h.variants(Opcode::I32Add)[0], h.variants(Opcode::I32Add)[1]);
    }

    #[test]
    fn shuffle_moves_handlers() {
        let mut l = build_layout(1, &LayoutConfig::default()).unwrap();
        let before = l.handler_pages.clone();
        let m = MitigationConfig {
            shuffle_handlers: true,
            ..MitigationConfig::default()
        };
        apply_layout_mitigation(&mut l, &m, 77);
        assert_ne!(l.handler_pages, before);
    }
}
