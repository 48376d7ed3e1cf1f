// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bytecode::Opcode;
use crate::trace::FrameNumber;

pub const PAGE_SIZE: u64 = 4096;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PageClass {
    Optable,
    Stack,
    HandlerCode,
    Bytecode,
    Marker,
    LinearMem,
    Other,
}

impl PageClass {
    pub fn name(self) -> &'static str {
        match self {
            PageClass::Optable => "OPTABLE",
            PageClass::Stack => "STACK",
            PageClass::HandlerCode => "HANDLER_CODE",
            PageClass::Bytecode => "BYTECODE",
            PageClass::Marker => "MARKER",
            PageClass::LinearMem => "LINEAR_MEM",
            PageClass::Other => "OTHER",
        }
    }
}

impl fmt::Display for PageClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Page counts and placement of the simulated interpreter image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    /// First frame of the guest region pages are drawn from.
    pub base_frame: FrameNumber,
    /// Number of frames in that region.
    pub address_span: u64,
    pub handler_pages: usize,
    pub stack_pages: usize,
    pub bytecode_pages: usize,
    pub linear_mem_pages: usize,
    /// Pool of guest-kernel pages that context-switch filler events land on.
    pub other_pages: usize,
    /// Byte offset of stack slot 0 inside the first stack page.
    pub stack_base_offset: u64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            base_frame: 0x20000,
            address_span: 0x30000,
            handler_pages: 12,
            stack_pages: 2,
            bytecode_pages: 2,
            linear_mem_pages: 4,
            other_pages: 48,
            // 16 four-byte slots before the page boundary: the entry frame
            // lives on the first stack page, callee frames spill onto the next.
            stack_base_offset: PAGE_SIZE - 64,
        }
    }
}

impl LayoutConfig {
    /// Total frames the layout claims.
    pub fn total_pages(&self) -> u64 {
        // optable + marker + globals
        3 + (self.handler_pages
            + self.stack_pages
            + self.bytecode_pages
            + self.linear_mem_pages
            + self.other_pages) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LayoutError {
    #[error("layout needs {needed} pages but the address span holds {span}")]
    SpanTooSmall { needed: u64, span: u64 },
    #[error("layout needs at least one {0} page")]
    MissingClass(&'static str),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryLayout {
    pub page_size: u64,
    pub optable_page: FrameNumber,
    /// Page holding each opcode's handler code.
    pub handler_pages: BTreeMap<Opcode, FrameNumber>,
    /// All handler-code pages, in placement order.
    pub handler_frames: Vec<FrameNumber>,
    pub stack_pages: Vec<FrameNumber>,
    pub bytecode_pages: Vec<FrameNumber>,
    pub marker_page: FrameNumber,
    pub linear_mem_pages: Vec<FrameNumber>,
    /// Module-instance data holding Wasm globals.
    pub globals_page: FrameNumber,
    pub other_pages: Vec<FrameNumber>,
    pub stack_base_offset: u64,
    pub seed: u64,
}

/// Places every page of the interpreter image. Pure in `(seed, config)`.
pub fn build_layout(seed: u64, config: &LayoutConfig) -> Result<MemoryLayout, LayoutError> {
    let needed = config.total_pages();
    if needed > config.address_span {
        return Err(LayoutError::SpanTooSmall {
            needed,
            span: config.address_span,
        });
    }
    for (count, name) in [
        (config.handler_pages, "handler"),
        (config.stack_pages, "stack"),
        (config.bytecode_pages, "bytecode"),
        (config.linear_mem_pages, "linear memory"),
    ] {
        if count == 0 {
            return Err(LayoutError::MissingClass(name));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();
    let draw = |n: usize, rng: &mut ChaCha8Rng, used: &mut BTreeSet<FrameNumber>| -> Vec<FrameNumber> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let f = config.base_frame + rng.random_range(0..config.address_span);
            if used.insert(f) {
                out.push(f);
            }
        }
        out
    };

    let optable_page = draw(1, &mut rng, &mut used)[0];
    let handler_frames = draw(config.handler_pages, &mut rng, &mut used);
    // The stack is one contiguous mapping.
    let stack_pages = loop {
        let start = config.base_frame + rng.random_range(0..config.address_span - config.stack_pages as u64);
        let run: Vec<_> = (start..start + config.stack_pages as u64).collect();
        if run.iter().all(|f| !used.contains(f)) {
            used.extend(run.iter().copied());
            break run;
        }
    };
    let bytecode_pages = draw(config.bytecode_pages, &mut rng, &mut used);
    let marker_page = draw(1, &mut rng, &mut used)[0];
    let linear_mem_pages = draw(config.linear_mem_pages, &mut rng, &mut used);
    let globals_page = draw(1, &mut rng, &mut used)[0];
    let other_pages = draw(config.other_pages, &mut rng, &mut used);

    let mut handler_pages = BTreeMap::new();
    for &op in Opcode::ALL {
        handler_pages.insert(op, *handler_frames.choose(&mut rng).expect("non-empty"));
    }

    Ok(MemoryLayout {
        page_size: PAGE_SIZE,
        optable_page,
        handler_pages,
        handler_frames,
        stack_pages,
        bytecode_pages,
        marker_page,
        linear_mem_pages,
        globals_page,
        other_pages,
        stack_base_offset: config.stack_base_offset,
        seed,
    })
}

impl MemoryLayout {
    pub fn class_of(&self, page: FrameNumber) -> Option<PageClass> {
        if page == self.optable_page {
            Some(PageClass::Optable)
        } else if page == self.marker_page {
            Some(PageClass::Marker)
        } else if self.stack_pages.contains(&page) {
            Some(PageClass::Stack)
        } else if self.handler_frames.contains(&page) {
            Some(PageClass::HandlerCode)
        } else if self.bytecode_pages.contains(&page) {
            Some(PageClass::Bytecode)
        } else if self.linear_mem_pages.contains(&page) {
            Some(PageClass::LinearMem)
        } else if page == self.globals_page || self.other_pages.contains(&page) {
            Some(PageClass::Other)
        } else {
            None
        }
    }

    /// Every frame the layout owns.
    pub fn all_frames(&self) -> Vec<FrameNumber> {
        let mut v = vec![self.optable_page, self.marker_page, self.globals_page];
        v.extend(&self.handler_frames);
        v.extend(&self.stack_pages);
        v.extend(&self.bytecode_pages);
        v.extend(&self.linear_mem_pages);
        v.extend(&self.other_pages);
        v
    }

    pub fn handler_page(&self, op: Opcode) -> FrameNumber {
        self.handler_pages[&op]
    }

    /// Stack page holding a four-byte slot.
    pub fn stack_page_for_slot(&self, slot: u32) -> FrameNumber {
        let byte = self.stack_base_offset + 4 * slot as u64;
        let idx = ((byte / self.page_size) as usize).min(self.stack_pages.len() - 1);
        self.stack_pages[idx]
    }

    pub fn linear_page_for_addr(&self, addr: u32) -> FrameNumber {
        let idx = (addr as u64 / self.page_size) as usize % self.linear_mem_pages.len();
        self.linear_mem_pages[idx]
    }

    pub fn bytecode_page_for_pc(&self, pc: usize) -> FrameNumber {
        // Flat modules encode roughly two bytes per instruction.
        let idx = (2 * pc as u64 / self.page_size) as usize % self.bytecode_pages.len();
        self.bytecode_pages[idx]
    }

    /// Reassigns opcodes to handler pages. Models a handler-layout shuffle.
    pub fn shuffle_handlers(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for page in self.handler_pages.values_mut() {
            *page = *self.handler_frames.choose(&mut rng).expect("non-empty");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let c = LayoutConfig::default();
        assert_eq!(build_layout(1, &c).unwrap(), build_layout(1, &c).unwrap());
    }

    #[test]
    fn seeds_differ() {
        // Regression fixture: verified once that seeds 1 and 2 place handlers differently.
        let c = LayoutConfig::default();
        let a = build_layout(1, &c).unwrap();
        let b = build_layout(2, &c).unwrap();
        assert_ne!(a.handler_pages, b.handler_pages);
    }

    #[test]
    fn defaults_and_distinctness() {
        let l = build_layout(7, &LayoutConfig::default()).unwrap();
        assert!(l.stack_pages.len() >= 2);
        let frames = l.all_frames();
        let set: BTreeSet<_> = frames.iter().collect();
        assert_eq!(set.len(), frames.len());
        assert!(!l.handler_pages.values().any(|&p| p == l.optable_page));
        assert!(!l.stack_pages.contains(&l.optable_page));
        for f in frames {
            assert!(l.class_of(f).is_some());
        }
        assert_eq!(l.class_of(l.optable_page), Some(PageClass::Optable));
        assert_eq!(l.stack_pages[1], l.stack_pages[0] + 1);
    }

    #[test]
    fn span_too_small() {
        let c = LayoutConfig {
            address_span: 10,
            ..LayoutConfig::default()
        };
        assert!(matches!(build_layout(1, &c), Err(LayoutError::SpanTooSmall { .. })));
    }

    #[test]
    fn stack_slot_pages() {
        let l = build_layout(3, &LayoutConfig::default()).unwrap();
        assert_eq!(l.stack_page_for_slot(0), l.stack_pages[0]);
        assert_eq!(l.stack_page_for_slot(15), l.stack_pages[0]);
        assert_eq!(l.stack_page_for_slot(16), l.stack_pages[1]);
        assert_eq!(l.stack_page_for_slot(100_000), l.stack_pages[1]);
    }
}
