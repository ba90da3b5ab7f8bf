//! Instrumented multiply-accumulate counting.
//!
//! Forward passes of the graph ops record how many multiply-accumulates they
//! perform, split by kind. Counting is thread-local and only active inside
//! [`count_macs`], so ordinary training pays one thread-local lookup per op.
//! One multiply-accumulate is counted as 1, never as 2 FLOPs.

use std::cell::RefCell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounts {
    /// Dense linear layers and plain matmuls.
    pub linear: u64,
    /// `q·kᵀ` score products inside attention.
    pub attn_score: u64,
    /// `softmax(·)·v` products inside attention.
    pub attn_value: u64,
    /// 3D convolutions (zero-padded taps included).
    pub conv: u64,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.linear + self.attn_score + self.attn_value + self.conv
    }

    pub fn attention(&self) -> u64 {
        self.attn_score + self.attn_value
    }
}

impl std::ops::Add for MacCounts {
    type Output = MacCounts;
    fn add(self, o: MacCounts) -> MacCounts {
        MacCounts {
            linear: self.linear + o.linear,
            attn_score: self.attn_score + o.attn_score,
            attn_value: self.attn_value + o.attn_value,
            conv: self.conv + o.conv,
        }
    }
}

impl std::ops::Sub for MacCounts {
    type Output = MacCounts;
    fn sub(self, o: MacCounts) -> MacCounts {
        MacCounts {
            linear: self.linear - o.linear,
            attn_score: self.attn_score - o.attn_score,
            attn_value: self.attn_value - o.attn_value,
            conv: self.conv - o.conv,
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) enum MacKind {
    Linear,
    AttnScore,
    AttnValue,
    Conv,
}

thread_local! {
    static ACTIVE: RefCell<Option<MacCounts>> = const { RefCell::new(None) };
}

pub(crate) fn record(kind: MacKind, n: u64) {
    ACTIVE.with(|c| {
        if let Some(counts) = c.borrow_mut().as_mut() {
            match kind {
                MacKind::Linear => counts.linear += n,
                MacKind::AttnScore => counts.attn_score += n,
                MacKind::AttnValue => counts.attn_value += n,
                MacKind::Conv => counts.conv += n,
            }
        }
    });
}

/// Runs `f` with counting enabled and returns its result with the counts.
/// Nested calls report only their own region; the outer region includes them.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, MacCounts) {
    let outer = ACTIVE.with(|c| c.borrow_mut().replace(MacCounts::default()));
    let out = f();
    let inner = ACTIVE.with(|c| c.borrow_mut().take()).unwrap_or_default();
    if let Some(outer) = outer {
        ACTIVE.with(|c| *c.borrow_mut() = Some(outer + inner));
    }
    (out, inner)
}
