//! Instrumented byte accounting for the inference engine.
//!
//! The ledger counts logical tensor bytes allocated through the engine's own
//! buffers, not process RSS, so peak numbers are deterministic and
//! platform-independent.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

/// One allocation or release event: operation label and signed byte delta.
#[derive(Debug, Clone)]
pub struct LedgerEvent {
    pub op: &'static str,
    pub delta: i64,
}

#[derive(Debug, Default)]
pub struct MemoryLedger {
    live: Cell<i64>,
    peak: Cell<i64>,
    events: RefCell<Vec<LedgerEvent>>,
}

impl MemoryLedger {
    pub fn new() -> Rc<Self> {
        Rc::new(Self::default())
    }

    pub fn record(&self, op: &'static str, delta: i64) {
        let live = self.live.get() + delta;
        debug_assert!(live >= 0, "ledger went negative on {op}");
        self.live.set(live);
        if live > self.peak.get() {
            self.peak.set(live);
        }
        self.events.borrow_mut().push(LedgerEvent { op, delta });
    }

    pub fn live_bytes(&self) -> u64 {
        self.live.get().max(0) as u64
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak.get().max(0) as u64
    }

    pub fn events(&self) -> Vec<LedgerEvent> {
        self.events.borrow().clone()
    }
}
