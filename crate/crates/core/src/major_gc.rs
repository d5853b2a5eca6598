//! Mostly-concurrent mark-and-sweep: marking, ephemeron rounds, finaliser
//! phases and the major slice driver.

use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::Ordering;

use crate::domains::Domain;
use crate::features::{FinaliserKind, PendingCallback};
use crate::mem;
use crate::protocol::{Counters, LocalFlags, Phase, SliceMachine, SliceWork, StepOutcome};
use crate::value::{GcState, Header, Tag, Value};

/// Words of collector work for a slice after `allocated` words of
/// allocation.
pub fn slice_budget(pacing: f64, allocated: usize, min: usize, max: Option<usize>) -> usize {
    let b = (pacing * allocated as f64).ceil() as usize;
    let b = b.max(min);
    match max {
        Some(m) => b.min(m),
        None => b,
    }
}

impl Domain {
    pub(crate) fn is_major_ptr(&self, v: Value) -> bool {
        v.is_pointer() && !self.sh.layout.in_region(v.addr())
    }

    /// Flips an Unmarked header to Marked. True if this call did it.
    fn mark_header(&self, addr: usize) -> bool {
        let cm = self.sh.gc.colours();
        loop {
            let h = Header::from_raw(mem::load_acquire(addr));
            match cm.state_of(h.color()) {
                GcState::Unmarked => {
                    if mem::cas(addr, h.raw(), h.with_color(cm.marked).raw()).is_ok() {
                        return true;
                    }
                }
                GcState::Marked => return false,
                GcState::Garbage | GcState::Free => {
                    debug_assert!(false, "marking a dead object at {addr:#x}: {h:?}");
                    return false;
                }
            }
        }
    }

    /// Marks a major-heap object and queues it for scanning.
    pub(crate) fn mark_value(&mut self, v: Value) -> bool {
        if !self.is_major_ptr(v) || !self.mark_header(v.addr()) {
            return false;
        }
        self.push_gray(v);
        true
    }

    fn push_gray(&mut self, v: Value) {
        if self.mark_stack.is_empty() && self.flags.marking_done {
            if self.sh.gc.phase() == Phase::Mark {
                // drain right away so the count of domains with marking
                // work never goes back up during MARK
                self.mark_stack.push(v);
                self.drain_mark_stack();
                return;
            }
            self.flags.marking_done = false;
            self.sh.counters().rearm();
        }
        self.mark_stack.push(v);
        self.stats.mark_stack_peak = self.stats.mark_stack_peak.max(self.mark_stack.len() as u64);
    }

    /// Scans gray objects until the budget or the stack runs out.
    pub(crate) fn mark_slice(&mut self, mut budget: i64) -> i64 {
        while budget > 0 {
            let Some(o) = self.mark_stack.pop() else { break };
            let h = Header::from_raw(mem::load_acquire(o.addr()));
            let n = h.size();
            budget -= n as i64 + 1;
            self.stats.words_marked += n as u64 + 1;
            self.clock += n as u64 / 4 + 1;
            if h.tag() == Tag::Ephemeron {
                continue;
            }
            for i in 0..n {
                let v = Value::from_raw(mem::load_acquire(o.field_addr(i)));
                if self.is_major_ptr(v) {
                    self.mark_value(v);
                }
            }
        }
        budget
    }

    pub(crate) fn drain_mark_stack(&mut self) {
        while !self.mark_stack.is_empty() {
            self.mark_slice(i64::MAX / 2);
        }
    }

    /// Marks `v` and everything it reaches, ignoring the rearm rule.
    pub(crate) fn mark_and_drain(&mut self, v: Value) {
        if self.is_major_ptr(v) && self.mark_header(v.addr()) {
            self.mark_stack.push(v);
        }
        self.drain_mark_stack();
    }

    fn key_alive(&self, k: Value) -> bool {
        !k.is_pointer()
            || self.sh.layout.in_region(k.addr())
            || self.sh.gc.colours().state_of(Header::from_raw(mem::load_acquire(k.addr())).color()) == GcState::Marked
    }

    /// One pass over the local ephemerons, marking data whose keys are all
    /// alive. Resumes where it stopped if the round is unchanged.
    pub(crate) fn mark_ephe_slice(&mut self, mut budget: i64, cached: u64) -> i64 {
        if self.ephe_mark_round != cached {
            self.ephe_mark_pos = 0;
            self.ephe_mark_round = cached;
        }
        let cm = self.sh.gc.colours();
        while self.ephe_mark_pos < self.ephemerons.len() {
            if budget <= 0 {
                return budget;
            }
            let e = self.ephemerons[self.ephe_mark_pos];
            self.ephe_mark_pos += 1;
            let h = Header::from_raw(mem::load_acquire(e.addr()));
            budget -= h.size() as i64 + 1;
            if cm.state_of(h.color()) != GcState::Marked {
                continue;
            }
            let all = (1..h.size()).all(|i| self.key_alive(Value::from_raw(mem::load_acquire(e.field_addr(i)))));
            if all {
                let d = Value::from_raw(mem::load_acquire(e.field_addr(0)));
                if self.is_major_ptr(d) {
                    self.mark_value(d);
                }
            }
        }
        budget
    }

    /// Drops dead ephemerons and clears those with a dead key.
    pub(crate) fn sweep_ephe_slice(&mut self, mut budget: i64) -> i64 {
        let cm = self.sh.gc.colours();
        while self.ephe_sweep_read < self.ephemerons.len() {
            if budget <= 0 {
                return budget;
            }
            let e = self.ephemerons[self.ephe_sweep_read];
            self.ephe_sweep_read += 1;
            let h = Header::from_raw(mem::load_acquire(e.addr()));
            budget -= h.size() as i64 + 1;
            if cm.state_of(h.color()) != GcState::Marked {
                continue;
            }
            let dead_key = (1..h.size()).any(|i| !self.key_alive(Value::from_raw(mem::load_acquire(e.field_addr(i)))));
            if dead_key {
                for i in 0..h.size() {
                    mem::store_release(e.field_addr(i), Value::EMPTY.raw());
                }
                self.stats.ephemerons_cleared += 1;
            }
            self.ephemerons[self.ephe_sweep_write] = e;
            self.ephe_sweep_write += 1;
        }
        self.ephemerons.truncate(self.ephe_sweep_write);
        self.ephe_sweep_read = self.ephe_sweep_write;
        budget
    }

    pub(crate) fn sweep_ephe_all(&mut self) {
        while self.sweep_ephe_slice(i64::MAX / 2) <= 0 {}
    }

    /// Finalisers that see their object: an Unmarked target is revived and
    /// its callback queued.
    fn mark_final_entries(&mut self) {
        let cm = self.sh.gc.colours();
        let mut i = 0;
        while i < self.finalisers.len() {
            let e = &self.finalisers[i];
            let dead = e.kind == FinaliserKind::WithObject
                && cm.state_of(Header::from_raw(mem::load_acquire(e.target.addr())).color()) == GcState::Unmarked;
            if dead {
                let e = self.finalisers.swap_remove(i);
                self.mark_value(e.target);
                self.pending_callbacks.push(PendingCallback { value: Some(e.target), action: e.action });
            } else {
                i += 1;
            }
        }
    }

    fn mark_final_last_entries(&mut self) {
        let cm = self.sh.gc.colours();
        let mut i = 0;
        while i < self.finalisers.len() {
            let e = &self.finalisers[i];
            let dead = e.kind == FinaliserKind::LastOnly
                && cm.state_of(Header::from_raw(mem::load_acquire(e.target.addr())).color()) == GcState::Unmarked;
            if dead {
                let e = self.finalisers.swap_remove(i);
                self.pending_callbacks.push(PendingCallback { value: None, action: e.action });
            } else {
                i += 1;
            }
        }
    }

    /// Takes over ephemerons and finalisers left by terminated domains.
    fn adopt_orphans(&mut self) {
        if self.sh.orphan_ephemerons.load(Ordering::Acquire) > 0 {
            let taken = std::mem::take(&mut self.sh.pool.lock().ephemerons);
            if !taken.is_empty() {
                let n = taken.len();
                self.ephemerons.extend(taken);
                self.sh.orphan_ephemerons.fetch_sub(n, Ordering::AcqRel);
                self.sh.gc.bump_round();
            }
        }
        if self.sh.orphan_finalisers.load(Ordering::Acquire) > 0 {
            let taken = std::mem::take(&mut self.sh.pool.lock().finalisers);
            let n = taken.len();
            self.finalisers.extend(taken);
            self.sh.orphan_finalisers.fetch_sub(n, Ordering::AcqRel);
        }
    }

    /// One increment of major collection work, sized by recent allocation.
    pub fn major_slice(&mut self) {
        if self.in_slice {
            return;
        }
        self.in_slice = true;
        if self.slice_due {
            self.sh.cycle_demand.store(self.sh.gc.cycle(), Ordering::Relaxed);
        }
        self.slice_due = false;
        let t0 = self.pause_start();
        self.adopt_orphans();
        let c = &self.sh.config;
        let budget = slice_budget(c.pacing, self.alloc_since_slice, c.min_slice, c.max_slice);
        self.alloc_since_slice = 0;
        let sh = self.sh.clone();
        let faults = self.faults;
        let mut m = SliceMachine::new(budget as i64);
        loop {
            let mut ctr = sh.counters();
            match m.step(&mut ctr, self, faults) {
                StepOutcome::Continue => {}
                StepOutcome::Barrier(k) => self.request_barrier(k),
                StepOutcome::Done => break,
            }
        }
        self.stats.major_slices += 1;
        self.in_slice = false;
        self.pause_end(t0);
        self.run_pending_callbacks();
    }

    /// Runs queued finaliser callbacks. A panicking callback is recorded and
    /// does not stop the others.
    pub(crate) fn run_pending_callbacks(&mut self) {
        if self.in_callbacks {
            return;
        }
        self.in_callbacks = true;
        while !self.pending_callbacks.is_empty() {
            let p = self.pending_callbacks.remove(0);
            let base = self.roots.len();
            if let Some(v) = p.value {
                self.roots.push(v);
            }
            let action = p.action;
            let r = panic::catch_unwind(AssertUnwindSafe(|| action(self, p.value)));
            self.roots.truncate(base);
            self.stats.finalisers_run += 1;
            if let Err(e) = r {
                let msg = if let Some(s) = e.downcast_ref::<&str>() {
                    s.to_string()
                } else if let Some(s) = e.downcast_ref::<String>() {
                    s.clone()
                } else {
                    "finaliser panicked".to_string()
                };
                self.stats.finaliser_errors.push(msg);
            }
        }
        self.in_callbacks = false;
    }

    /// Runs slices until the current major cycle ends (and the next one has
    /// started). Mostly for tests and explicit full collections.
    pub fn finish_major_cycle(&mut self) {
        let start = self.sh.gc.cycle();
        while self.sh.gc.cycle() == start {
            self.slice_due = true;
            self.major_slice();
            if self.sh.gc.cycle() == start {
                self.relax();
            }
        }
    }

    /// Completes the current cycle and one more, so everything unreachable
    /// now has been reclaimed.
    pub fn full_major(&mut self) {
        self.minor_collection();
        self.finish_major_cycle();
        self.finish_major_cycle();
        // sweep what the second cycle found dead
        while self.sweep_slice(i64::MAX / 2) <= 0 {}
    }
}

impl SliceWork for Domain {
    fn flags(&mut self) -> &mut LocalFlags {
        &mut self.flags
    }
    fn sweep(&mut self, budget: i64, _: &mut dyn Counters) -> i64 {
        self.sweep_slice(budget)
    }
    fn mark(&mut self, budget: i64, _: &mut dyn Counters) -> i64 {
        self.mark_slice(budget)
    }
    fn mark_final(&mut self, _: &mut dyn Counters) {
        self.mark_final_entries();
    }
    fn mark_final_last(&mut self, _: &mut dyn Counters) {
        self.mark_final_last_entries();
    }
    fn mark_ephe(&mut self, budget: i64, cached: u64, _: &mut dyn Counters) -> i64 {
        self.mark_ephe_slice(budget, cached)
    }
    fn sweep_ephe(&mut self, budget: i64, _: &mut dyn Counters) -> i64 {
        self.sweep_ephe_slice(budget)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_examples() {
        assert_eq!(slice_budget(2.0, 100, 1, None), 200);
        assert_eq!(slice_budget(2.0, 100, 500, None), 500);
        assert_eq!(slice_budget(2.0, 100, 1, Some(150)), 150);
        assert_eq!(slice_budget(1.5, 0, 4096, None), 4096);
    }
}
