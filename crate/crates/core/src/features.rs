//! Ephemerons, finalisers and lazy values.

use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::domains::Domain;
use crate::error::LazyError;
use crate::mem;
use crate::protocol::Phase;
use crate::value::{GcState, Header, Tag, Value};

pub(crate) type FinalAction = Box<dyn FnOnce(&mut Domain, Option<Value>) + Send>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinaliserKind {
    /// Runs once the object is unreachable; receives the object.
    WithObject,
    /// Runs once the object is unreachable even from other finalisers; the
    /// object itself is gone.
    LastOnly,
}

pub(crate) struct FinaliserEntry {
    pub kind: FinaliserKind,
    pub target: Value,
    pub action: FinalAction,
}

impl FinaliserEntry {
    /// The target may be handed to a callback later, so it must not be
    /// reclaimed meanwhile.
    pub fn keeps_target_alive(&self) -> bool {
        self.kind == FinaliserKind::WithObject
    }
}

pub(crate) struct PendingCallback {
    pub value: Option<Value>,
    pub action: FinalAction,
}

type LazyFn = dyn Fn(&mut Domain) -> Result<Value, LazyError> + Send + Sync;

/// Closures of unforced lazy cells, indexed by the token stored in the cell.
#[derive(Default)]
pub(crate) struct LazyRegistry {
    fns: Mutex<Vec<Option<Arc<LazyFn>>>>,
}

impl LazyRegistry {
    fn insert(&self, f: Arc<LazyFn>) -> i64 {
        let mut v = self.fns.lock();
        v.push(Some(f));
        (v.len() - 1) as i64
    }

    fn get(&self, tok: i64) -> Option<Arc<LazyFn>> {
        self.fns.lock().get(tok as usize).cloned().flatten()
    }

    fn retire(&self, tok: i64) {
        if let Some(slot) = self.fns.lock().get_mut(tok as usize) {
            *slot = None;
        }
    }
}

/// Observable state of a lazy cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LazyState {
    Unforced,
    Forcing(u64),
    Forced(Value),
}

fn swap_tag(addr: usize, from: Tag, to: Tag) -> bool {
    loop {
        let h = Header::from_raw(mem::load_acquire(addr));
        if h.tag_bits() != from as u8 {
            return false;
        }
        if mem::cas(addr, h.raw(), h.with_tag(to).raw()).is_ok() {
            return true;
        }
    }
}

impl Domain {
    // ---- ephemerons

    /// Creates an ephemeron with `nkeys` key slots and one data slot, all
    /// empty. Ephemerons always live on the major heap.
    pub fn ephe_create(&mut self, nkeys: usize) -> Value {
        let e = self.alloc(nkeys + 1, Tag::Ephemeron);
        for i in 0..=nkeys {
            mem::store(e.field_addr(i), Value::EMPTY.raw());
        }
        self.ephemerons.push(e);
        e
    }

    pub fn ephe_set_key(&mut self, e: Value, i: usize, k: Value) {
        assert!(i + 1 < self.size_of(e), "key index out of range");
        self.write(e, i + 1, k);
    }

    pub fn ephe_unset_key(&mut self, e: Value, i: usize) {
        self.write(e, i + 1, Value::EMPTY);
    }

    pub fn ephe_set_data(&mut self, e: Value, d: Value) {
        self.write(e, 0, d);
    }

    pub fn ephe_unset_data(&mut self, e: Value) {
        self.write(e, 0, Value::EMPTY);
    }

    /// Whether `v` is a major object the collector has found dead in the
    /// current cycle (only meaningful once marking is over).
    fn dead_in_sweep(&self, v: Value) -> bool {
        self.is_major_ptr(v)
            && self.sh.gc.phase() == Phase::SweepEphe
            && self.sh.gc.colours().state_of(Header::from_raw(mem::load_acquire(v.addr())).color()) == GcState::Unmarked
    }

    /// Strengthens a value handed out of a weak slot.
    fn hand_out(&mut self, v: Value) -> Value {
        if self.is_major_ptr(v) && self.sh.gc.phase() != Phase::SweepEphe {
            self.mark_value(v);
        }
        v
    }

    pub fn ephe_get_key(&mut self, e: Value, i: usize) -> Option<Value> {
        let k = self.read(e, i + 1);
        if k.is_empty() || self.dead_in_sweep(k) {
            return None;
        }
        Some(self.hand_out(k))
    }

    pub fn ephe_get_data(&mut self, e: Value) -> Option<Value> {
        let d = self.read(e, 0);
        if d.is_empty() || self.dead_in_sweep(d) {
            return None;
        }
        let n = self.size_of(e);
        for i in 1..n {
            let k = Value::from_raw(mem::load_acquire(e.field_addr(i)));
            if self.dead_in_sweep(k) {
                return None;
            }
        }
        Some(self.hand_out(d))
    }

    /// Ephemerons currently registered with this domain.
    pub fn ephemeron_count(&self) -> usize {
        self.ephemerons.len()
    }

    // ---- finalisers

    /// Moves `v` out of the minor heap if needed, so that it has a stable
    /// major-heap address.
    pub fn promote_now(&mut self, v: Value) -> Value {
        if !self.in_minor(v) {
            return v;
        }
        self.roots.push(v);
        self.minor_collection();
        self.roots.pop().unwrap()
    }

    fn add_finaliser(&mut self, target: Value, kind: FinaliserKind, action: FinalAction) {
        assert!(target.is_pointer(), "finalisers need a heap object");
        let target = self.promote_now(target);
        self.finalisers.push(crate::features::FinaliserEntry { kind, target, action });
    }

    /// Registers `f` to run, with the object, once `target` is unreachable.
    /// The callback may store the object somewhere to revive it.
    pub fn finalise<F>(&mut self, target: Value, f: F)
    where
        F: FnOnce(&mut Domain, Value) + Send + 'static,
    {
        self.add_finaliser(
            target,
            FinaliserKind::WithObject,
            Box::new(move |d, v| f(d, v.expect("object-receiving finaliser without object"))),
        );
    }

    /// Registers `f` to run once `target` is gone for good.
    pub fn finalise_last<F>(&mut self, target: Value, f: F)
    where
        F: FnOnce(&mut Domain) + Send + 'static,
    {
        self.add_finaliser(target, FinaliserKind::LastOnly, Box::new(move |d, _| f(d)));
    }

    pub fn finaliser_count(&self) -> usize {
        self.finalisers.len()
    }

    /// Messages of finaliser callbacks that panicked.
    pub fn finaliser_errors(&self) -> &[String] {
        &self.stats.finaliser_errors
    }

    // ---- lazy values

    /// A cell whose value is computed by `f` on first force.
    pub fn lazy_new<F>(&mut self, f: F) -> Value
    where
        F: Fn(&mut Domain) -> Result<Value, LazyError> + Send + Sync + 'static,
    {
        let tok = self.sh.lazies.insert(Arc::new(f));
        let cell = self.alloc(1, Tag::Lazy);
        self.write(cell, 0, Value::int(tok));
        cell
    }

    pub fn lazy_state(&mut self, cell: Value) -> Result<LazyState, LazyError> {
        let h = Header::from_raw(mem::load_acquire(cell.addr()));
        match Tag::from_bits(h.tag_bits()) {
            Some(Tag::Lazy) => Ok(LazyState::Unforced),
            Some(Tag::Forcing) => {
                let id = Value::from_raw(mem::load_acquire(cell.field_addr(0))).decode_scalar().unwrap_or(-1);
                Ok(LazyState::Forcing(id as u64))
            }
            Some(Tag::Forward) => Ok(LazyState::Forced(self.read(cell, 0))),
            _ => Err(LazyError::NotLazy),
        }
    }

    /// Forces a lazy cell. A cell under evaluation by this domain gives
    /// [`LazyError::RecursiveForce`]; by another domain,
    /// [`LazyError::ConcurrentForce`]. A computation that failed is retried
    /// on every force and fails the same way.
    pub fn force(&mut self, cell: Value) -> Result<Value, LazyError> {
        loop {
            let h = Header::from_raw(mem::load_acquire(cell.addr()));
            match Tag::from_bits(h.tag_bits()) {
                Some(Tag::Forward) => return Ok(self.read(cell, 0)),
                Some(Tag::Forcing) => {
                    let who = Value::from_raw(mem::load_acquire(cell.field_addr(0))).decode_scalar().unwrap_or(-1);
                    return if who == self.id as i64 {
                        Err(LazyError::RecursiveForce)
                    } else {
                        Err(LazyError::ConcurrentForce(who as u64))
                    };
                }
                Some(Tag::Lazy) => {
                    if !swap_tag(cell.addr(), Tag::Lazy, Tag::Forcing) {
                        continue;
                    }
                    return self.run_lazy(cell);
                }
                _ => return Err(LazyError::NotLazy),
            }
        }
    }

    fn run_lazy(&mut self, cell: Value) -> Result<Value, LazyError> {
        let tok = Value::from_raw(mem::load_acquire(cell.field_addr(0))).decode_scalar().expect("lazy token");
        mem::store_release(cell.field_addr(0), Value::int(self.id as i64).raw());
        let f = self.sh.lazies.get(tok).expect("lazy closure missing");
        let slot = self.push_root(cell);
        let r = panic::catch_unwind(AssertUnwindSafe(|| f(self)));
        let cell = self.root(slot);
        self.truncate_roots(slot);
        let r = match r {
            Ok(r) => r,
            Err(p) => Err(LazyError::Raised(
                p.downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| p.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".into()),
            )),
        };
        match r {
            Ok(v) => {
                self.write(cell, 0, v);
                let ok = swap_tag(cell.addr(), Tag::Forcing, Tag::Forward);
                debug_assert!(ok);
                self.sh.lazies.retire(tok);
                Ok(v)
            }
            Err(e) => {
                let again = e.clone();
                let t2 = self.sh.lazies.insert(Arc::new(move |_| Err(again.clone())));
                self.sh.lazies.retire(tok);
                self.write(cell, 0, Value::int(t2));
                let ok = swap_tag(cell.addr(), Tag::Forcing, Tag::Lazy);
                debug_assert!(ok);
                Err(e)
            }
        }
    }
}
