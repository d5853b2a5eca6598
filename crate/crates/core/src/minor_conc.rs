//! Private minor arenas with read faults.
//!
//! Every domain owns one arena inside a shared, aligned region. A reference
//! into another domain's arena never escapes to the reader: the read barrier
//! spots it with a few integer operations and asks the owner to promote the
//! target first.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::config::{Config, WORD_BYTES};
use crate::domains::{Domain, Interrupt};
use crate::error::RuntimeError;
use crate::mem::{self, Reservation};
use crate::value::{Header, Value};

/// Classification of a loaded value relative to the reader's arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Class {
    Scalar,
    Own,
    Remote,
    Major,
}

/// The barrier test proper. Returns true iff `v` must be treated as a
/// reference into some other domain's arena. `region_bytes` must be a power
/// of two, the region aligned to twice its size, and `cursor` must lie in
/// the reader's arena.
#[inline]
pub fn is_remote(v: u64, cursor: u64, arena_bytes: u64, region_bytes: u64) -> bool {
    let t = (v ^ (cursor & !1)).wrapping_sub(arena_bytes) & (!(region_bytes - 1) | 1);
    t == 0
}

/// Address arithmetic for the minor region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArenaLayout {
    pub region_base: usize,
    pub arena_bytes: usize,
    pub arenas: usize,
}

impl ArenaLayout {
    pub fn region_bytes(&self) -> usize {
        self.arena_bytes * self.arenas
    }

    /// The block right after the region. Addresses there would fool the
    /// barrier, so nothing is ever mapped in it.
    pub fn shadow(&self) -> (usize, usize) {
        let r = self.region_bytes();
        (self.region_base + r, self.region_base + 2 * r)
    }

    pub fn in_region(&self, addr: usize) -> bool {
        addr.wrapping_sub(self.region_base) < self.region_bytes()
    }

    pub fn arena_index(&self, addr: usize) -> usize {
        (addr - self.region_base) / self.arena_bytes
    }

    pub fn arena_base(&self, i: usize) -> usize {
        self.region_base + i * self.arena_bytes
    }

    /// Initial allocation cursor of an arena: its last word, which is never
    /// handed out, so the cursor always stays inside the arena.
    pub fn arena_top(&self, i: usize) -> usize {
        self.arena_base(i) + self.arena_bytes - WORD_BYTES
    }

    pub fn classify(&self, v: Value, cursor: usize) -> Class {
        if is_remote(v.raw(), cursor as u64, self.arena_bytes as u64, self.region_bytes() as u64) {
            return Class::Remote;
        }
        if !v.is_pointer() {
            return Class::Scalar;
        }
        let own = cursor - (cursor - self.region_base) % self.arena_bytes;
        if v.addr().wrapping_sub(own) < self.arena_bytes {
            Class::Own
        } else {
            Class::Major
        }
    }

    /// Range-check classification, used as the test oracle. Pointers into
    /// the shadow block have no defined class.
    pub fn classify_by_range(&self, v: Value, cursor: usize) -> Option<Class> {
        if !v.is_pointer() {
            return Some(Class::Scalar);
        }
        let a = v.addr();
        let (s0, s1) = self.shadow();
        if a >= s0 && a < s1 {
            return None;
        }
        if !self.in_region(a) {
            return Some(Class::Major);
        }
        if self.arena_index(a) == self.arena_index(cursor) {
            Some(Class::Own)
        } else {
            Some(Class::Remote)
        }
    }

    /// Reserves the region plus its shadow.
    pub fn reserve(config: &Config) -> Result<(ArenaLayout, Reservation), RuntimeError> {
        let arena_bytes = config.arena_words * WORD_BYTES;
        let region = arena_bytes * config.max_domains;
        let r = Reservation::new(2 * region, 2 * region)
            .map_err(|source| RuntimeError::Reserve { bytes: 2 * region, source })?;
        let layout = ArenaLayout { region_base: r.base(), arena_bytes, arenas: config.max_domains };
        Ok((layout, r))
    }
}

/// A request to promote an object out of its owner's arena.
#[derive(Debug)]
pub(crate) struct PromoteReq {
    pub target: Value,
    pub epoch: u64,
    /// 0 while pending, 1 for "retry", otherwise the promoted address.
    pub reply: AtomicU64,
}

const PENDING: u64 = 0;
const RETRY: u64 = 1;

impl PromoteReq {
    pub fn answer(&self, v: u64) {
        self.reply.store(v, Ordering::Release);
    }
    pub fn retry(&self) {
        self.answer(RETRY);
    }
}

#[derive(Debug, Default)]
pub(crate) struct ConcState {
    /// Fields inside the arena holding a reference to a younger object.
    pub minor_remset: Vec<usize>,
    /// Object sizes of promoted (forwarded) objects since the last full
    /// collection, keyed by address; their headers are gone.
    pub promoted_sizes: HashMap<usize, usize>,
}

impl Domain {
    /// Handles a read that produced a reference into another domain's arena.
    pub(crate) fn read_fault(&mut self, field: usize) -> Value {
        self.stats.read_faults += 1;
        let layout = self.sh.layout;
        loop {
            let v1 = Value::from_raw(mem::load_acquire(field));
            if layout.classify(v1, self.cursor) != Class::Remote {
                return v1;
            }
            let owner = layout.arena_index(v1.addr());
            let epoch = self.sh.slots[owner].epoch.load(Ordering::Acquire);
            let v2 = Value::from_raw(mem::load_acquire(field));
            if v2 != v1 {
                continue;
            }
            let req = Arc::new(PromoteReq { target: v2, epoch, reply: AtomicU64::new(PENDING) });
            if self.sh.send(owner, Interrupt::Promote(req.clone())).is_err() {
                self.relax_spin();
                continue;
            }
            let mut spins = 0u32;
            let reply = loop {
                let r = req.reply.load(Ordering::Acquire);
                if r != PENDING {
                    break r;
                }
                self.service_interrupts();
                crate::domains::backoff(&mut spins);
            };
            if reply == RETRY {
                continue;
            }
            let now = Value::from_raw(mem::load_acquire(field));
            if now == v2 {
                // the owner's remembered set did not cover this field
                let _ = mem::cas(field, v2.raw(), reply);
                return Value::from_raw(reply);
            }
        }
    }

    /// Owner side of a promotion request.
    pub(crate) fn handle_promote(&mut self, req: &PromoteReq) {
        let epoch = self.sh.slots[self.slot].epoch.load(Ordering::Relaxed);
        if req.epoch != epoch || !self.owns_minor(req.target) || req.target.addr() < self.cursor {
            req.retry();
            return;
        }
        self.stats.promote_requests += 1;
        let a = req.target.addr();
        let h = Header::from_raw(mem::load(a));
        if h.is_forwarded() {
            req.answer(mem::load(a + WORD_BYTES));
            return;
        }
        let young = (a - self.cursor) < (self.sh.config.young_fraction * self.sh.layout.arena_bytes as f64) as usize;
        if young {
            let m = self.promote_closure(req.target);
            req.answer(m.raw());
        } else {
            self.roots.push(req.target);
            self.conc_full_collection();
            let m = self.roots.pop().unwrap();
            req.answer(m.raw());
        }
    }

    pub(crate) fn owns_minor(&self, v: Value) -> bool {
        v.is_pointer() && v.addr().wrapping_sub(self.arena_base) < self.sh.layout.arena_bytes
    }

    /// Promotes `target` and everything young it reaches, then redirects
    /// every reference to the moved objects.
    pub(crate) fn promote_closure(&mut self, target: Value) -> Value {
        self.stats.closure_promotions += 1;
        self.oldest_promoted = 0;
        let m = self.promote(target, false);
        self.drain_promoted(false);
        let hi = self.oldest_promoted;
        self.oldest_promoted = 0;
        self.redirect_roots();
        let fwd = |v: Value, me: &Domain| -> Option<Value> {
            if me.owns_minor(v) {
                let a = v.addr();
                if Header::from_raw(mem::load(a)).is_forwarded() {
                    return Some(Value::from_raw(mem::load(a + WORD_BYTES)));
                }
            }
            None
        };
        let mrs = std::mem::take(&mut self.conc.minor_remset);
        for &f in &mrs {
            if let Some(n) = fwd(Value::from_raw(mem::load(f)), self) {
                mem::store(f, n.raw());
            }
        }
        self.conc.minor_remset = mrs;
        let rs = std::mem::take(&mut self.remset);
        for &f in &rs {
            let v = Value::from_raw(mem::load_acquire(f));
            if let Some(n) = fwd(v, self) {
                let _ = mem::cas(f, v.raw(), n.raw());
            }
        }
        self.remset = rs;
        // objects younger than the oldest one promoted may point at it
        let mut a = self.cursor;
        while a <= hi {
            let h = Header::from_raw(mem::load(a));
            let size = if h.is_forwarded() {
                *self.conc.promoted_sizes.get(&a).expect("forwarded object without recorded size")
            } else {
                for i in 0..h.size() {
                    let f = a + (i + 1) * WORD_BYTES;
                    if let Some(n) = fwd(Value::from_raw(mem::load(f)), self) {
                        mem::store(f, n.raw());
                    }
                }
                h.size()
            };
            a += (size + 1) * WORD_BYTES;
        }
        m
    }

    /// Empties this domain's arena without stopping anyone else.
    pub(crate) fn conc_full_collection(&mut self) {
        let t0 = self.pause_start();
        self.conc_full_collection_inner();
        self.reset_arena();
        self.pause_end(t0);
        self.slice_due = true;
    }

    /// Promotes everything live in the arena; the caller resets it.
    pub(crate) fn conc_full_collection_inner(&mut self) {
        self.stats.minor_collections += 1;
        self.sh.minor_gcs.fetch_add(1, Ordering::Relaxed);
        self.redirect_roots_promoting(false);
        let rs = std::mem::take(&mut self.remset);
        for &f in &rs {
            let v = Value::from_raw(mem::load_acquire(f));
            if self.owns_minor(v) {
                let n = self.promote(v, false);
                let _ = mem::cas(f, v.raw(), n.raw());
            }
        }
        self.drain_promoted(false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// The 16-bit model: region 0x4200, sixteen 16-byte arenas.
    fn small() -> ArenaLayout {
        ArenaLayout { region_base: 0x4200, arena_bytes: 16, arenas: 16 }
    }

    #[test]
    fn sixteen_bit_examples() {
        let l = small();
        assert_eq!(l.shadow(), (0x4300, 0x4400));
        let c = 0x4248;
        assert_eq!(l.classify(Value::from_raw(0x4232), c), Class::Remote);
        assert_eq!(l.classify(Value::from_raw(0x4233), c), Class::Scalar);
        assert_eq!(l.classify(Value::from_raw(0x4242), c), Class::Own);
        assert_eq!(l.classify(Value::from_raw(0x1234), c), Class::Major);
    }

    #[test]
    fn sixteen_bit_exhaustive() {
        let l = small();
        for arena in 0..16 {
            for pos in 0..16 {
                let cursor = l.arena_base(arena) + pos;
                for v in 0..=0xffffu64 {
                    let v = Value::from_raw(v);
                    if let Some(expect) = l.classify_by_range(v, cursor) {
                        assert_eq!(l.classify(v, cursor), expect, "v={:#x} cursor={cursor:#x}", v.raw());
                    }
                }
            }
        }
    }

    #[test]
    fn production_layout_random() {
        let config = Config::default();
        let (l, _r) = ArenaLayout::reserve(&config).unwrap();
        assert_eq!(l.region_base % (2 * l.region_bytes()), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = l.region_base as u64;
        let span = 3 * l.region_bytes() as u64;
        for _ in 0..10_000_000u32 {
            let cursor = l.arena_base(rng.gen_range(0..l.arenas))
                + (rng.gen_range(0..l.arena_bytes as u64 / 8) * 8) as usize;
            let v = match rng.gen_range(0..4) {
                0 => rng.gen::<u64>(),
                // near the region, either side
                1 => (base + rng.gen_range(0..span)).wrapping_sub(l.region_bytes() as u64 / 2),
                // inside some arena, word aligned
                2 => base + rng.gen_range(0..l.region_bytes() as u64 / 8) * 8,
                _ => (cursor as u64).wrapping_add(rng.gen_range(0..64u64) * 8).wrapping_sub(256),
            };
            let v = Value::from_raw(v);
            if let Some(expect) = l.classify_by_range(v, cursor) {
                assert_eq!(l.classify(v, cursor), expect, "v={:#x} cursor={cursor:#x}", v.raw());
            }
        }
    }

    #[test]
    fn cursor_at_arena_edges() {
        let l = small();
        for arena in 0..16 {
            for cursor in [l.arena_base(arena), l.arena_top(arena) + 7] {
                assert_eq!(l.classify(Value::from_raw(l.arena_base(arena) as u64), cursor), Class::Own);
                let other = l.arena_base((arena + 1) % 16) as u64;
                assert_eq!(l.classify(Value::from_raw(other), cursor), Class::Remote);
            }
        }
    }
}
