//! Minor allocation, promotion and the stop-the-world parallel minor
//! collection.

use std::sync::atomic::Ordering;

use crate::config::{MinorVariant, WORD_BYTES};
use crate::domains::{backoff, Domain, Episode, EpisodeKind};
use crate::mem;
use crate::value::{Header, Tag, Value};

/// Splits `len` items into `n` contiguous shares whose sizes differ by at
/// most one; earlier shares get the extra items.
pub fn share_bounds(len: usize, n: usize, i: usize) -> (usize, usize) {
    let base = len / n;
    let extra = len % n;
    let start = i * base + i.min(extra);
    let size = base + usize::from(i < extra);
    (start, start + size)
}

impl Domain {
    /// Largest object placed in the minor arena; bigger ones go straight to
    /// the major heap.
    pub(crate) fn max_minor_words(&self) -> usize {
        (self.sh.config.arena_words / 8).min(256)
    }

    /// Allocates an object of `size` fields, each initialised to scalar 0.
    pub fn alloc(&mut self, size: usize, tag: Tag) -> Value {
        assert!(size >= 1, "objects have at least one field");
        assert!(tag != Tag::Forward && tag != Tag::PromotionBusy, "reserved tag");
        if size > self.max_minor_words() || tag == Tag::Ephemeron {
            return self.alloc_major(size, tag);
        }
        let bytes = (size + 1) * WORD_BYTES;
        loop {
            let limit = self.sh.slots[self.slot].limit.load(Ordering::Relaxed);
            let new = self.cursor.wrapping_sub(bytes);
            if new >= limit && new < self.cursor {
                self.cursor = new;
                for i in 0..size {
                    mem::store(new + (i + 1) * WORD_BYTES, Value::UNIT.raw());
                }
                mem::store_release(new, Header::new(size, tag, 0).raw());
                self.stats.minor_alloc_words += (size + 1) as u64;
                self.clock += 1;
                return Value::from_addr(new);
            }
            self.alloc_slow(bytes);
        }
    }

    /// Allocates straight into the major heap, bypassing the arena.
    pub fn alloc_major(&mut self, size: usize, tag: Tag) -> Value {
        assert!(size >= 1, "objects have at least one field");
        assert!(tag != Tag::Forward && tag != Tag::PromotionBusy, "reserved tag");
        self.poll();
        let v = self.alloc_major_raw(size, tag).expect("major heap exhausted");
        if self.alloc_since_slice >= self.sh.config.major_slice_trigger {
            self.slice_due = true;
            self.roots.push(v);
            self.major_slice();
            return self.roots.pop().unwrap();
        }
        v
    }

    fn alloc_slow(&mut self, bytes: usize) {
        let slot = &self.sh.slots[self.slot];
        if slot.pending.load(Ordering::SeqCst) || slot.limit.load(Ordering::SeqCst) == usize::MAX {
            self.poll();
            return;
        }
        if self.cursor.wrapping_sub(bytes) < self.arena_base || self.cursor.wrapping_sub(bytes) >= self.cursor {
            self.minor_collection();
            if self.slice_due {
                self.major_slice();
            }
        }
    }

    /// Empties this domain's arena (and, for the stop-the-world variant,
    /// every other arena too).
    pub fn minor_collection(&mut self) {
        match self.sh.config.minor {
            MinorVariant::Conc => self.conc_full_collection(),
            MinorVariant::Stw => {
                let before = self.stats.minor_collections;
                self.acquire_token();
                if self.stats.minor_collections != before {
                    // someone else collected while we waited
                    self.release_token();
                    return;
                }
                self.run_as_initiator(EpisodeKind::StwMinor);
                self.release_token();
            }
        }
    }

    pub(crate) fn in_minor(&self, v: Value) -> bool {
        v.is_pointer() && self.sh.layout.in_region(v.addr())
    }

    /// Copies one minor object to the major heap, or returns its existing
    /// copy. With `atomic`, the claim is a CAS on the header so that several
    /// domains can promote from the same arena.
    pub(crate) fn promote(&mut self, v: Value, atomic: bool) -> Value {
        let a = v.addr();
        let mut spins = 0;
        loop {
            let h = Header::from_raw(mem::load_acquire(a));
            if h.is_forwarded() {
                return Value::from_raw(mem::load_acquire(a + WORD_BYTES));
            }
            if h.tag_bits() == Tag::PromotionBusy as u8 {
                backoff(&mut spins);
                continue;
            }
            if atomic && mem::cas(a, h.raw(), h.with_tag(Tag::PromotionBusy).raw()).is_err() {
                continue;
            }
            let size = h.size();
            let dst = self.alloc_major_raw(size, h.tag()).expect("major heap exhausted during promotion");
            mem::copy_words(a + WORD_BYTES, dst.addr() + WORD_BYTES, size);
            mem::store_release(a + WORD_BYTES, dst.raw());
            mem::store_release(a, Header::FORWARDED.raw());
            if self.sh.config.minor == MinorVariant::Conc {
                self.conc.promoted_sizes.insert(a, size);
                self.oldest_promoted = self.oldest_promoted.max(a);
            }
            self.promote_stack.push(dst);
            self.stats.promoted_words += (size + 1) as u64;
            return dst;
        }
    }

    /// Scans promoted copies until no minor reference is left in them.
    pub(crate) fn drain_promoted(&mut self, atomic: bool) {
        let conc = self.sh.config.minor == MinorVariant::Conc;
        while let Some(o) = self.promote_stack.pop() {
            let n = Header::from_raw(mem::load(o.addr())).size();
            for i in 0..n {
                let f = o.field_addr(i);
                let v = Value::from_raw(mem::load(f));
                let hit = if conc { self.owns_minor(v) } else { self.in_minor(v) };
                if hit {
                    let nv = self.promote(v, atomic);
                    mem::store(f, nv.raw());
                }
            }
        }
    }

    /// Promotes everything the domain's roots refer to.
    pub(crate) fn redirect_roots_promoting(&mut self, atomic: bool) {
        for i in 0..self.roots.len() {
            let v = self.roots[i];
            if self.in_minor(v) {
                self.roots[i] = self.promote(v, atomic);
            }
        }
    }

    /// Points roots at the copies of already-promoted objects.
    pub(crate) fn redirect_roots(&mut self) {
        for r in self.roots.iter_mut() {
            let v = *r;
            if v.is_pointer() && self.sh.layout.in_region(v.addr()) {
                let a = v.addr();
                if Header::from_raw(mem::load(a)).is_forwarded() {
                    *r = Value::from_raw(mem::load(a + WORD_BYTES));
                }
            }
        }
    }

    pub(crate) fn reset_arena(&mut self) {
        self.cursor = self.sh.layout.arena_top(self.slot);
        self.remset.clear();
        self.conc.minor_remset.clear();
        self.conc.promoted_sizes.clear();
        self.oldest_promoted = 0;
        self.sh.slots[self.slot].epoch.fetch_add(1, Ordering::Release);
    }

    /// The parallel promotion part of a stop-the-world minor collection.
    /// Called by every participant after the remembered sets were published
    /// and combined.
    pub(crate) fn stw_promote_share(&mut self, ep: &Episode, me: usize) {
        let atomic = ep.participants.len() > 1;
        self.stats.minor_collections += 1;
        self.redirect_roots_promoting(atomic);
        let combined = ep.combined.get().expect("remembered sets not combined");
        let (s, e) = share_bounds(combined.len(), ep.participants.len(), me);
        for &f in &combined[s..e] {
            let v = Value::from_raw(mem::load_acquire(f));
            if self.in_minor(v) {
                let nv = self.promote(v, atomic);
                let _ = mem::cas(f, v.raw(), nv.raw());
            }
        }
        self.drain_promoted(atomic);
    }

    /// Body of a stop-the-world minor episode; the caller has already
    /// published this domain's remembered set and passed the entry barrier.
    pub(crate) fn stw_minor_after_entry(&mut self, ep: &Episode, me: usize) {
        ep.sync.wait(|| ep.combine_remsets(), || false);
        self.stw_promote_share(ep, me);
        self.publish_oracle_roots(ep);
        let sh = self.sh.clone();
        ep.sync.wait(|| sh.oracle_check(ep, "minor"), || false);
        self.reset_arena();
        self.slice_due = true;
    }
}
