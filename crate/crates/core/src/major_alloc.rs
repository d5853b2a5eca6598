//! Size-segmented, domain-local page allocator for the major heap.
//!
//! Small objects (fewer than 128 payload words) live in 4096-word pages
//! carved into equal slots. Free slots carry a Free-coloured header, so no
//! side bitmap is needed. Pages belong to one domain at a time; a terminating
//! domain hands its pages to the orphan pool, from which others adopt them.

use std::sync::atomic::Ordering;
use std::sync::OnceLock;

use crate::config::WORD_BYTES;
use crate::domains::{Domain, Shared};
use crate::error::RuntimeError;
use crate::mem;
use crate::value::{ColorMap, GcState, Header, Tag, Value};

pub const PAGE_WORDS: usize = 4096;
pub const PAGE_BYTES: usize = PAGE_WORDS * WORD_BYTES;
pub const LARGE_WORDS: usize = 128;
pub const CHUNK_PAGES: usize = 16;
const GROWTH: f64 = 1.1;

/// Payload sizes of the small size classes, ascending.
pub fn size_classes() -> &'static [usize] {
    static TABLE: OnceLock<Vec<usize>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t: Vec<usize> = (1..=16).collect();
        let mut c = 16usize;
        while c < LARGE_WORDS - 1 {
            let next = ((c as f64 * GROWTH).ceil() as usize).min(LARGE_WORDS - 1);
            let next = next.max(c + 1);
            t.push(next);
            c = next;
        }
        t
    })
}

fn class_lookup() -> &'static [u8; LARGE_WORDS] {
    static LOOKUP: OnceLock<[u8; LARGE_WORDS]> = OnceLock::new();
    LOOKUP.get_or_init(|| {
        let t = size_classes();
        let mut l = [0u8; LARGE_WORDS];
        let mut ci = 0;
        for (s, slot) in l.iter_mut().enumerate().skip(1) {
            while t[ci] < s {
                ci += 1;
            }
            *slot = ci as u8;
        }
        l
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeClass {
    Small(usize),
    Large,
}

pub fn size_class_for(size_words: usize) -> SizeClass {
    assert!(size_words >= 1, "objects have at least one field");
    if size_words >= LARGE_WORDS {
        SizeClass::Large
    } else {
        SizeClass::Small(class_lookup()[size_words] as usize)
    }
}

pub fn num_classes() -> usize {
    size_classes().len()
}

/// Words per slot (payload plus header) for a class.
pub fn slot_words(class: usize) -> usize {
    size_classes()[class] + 1
}

pub fn slots_per_page(class: usize) -> usize {
    PAGE_WORDS / slot_words(class)
}

#[derive(Debug)]
pub(crate) struct Page {
    pub base: usize,
    pub class: usize,
    pub slot_words: usize,
    pub nslots: usize,
    pub free: usize,
    pub scan: usize,
    pub swept_cycle: u64,
}

impl Page {
    fn slot_addr(&self, i: usize) -> usize {
        self.base + i * self.slot_words * WORD_BYTES
    }

    fn init(base: usize, class: usize, cm: ColorMap, cycle: u64) -> Page {
        let sw = slot_words(class);
        let p = Page {
            base,
            class,
            slot_words: sw,
            nslots: PAGE_WORDS / sw,
            free: PAGE_WORDS / sw,
            scan: 0,
            swept_cycle: cycle,
        };
        let fh = Header::new(sw - 1, Tag::Block, cm.free).raw();
        for i in 0..p.nslots {
            mem::store(p.slot_addr(i), fh);
        }
        p
    }

    /// Takes a Free slot, if any.
    fn take_slot(&mut self, cm: ColorMap) -> Option<usize> {
        if self.free == 0 {
            return None;
        }
        while self.scan < self.nslots {
            let a = self.slot_addr(self.scan);
            self.scan += 1;
            if Header::from_raw(mem::load(a)).color() == cm.free {
                self.free -= 1;
                return Some(a);
            }
        }
        debug_assert!(false, "page free count out of sync");
        None
    }

    /// Turns every Garbage slot into a Free one; returns words freed.
    pub fn sweep(&mut self, cm: ColorMap, cycle: u64) -> usize {
        let fh = Header::new(self.slot_words - 1, Tag::Block, cm.free).raw();
        let mut freed = 0;
        for i in 0..self.nslots {
            let a = self.slot_addr(i);
            let h = Header::from_raw(mem::load(a));
            if cm.state_of(h.color()) == GcState::Garbage {
                mem::store(a, fh);
                self.free += 1;
                freed += self.slot_words;
            }
        }
        self.scan = 0;
        self.swept_cycle = cycle;
        freed
    }

    #[cfg(test)]
    /// Words per logical state, counting whole slots.
    pub fn census(&self, cm: ColorMap) -> [usize; 4] {
        let mut out = [0; 4];
        for i in 0..self.nslots {
            let h = Header::from_raw(mem::load(self.slot_addr(i)));
            let k = match cm.state_of(h.color()) {
                GcState::Marked => 0,
                GcState::Unmarked => 1,
                GcState::Garbage => 2,
                GcState::Free => 3,
            };
            out[k] += self.slot_words;
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LargeBlock {
    pub addr: usize,
    pub words: usize,
    pub swept_cycle: u64,
}

impl LargeBlock {
    fn bytes(words: usize) -> usize {
        (words + 1) * WORD_BYTES
    }
}

/// Pages and large blocks owned by one domain.
#[derive(Debug, Default)]
pub(crate) struct LocalHeap {
    pub avail: Vec<Vec<Box<Page>>>,
    pub full: Vec<Vec<Box<Page>>>,
    pub unswept: Vec<Vec<Box<Page>>>,
    pub large: Vec<LargeBlock>,
    pub large_unswept: Vec<LargeBlock>,
    sweep_class: usize,
}

impl LocalHeap {
    pub fn new() -> LocalHeap {
        let n = num_classes();
        LocalHeap {
            avail: (0..n).map(|_| Vec::new()).collect(),
            full: (0..n).map(|_| Vec::new()).collect(),
            unswept: (0..n).map(|_| Vec::new()).collect(),
            large: Vec::new(),
            large_unswept: Vec::new(),
            sweep_class: 0,
        }
    }

    /// Every page and large block needs sweeping again.
    pub fn start_cycle(&mut self) {
        for c in 0..self.avail.len() {
            let mut a = std::mem::take(&mut self.avail[c]);
            let mut f = std::mem::take(&mut self.full[c]);
            self.unswept[c].append(&mut a);
            self.unswept[c].append(&mut f);
        }
        let mut l = std::mem::take(&mut self.large);
        self.large_unswept.append(&mut l);
        self.sweep_class = 0;
    }

    pub fn has_unswept(&self) -> bool {
        !self.large_unswept.is_empty() || self.unswept.iter().any(|v| !v.is_empty())
    }

    fn file(&mut self, p: Box<Page>) {
        let c = p.class;
        if p.free > 0 {
            self.avail[c].push(p);
        } else {
            self.full[c].push(p);
        }
    }

    fn pop_unswept(&mut self) -> Option<Box<Page>> {
        let n = self.unswept.len();
        for k in 0..n {
            let c = (self.sweep_class + k) % n;
            if let Some(p) = self.unswept[c].pop() {
                self.sweep_class = c;
                return Some(p);
            }
        }
        None
    }
}

/// Pages and blocks left behind by terminated domains, plus other state
/// handed over on termination.
#[derive(Default)]
pub(crate) struct OrphanPool {
    pub pages: Vec<Vec<Box<Page>>>,
    pub large: Vec<LargeBlock>,
    pub ephemerons: Vec<Value>,
    pub finalisers: Vec<crate::features::FinaliserEntry>,
}

impl OrphanPool {
    pub fn new() -> OrphanPool {
        OrphanPool { pages: (0..num_classes()).map(|_| Vec::new()).collect(), ..OrphanPool::default() }
    }

    fn take_partial(&mut self, class: usize, cycle: u64) -> Option<Box<Page>> {
        let v = &mut self.pages[class];
        let i = v.iter().position(|p| p.swept_cycle == cycle && p.free > 0)?;
        Some(v.swap_remove(i))
    }

    fn take_unswept(&mut self, class: usize, cycle: u64) -> Option<Box<Page>> {
        let v = &mut self.pages[class];
        let i = v.iter().position(|p| p.swept_cycle < cycle)?;
        Some(v.swap_remove(i))
    }

    fn take_any_unswept(&mut self, cycle: u64) -> Option<Box<Page>> {
        (0..self.pages.len()).find_map(|c| self.take_unswept(c, cycle))
    }
}

/// Fresh pages carved from 16-page chunks, plus the registry used by heap
/// walks. Pages are never returned to the OS.
#[derive(Default)]
pub(crate) struct PageSource {
    spare: Vec<usize>,
    pub pages: Vec<(usize, usize)>,
    pub large: std::collections::BTreeMap<usize, usize>,
    chunks: Vec<usize>,
}

impl PageSource {
    fn fresh_page(&mut self) -> Option<usize> {
        if self.spare.is_empty() {
            let bytes = PAGE_BYTES * CHUNK_PAGES;
            let base = mem::sys_alloc(bytes, PAGE_BYTES)?;
            self.chunks.push(base);
            for i in (0..CHUNK_PAGES).rev() {
                self.spare.push(base + i * PAGE_BYTES);
            }
        }
        self.spare.pop()
    }

    pub fn release_all(&mut self) {
        for c in self.chunks.drain(..) {
            mem::sys_free(c, PAGE_BYTES * CHUNK_PAGES, PAGE_BYTES);
        }
        for (a, w) in std::mem::take(&mut self.large) {
            mem::sys_free(a, LargeBlock::bytes(w), WORD_BYTES);
        }
        self.pages.clear();
        self.spare.clear();
    }
}

impl Shared {
    pub(crate) fn note_heap_growth(&self, words: usize) {
        let now = self.heap_words.fetch_add(words, Ordering::Relaxed) + words;
        self.max_heap_words.fetch_max(now, Ordering::Relaxed);
    }

    pub(crate) fn note_heap_shrink(&self, words: usize) {
        self.heap_words.fetch_sub(words, Ordering::Relaxed);
    }
}

impl Domain {
    /// Allocates a major-heap object with every field set to scalar 0. The
    /// header carries the current Marked pattern. Never triggers a
    /// collection, so it is safe to call during promotion.
    pub(crate) fn alloc_major_raw(&mut self, size: usize, tag: Tag) -> Result<Value, RuntimeError> {
        let cm = self.sh.gc.colours();
        let addr = match size_class_for(size) {
            SizeClass::Large => self.alloc_large(size)?,
            SizeClass::Small(c) => self.alloc_small(c)?,
        };
        for i in 0..size {
            mem::store(addr + (i + 1) * WORD_BYTES, Value::UNIT.raw());
        }
        mem::store_release(addr, Header::new(size, tag, cm.marked).raw());
        self.stats.major_alloc_words += (size + 1) as u64;
        self.alloc_since_slice += size + 1;
        self.clock += (size + 1) as u64;
        Ok(Value::from_addr(addr))
    }

    fn alloc_large(&mut self, size: usize) -> Result<usize, RuntimeError> {
        let bytes = LargeBlock::bytes(size);
        let addr = mem::sys_alloc(bytes, WORD_BYTES).ok_or(RuntimeError::OutOfMemory(size))?;
        debug_assert!(!self.sh.layout_contains(addr));
        self.sh.pages.lock().large.insert(addr, size);
        self.sh.note_heap_growth(size + 1);
        let cycle = self.sh.gc.cycle();
        self.heap.large.push(LargeBlock { addr, words: size, swept_cycle: cycle });
        Ok(addr)
    }

    fn alloc_small(&mut self, class: usize) -> Result<usize, RuntimeError> {
        let cm = self.sh.gc.colours();
        let cycle = self.sh.gc.cycle();
        // local page with room
        while let Some(p) = self.heap.avail[class].last_mut() {
            if let Some(a) = p.take_slot(cm) {
                if p.free == 0 {
                    let p = self.heap.avail[class].pop().unwrap();
                    self.heap.full[class].push(p);
                }
                return Ok(a);
            }
            let p = self.heap.avail[class].pop().unwrap();
            self.heap.full[class].push(p);
        }
        // sweep local unswept pages of this class
        while let Some(mut p) = self.heap.unswept[class].pop() {
            self.sweep_one_page(&mut p, cm, cycle);
            self.heap.file(p);
            if !self.heap.avail[class].is_empty() {
                return self.alloc_small(class);
            }
        }
        // adopt from the orphan pool: a swept page with room, else an unswept one
        let adopted = {
            let mut pool = self.sh.pool.lock();
            pool.take_partial(class, cycle).or_else(|| pool.take_unswept(class, cycle))
        };
        if let Some(mut p) = adopted {
            self.stats.pages_adopted += 1;
            if p.swept_cycle < cycle {
                self.sweep_one_page(&mut p, cm, cycle);
            }
            self.heap.file(p);
            return self.alloc_small(class);
        }
        // fresh page
        let base = {
            let mut src = self.sh.pages.lock();
            let b = src.fresh_page().ok_or(RuntimeError::OutOfMemory(PAGE_WORDS))?;
            src.pages.push((b, slot_words(class)));
            b
        };
        debug_assert!(!self.sh.layout_contains(base));
        self.sh.note_heap_growth(PAGE_WORDS);
        self.stats.pages_created += 1;
        let p = Box::new(Page::init(base, class, cm, cycle));
        self.heap.avail[class].push(p);
        self.alloc_small(class)
    }

    fn sweep_one_page(&mut self, p: &mut Page, cm: ColorMap, cycle: u64) -> usize {
        debug_assert!(p.swept_cycle < cycle, "page swept twice in one cycle");
        let freed = p.sweep(cm, cycle);
        self.stats.words_swept += PAGE_WORDS as u64;
        self.clock += PAGE_WORDS as u64 / 8;
        freed
    }

    fn sweep_large(&mut self, b: &mut LargeBlock, cm: ColorMap, cycle: u64) -> bool {
        let h = Header::from_raw(mem::load(b.addr));
        b.swept_cycle = cycle;
        self.stats.words_swept += 1;
        if cm.state_of(h.color()) == GcState::Garbage {
            self.sh.pages.lock().large.remove(&b.addr);
            mem::sys_free(b.addr, LargeBlock::bytes(b.words), WORD_BYTES);
            self.sh.note_heap_shrink(b.words + 1);
            true
        } else {
            false
        }
    }

    /// Sweeps local pages, then any unswept orphans. A positive result means
    /// nothing was left to sweep.
    pub(crate) fn sweep_slice(&mut self, mut budget: i64) -> i64 {
        let cm = self.sh.gc.colours();
        let cycle = self.sh.gc.cycle();
        while budget > 0 {
            if let Some(mut p) = self.heap.pop_unswept() {
                self.sweep_one_page(&mut p, cm, cycle);
                self.heap.file(p);
                budget -= PAGE_WORDS as i64;
                continue;
            }
            if let Some(mut b) = self.heap.large_unswept.pop() {
                if !self.sweep_large(&mut b, cm, cycle) {
                    self.heap.large.push(b);
                }
                budget -= b.words as i64 + 1;
                continue;
            }
            if !self.adopt_unswept_orphan(cycle) {
                return budget;
            }
        }
        0
    }

    /// Moves one unswept orphan page or large block into the local lists.
    fn adopt_unswept_orphan(&mut self, cycle: u64) -> bool {
        let mut pool = self.sh.pool.lock();
        if let Some(p) = pool.take_any_unswept(cycle) {
            drop(pool);
            self.stats.pages_adopted += 1;
            self.heap.unswept[p.class].push(p);
            return true;
        }
        if let Some(i) = pool.large.iter().position(|b| b.swept_cycle < cycle) {
            let b = pool.large.swap_remove(i);
            drop(pool);
            self.heap.large_unswept.push(b);
            return true;
        }
        false
    }

    /// Sweeps everything this domain owns, used on termination.
    pub(crate) fn sweep_everything(&mut self) {
        while self.sweep_slice(i64::MAX / 2) <= 0 {}
    }

    /// Hands every page and large block to the orphan pool.
    pub(crate) fn release_pages_on_terminate(&mut self) {
        debug_assert!(!self.heap.has_unswept());
        let heap = std::mem::replace(&mut self.heap, LocalHeap::new());
        let mut pool = self.sh.pool.lock();
        for (c, pages) in heap.avail.into_iter().chain(heap.full).chain(heap.unswept).enumerate() {
            let _ = c;
            for p in pages {
                let class = p.class;
                pool.pages[class].push(p);
            }
        }
        pool.large.extend(heap.large);
        pool.large.extend(heap.large_unswept);
    }
}
