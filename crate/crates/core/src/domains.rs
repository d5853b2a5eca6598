//! Domains, the shared runtime state, interrupts and stop-the-world
//! episodes.

use std::collections::VecDeque;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread;
use std::time::Instant;

use indexmap::IndexSet;
use parking_lot::Mutex;

use crate::config::{Config, MinorVariant};
use crate::error::{DeliveryError, RuntimeError};
use crate::features::{FinaliserEntry, LazyRegistry, PendingCallback};
use crate::major_alloc::{LocalHeap, OrphanPool, PageSource};
use crate::mem::{self, Reservation};
use crate::minor_conc::{ArenaLayout, Class, ConcState, PromoteReq};
use crate::protocol::{self, BarrierKind, Counters, LocalFlags, Phase, ProtocolFaults};
use crate::stats::{DomainStats, GcReport};
use crate::value::{ColorMap, GcState, Header, Tag, Value};

pub(crate) fn backoff(spins: &mut u32) {
    if *spins < 16 {
        std::hint::spin_loop();
    } else {
        thread::yield_now();
    }
    *spins = spins.saturating_add(1);
}

/// Shared collector counters and the colour assignment.
#[derive(Debug)]
pub struct GlobalGcState {
    colours: AtomicU8,
    phase: AtomicU8,
    num_doms: AtomicU64,
    to_mark: AtomicI64,
    ephe_round: AtomicU64,
    marked_ephe: AtomicU64,
    swept_ephe: AtomicU64,
    marked_final: AtomicU64,
    marked_final_last: AtomicU64,
    cycle: AtomicU64,
    lock: Mutex<()>,
}

/// A consistent-enough copy of the shared collector state, for tests and
/// reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GcSnapshot {
    pub phase: Phase,
    pub cycle: u64,
    pub num_doms: u64,
    pub to_mark: i64,
    pub ephe_round: u64,
    pub marked_ephe: u64,
    pub swept_ephe: u64,
    pub marked_final: u64,
    pub marked_final_last: u64,
    pub colours: ColorMap,
}

impl GlobalGcState {
    fn new() -> GlobalGcState {
        GlobalGcState {
            colours: AtomicU8::new(ColorMap::default().pack()),
            phase: AtomicU8::new(Phase::Mark as u8),
            num_doms: AtomicU64::new(1),
            to_mark: AtomicI64::new(1),
            ephe_round: AtomicU64::new(0),
            marked_ephe: AtomicU64::new(0),
            swept_ephe: AtomicU64::new(0),
            marked_final: AtomicU64::new(0),
            marked_final_last: AtomicU64::new(0),
            cycle: AtomicU64::new(0),
            lock: Mutex::new(()),
        }
    }

    pub fn colours(&self) -> ColorMap {
        ColorMap::unpack(self.colours.load(Ordering::Acquire))
    }

    pub fn phase(&self) -> Phase {
        Phase::from_u8(self.phase.load(Ordering::Acquire))
    }

    pub fn cycle(&self) -> u64 {
        self.cycle.load(Ordering::Acquire)
    }

    pub fn snapshot(&self) -> GcSnapshot {
        GcSnapshot {
            phase: self.phase(),
            cycle: self.cycle(),
            num_doms: self.num_doms.load(Ordering::Acquire),
            to_mark: self.to_mark.load(Ordering::Acquire),
            ephe_round: self.ephe_round.load(Ordering::Acquire),
            marked_ephe: self.marked_ephe.load(Ordering::Acquire),
            swept_ephe: self.swept_ephe.load(Ordering::Acquire),
            marked_final: self.marked_final.load(Ordering::Acquire),
            marked_final_last: self.marked_final_last.load(Ordering::Acquire),
            colours: self.colours(),
        }
    }

    /// Starts a new ephemeron round without finishing marking, after the set
    /// of ephemerons to scan grew.
    pub(crate) fn bump_round(&self) {
        let _g = self.lock.lock();
        self.ephe_round.fetch_add(1, Ordering::AcqRel);
        self.marked_ephe.store(0, Ordering::Release);
    }

    fn rotate_colours(&self) {
        let cm = self.colours().rotate();
        self.colours.store(cm.pack(), Ordering::Release);
    }
}

/// [`Counters`] over the shared atomics.
pub(crate) struct RtCounters<'a> {
    pub sh: &'a Shared,
}

impl Counters for RtCounters<'_> {
    fn phase(&mut self) -> Phase {
        self.sh.gc.phase()
    }
    fn num_doms(&mut self) -> u64 {
        self.sh.gc.num_doms.load(Ordering::Acquire)
    }
    fn to_mark(&mut self) -> i64 {
        self.sh.gc.to_mark.load(Ordering::Acquire)
    }
    fn ephe_round(&mut self) -> u64 {
        self.sh.gc.ephe_round.load(Ordering::Acquire)
    }
    fn marked_ephe(&mut self) -> u64 {
        self.sh.gc.marked_ephe.load(Ordering::Acquire)
    }
    fn swept_ephe(&mut self) -> u64 {
        self.sh.gc.swept_ephe.load(Ordering::Acquire)
    }
    fn marked_final(&mut self) -> u64 {
        self.sh.gc.marked_final.load(Ordering::Acquire)
    }
    fn marked_final_last(&mut self) -> u64 {
        self.sh.gc.marked_final_last.load(Ordering::Acquire)
    }
    fn orphaned_ephemerons(&mut self) -> bool {
        self.sh.orphan_ephemerons.load(Ordering::Acquire) > 0
    }
    fn finish_marking(&mut self) {
        let g = &self.sh.gc;
        let _l = g.lock.lock();
        g.to_mark.fetch_sub(1, Ordering::AcqRel);
        g.ephe_round.fetch_add(1, Ordering::AcqRel);
        g.marked_ephe.store(0, Ordering::Release);
    }
    fn count_ephe_marked(&mut self, cached: u64, compare: bool) {
        let g = &self.sh.gc;
        let _l = g.lock.lock();
        if !compare || g.ephe_round.load(Ordering::Acquire) == cached {
            g.marked_ephe.fetch_add(1, Ordering::AcqRel);
        }
    }
    fn count_swept_ephe(&mut self) {
        self.sh.gc.swept_ephe.fetch_add(1, Ordering::AcqRel);
    }
    fn count_final(&mut self) {
        self.sh.gc.marked_final.fetch_add(1, Ordering::AcqRel);
    }
    fn count_final_last(&mut self) {
        self.sh.gc.marked_final_last.fetch_add(1, Ordering::AcqRel);
    }
    fn rearm(&mut self) {
        self.sh.gc.to_mark.fetch_add(1, Ordering::AcqRel);
    }
    fn set_phase(&mut self, p: Phase) {
        self.sh.gc.phase.store(p as u8, Ordering::Release);
    }
    fn cycle_reset(&mut self) {
        let g = &self.sh.gc;
        g.to_mark.store(g.num_doms.load(Ordering::Acquire) as i64, Ordering::Release);
        g.ephe_round.store(0, Ordering::Release);
        g.marked_ephe.store(0, Ordering::Release);
        g.swept_ephe.store(0, Ordering::Release);
        g.marked_final.store(0, Ordering::Release);
        g.marked_final_last.store(0, Ordering::Release);
        g.phase.store(Phase::Mark as u8, Ordering::Release);
        g.cycle.fetch_add(1, Ordering::AcqRel);
    }
}

/// Work delivered to a domain at its next safe point.
pub(crate) enum Interrupt {
    Episode(Arc<Episode>),
    Promote(Arc<PromoteReq>),
}

struct SlotQueue {
    items: VecDeque<Interrupt>,
    open: bool,
}

/// Per-arena bookkeeping, reused by successive domains.
pub(crate) struct Slot {
    pub active: AtomicBool,
    queue: Mutex<SlotQueue>,
    pub pending: AtomicBool,
    /// Allocation limit; `usize::MAX` forces the allocation slow path.
    pub limit: AtomicUsize,
    /// Bumped every time the arena is emptied.
    pub epoch: AtomicU64,
    committed: AtomicBool,
}

impl Slot {
    fn new() -> Slot {
        Slot {
            active: AtomicBool::new(false),
            queue: Mutex::new(SlotQueue { items: VecDeque::new(), open: false }),
            pending: AtomicBool::new(false),
            limit: AtomicUsize::new(usize::MAX),
            epoch: AtomicU64::new(1),
            committed: AtomicBool::new(false),
        }
    }
}

/// Sense-reversing spin barrier. The last arriver runs the action before
/// anyone leaves.
pub(crate) struct SpinBarrier {
    n: usize,
    count: AtomicUsize,
    generation: AtomicUsize,
}

impl SpinBarrier {
    fn new(n: usize) -> SpinBarrier {
        SpinBarrier { n, count: AtomicUsize::new(0), generation: AtomicUsize::new(0) }
    }

    /// `idle` is called while waiting; it returns true if it did something
    /// useful, in which case no backoff happens.
    pub fn wait(&self, action: impl FnOnce(), mut idle: impl FnMut() -> bool) {
        let g = self.generation.load(Ordering::Acquire);
        if self.count.fetch_add(1, Ordering::AcqRel) + 1 == self.n {
            action();
            self.count.store(0, Ordering::Relaxed);
            self.generation.store(g.wrapping_add(1), Ordering::Release);
            return;
        }
        let mut spins = 0;
        while self.generation.load(Ordering::Acquire) == g {
            if !idle() {
                backoff(&mut spins);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum EpisodeKind {
    StwMinor,
    Phase(BarrierKind),
    Cycle { cycle: u64 },
}

/// One stop-the-world interval shared by every running domain.
pub(crate) struct Episode {
    pub kind: EpisodeKind,
    pub participants: Vec<usize>,
    pub entry: SpinBarrier,
    pub sync: SpinBarrier,
    pub proceed: AtomicBool,
    pub remsets: Mutex<Vec<Vec<usize>>>,
    pub combined: OnceLock<Vec<usize>>,
    pub oracle_roots: Mutex<Vec<Value>>,
    pub started: Instant,
}

impl Episode {
    fn new(kind: EpisodeKind, participants: Vec<usize>) -> Episode {
        let n = participants.len();
        Episode {
            kind,
            entry: SpinBarrier::new(n),
            sync: SpinBarrier::new(n),
            proceed: AtomicBool::new(true),
            remsets: Mutex::new(vec![Vec::new(); n]),
            combined: OnceLock::new(),
            oracle_roots: Mutex::new(Vec::new()),
            started: Instant::now(),
            participants,
        }
    }

    pub fn publish_remset(&self, me: usize, rs: Vec<usize>) {
        self.remsets.lock()[me] = rs;
    }

    pub fn combine_remsets(&self) {
        let all: Vec<usize> = self.remsets.lock().drain(..).flatten().collect();
        let _ = self.combined.set(all);
    }
}

/// Debug oracle findings.
#[derive(Debug, Default, Clone)]
pub(crate) struct OracleLog {
    pub checks: u64,
    pub violations: Vec<String>,
}

/// State shared by every domain of a runtime.
pub(crate) struct Shared {
    pub config: Config,
    pub layout: ArenaLayout,
    reservation: Reservation,
    pub gc: GlobalGcState,
    pub slots: Box<[Slot]>,
    stw_token: AtomicBool,
    pub pool: Mutex<OrphanPool>,
    pub orphan_ephemerons: AtomicUsize,
    pub orphan_finalisers: AtomicUsize,
    pub pages: Mutex<PageSource>,
    pub heap_words: AtomicUsize,
    pub max_heap_words: AtomicUsize,
    pub globals: AtomicU64,
    pub lazies: LazyRegistry,
    pub report: Mutex<GcReport>,
    pub oracle: Mutex<OracleLog>,
    pub minor_gcs: AtomicU64,
    /// Last cycle in which an allocation-driven slice ran.
    pub cycle_demand: AtomicU64,
    next_id: AtomicU64,
}

impl Shared {
    pub(crate) fn layout_contains(&self, addr: usize) -> bool {
        let (s0, s1) = self.layout.shadow();
        self.layout.in_region(addr) || (addr >= s0 && addr < s1)
    }

    pub(crate) fn send(&self, slot: usize, i: Interrupt) -> Result<(), DeliveryError> {
        let s = &self.slots[slot];
        {
            let mut q = s.queue.lock();
            if !q.open {
                return Err(DeliveryError::Terminated);
            }
            q.items.push_back(i);
        }
        s.limit.store(usize::MAX, Ordering::SeqCst);
        s.pending.store(true, Ordering::SeqCst);
        Ok(())
    }

    fn active_slots(&self) -> Vec<usize> {
        (0..self.slots.len()).filter(|&i| self.slots[i].active.load(Ordering::Acquire)).collect()
    }

    pub(crate) fn counters(&self) -> RtCounters<'_> {
        RtCounters { sh: self }
    }

    /// Runs the debug oracle if enabled. Called with every domain stopped
    /// and every minor arena logically empty.
    pub(crate) fn oracle_check(&self, ep: &Episode, when: &str) {
        if !self.config.debug_oracle {
            return;
        }
        let roots = std::mem::take(&mut *ep.oracle_roots.lock());
        let found = crate::harness::oracle::check_heap(self, &roots);
        let mut log = self.oracle.lock();
        log.checks += 1;
        for v in found {
            log.violations.push(format!("{when}: {v}"));
        }
    }
}

impl Drop for Shared {
    fn drop(&mut self) {
        self.pages.lock().release_all();
        let _ = &self.reservation;
    }
}

/// A domain: one mutator thread with its own minor arena, local major heap
/// and mark stack.
pub struct Domain {
    pub(crate) sh: Arc<Shared>,
    pub(crate) slot: usize,
    pub(crate) id: u64,
    pub(crate) arena_base: usize,
    pub(crate) cursor: usize,
    /// Major-heap fields that may hold a minor reference.
    pub(crate) remset: IndexSet<usize>,
    pub(crate) conc: ConcState,
    pub(crate) oldest_promoted: usize,
    pub(crate) promote_stack: Vec<Value>,
    pub(crate) heap: LocalHeap,
    pub(crate) mark_stack: Vec<Value>,
    pub(crate) flags: LocalFlags,
    pub(crate) roots: Vec<Value>,
    pub(crate) ephemerons: Vec<Value>,
    pub(crate) ephe_mark_pos: usize,
    pub(crate) ephe_mark_round: u64,
    pub(crate) ephe_sweep_read: usize,
    pub(crate) ephe_sweep_write: usize,
    pub(crate) finalisers: Vec<FinaliserEntry>,
    pub(crate) pending_callbacks: Vec<PendingCallback>,
    pub(crate) alloc_since_slice: usize,
    pub(crate) in_slice: bool,
    pub(crate) in_callbacks: bool,
    pub(crate) slice_due: bool,
    pub(crate) stats: DomainStats,
    /// Work units done by this domain; the logical clock.
    pub(crate) clock: u64,
    pub(crate) faults: ProtocolFaults,
}

/// Handle on a spawned domain.
pub struct DomainHandle<T> {
    thread: thread::JoinHandle<Result<T, String>>,
}

impl<T> DomainHandle<T> {
    pub fn is_finished(&self) -> bool {
        self.thread.is_finished()
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}

/// Entry point: builds a runtime, runs `f` on its first domain, waits for
/// every spawned domain and returns the result with the collection report.
pub struct Runtime;

impl Runtime {
    pub fn run<T>(config: Config, f: impl FnOnce(&mut Domain) -> T) -> Result<(T, GcReport), RuntimeError> {
        config.validate()?;
        let (layout, reservation) = ArenaLayout::reserve(&config)?;
        let slots: Box<[Slot]> = (0..config.max_domains).map(|_| Slot::new()).collect();
        let sh = Arc::new(Shared {
            layout,
            reservation,
            gc: GlobalGcState::new(),
            slots,
            stw_token: AtomicBool::new(false),
            pool: Mutex::new(OrphanPool::new()),
            orphan_ephemerons: AtomicUsize::new(0),
            orphan_finalisers: AtomicUsize::new(0),
            pages: Mutex::new(PageSource::default()),
            heap_words: AtomicUsize::new(0),
            max_heap_words: AtomicUsize::new(0),
            globals: AtomicU64::new(Value::UNIT.raw()),
            lazies: LazyRegistry::default(),
            report: Mutex::new(GcReport::default()),
            oracle: Mutex::new(OracleLog::default()),
            minor_gcs: AtomicU64::new(0),
            cycle_demand: AtomicU64::new(0),
            next_id: AtomicU64::new(0),
            config,
        });
        let mut root = Domain::open(sh.clone(), 0, LocalFlags::cycle_start())?;
        let g = root.alloc_major_raw(sh.config.global_slots, Tag::Block)?;
        sh.globals.store(g.raw(), Ordering::Release);
        let r = panic::catch_unwind(AssertUnwindSafe(|| f(&mut root)));
        let r = match r {
            Ok(v) => v,
            Err(p) => {
                root.wait_for_others();
                root.terminate();
                return Err(RuntimeError::DomainPanicked(panic_message(p)));
            }
        };
        root.wait_for_others();
        root.terminate();
        let mut report = std::mem::take(&mut *sh.report.lock());
        report.finish(&sh);
        Ok((r, report))
    }
}

impl Domain {
    fn open(sh: Arc<Shared>, slot: usize, flags: LocalFlags) -> Result<Domain, RuntimeError> {
        let layout = sh.layout;
        let s = &sh.slots[slot];
        if !s.committed.swap(true, Ordering::AcqRel) {
            sh.reservation
                .commit(layout.arena_base(slot), layout.arena_bytes)
                .map_err(|source| RuntimeError::Reserve { bytes: layout.arena_bytes, source })?;
        }
        {
            let mut q = s.queue.lock();
            q.items.clear();
            q.open = true;
        }
        s.pending.store(false, Ordering::SeqCst);
        s.limit.store(layout.arena_base(slot), Ordering::SeqCst);
        s.epoch.fetch_add(1, Ordering::AcqRel);
        s.active.store(true, Ordering::Release);
        let id = sh.next_id.fetch_add(1, Ordering::Relaxed);
        Ok(Domain {
            slot,
            id,
            arena_base: layout.arena_base(slot),
            cursor: layout.arena_top(slot),
            remset: IndexSet::new(),
            conc: ConcState::default(),
            oldest_promoted: 0,
            promote_stack: Vec::new(),
            heap: LocalHeap::new(),
            mark_stack: Vec::new(),
            flags,
            roots: Vec::new(),
            ephemerons: Vec::new(),
            ephe_mark_pos: 0,
            ephe_mark_round: 0,
            ephe_sweep_read: 0,
            ephe_sweep_write: 0,
            finalisers: Vec::new(),
            pending_callbacks: Vec::new(),
            alloc_since_slice: 0,
            in_slice: false,
            in_callbacks: false,
            slice_due: false,
            stats: DomainStats::default(),
            clock: 0,
            faults: ProtocolFaults::NONE,
            sh,
        })
    }

    /// Identifier unique over the runtime's lifetime.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn config(&self) -> &Config {
        &self.sh.config
    }

    pub fn gc_snapshot(&self) -> GcSnapshot {
        self.sh.gc.snapshot()
    }

    pub fn stats(&self) -> &DomainStats {
        &self.stats
    }

    pub fn heap_words(&self) -> usize {
        self.sh.heap_words.load(Ordering::Relaxed)
    }

    pub fn minor_variant(&self) -> MinorVariant {
        self.sh.config.minor
    }

    /// Injects protocol faults into this domain's slices; test use only.
    pub fn set_protocol_faults(&mut self, f: ProtocolFaults) {
        self.faults = f;
    }

    /// Number of violations the debug oracle has found so far.
    pub fn oracle_violations(&self) -> Vec<String> {
        self.sh.oracle.lock().violations.clone()
    }

    pub fn oracle_checks(&self) -> u64 {
        self.sh.oracle.lock().checks
    }

    // ---- roots

    pub fn push_root(&mut self, v: Value) -> usize {
        self.roots.push(v);
        self.roots.len() - 1
    }

    pub fn pop_root(&mut self) -> Value {
        self.roots.pop().expect("root stack underflow")
    }

    pub fn root(&self, i: usize) -> Value {
        self.roots[i]
    }

    pub fn set_root(&mut self, i: usize, v: Value) {
        self.roots[i] = v;
    }

    pub fn roots_len(&self) -> usize {
        self.roots.len()
    }

    pub fn truncate_roots(&mut self, n: usize) {
        self.roots.truncate(n);
    }

    pub fn global(&mut self, i: usize) -> Value {
        let g = Value::from_raw(self.sh.globals.load(Ordering::Acquire));
        self.read(g, i)
    }

    pub fn set_global(&mut self, i: usize, v: Value) {
        let g = Value::from_raw(self.sh.globals.load(Ordering::Acquire));
        self.write(g, i, v);
    }

    // ---- object access

    pub fn size_of(&self, obj: Value) -> usize {
        Header::from_raw(mem::load_acquire(obj.addr())).size()
    }

    pub fn tag_of(&self, obj: Value) -> Tag {
        Header::from_raw(mem::load_acquire(obj.addr())).tag()
    }

    pub fn is_minor(&self, v: Value) -> bool {
        self.in_minor(v)
    }

    /// Logical collector state of a major-heap object.
    pub fn gc_state(&self, obj: Value) -> GcState {
        self.sh.gc.colours().state_of(Header::from_raw(mem::load_acquire(obj.addr())).color())
    }

    /// Reads field `i`. Under the concurrent minor variant this is where
    /// references into other domains' arenas are intercepted.
    #[inline]
    pub fn read(&mut self, obj: Value, i: usize) -> Value {
        let f = obj.field_addr(i);
        let v = Value::from_raw(mem::load_acquire(f));
        if self.sh.config.minor == MinorVariant::Conc
            && self.sh.layout.classify(v, self.cursor) == Class::Remote
        {
            return self.read_fault(f);
        }
        v
    }

    /// Writes field `i` through the write barrier.
    pub fn write(&mut self, obj: Value, i: usize, v: Value) {
        let f = obj.field_addr(i);
        let old = Value::from_raw(mem::swap(f, v.raw()));
        let layout = self.sh.layout;
        if old.is_pointer() && !layout.in_region(old.addr()) && self.sh.gc.phase() != Phase::SweepEphe {
            self.mark_value(old);
        }
        if v.is_pointer() && layout.in_region(v.addr()) {
            let obj_minor = layout.in_region(obj.addr());
            if !obj_minor {
                self.remset.insert(f);
            } else if self.sh.config.minor == MinorVariant::Conc && obj.addr() > v.addr() {
                self.conc.minor_remset.push(f);
            }
        }
        self.clock += 1;
    }

    /// Allocates and fills a block in one go.
    pub fn alloc_with(&mut self, tag: Tag, fields: &[Value]) -> Value {
        let base = self.roots.len();
        self.roots.extend_from_slice(fields);
        let o = self.alloc(fields.len(), tag);
        for i in 0..fields.len() {
            let v = self.roots[base + i];
            self.write(o, i, v);
        }
        self.roots.truncate(base);
        o
    }

    // ---- interrupts and episodes

    /// Safe point: services pending interrupts and any due major slice.
    pub fn poll(&mut self) {
        if self.sh.slots[self.slot].pending.load(Ordering::SeqCst) {
            self.service_interrupts();
        }
        if self.slice_due && !self.in_slice {
            self.major_slice();
        }
    }

    /// A safe point for idle or spinning mutators: polls and does a little
    /// collector work.
    pub fn relax(&mut self) {
        self.poll();
        if !self.in_slice && self.has_collector_work() {
            self.major_slice();
        } else {
            thread::yield_now();
        }
    }

    pub(crate) fn relax_spin(&mut self) {
        self.service_interrupts();
        thread::yield_now();
    }

    fn has_collector_work(&self) -> bool {
        let g = self.sh.gc.snapshot();
        if self.sh.cycle_demand.load(Ordering::Relaxed) != g.cycle {
            // idle domains help only with cycles that allocation asked for,
            // rather than running cycle after cycle on their own
            return false;
        }
        !self.mark_stack.is_empty()
            || !self.flags.marking_done
            || self.heap.has_unswept()
            || (g.phase == Phase::MarkFinal && !self.flags.final_done)
            || (g.phase == Phase::MarkFinal && g.ephe_round > self.flags.ephe_round)
            || (g.phase == Phase::SweepEphe && (!self.flags.sweep_ephe_done || !self.flags.final_last_done))
            || self.sh.orphan_ephemerons.load(Ordering::Relaxed) > 0
            || self.sh.orphan_finalisers.load(Ordering::Relaxed) > 0
            || {
                let mut c = self.sh.counters();
                protocol::mark_final_ready(&mut c) || protocol::sweep_ephe_ready(&mut c) || protocol::cycle_ready(&mut c)
            }
    }

    pub(crate) fn service_interrupts(&mut self) {
        let s = &self.sh.slots[self.slot];
        s.pending.store(false, Ordering::SeqCst);
        s.limit.store(self.arena_base, Ordering::SeqCst);
        loop {
            let next = self.sh.slots[self.slot].queue.lock().items.pop_front();
            match next {
                None => break,
                Some(Interrupt::Episode(ep)) => self.run_episode(&ep),
                Some(Interrupt::Promote(req)) => self.handle_promote(&req),
            }
        }
    }

    fn try_token(&self) -> bool {
        self.sh.stw_token.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_ok()
    }

    pub(crate) fn acquire_token(&mut self) {
        let mut spins = 0;
        while !self.try_token() {
            self.service_interrupts();
            backoff(&mut spins);
        }
    }

    pub(crate) fn release_token(&self) {
        self.sh.stw_token.store(false, Ordering::Release);
    }

    /// Starts an episode; the caller holds the token.
    pub(crate) fn run_as_initiator(&mut self, kind: EpisodeKind) {
        let participants = self.sh.active_slots();
        debug_assert!(participants.contains(&self.slot));
        let ep = Arc::new(Episode::new(kind, participants));
        for &s in &ep.participants {
            if s != self.slot {
                self.sh.send(s, Interrupt::Episode(ep.clone())).expect("active domain refused an episode");
            }
        }
        self.run_episode(&ep);
    }

    /// Phase change requested by a slice. Dropped if someone else holds the
    /// token; their episode (or a later slice) will get there.
    pub(crate) fn request_barrier(&mut self, kind: BarrierKind) {
        if !self.try_token() {
            self.service_interrupts();
            return;
        }
        let ek = match kind {
            BarrierKind::CycleHeap => EpisodeKind::Cycle { cycle: self.sh.gc.cycle() },
            k => EpisodeKind::Phase(k),
        };
        self.run_as_initiator(ek);
        self.release_token();
    }

    /// Opportunistic collector work done while waiting at an entry barrier.
    fn opportunistic(&mut self) -> bool {
        let b = self.sh.config.opportunistic_budget as i64;
        let left = self.sweep_slice(b);
        if left < b {
            return true;
        }
        if !self.mark_stack.is_empty() {
            self.mark_slice(b);
            return true;
        }
        false
    }

    pub(crate) fn publish_oracle_roots(&self, ep: &Episode) {
        if self.sh.config.debug_oracle {
            let mut r = ep.oracle_roots.lock();
            r.extend_from_slice(&self.roots);
            r.extend(self.pending_callbacks.iter().filter_map(|p| p.value));
            r.extend(self.finalisers.iter().filter(|f| f.keeps_target_alive()).map(|f| f.target));
        }
    }

    fn run_episode(&mut self, ep: &Arc<Episode>) {
        let Some(me) = ep.participants.iter().position(|&s| s == self.slot) else {
            return;
        };
        let t0 = self.pause_start();
        match ep.kind {
            EpisodeKind::StwMinor => {
                let rs: Vec<usize> = std::mem::take(&mut self.remset).into_iter().collect();
                ep.publish_remset(me, rs);
                ep.entry.wait(|| {}, || self.opportunistic());
                if me == 0 {
                    self.sh.minor_gcs.fetch_add(1, Ordering::Relaxed);
                }
                self.stw_minor_after_entry(ep, me);
            }
            EpisodeKind::Phase(kind) => {
                ep.entry.wait(|| {}, || self.opportunistic());
                let sh = self.sh.clone();
                ep.sync.wait(
                    || {
                        protocol::barrier_action(kind, &mut sh.counters(), ProtocolFaults::NONE);
                    },
                    || false,
                );
            }
            EpisodeKind::Cycle { cycle } => self.cycle_episode(ep, me, cycle),
        }
        self.pause_end_at(t0, ep.started);
    }

    fn cycle_episode(&mut self, ep: &Arc<Episode>, me: usize, cycle: u64) {
        ep.entry.wait(|| {}, || self.opportunistic());
        let sh = self.sh.clone();
        ep.sync.wait(
            || {
                let ok = sh.gc.cycle() == cycle
                    && protocol::barrier_check(BarrierKind::CycleHeap, &mut sh.counters(), ProtocolFaults::NONE);
                ep.proceed.store(ok, Ordering::Release);
            },
            || false,
        );
        if !ep.proceed.load(Ordering::Acquire) {
            return;
        }
        // empty every minor arena so the new cycle starts with an empty young
        // generation
        match self.sh.config.minor {
            MinorVariant::Stw => {
                let rs: Vec<usize> = std::mem::take(&mut self.remset).into_iter().collect();
                ep.publish_remset(me, rs);
                if me == 0 {
                    self.sh.minor_gcs.fetch_add(1, Ordering::Relaxed);
                }
                ep.sync.wait(|| ep.combine_remsets(), || false);
                self.stw_promote_share(ep, me);
            }
            MinorVariant::Conc => {
                self.conc_full_collection_inner();
            }
        }
        self.reset_arena();
        self.publish_oracle_roots(ep);
        if me == 0 {
            self.publish_orphan_roots(ep);
        }
        ep.sync.wait(
            || {
                sh.oracle_check(ep, "cycle end");
                sh.gc.rotate_colours();
                sh.counters().cycle_reset();
                sh.report.lock().cycles += 1;
            },
            || false,
        );
        self.start_cycle_locally(me == 0);
    }

    fn publish_orphan_roots(&self, ep: &Episode) {
        if self.sh.config.debug_oracle {
            let g = Value::from_raw(self.sh.globals.load(Ordering::Acquire));
            let pool = self.sh.pool.lock();
            let mut r = ep.oracle_roots.lock();
            r.push(g);
            r.extend(pool.finalisers.iter().map(|f| f.target));
        }
    }

    /// Local part of starting a new major cycle.
    fn start_cycle_locally(&mut self, leader: bool) {
        self.flags = LocalFlags::cycle_start();
        self.heap.start_cycle();
        self.ephe_mark_pos = 0;
        self.ephe_mark_round = 0;
        self.ephe_sweep_read = 0;
        self.ephe_sweep_write = 0;
        for i in 0..self.roots.len() {
            let v = self.roots[i];
            self.mark_value(v);
        }
        for i in 0..self.pending_callbacks.len() {
            if let Some(v) = self.pending_callbacks[i].value {
                self.mark_value(v);
            }
        }
        if leader {
            let g = Value::from_raw(self.sh.globals.load(Ordering::Acquire));
            self.mark_value(g);
            let targets: Vec<Value> = self.sh.pool.lock().finalisers.iter().map(|f| f.target).collect();
            for t in targets {
                self.mark_value(t);
            }
        }
        self.stats.cycles_seen += 1;
    }

    // ---- pause accounting

    pub(crate) fn pause_start(&self) -> (Instant, u64) {
        (Instant::now(), self.clock)
    }

    pub(crate) fn pause_end(&mut self, t0: (Instant, u64)) {
        self.record_pause(t0.0.elapsed().as_nanos() as u64, self.clock - t0.1);
    }

    fn pause_end_at(&mut self, t0: (Instant, u64), started: Instant) {
        let wall = started.min(t0.0).elapsed().as_nanos() as u64;
        self.record_pause(wall, self.clock - t0.1);
    }

    fn record_pause(&mut self, ns: u64, work: u64) {
        if self.in_slice {
            // nested in a slice, whose own pause covers this one
            return;
        }
        let v = if self.sh.config.logical_clock { work + 1 } else { ns };
        self.stats.pauses.push(v);
    }

    // ---- lifecycle

    /// Starts a new domain running `f` on its own thread.
    pub fn spawn<T, F>(&mut self, f: F) -> Result<DomainHandle<T>, RuntimeError>
    where
        T: Send + 'static,
        F: FnOnce(&mut Domain) -> T + Send + 'static,
    {
        self.acquire_token();
        let free = (0..self.sh.slots.len()).find(|&i| !self.sh.slots[i].active.load(Ordering::Acquire));
        let Some(slot) = free else {
            self.release_token();
            return Err(RuntimeError::DomainLimit(self.sh.slots.len()));
        };
        let d = match Domain::open(self.sh.clone(), slot, LocalFlags::spawned()) {
            Ok(d) => d,
            Err(e) => {
                self.release_token();
                return Err(e);
            }
        };
        self.sh.gc.num_doms.fetch_add(1, Ordering::AcqRel);
        self.sh.report.lock().domains_spawned += 1;
        self.release_token();
        let thread = thread::Builder::new()
            .name(format!("domain-{}", d.id))
            .spawn(move || {
                let mut d = d;
                let r = panic::catch_unwind(AssertUnwindSafe(|| f(&mut d)));
                d.terminate();
                r.map_err(panic_message)
            })
            .map_err(|e| RuntimeError::DomainPanicked(e.to_string()))?;
        Ok(DomainHandle { thread })
    }

    /// Waits for a spawned domain, staying responsive to interrupts.
    pub fn join<T>(&mut self, h: DomainHandle<T>) -> Result<T, RuntimeError> {
        while !h.thread.is_finished() {
            self.relax();
        }
        match h.thread.join() {
            Ok(Ok(v)) => Ok(v),
            Ok(Err(m)) => Err(RuntimeError::DomainPanicked(m)),
            Err(p) => Err(RuntimeError::DomainPanicked(panic_message(p))),
        }
    }

    fn wait_for_others(&mut self) {
        while self.sh.gc.num_doms.load(Ordering::Acquire) > 1 {
            self.relax();
        }
    }

    /// Hands everything this domain owns to the runtime and stops it.
    fn terminate(mut self) {
        // callbacks may allocate, so run them while collections still work
        self.run_pending_callbacks();
        self.acquire_token();
        match self.sh.config.minor {
            MinorVariant::Stw => self.run_as_initiator(EpisodeKind::StwMinor),
            MinorVariant::Conc => self.conc_full_collection_inner(),
        }
        self.reset_arena();
        let phase = self.sh.gc.phase();
        debug_assert!(self.pending_callbacks.is_empty());
        // finaliser targets outlive us as roots of the orphan pool
        let entries = std::mem::take(&mut self.finalisers);
        for e in &entries {
            self.mark_and_drain(e.target);
        }
        self.drain_mark_stack();
        let mut c = self.sh.counters();
        if !self.flags.marking_done {
            self.flags.marking_done = true;
            c.finish_marking();
        }
        if phase == Phase::SweepEphe && !self.flags.sweep_ephe_done {
            self.sweep_ephe_all();
        }
        self.sweep_everything();
        let ephe = std::mem::take(&mut self.ephemerons);
        {
            let mut pool = self.sh.pool.lock();
            self.sh.orphan_ephemerons.fetch_add(ephe.len(), Ordering::AcqRel);
            pool.ephemerons.extend(ephe);
            self.sh.orphan_finalisers.fetch_add(entries.len(), Ordering::AcqRel);
            pool.finalisers.extend(entries);
        }
        self.release_pages_on_terminate();
        let g = &self.sh.gc;
        {
            let _l = g.lock.lock();
            g.ephe_round.fetch_add(1, Ordering::AcqRel);
            g.marked_ephe.store(0, Ordering::Release);
            if self.flags.sweep_ephe_done {
                g.swept_ephe.fetch_sub(1, Ordering::AcqRel);
            }
            if self.flags.final_done {
                g.marked_final.fetch_sub(1, Ordering::AcqRel);
            }
            if self.flags.final_last_done {
                g.marked_final_last.fetch_sub(1, Ordering::AcqRel);
            }
            g.num_doms.fetch_sub(1, Ordering::AcqRel);
        }
        let s = &self.sh.slots[self.slot];
        let leftovers: Vec<Interrupt> = {
            let mut q = s.queue.lock();
            q.open = false;
            q.items.drain(..).collect()
        };
        for i in leftovers {
            match i {
                Interrupt::Promote(r) => r.retry(),
                Interrupt::Episode(_) => debug_assert!(false, "episode queued while holding the token"),
            }
        }
        s.epoch.fetch_add(1, Ordering::AcqRel);
        s.limit.store(usize::MAX, Ordering::SeqCst);
        s.active.store(false, Ordering::Release);
        self.sh.report.lock().absorb(&self.stats);
        self.release_token();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn barrier_runs_action_once_per_round() {
        let b = Arc::new(SpinBarrier::new(4));
        let hits = Arc::new(AtomicUsize::new(0));
        let hs: Vec<_> = (0..4)
            .map(|_| {
                let b = b.clone();
                let hits = hits.clone();
                thread::spawn(move || {
                    for round in 0..100 {
                        b.wait(
                            || {
                                hits.fetch_add(1, Ordering::SeqCst);
                            },
                            || false,
                        );
                        assert!(hits.load(Ordering::SeqCst) > round);
                    }
                })
            })
            .collect();
        for h in hs {
            h.join().unwrap();
        }
        assert_eq!(hits.load(Ordering::SeqCst), 100);
    }
}
