//! Benchmark workloads.
//!
//! Every workload is deterministic given its spec when it runs on a single
//! domain. With more domains the checksum is still fixed, but collection
//! counts depend on the interleaving.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Config, MinorVariant, MAX_DOMAINS};
use crate::domains::{Domain, Runtime};
use crate::error::{ConfigError, LazyError, RuntimeError};
use crate::minor_stw::share_bounds;
use crate::stats::GcReport;
use crate::value::{Tag, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Workload {
    /// Allocate and discard binary trees, keeping one long-lived tree.
    Treechurn,
    /// A master domain hands work items to workers over ring buffers.
    Chanshare,
    /// An ephemeron-keyed cache with large keys, beside a big retained graph.
    Ephecache,
    /// Many domains force a shared table of lazy cells.
    Lazymemo,
}

impl Workload {
    pub fn name(self) -> &'static str {
        match self {
            Workload::Treechurn => "treechurn",
            Workload::Chanshare => "chanshare",
            Workload::Ephecache => "ephecache",
            Workload::Lazymemo => "lazymemo",
        }
    }

    pub fn default_iterations(self) -> usize {
        match self {
            Workload::Treechurn => 1000,
            Workload::Chanshare => 20_000,
            Workload::Ephecache => 200_000,
            Workload::Lazymemo => 50_000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WorkloadSpec {
    pub workload: Workload,
    /// Mutator domains. For `chanshare` this counts workers; the master is
    /// an extra domain.
    pub domains: usize,
    pub iterations: usize,
    pub arena_words: usize,
    pub minor: MinorVariant,
    pub seed: u64,
    pub max_slice: Option<usize>,
    pub min_slice: Option<usize>,
    pub pacing: Option<f64>,
    /// Objects in the `ephecache` retained graph.
    pub retained: usize,
    pub logical_clock: bool,
    pub debug_oracle: bool,
}

impl WorkloadSpec {
    pub fn new(workload: Workload, domains: usize) -> WorkloadSpec {
        let c = Config::default();
        WorkloadSpec {
            workload,
            domains,
            iterations: workload.default_iterations(),
            arena_words: c.arena_words,
            minor: c.minor,
            seed: 42,
            max_slice: None,
            min_slice: None,
            pacing: None,
            retained: 1_000_000,
            logical_clock: false,
            debug_oracle: c.debug_oracle,
        }
    }

    /// Domains that run at once, including the master where there is one.
    pub fn live_domains(&self) -> usize {
        match self.workload {
            Workload::Chanshare => self.domains + 1,
            _ => self.domains,
        }
    }

    pub fn config(&self) -> Result<Config, ConfigError> {
        let live = self.live_domains();
        if self.domains == 0 || live > MAX_DOMAINS {
            return Err(ConfigError::BadDomainCount(self.domains));
        }
        let d = Config::default();
        let c = Config {
            max_domains: live.next_power_of_two(),
            arena_words: self.arena_words,
            minor: self.minor,
            pacing: self.pacing.unwrap_or(d.pacing),
            min_slice: self.min_slice.unwrap_or(d.min_slice),
            max_slice: self.max_slice,
            global_slots: d.global_slots.max(live + 2),
            debug_oracle: self.debug_oracle,
            logical_clock: self.logical_clock,
            ..d
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WorkloadResult {
    pub spec: WorkloadSpec,
    pub report: GcReport,
    /// Workload-specific digest of the computed results.
    pub checksum: u64,
    pub elapsed_ns: u64,
}

pub fn run_workload(spec: &WorkloadSpec) -> Result<WorkloadResult, RuntimeError> {
    let config = spec.config()?;
    let s = spec.clone();
    let t0 = Instant::now();
    let (r, report) = Runtime::run(config, move |d| match s.workload {
        Workload::Treechurn => treechurn(d, &s),
        Workload::Chanshare => chanshare(d, &s),
        Workload::Ephecache => ephecache(d, &s),
        Workload::Lazymemo => lazymemo(d, &s),
    })?;
    let elapsed_ns = t0.elapsed().as_nanos() as u64;
    Ok(WorkloadResult { spec: spec.clone(), report, checksum: r?, elapsed_ns })
}

fn rng_for(seed: u64, stream: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

/// Runs `f(d, i)` for `i in 0..n`, part 0 on the calling domain and the rest
/// on new domains. Returns the results in order.
fn fan_out<F>(d: &mut Domain, n: usize, f: F) -> Result<Vec<u64>, RuntimeError>
where
    F: Fn(&mut Domain, usize) -> u64 + Send + Sync + 'static,
{
    let f = Arc::new(f);
    let mut hs = Vec::with_capacity(n.saturating_sub(1));
    for i in 1..n {
        let f = f.clone();
        hs.push(d.spawn(move |d| f(d, i))?);
    }
    let mut out = vec![f(d, 0)];
    for h in hs {
        out.push(d.join(h)?);
    }
    Ok(out)
}

// ---- treechurn

const LONG_LIVED_DEPTH: u32 = 10;
const MIN_DEPTH: u32 = 4;
const MAX_DEPTH: u32 = 12;

pub(crate) fn make_tree(d: &mut Domain, depth: u32) -> Value {
    if depth == 0 {
        return d.alloc(2, Tag::Block);
    }
    let l = make_tree(d, depth - 1);
    let s = d.push_root(l);
    let r = make_tree(d, depth - 1);
    d.push_root(r);
    let node = d.alloc(2, Tag::Block);
    let (l, r) = (d.root(s), d.root(s + 1));
    d.truncate_roots(s);
    d.write(node, 0, l);
    d.write(node, 1, r);
    node
}

pub(crate) fn count_tree(d: &mut Domain, t: Value) -> u64 {
    let mut n = 0;
    let mut stack = vec![t];
    while let Some(v) = stack.pop() {
        n += 1;
        let l = d.read(v, 0);
        if l.is_pointer() {
            stack.push(l);
            stack.push(d.read(v, 1));
        }
    }
    n
}

fn tree_nodes(depth: u32) -> u64 {
    (1 << (depth + 1)) - 1
}

fn treechurn(d: &mut Domain, s: &WorkloadSpec) -> Result<u64, RuntimeError> {
    let (seed, iters, n) = (s.seed, s.iterations, s.domains);
    let parts = fan_out(d, n, move |d, i| {
        let (lo, hi) = share_bounds(iters, n, i);
        let mut rng = rng_for(seed, i);
        let long = make_tree(d, LONG_LIVED_DEPTH);
        let slot = d.push_root(long);
        let mut sum = 0u64;
        for _ in lo..hi {
            let depth = rng.gen_range(MIN_DEPTH..=MAX_DEPTH);
            let t = make_tree(d, depth);
            let c = count_tree(d, t);
            assert_eq!(c, tree_nodes(depth), "tree lost nodes");
            sum += c;
        }
        let long = d.root(slot);
        assert_eq!(count_tree(d, long), tree_nodes(LONG_LIVED_DEPTH), "long-lived tree lost nodes");
        d.truncate_roots(slot);
        sum
    })?;
    Ok(parts.iter().fold(0u64, |a, &b| a.wrapping_add(b)))
}

// ---- chanshare

const RING: usize = 64;
const HEAD: usize = 0;
const TAIL: usize = 1;
const STOP: i64 = -1;

fn ring_push(d: &mut Domain, ring: Value, tail: &mut i64, item: Value) {
    let slot = d.push_root(item);
    loop {
        let head = d.read(ring, HEAD).decode_scalar().unwrap();
        if *tail - head < RING as i64 {
            break;
        }
        d.relax();
    }
    let item = d.root(slot);
    d.truncate_roots(slot);
    d.write(ring, 2 + (*tail as usize % RING), item);
    *tail += 1;
    d.write(ring, TAIL, Value::int(*tail));
}

fn ring_pop(d: &mut Domain, ring: Value, head: &mut i64) -> Value {
    loop {
        let tail = d.read(ring, TAIL).decode_scalar().unwrap();
        if *head < tail {
            break;
        }
        d.relax();
    }
    let i = 2 + (*head as usize % RING);
    let item = d.read(ring, i);
    d.write(ring, i, Value::UNIT);
    *head += 1;
    d.write(ring, HEAD, Value::int(*head));
    item
}

fn chanshare(d: &mut Domain, s: &WorkloadSpec) -> Result<u64, RuntimeError> {
    let workers = s.domains;
    let mut rings = Vec::with_capacity(workers);
    for w in 0..workers {
        let ring = d.alloc_major(2 + RING, Tag::Block);
        d.set_global(1 + w, ring);
        rings.push(ring);
    }
    let mut hs = Vec::with_capacity(workers);
    for w in 0..workers {
        hs.push(d.spawn(move |d| {
            let ring = d.global(1 + w);
            let mut head = 0;
            let mut sum = 0u64;
            loop {
                let item = ring_pop(d, ring, &mut head);
                if item == Value::int(STOP) {
                    break;
                }
                for f in 0..d.size_of(item) {
                    sum += d.read(item, f).decode_scalar().unwrap() as u64;
                }
                // some private work per item
                let t = make_tree(d, 3);
                sum += count_tree(d, t) - tree_nodes(3);
            }
            sum
        })?);
    }
    let mut rng = rng_for(s.seed, 0);
    let mut tails = vec![0i64; workers];
    let mut expected = 0u64;
    for k in 0..s.iterations {
        let w = k % workers;
        let n = rng.gen_range(1..=8);
        let item = d.alloc(n, Tag::Block);
        for f in 0..n {
            let x = rng.gen_range(0..1000);
            expected += x as u64;
            d.write(item, f, Value::int(x));
        }
        ring_push(d, rings[w], &mut tails[w], item);
    }
    for w in 0..workers {
        ring_push(d, rings[w], &mut tails[w], Value::int(STOP));
    }
    let mut total = 0u64;
    for h in hs {
        total += d.join(h)?;
    }
    assert_eq!(total, expected, "items lost or corrupted in transit");
    Ok(total)
}

// ---- ephecache

const KEY_WORDS: usize = 300;
const TABLE: usize = 256;
const LIVE_KEYS: usize = 32;

/// A list of `n` two-field nodes allocated straight into the major heap.
fn build_retained(d: &mut Domain, n: usize) -> Value {
    let slot = d.push_root(Value::UNIT);
    for i in 0..n {
        let node = d.alloc_major(2, Tag::Block);
        d.write(node, 0, Value::int(i as i64));
        let next = d.root(slot);
        d.write(node, 1, next);
        d.set_root(slot, node);
    }
    d.pop_root()
}

fn ephecache(d: &mut Domain, s: &WorkloadSpec) -> Result<u64, RuntimeError> {
    let retained = build_retained(d, s.retained);
    d.set_global(0, retained);
    let (seed, iters, n) = (s.seed, s.iterations, s.domains);
    let parts = fan_out(d, n, move |d, i| {
        let (lo, hi) = share_bounds(iters, n, i);
        cache_share(d, seed, hi - lo, i)
    })?;
    // the retained graph must have come through intact
    let mut v = d.global(0);
    let mut count = 0usize;
    while v.is_pointer() {
        let x = d.read(v, 0).decode_scalar().unwrap() as usize;
        assert_eq!(x, s.retained - 1 - count, "retained graph corrupted");
        count += 1;
        v = d.read(v, 1);
    }
    assert_eq!(count, s.retained);
    Ok(parts.iter().fold(count as u64, |a, &b| a.wrapping_add(b)))
}

fn cache_share(d: &mut Domain, seed: u64, iters: usize, i: usize) -> u64 {
    let mut rng = rng_for(seed, i);
    let base = d.roots_len();
    let table = d.alloc_major(TABLE, Tag::Block);
    d.push_root(table);
    let keys = d.alloc_major(LIVE_KEYS, Tag::Block);
    d.push_root(keys);
    let (mut hits, mut misses, mut next_id) = (0u64, 0u64, 0i64);
    for it in 0..iters {
        if it < LIVE_KEYS || rng.gen_ratio(1, 4) {
            let id = next_id;
            next_id += 1;
            let key = d.alloc_major(KEY_WORDS, Tag::Block);
            d.write(key, 0, Value::int(id));
            d.write(keys, id as usize % LIVE_KEYS, key);
            let e = d.ephe_create(1);
            let es = d.push_root(e);
            d.ephe_set_key(e, 0, key);
            let data = d.alloc_with(Tag::Block, &[Value::int(id), Value::int(id * 7)]);
            let e = d.root(es);
            d.truncate_roots(es);
            d.ephe_set_data(e, data);
            d.write(table, id as usize % TABLE, e);
        } else {
            let k = d.read(keys, rng.gen_range(0..LIVE_KEYS));
            let id = d.read(k, 0).decode_scalar().unwrap();
            let e = d.read(table, id as usize % TABLE);
            match d.ephe_get_key(e, 0) {
                Some(k2) if k2 == k => {
                    let data = d.ephe_get_data(e).expect("a live key lost its data");
                    assert_eq!(d.read(data, 0), Value::int(id));
                    assert_eq!(d.read(data, 1), Value::int(id * 7));
                    hits += 1;
                }
                _ => misses += 1,
            }
        }
        // short-lived garbage
        let g = d.alloc(1 + it % 5, Tag::Block);
        d.write(g, 0, Value::int(it as i64));
    }
    d.truncate_roots(base);
    hits.wrapping_mul(1_000_003).wrapping_add(misses)
}

// ---- lazymemo

const CELLS: usize = 1024;

fn memo_len(i: usize) -> usize {
    i % 32 + 1
}

fn memo_sum(i: usize) -> u64 {
    (0..memo_len(i)).map(|j| (i + j) as u64).sum()
}

fn lazymemo(d: &mut Domain, s: &WorkloadSpec) -> Result<u64, RuntimeError> {
    let table = d.alloc_major(CELLS, Tag::Block);
    d.set_global(0, table);
    let execs: Arc<Vec<AtomicU32>> = Arc::new((0..CELLS).map(|_| AtomicU32::new(0)).collect());
    for i in 0..CELLS {
        let ex = execs.clone();
        let cell = d.lazy_new(move |d| {
            ex[i].fetch_add(1, Ordering::SeqCst);
            let slot = d.push_root(Value::UNIT);
            for j in 0..memo_len(i) {
                let tail = d.root(slot);
                let node = d.alloc_with(Tag::Block, &[Value::int((i + j) as i64), tail]);
                d.set_root(slot, node);
            }
            Ok(d.pop_root())
        });
        d.write(table, i, cell);
    }
    d.minor_collection();
    let (seed, iters, n) = (s.seed, s.iterations, s.domains);
    let parts = fan_out(d, n, move |d, i| {
        let (lo, hi) = share_bounds(iters, n, i);
        let mut rng = rng_for(seed, i);
        let table = d.global(0);
        let mut sum = 0u64;
        for _ in lo..hi {
            let idx = rng.gen_range(0..CELLS);
            let cell = d.read(table, idx);
            let v = loop {
                match d.force(cell) {
                    Ok(v) => break v,
                    Err(LazyError::ConcurrentForce(_)) => d.relax(),
                    Err(e) => panic!("force failed: {e}"),
                }
            };
            let mut got = 0u64;
            let mut p = v;
            while p.is_pointer() {
                got += d.read(p, 0).decode_scalar().unwrap() as u64;
                p = d.read(p, 1);
            }
            assert_eq!(got, memo_sum(idx), "memoised value corrupted");
            sum += got;
        }
        sum
    })?;
    for (i, e) in execs.iter().enumerate() {
        let e = e.load(Ordering::SeqCst);
        assert!(e <= 1, "cell {i} computed {e} times");
    }
    Ok(parts.iter().fold(0u64, |a, &b| a.wrapping_add(b)))
}
