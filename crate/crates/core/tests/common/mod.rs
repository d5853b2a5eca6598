#![allow(dead_code)]

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retroheap::{Config, Domain, GcState, MinorVariant, Runtime, Tag, Value};

pub const VARIANTS: [MinorVariant; 2] = [MinorVariant::Stw, MinorVariant::Conc];

pub fn small_config(minor: MinorVariant) -> Config {
    Config { arena_words: 4096, max_domains: 4, minor, min_slice: 256, ..Config::default() }
}

// ---- floating garbage

/// Size of the objects whose reclamation is tracked. No other allocation in
/// the scenario has this size, so their slots are never reused.
const VICTIM_FIELDS: usize = 11;

#[derive(Debug, Default)]
pub struct FloatingOutcome {
    pub victims: usize,
    pub dropped: usize,
    pub checked: usize,
    pub cycles: u64,
    pub failures: Vec<String>,
}

/// Single-domain run: victims are dropped at random points; any victim that
/// became unreachable during cycle `c` must be Free once cycle `c + 2` has
/// ended, and no reachable victim may ever be reclaimed.
pub fn floating_garbage(minor: MinorVariant, seed: u64, steps: usize) -> FloatingOutcome {
    let (out, _) = Runtime::run(small_config(minor), |d| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = FloatingOutcome::default();
        let nv = 300;
        let table = d.alloc_major(nv, Tag::Block);
        d.set_global(0, table);
        for i in 0..nv {
            let v = d.alloc(VICTIM_FIELDS, Tag::Block);
            d.write(v, 0, Value::int(i as i64));
            d.write(table, i, v);
        }
        d.minor_collection();
        let victims: Vec<Value> = (0..nv).map(|i| d.read(table, i)).collect();
        out.victims = nv;
        let mut dropped_in: Vec<Option<u64>> = vec![None; nv];
        // live data that gives marking something to do
        let keep = d.alloc_major(64, Tag::Block);
        d.set_global(1, keep);
        let start_cycle = d.gc_snapshot().cycle;
        for step in 0..steps {
            let n = rng.gen_range(1..=8);
            let mut list = Value::UNIT;
            let s = d.push_root(list);
            for j in 0..n {
                list = d.root(s);
                let node = d.alloc_with(Tag::Block, &[Value::int(j), list]);
                d.set_root(s, node);
            }
            list = d.pop_root();
            if rng.gen_ratio(1, 3) {
                d.write(keep, rng.gen_range(0..64), list);
            }
            if rng.gen_ratio(1, 20) {
                let i = rng.gen_range(0..nv);
                if dropped_in[i].is_none() {
                    d.write(table, i, Value::UNIT);
                    dropped_in[i] = Some(d.gc_snapshot().cycle);
                    out.dropped += 1;
                }
            }
            if step % 16 == 0 {
                check_victims(d, &victims, &dropped_in, &mut out);
            }
        }
        // let every pending victim reach its deadline
        let last = dropped_in.iter().flatten().max().copied().unwrap_or(0);
        while d.gc_snapshot().cycle < last + 3 {
            d.finish_major_cycle();
            check_victims(d, &victims, &dropped_in, &mut out);
        }
        out.cycles = d.gc_snapshot().cycle - start_cycle;
        out
    })
    .unwrap();
    out
}

fn check_victims(d: &mut Domain, victims: &[Value], dropped_in: &[Option<u64>], out: &mut FloatingOutcome) {
    let now = d.gc_snapshot().cycle;
    for (i, &v) in victims.iter().enumerate() {
        let st = d.gc_state(v);
        match dropped_in[i] {
            Some(c) if now >= c + 3 => {
                out.checked += 1;
                if st != GcState::Free {
                    out.failures.push(format!("victim {i} dropped in cycle {c} is {st:?} in cycle {now}"));
                }
            }
            Some(_) => {}
            None => {
                if matches!(st, GcState::Free | GcState::Garbage) {
                    out.failures.push(format!("reachable victim {i} is {st:?} in cycle {now}"));
                }
            }
        }
    }
}

// ---- ephemeron equivalence

/// An abstract heap: objects with up to two outgoing edges, some roots, and
/// ephemerons (always reachable) owned by one of several domains.
#[derive(Debug, Clone)]
pub struct HeapPlan {
    pub domains: usize,
    pub edges: Vec<Vec<usize>>,
    pub roots: Vec<usize>,
    pub ephemerons: Vec<EphePlan>,
}

#[derive(Debug, Clone)]
pub struct EphePlan {
    pub owner: usize,
    pub keys: Vec<usize>,
    pub data: Option<usize>,
}

impl HeapPlan {
    /// Which ephemerons keep their data, by a plain fixpoint over the plan.
    pub fn oracle(&self) -> Vec<bool> {
        let mut live: HashSet<usize> = HashSet::new();
        let mut stack: Vec<usize> = self.roots.clone();
        loop {
            while let Some(o) = stack.pop() {
                if live.insert(o) {
                    stack.extend(self.edges[o].iter().copied());
                }
            }
            for e in &self.ephemerons {
                if let Some(x) = e.data {
                    if e.keys.iter().all(|k| live.contains(k)) && !live.contains(&x) {
                        stack.push(x);
                    }
                }
            }
            if stack.is_empty() {
                break;
            }
        }
        self.ephemerons.iter().map(|e| e.data.is_some() && e.keys.iter().all(|k| live.contains(k))).collect()
    }

    /// Longest chain of ephemerons where each one's data is a key of the next.
    pub fn chain_depth(&self) -> usize {
        fn depth(p: &HeapPlan, i: usize, seen: &mut Vec<bool>) -> usize {
            if seen[i] {
                return 0;
            }
            seen[i] = true;
            let mut best = 0;
            if let Some(x) = p.ephemerons[i].data {
                for (j, e) in p.ephemerons.iter().enumerate() {
                    if e.keys.contains(&x) {
                        best = best.max(depth(p, j, seen));
                    }
                }
            }
            seen[i] = false;
            best + 1
        }
        (0..self.ephemerons.len()).map(|i| depth(self, i, &mut vec![false; self.ephemerons.len()])).max().unwrap_or(0)
    }

    pub fn random(rng: &mut impl Rng) -> HeapPlan {
        let domains = rng.gen_range(1..=3);
        let n = rng.gen_range(1..=10);
        let edges = (0..n).map(|_| (0..rng.gen_range(0..=2)).map(|_| rng.gen_range(0..n)).collect()).collect();
        let roots = (0..n).filter(|_| rng.gen_ratio(1, 4)).collect();
        let ne = rng.gen_range(1..=8);
        let mut ephemerons: Vec<EphePlan> = Vec::with_capacity(ne);
        for i in 0..ne {
            let nk = rng.gen_range(1..=2);
            let mut keys: Vec<usize> = (0..nk).map(|_| rng.gen_range(0..n)).collect();
            // bias towards chains: key on the previous ephemeron's data
            if i > 0 && rng.gen_ratio(1, 2) {
                if let Some(x) = ephemerons[i - 1].data {
                    keys[0] = x;
                }
            }
            let data = rng.gen_ratio(4, 5).then(|| rng.gen_range(0..n));
            ephemerons.push(EphePlan { owner: rng.gen_range(0..domains), keys, data });
        }
        HeapPlan { domains, edges, roots, ephemerons }
    }
}

/// Builds the plan in a runtime, completes the cycle in progress and one full
/// cycle, and reports which ephemerons still hold data, plus whether their
/// key slots are intact.
pub fn run_plan(plan: &HeapPlan, minor: MinorVariant) -> Vec<(bool, bool)> {
    let plan = plan.clone();
    let (out, report) = Runtime::run(Config { debug_oracle: true, ..small_config(minor) }, move |d| {
        let n = plan.edges.len();
        // objects are placed straight in the major heap so their addresses
        // stay put while the plan is wired up
        let objs: Vec<Value> = (0..n)
            .map(|i| {
                let o = d.alloc_major(3, Tag::Block);
                d.write(o, 0, Value::int(i as i64));
                o
            })
            .collect();
        for (i, es) in plan.edges.iter().enumerate() {
            for (j, &t) in es.iter().enumerate() {
                d.write(objs[i], 1 + j, objs[t]);
            }
        }
        let roots = d.alloc_major(plan.roots.len().max(1), Tag::Block);
        for (j, &r) in plan.roots.iter().enumerate() {
            d.write(roots, j, objs[r]);
        }
        d.set_global(0, roots);
        let ne = plan.ephemerons.len();
        let table = d.alloc_major(ne, Tag::Block);
        d.set_global(1, table);
        for k in (0..ne).filter(|&k| plan.ephemerons[k].owner == 0) {
            build_ephemeron(d, &plan.ephemerons[k], &objs, k);
        }
        // other owners build theirs on their own domains and stay alive
        // until the cycles are over
        let ready = Arc::new(AtomicUsize::new(0));
        let done = Arc::new(AtomicBool::new(false));
        let mut hs = Vec::new();
        for w in 1..plan.domains {
            let mine: Vec<usize> = (0..ne).filter(|&k| plan.ephemerons[k].owner == w).collect();
            let (plan, objs, ready, done) = (plan.clone(), objs.clone(), ready.clone(), done.clone());
            hs.push(
                d.spawn(move |d| {
                    for k in mine {
                        build_ephemeron(d, &plan.ephemerons[k], &objs, k);
                    }
                    ready.fetch_add(1, Ordering::SeqCst);
                    while !done.load(Ordering::SeqCst) {
                        d.relax();
                    }
                })
                .unwrap(),
            );
        }
        while ready.load(Ordering::SeqCst) < plan.domains - 1 {
            d.relax();
        }
        d.finish_major_cycle();
        d.finish_major_cycle();
        let table = d.global(1);
        let mut out = Vec::with_capacity(ne);
        for k in 0..ne {
            let e = d.read(table, k);
            let data = !d.read(e, 0).is_empty();
            let keys = (1..d.size_of(e)).all(|j| !d.read(e, j).is_empty());
            out.push((data, keys));
        }
        done.store(true, Ordering::SeqCst);
        for h in hs {
            d.join(h).unwrap();
        }
        out
    })
    .unwrap();
    assert!(report.oracle_violations.is_empty(), "{:?}", report.oracle_violations);
    out
}

fn build_ephemeron(d: &mut Domain, p: &EphePlan, objs: &[Value], k: usize) {
    let e = d.ephe_create(p.keys.len());
    for (j, &key) in p.keys.iter().enumerate() {
        d.ephe_set_key(e, j, objs[key]);
    }
    if let Some(x) = p.data {
        d.ephe_set_data(e, objs[x]);
    }
    let table = d.global(1);
    d.write(table, k, e);
}
