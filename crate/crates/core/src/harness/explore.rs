//! Exhaustive interleaving search over the major-slice protocol.
//!
//! Each abstract domain runs the same [`SliceMachine`] the runtime uses, one
//! shared-memory action per step, over [`ModelCounters`]. The scheduler picks
//! any enabled action of any domain: start a slice, take one slice step, join
//! a pending barrier, or (as the mutator) revive an object through an
//! ephemeron lookup. The search is breadth-first over distinct states.
//!
//! Checked properties:
//! - phases only move MARK -> MARK_FINAL -> SWEEP_EPHE -> (new cycle);
//! - MARK_FINAL is entered only when no domain has marking work;
//! - SWEEP_EPHE is entered only when no domain has marking work and every
//!   domain scanned its ephemerons after the last marking anywhere;
//! - a cycle ends only once every domain swept its ephemerons and ran its
//!   last-stage finalisers;
//! - the to-mark counter never goes negative;
//! - from every reachable state the cycle can still complete.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use crate::protocol::{
    barrier_action, BarrierKind, Counters, LocalFlags, ModelCounters, Phase, ProtocolFaults, SliceMachine,
    SliceWork, StepOutcome,
};

const SLICE_BUDGET: i64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExploreConfig {
    pub domains: usize,
    pub revivals: usize,
    /// Initial marking work per domain, in units.
    pub initial_work: u8,
    pub max_states: usize,
    pub faults: ProtocolFaults,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig { domains: 2, revivals: 1, initial_work: 1, max_states: 1_000_000, faults: ProtocolFaults::NONE }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Dom {
    flags: LocalFlags,
    machine: Option<SliceMachine>,
    work: u8,
    /// `epoch` value when this domain last finished an ephemeron scan.
    scanned_at: u8,
    joined: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct State {
    c: ModelCounters,
    doms: Vec<Dom>,
    /// Bumped whenever any object is marked.
    epoch: u8,
    revivals_left: u8,
    pending: Option<BarrierKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    StartSlice(usize),
    Step(usize),
    Join(usize),
    Revive(usize),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::StartSlice(d) => write!(f, "d{d}: start slice"),
            Action::Step(d) => write!(f, "d{d}: step"),
            Action::Join(d) => write!(f, "d{d}: join barrier"),
            Action::Revive(d) => write!(f, "d{d}: ephemeron revival"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub what: String,
    /// Actions from the initial state; the last one exposes the problem.
    pub schedule: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Verdict {
    pub states: usize,
    pub transitions: usize,
    pub complete: bool,
    pub cycled_states: usize,
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// [`SliceWork`] for one abstract domain. Marking work is a counter; sweeping
/// is a no-op; finalisers do nothing.
struct Work<'a> {
    d: &'a mut Dom,
    epoch: &'a mut u8,
}

impl SliceWork for Work<'_> {
    fn flags(&mut self) -> &mut LocalFlags {
        &mut self.d.flags
    }
    fn sweep(&mut self, budget: i64, _: &mut dyn Counters) -> i64 {
        budget
    }
    fn mark(&mut self, mut budget: i64, _: &mut dyn Counters) -> i64 {
        while budget > 0 && self.d.work > 0 {
            self.d.work -= 1;
            *self.epoch += 1;
            budget -= 1;
        }
        if self.d.work > 0 {
            0
        } else {
            budget
        }
    }
    fn mark_final(&mut self, _: &mut dyn Counters) {}
    fn mark_final_last(&mut self, _: &mut dyn Counters) {}
    fn mark_ephe(&mut self, budget: i64, _: u64, _: &mut dyn Counters) -> i64 {
        self.d.scanned_at = *self.epoch;
        budget
    }
    fn sweep_ephe(&mut self, budget: i64, _: &mut dyn Counters) -> i64 {
        budget
    }
}

fn initial(cfg: &ExploreConfig) -> State {
    let d = Dom {
        flags: LocalFlags::cycle_start(),
        machine: None,
        work: cfg.initial_work,
        scanned_at: u8::MAX,
        joined: false,
    };
    State {
        c: ModelCounters::new(cfg.domains as u8),
        doms: vec![d; cfg.domains],
        epoch: 0,
        revivals_left: cfg.revivals as u8,
        pending: None,
    }
}

fn cycled(s: &State) -> bool {
    s.c.cycles > 0
}

/// Mutators poll between slices. A domain inside a slice reaches a safe
/// point only when the slice asks for a barrier.
fn at_safe_point(d: &Dom) -> bool {
    d.machine.is_none()
}

fn enabled(s: &State) -> Vec<Action> {
    let mut out = Vec::new();
    for (i, d) in s.doms.iter().enumerate() {
        if d.joined {
            continue;
        }
        let revive_ok = s.revivals_left > 0 && phase(&s.c) != Phase::SweepEphe && d.machine.is_none();
        match s.pending {
            Some(_) => {
                if at_safe_point(d) {
                    out.push(Action::Join(i));
                } else {
                    out.push(Action::Step(i));
                }
                if revive_ok {
                    out.push(Action::Revive(i));
                }
            }
            None => {
                match d.machine {
                    None => out.push(Action::StartSlice(i)),
                    Some(_) => out.push(Action::Step(i)),
                }
                if revive_ok {
                    out.push(Action::Revive(i));
                }
            }
        }
    }
    out
}

fn phase(c: &ModelCounters) -> Phase {
    Phase::from_u8(c.phase)
}

/// Applies an action. Returns the successor and any property violated by
/// the transition.
fn apply(s: &State, a: Action, cfg: &ExploreConfig) -> (State, Option<String>) {
    let mut n = s.clone();
    let mut bad = None;
    match a {
        Action::StartSlice(i) => {
            n.doms[i].machine = Some(SliceMachine::new(SLICE_BUDGET));
        }
        Action::Revive(i) => {
            n.revivals_left -= 1;
            let d = &mut n.doms[i];
            if d.work == 0 && d.flags.marking_done {
                if phase(&n.c) == Phase::Mark {
                    // marked and drained on the spot
                    n.epoch += 1;
                } else {
                    d.flags.marking_done = false;
                    n.c.rearm();
                    d.work += 1;
                }
            } else {
                d.work += 1;
            }
        }
        Action::Step(i) => {
            let mut m = n.doms[i].machine.expect("stepping an idle domain");
            let mut c = n.c;
            let mut epoch = n.epoch;
            let out = {
                let mut w = Work { d: &mut n.doms[i], epoch: &mut epoch };
                m.step(&mut c, &mut w, cfg.faults)
            };
            n.c = c;
            n.epoch = epoch;
            match out {
                StepOutcome::Continue => n.doms[i].machine = Some(m),
                StepOutcome::Done => n.doms[i].machine = None,
                StepOutcome::Barrier(k) => {
                    n.doms[i].machine = Some(m);
                    // a losing request services the pending barrier instead
                    if n.pending.is_none() {
                        n.pending = Some(k);
                    }
                    n.doms[i].joined = true;
                }
            }
            if n.doms[i].machine.is_some_and(|m| m.is_done()) {
                n.doms[i].machine = None;
            }
        }
        Action::Join(i) => {
            n.doms[i].joined = true;
        }
    }
    if n.c.to_mark < 0 {
        bad = Some(format!("to-mark counter went negative ({})", n.c.to_mark));
    }
    if let Some(k) = n.pending {
        if n.doms.iter().all(|d| d.joined) {
            let before = phase(&n.c);
            let cycles_before = n.c.cycles;
            let mut c = n.c;
            let applied = barrier_action(k, &mut c, cfg.faults);
            n.c = c;
            n.pending = None;
            for d in n.doms.iter_mut() {
                d.joined = false;
            }
            if applied {
                let v = check_transition(&n, k, before, cycles_before);
                if v.is_some() {
                    bad = v;
                }
                if k == BarrierKind::CycleHeap {
                    for d in n.doms.iter_mut() {
                        d.flags = LocalFlags::cycle_start();
                    }
                }
            }
        }
    }
    (n, bad)
}

fn check_transition(n: &State, k: BarrierKind, before: Phase, cycles_before: u8) -> Option<String> {
    match k {
        BarrierKind::ToMarkFinal => {
            if before != Phase::Mark {
                return Some(format!("MARK_FINAL entered from {before}"));
            }
            if let Some(i) = n.doms.iter().position(|d| d.work > 0) {
                return Some(format!("premature MARK_FINAL: d{i} still has marking work"));
            }
        }
        BarrierKind::ToSweepEphe => {
            if before != Phase::MarkFinal {
                return Some(format!("SWEEP_EPHE entered from {before}"));
            }
            if let Some(i) = n.doms.iter().position(|d| d.work > 0) {
                return Some(format!("premature SWEEP_EPHE: d{i} still has marking work"));
            }
            if let Some(i) = n.doms.iter().position(|d| d.scanned_at != n.epoch) {
                return Some(format!("premature SWEEP_EPHE: d{i} has not rescanned ephemerons since the last mark"));
            }
        }
        BarrierKind::CycleHeap => {
            if before != Phase::SweepEphe {
                return Some(format!("cycle ended from {before}"));
            }
            if n.c.cycles != cycles_before + 1 {
                return Some("more than one cycle end".into());
            }
            if let Some(i) = n.doms.iter().position(|d| !d.flags.sweep_ephe_done || !d.flags.final_last_done) {
                return Some(format!("premature cycle end: d{i} unfinished"));
            }
        }
    }
    None
}

/// Runs the search.
pub fn explore(cfg: &ExploreConfig) -> Verdict {
    assert!((1..=3).contains(&cfg.domains), "the explorer supports 1 to 3 domains");
    let s0 = initial(cfg);
    let mut ids: HashMap<State, usize> = HashMap::new();
    let mut states: Vec<State> = Vec::new();
    let mut parent: Vec<Option<(usize, Action)>> = Vec::new();
    let mut succ: Vec<Vec<usize>> = Vec::new();
    let mut queue = VecDeque::new();
    ids.insert(s0.clone(), 0);
    states.push(s0);
    parent.push(None);
    succ.push(Vec::new());
    queue.push_back(0usize);
    let mut violations = Vec::new();
    let mut transitions = 0;
    let mut complete = true;
    let schedule = |parent: &Vec<Option<(usize, Action)>>, mut at: usize, last: Option<Action>| {
        let mut acts = Vec::new();
        if let Some(a) = last {
            acts.push(a.to_string());
        }
        while let Some((p, a)) = parent[at] {
            acts.push(a.to_string());
            at = p;
        }
        acts.reverse();
        acts
    };
    while let Some(id) = queue.pop_front() {
        let s = states[id].clone();
        if cycled(&s) {
            continue;
        }
        for a in enabled(&s) {
            let (n, bad) = apply(&s, a, cfg);
            transitions += 1;
            if let Some(what) = bad {
                if violations.len() < 8 {
                    violations.push(Violation { what, schedule: schedule(&parent, id, Some(a)) });
                }
                continue;
            }
            let nid = match ids.get(&n) {
                Some(&x) => x,
                None => {
                    if states.len() >= cfg.max_states {
                        complete = false;
                        continue;
                    }
                    let x = states.len();
                    ids.insert(n.clone(), x);
                    states.push(n);
                    parent.push(Some((id, a)));
                    succ.push(Vec::new());
                    queue.push_back(x);
                    x
                }
            };
            succ[id].push(nid);
        }
    }
    // every state must still be able to reach a completed cycle
    let mut cycled_states = 0;
    if complete && violations.is_empty() {
        let mut pred: Vec<Vec<usize>> = vec![Vec::new(); states.len()];
        for (i, ss) in succ.iter().enumerate() {
            for &j in ss {
                pred[j].push(i);
            }
        }
        let mut can = vec![false; states.len()];
        let mut work: Vec<usize> = (0..states.len()).filter(|&i| cycled(&states[i])).collect();
        cycled_states = work.len();
        for &i in &work {
            can[i] = true;
        }
        while let Some(j) = work.pop() {
            for &i in &pred[j] {
                if !can[i] {
                    can[i] = true;
                    work.push(i);
                }
            }
        }
        if cycled_states == 0 {
            violations.push(Violation { what: "no schedule completes the cycle".into(), schedule: vec![] });
        } else if let Some(stuck) = (0..states.len()).find(|&i| !can[i]) {
            violations.push(Violation {
                what: "state from which the cycle can no longer complete".into(),
                schedule: schedule(&parent, stuck, None),
            });
        }
    }
    Verdict { states: states.len(), transitions, complete, cycled_states, violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(domains: usize, revivals: usize, faults: ProtocolFaults) -> ExploreConfig {
        ExploreConfig { domains, revivals, faults, ..ExploreConfig::default() }
    }

    #[test]
    fn one_domain_always_cycles() {
        let v = explore(&cfg(1, 0, ProtocolFaults::NONE));
        assert!(v.ok(), "{:?}", v.violations);
        assert!(v.complete);
        assert!(v.cycled_states > 0);
    }

    #[test]
    fn two_domains_one_revival() {
        let v = explore(&cfg(2, 1, ProtocolFaults::NONE));
        assert!(v.ok(), "{:?}", v.violations);
        assert!(v.complete);
    }

    #[test]
    fn skipped_recheck_is_caught() {
        let f = ProtocolFaults { skip_barrier_recheck: true, ..ProtocolFaults::NONE };
        let v = explore(&cfg(2, 1, f));
        assert!(!v.ok());
    }

    #[test]
    fn unguarded_decrement_is_caught() {
        let f = ProtocolFaults { decrement_without_flag: true, ..ProtocolFaults::NONE };
        let v = explore(&cfg(2, 0, f));
        assert!(v.violations.iter().any(|x| x.what.contains("negative")));
    }

    #[test]
    fn stale_round_count_is_caught() {
        let f = ProtocolFaults { skip_round_compare: true, ..ProtocolFaults::NONE };
        let v = explore(&cfg(2, 1, f));
        assert!(v.violations.iter().any(|x| x.what.contains("rescanned")));
        assert!(!v.violations[0].schedule.is_empty());
    }
}

