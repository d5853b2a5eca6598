//! The major-slice phase protocol.
//!
//! This is the termination and phase-change logic of a major slice, written
//! as a small-step state machine over an abstract set of shared counters.
//! The runtime drives it with atomics on [`crate::domains::GlobalGcState`];
//! the interleaving explorer drives the very same machine over a plain model
//! state, one shared-memory action per step.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Mark = 0,
    MarkFinal = 1,
    SweepEphe = 2,
}

impl Phase {
    pub fn from_u8(v: u8) -> Phase {
        match v {
            0 => Phase::Mark,
            1 => Phase::MarkFinal,
            _ => Phase::SweepEphe,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Mark => "MARK",
            Phase::MarkFinal => "MARK_FINAL",
            Phase::SweepEphe => "SWEEP_EPHE",
        })
    }
}

/// Domain-local protocol flags (the `dl` variables).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct LocalFlags {
    pub marking_done: bool,
    pub ephe_round: u64,
    pub sweep_ephe_done: bool,
    /// Finalisers of the first kind have been processed this cycle.
    pub final_done: bool,
    pub final_last_done: bool,
}

impl LocalFlags {
    /// Flags at the start of a cycle, for a domain counted in the cycle.
    pub fn cycle_start() -> LocalFlags {
        LocalFlags::default()
    }

    /// Flags for a domain created mid-cycle: it has no marking work.
    pub fn spawned() -> LocalFlags {
        LocalFlags { marking_done: true, ..LocalFlags::default() }
    }
}

/// Deliberate protocol bugs, used only to check that the explorer finds them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProtocolFaults {
    /// Barrier bodies apply the transition without re-testing the condition.
    pub skip_barrier_recheck: bool,
    /// Finishing marking decrements the counter without consulting the
    /// domain's marking-done flag.
    pub decrement_without_flag: bool,
    /// The ephemeron-marked count is bumped even if the round moved on.
    pub skip_round_compare: bool,
}

impl ProtocolFaults {
    pub const NONE: ProtocolFaults =
        ProtocolFaults { skip_barrier_recheck: false, decrement_without_flag: false, skip_round_compare: false };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BarrierKind {
    ToMarkFinal,
    ToSweepEphe,
    CycleHeap,
}

/// Shared protocol state. Each method is one indivisible action.
pub trait Counters {
    fn phase(&mut self) -> Phase;
    fn num_doms(&mut self) -> u64;
    fn to_mark(&mut self) -> i64;
    fn ephe_round(&mut self) -> u64;
    fn marked_ephe(&mut self) -> u64;
    fn swept_ephe(&mut self) -> u64;
    fn marked_final(&mut self) -> u64;
    fn marked_final_last(&mut self) -> u64;
    /// Ephemerons left behind by terminated domains and not yet adopted.
    fn orphaned_ephemerons(&mut self) -> bool;

    /// `gNumDomsToMark--; gEpheRound++; gNumDomsMarkedEphe = 0` as one step.
    fn finish_marking(&mut self);
    /// `if cached == gEpheRound: gNumDomsMarkedEphe++` as one step; the
    /// comparison is skipped when `compare` is false.
    fn count_ephe_marked(&mut self, cached: u64, compare: bool);
    fn count_swept_ephe(&mut self);
    fn count_final(&mut self);
    fn count_final_last(&mut self);
    /// `gNumDomsToMark++`, when a finished domain receives new mark work.
    fn rearm(&mut self);
    fn set_phase(&mut self, p: Phase);
    /// Resets every counter for a new cycle and returns to MARK.
    fn cycle_reset(&mut self);
}

pub fn mark_final_ready(c: &mut dyn Counters) -> bool {
    c.phase() == Phase::Mark && c.to_mark() == 0
}

pub fn sweep_ephe_ready(c: &mut dyn Counters) -> bool {
    if c.phase() != Phase::MarkFinal || c.to_mark() != 0 {
        return false;
    }
    let n = c.num_doms();
    c.marked_ephe() == n && c.marked_final() == n && !c.orphaned_ephemerons()
}

pub fn cycle_ready(c: &mut dyn Counters) -> bool {
    if c.phase() != Phase::SweepEphe {
        return false;
    }
    let n = c.num_doms();
    c.swept_ephe() == n && c.marked_final_last() == n
}

/// The test run by the last domain to reach a phase-change barrier.
pub fn barrier_check(kind: BarrierKind, c: &mut dyn Counters, faults: ProtocolFaults) -> bool {
    if faults.skip_barrier_recheck {
        return true;
    }
    match kind {
        BarrierKind::ToMarkFinal => mark_final_ready(c),
        BarrierKind::ToSweepEphe => sweep_ephe_ready(c),
        BarrierKind::CycleHeap => cycle_ready(c),
    }
}

/// Re-tests the condition and applies the transition. For
/// [`BarrierKind::CycleHeap`] this only resets the counters; colour rotation
/// and root marking are the caller's business.
pub fn barrier_action(kind: BarrierKind, c: &mut dyn Counters, faults: ProtocolFaults) -> bool {
    if !barrier_check(kind, c, faults) {
        return false;
    }
    match kind {
        BarrierKind::ToMarkFinal => c.set_phase(Phase::MarkFinal),
        BarrierKind::ToSweepEphe => c.set_phase(Phase::SweepEphe),
        BarrierKind::CycleHeap => c.cycle_reset(),
    }
    true
}

/// Domain-local work invoked by the slice machine. Budgets are in words; a
/// positive return value means the corresponding work ran out before the
/// budget did.
pub trait SliceWork {
    fn flags(&mut self) -> &mut LocalFlags;
    fn sweep(&mut self, budget: i64, c: &mut dyn Counters) -> i64;
    fn mark(&mut self, budget: i64, c: &mut dyn Counters) -> i64;
    fn mark_final(&mut self, c: &mut dyn Counters);
    fn mark_final_last(&mut self, c: &mut dyn Counters);
    fn mark_ephe(&mut self, budget: i64, cached: u64, c: &mut dyn Counters) -> i64;
    fn sweep_ephe(&mut self, budget: i64, c: &mut dyn Counters) -> i64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pc {
    Sweep,
    Mark,
    FinishCheck,
    Final,
    FinalCount,
    FinalLast,
    FinalLastCount,
    EpheCache,
    EpheCheck,
    EpheMark,
    EpheCount,
    EpheSweepCheck,
    EpheSweep,
    EpheSweepCount,
    Change1,
    Change2,
    Change3,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    /// The caller must run (or join) a barrier of this kind, then keep
    /// stepping.
    Barrier(BarrierKind),
    Done,
}

/// One major slice in progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SliceMachine {
    pub pc: Pc,
    pub budget: i64,
    pub cached: u64,
}

impl SliceMachine {
    pub fn new(budget: i64) -> SliceMachine {
        SliceMachine { pc: Pc::Sweep, budget, cached: 0 }
    }

    pub fn is_done(&self) -> bool {
        self.pc == Pc::Done
    }

    pub fn step<W: SliceWork + ?Sized>(
        &mut self,
        c: &mut dyn Counters,
        w: &mut W,
        faults: ProtocolFaults,
    ) -> StepOutcome {
        match self.pc {
            Pc::Sweep => {
                self.budget = w.sweep(self.budget, c);
                self.pc = Pc::Mark;
            }
            Pc::Mark => {
                self.budget = w.mark(self.budget, c);
                self.pc = Pc::FinishCheck;
            }
            Pc::FinishCheck => {
                let flags = w.flags();
                if self.budget > 0 && (faults.decrement_without_flag || !flags.marking_done) {
                    flags.marking_done = true;
                    c.finish_marking();
                }
                self.pc = Pc::Final;
            }
            Pc::Final => {
                if c.phase() == Phase::MarkFinal && !w.flags().final_done {
                    w.mark_final(c);
                    w.flags().final_done = true;
                    self.pc = Pc::FinalCount;
                } else {
                    self.pc = Pc::FinalLast;
                }
            }
            Pc::FinalCount => {
                c.count_final();
                self.pc = Pc::FinalLast;
            }
            Pc::FinalLast => {
                if c.phase() == Phase::SweepEphe && !w.flags().final_last_done {
                    w.mark_final_last(c);
                    w.flags().final_last_done = true;
                    self.pc = Pc::FinalLastCount;
                } else {
                    self.pc = Pc::EpheCache;
                }
            }
            Pc::FinalLastCount => {
                c.count_final_last();
                self.pc = Pc::EpheCache;
            }
            Pc::EpheCache => {
                self.cached = c.ephe_round();
                self.pc = Pc::EpheCheck;
            }
            Pc::EpheCheck => {
                self.pc = if c.phase() == Phase::MarkFinal && self.cached > w.flags().ephe_round {
                    Pc::EpheMark
                } else {
                    Pc::EpheSweepCheck
                };
            }
            Pc::EpheMark => {
                self.budget = w.mark_ephe(self.budget, self.cached, c);
                let flags = w.flags();
                if self.budget > 0 && flags.marking_done {
                    flags.ephe_round = self.cached;
                    self.pc = Pc::EpheCount;
                } else {
                    self.pc = Pc::EpheSweepCheck;
                }
            }
            Pc::EpheCount => {
                c.count_ephe_marked(self.cached, !faults.skip_round_compare);
                self.pc = Pc::EpheSweepCheck;
            }
            Pc::EpheSweepCheck => {
                self.pc = if c.phase() == Phase::SweepEphe { Pc::EpheSweep } else { Pc::Change1 };
            }
            Pc::EpheSweep => {
                self.budget = w.sweep_ephe(self.budget, c);
                let flags = w.flags();
                if self.budget > 0 && !flags.sweep_ephe_done {
                    flags.sweep_ephe_done = true;
                    self.pc = Pc::EpheSweepCount;
                } else {
                    self.pc = Pc::Change1;
                }
            }
            Pc::EpheSweepCount => {
                c.count_swept_ephe();
                self.pc = Pc::Change1;
            }
            Pc::Change1 => {
                self.pc = Pc::Change2;
                if mark_final_ready(c) {
                    return StepOutcome::Barrier(BarrierKind::ToMarkFinal);
                }
            }
            Pc::Change2 => {
                self.pc = Pc::Change3;
                if sweep_ephe_ready(c) {
                    return StepOutcome::Barrier(BarrierKind::ToSweepEphe);
                }
            }
            Pc::Change3 => {
                self.pc = Pc::Done;
                if cycle_ready(c) {
                    return StepOutcome::Barrier(BarrierKind::CycleHeap);
                }
            }
            Pc::Done => return StepOutcome::Done,
        }
        StepOutcome::Continue
    }
}

/// Plain counters, used by the explorer and by unit tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ModelCounters {
    pub phase: u8,
    pub num_doms: u8,
    pub to_mark: i8,
    pub ephe_round: u8,
    pub marked_ephe: u8,
    pub swept_ephe: u8,
    pub marked_final: u8,
    pub marked_final_last: u8,
    pub orphans: bool,
    pub cycles: u8,
}

impl ModelCounters {
    pub fn new(num_doms: u8) -> ModelCounters {
        ModelCounters { num_doms, to_mark: num_doms as i8, ..ModelCounters::default() }
    }
}

impl Counters for ModelCounters {
    fn phase(&mut self) -> Phase {
        Phase::from_u8(self.phase)
    }
    fn num_doms(&mut self) -> u64 {
        self.num_doms as u64
    }
    fn to_mark(&mut self) -> i64 {
        self.to_mark as i64
    }
    fn ephe_round(&mut self) -> u64 {
        self.ephe_round as u64
    }
    fn marked_ephe(&mut self) -> u64 {
        self.marked_ephe as u64
    }
    fn swept_ephe(&mut self) -> u64 {
        self.swept_ephe as u64
    }
    fn marked_final(&mut self) -> u64 {
        self.marked_final as u64
    }
    fn marked_final_last(&mut self) -> u64 {
        self.marked_final_last as u64
    }
    fn orphaned_ephemerons(&mut self) -> bool {
        self.orphans
    }
    fn finish_marking(&mut self) {
        self.to_mark -= 1;
        self.ephe_round = self.ephe_round.wrapping_add(1);
        self.marked_ephe = 0;
    }
    fn count_ephe_marked(&mut self, cached: u64, compare: bool) {
        if !compare || cached == self.ephe_round as u64 {
            self.marked_ephe += 1;
        }
    }
    fn count_swept_ephe(&mut self) {
        self.swept_ephe += 1;
    }
    fn count_final(&mut self) {
        self.marked_final += 1;
    }
    fn count_final_last(&mut self) {
        self.marked_final_last += 1;
    }
    fn rearm(&mut self) {
        self.to_mark += 1;
    }
    fn set_phase(&mut self, p: Phase) {
        self.phase = p as u8;
    }
    fn cycle_reset(&mut self) {
        *self = ModelCounters { cycles: self.cycles + 1, orphans: self.orphans, ..ModelCounters::new(self.num_doms) };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A domain with a fixed amount of marking and nothing else.
    struct Fixed {
        flags: LocalFlags,
        to_mark: i64,
    }

    impl SliceWork for Fixed {
        fn flags(&mut self) -> &mut LocalFlags {
            &mut self.flags
        }
        fn sweep(&mut self, budget: i64, _: &mut dyn Counters) -> i64 {
            budget
        }
        fn mark(&mut self, budget: i64, _: &mut dyn Counters) -> i64 {
            let n = budget.min(self.to_mark);
            self.to_mark -= n;
            if self.to_mark > 0 {
                0
            } else {
                budget - n
            }
        }
        fn mark_final(&mut self, _: &mut dyn Counters) {}
        fn mark_final_last(&mut self, _: &mut dyn Counters) {}
        fn mark_ephe(&mut self, budget: i64, _: u64, _: &mut dyn Counters) -> i64 {
            budget
        }
        fn sweep_ephe(&mut self, budget: i64, _: &mut dyn Counters) -> i64 {
            budget
        }
    }

    fn run_slice(c: &mut ModelCounters, w: &mut Fixed, budget: i64, phases: &mut Vec<Phase>) {
        let mut m = SliceMachine::new(budget);
        loop {
            match m.step(c, w, ProtocolFaults::NONE) {
                StepOutcome::Continue => {}
                StepOutcome::Barrier(k) => {
                    if barrier_action(k, c, ProtocolFaults::NONE) {
                        phases.push(c.phase());
                        if k == BarrierKind::CycleHeap {
                            w.flags = LocalFlags::cycle_start();
                        }
                    }
                }
                StepOutcome::Done => break,
            }
        }
    }

    #[test]
    fn single_domain_without_ephemerons_cycles() {
        let mut c = ModelCounters::new(1);
        let mut w = Fixed { flags: LocalFlags::cycle_start(), to_mark: 10 };
        let mut phases = vec![];
        run_slice(&mut c, &mut w, 4, &mut phases);
        run_slice(&mut c, &mut w, 4, &mut phases);
        assert!(phases.is_empty());
        assert_eq!(c.to_mark, 1);
        // the third slice finishes marking; each later slice advances one phase
        run_slice(&mut c, &mut w, 4, &mut phases);
        assert_eq!(phases, vec![Phase::MarkFinal]);
        run_slice(&mut c, &mut w, 4, &mut phases);
        assert_eq!(phases, vec![Phase::MarkFinal, Phase::SweepEphe]);
        run_slice(&mut c, &mut w, 4, &mut phases);
        assert_eq!(phases, vec![Phase::MarkFinal, Phase::SweepEphe, Phase::Mark]);
        assert_eq!(c.cycles, 1);
    }

    #[test]
    fn racing_rearm_aborts_transition() {
        let mut c = ModelCounters::new(2);
        c.to_mark = 0;
        assert!(mark_final_ready(&mut c));
        c.rearm();
        assert!(!barrier_action(BarrierKind::ToMarkFinal, &mut c, ProtocolFaults::NONE));
        assert_eq!(c.phase(), Phase::Mark);
        let faulty = ProtocolFaults { skip_barrier_recheck: true, ..ProtocolFaults::NONE };
        assert!(barrier_action(BarrierKind::ToMarkFinal, &mut c, faulty));
    }

    #[test]
    fn stale_round_is_not_counted() {
        let mut c = ModelCounters::new(2);
        c.finish_marking();
        let cached = c.ephe_round();
        c.finish_marking();
        c.count_ephe_marked(cached, true);
        assert_eq!(c.marked_ephe, 0);
        c.count_ephe_marked(cached, false);
        assert_eq!(c.marked_ephe, 1);
    }
}
