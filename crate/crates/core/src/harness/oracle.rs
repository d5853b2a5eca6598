//! Reachability oracle for debug runs.
//!
//! A plain breadth-first trace from the roots, with the ephemeron rule
//! applied as a fixpoint. It reads only headers and fields, never the
//! collector's mark stacks or remembered sets, and checks that the
//! collector kept everything the trace reaches.

use std::collections::{HashSet, VecDeque};

use crate::config::WORD_BYTES;
use crate::domains::Shared;
use crate::mem;
use crate::value::{GcState, Header, Tag, Value};

/// Objects reachable from `roots`, with ephemeron keys weak and data kept
/// only while every key is reachable.
pub(crate) fn trace(roots: &[Value], visit: impl FnMut(usize, Header)) -> HashSet<usize> {
    trace_counted(roots, visit).0
}

/// As [`trace`], also returning how many passes over the ephemerons added
/// something to the live set.
pub(crate) fn trace_counted(roots: &[Value], mut visit: impl FnMut(usize, Header)) -> (HashSet<usize>, usize) {
    let mut seen = HashSet::new();
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut ephemerons: Vec<usize> = Vec::new();
    let mut rounds = 0;
    let push = |v: Value, seen: &mut HashSet<usize>, queue: &mut VecDeque<usize>| {
        if v.is_pointer() && seen.insert(v.addr()) {
            queue.push_back(v.addr());
        }
    };
    for &r in roots {
        push(r, &mut seen, &mut queue);
    }
    loop {
        while let Some(a) = queue.pop_front() {
            let h = Header::from_raw(mem::load(a));
            visit(a, h);
            if h.is_forwarded() {
                continue;
            }
            if h.tag_bits() == Tag::Ephemeron as u8 {
                ephemerons.push(a);
                continue;
            }
            for i in 0..h.size() {
                push(Value::from_raw(mem::load(a + (i + 1) * WORD_BYTES)), &mut seen, &mut queue);
            }
        }
        let mut progressed = false;
        ephemerons.retain(|&e| {
            let h = Header::from_raw(mem::load(e));
            let keys_live = (1..h.size()).all(|i| {
                let k = Value::from_raw(mem::load(e + (i + 1) * WORD_BYTES));
                !k.is_pointer() || seen.contains(&k.addr())
            });
            if keys_live {
                let d = Value::from_raw(mem::load(e + WORD_BYTES));
                if d.is_pointer() && seen.insert(d.addr()) {
                    queue.push_back(d.addr());
                    progressed = true;
                }
                false
            } else {
                true
            }
        });
        if !progressed {
            break;
        }
        rounds += 1;
    }
    (seen, rounds)
}

/// Checks the heap with every domain stopped and every minor arena empty.
/// Returns one message per violation.
pub(crate) fn check_heap(sh: &Shared, roots: &[Value]) -> Vec<String> {
    let mut out = Vec::new();
    let cm = sh.gc.colours();
    let layout = sh.layout;
    trace(roots, |a, h| {
        if layout.in_region(a) {
            out.push(format!("reachable object {a:#x} is still in a minor arena"));
            return;
        }
        match cm.state_of(h.color()) {
            GcState::Garbage | GcState::Free => {
                out.push(format!("reachable object {a:#x} is {:?}", cm.state_of(h.color())));
            }
            _ => {}
        }
    });
    let src = sh.pages.lock();
    let check_fields = |a: usize, n: usize, out: &mut Vec<String>| {
        for i in 0..n {
            let v = Value::from_raw(mem::load(a + (i + 1) * WORD_BYTES));
            if v.is_pointer() && layout.in_region(v.addr()) {
                out.push(format!("major object {a:#x} field {i} still refers to minor {:#x}", v.addr()));
            }
        }
    };
    for &(base, slot_words) in &src.pages {
        let n = crate::major_alloc::PAGE_WORDS / slot_words;
        for s in 0..n {
            let a = base + s * slot_words * WORD_BYTES;
            let h = Header::from_raw(mem::load(a));
            if cm.state_of(h.color()) != GcState::Free {
                check_fields(a, h.size().min(slot_words - 1), &mut out);
            }
        }
    }
    for (&a, &w) in &src.large {
        let h = Header::from_raw(mem::load(a));
        check_fields(a, h.size().min(w), &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A scratch heap in a plain buffer. Objects are laid out back to back.
    struct Scratch {
        words: Vec<u64>,
        next: usize,
    }

    impl Scratch {
        fn new() -> Scratch {
            Scratch { words: vec![0; 256], next: 0 }
        }

        fn obj(&mut self, tag: Tag, fields: &[Value]) -> Value {
            let i = self.next;
            self.next += 1 + fields.len();
            self.words[i] = Header::new(fields.len(), tag, 0).raw();
            for (j, f) in fields.iter().enumerate() {
                self.words[i + 1 + j] = f.raw();
            }
            Value::from_addr(&self.words[i] as *const u64 as usize)
        }

        fn set(&mut self, o: Value, field: usize, v: Value) {
            let base = self.words.as_ptr() as usize;
            self.words[(o.addr() - base) / WORD_BYTES + 1 + field] = v.raw();
        }
    }

    #[test]
    fn empty_roots() {
        let (live, rounds) = trace_counted(&[], |_, _| {});
        assert!(live.is_empty());
        assert_eq!(rounds, 0);
    }

    #[test]
    fn rooted_cycle() {
        let mut h = Scratch::new();
        let a = h.obj(Tag::Block, &[Value::UNIT]);
        let b = h.obj(Tag::Block, &[a]);
        h.set(a, 0, b);
        let _stray = h.obj(Tag::Block, &[a]);
        let live = trace(&[a], |_, _| {});
        assert_eq!(live, HashSet::from([a.addr(), b.addr()]));
    }

    #[test]
    fn ephemeron_chain_takes_one_pass_per_link() {
        let mut h = Scratch::new();
        let k0 = h.obj(Tag::Block, &[Value::int(0)]);
        let k1 = h.obj(Tag::Block, &[Value::int(1)]);
        let k2 = h.obj(Tag::Block, &[Value::int(2)]);
        let k3 = h.obj(Tag::Block, &[Value::int(3)]);
        // data first, then keys; listed in reverse so one pass cannot do it all
        let e3 = h.obj(Tag::Ephemeron, &[k3, k2]);
        let e2 = h.obj(Tag::Ephemeron, &[k2, k1]);
        let e1 = h.obj(Tag::Ephemeron, &[k1, k0]);
        let (live, rounds) = trace_counted(&[e3, e2, e1, k0], |_, _| {});
        assert_eq!(rounds, 3);
        for k in [k0, k1, k2, k3] {
            assert!(live.contains(&k.addr()));
        }
        // without the head key nothing is revived
        let (live, rounds) = trace_counted(&[e3, e2, e1], |_, _| {});
        assert_eq!(rounds, 0);
        assert!(!live.contains(&k1.addr()));
    }
}
