use serde::Serialize;

use crate::domains::Shared;
use std::sync::atomic::Ordering;

/// Per-domain counters.
#[derive(Debug, Clone, Default, Serialize)]
pub struct DomainStats {
    pub minor_collections: u64,
    pub minor_alloc_words: u64,
    pub major_alloc_words: u64,
    pub promoted_words: u64,
    pub closure_promotions: u64,
    pub promote_requests: u64,
    pub read_faults: u64,
    pub major_slices: u64,
    pub words_marked: u64,
    pub words_swept: u64,
    pub mark_stack_peak: u64,
    pub pages_created: u64,
    pub pages_adopted: u64,
    pub ephemerons_cleared: u64,
    pub finalisers_run: u64,
    pub cycles_seen: u64,
    pub finaliser_errors: Vec<String>,
    /// Pause lengths in nanoseconds, or work units under the logical clock.
    #[serde(skip)]
    pub pauses: Vec<u64>,
}

/// Whole-run summary.
#[derive(Debug, Clone, Default, Serialize)]
pub struct GcReport {
    pub domains_spawned: u64,
    pub minor_gcs: u64,
    pub cycles: u64,
    pub major_alloc_words: u64,
    pub minor_alloc_words: u64,
    pub promoted_words: u64,
    pub closure_promotions: u64,
    pub read_faults: u64,
    pub major_slices: u64,
    pub words_marked: u64,
    pub words_swept: u64,
    pub max_heap_words: u64,
    pub pages_created: u64,
    pub pages_adopted: u64,
    pub ephemerons_cleared: u64,
    pub finalisers_run: u64,
    pub finaliser_errors: Vec<String>,
    pub pause_count: u64,
    pub pause_max: u64,
    pub pause_p999: u64,
    pub oracle_checks: u64,
    pub oracle_violations: Vec<String>,
    #[serde(skip)]
    pub pauses: Vec<u64>,
}

/// The 99.9th percentile by nearest rank: `sorted[ceil(0.999 n) - 1]`, or 0
/// with no samples.
pub fn p999(samples: &[u64]) -> u64 {
    per_mille(samples, 999)
}

/// Nearest-rank percentile with the rank computed in integers, so that
/// `q = 999` over 1000 samples is exactly rank 999.
pub fn per_mille(samples: &[u64], q: usize) -> u64 {
    if samples.is_empty() {
        return 0;
    }
    let mut s = samples.to_vec();
    s.sort_unstable();
    let rank = (q * s.len()).div_ceil(1000).clamp(1, s.len());
    s[rank - 1]
}

impl GcReport {
    pub(crate) fn absorb(&mut self, d: &DomainStats) {
        self.major_alloc_words += d.major_alloc_words;
        self.minor_alloc_words += d.minor_alloc_words;
        self.promoted_words += d.promoted_words;
        self.closure_promotions += d.closure_promotions;
        self.read_faults += d.read_faults;
        self.major_slices += d.major_slices;
        self.words_marked += d.words_marked;
        self.words_swept += d.words_swept;
        self.pages_created += d.pages_created;
        self.pages_adopted += d.pages_adopted;
        self.ephemerons_cleared += d.ephemerons_cleared;
        self.finalisers_run += d.finalisers_run;
        self.finaliser_errors.extend(d.finaliser_errors.iter().cloned());
        self.pauses.extend_from_slice(&d.pauses);
    }

    pub(crate) fn finish(&mut self, sh: &Shared) {
        self.minor_gcs = sh.minor_gcs.load(Ordering::Relaxed);
        self.max_heap_words = sh.max_heap_words.load(Ordering::Relaxed) as u64;
        self.pause_count = self.pauses.len() as u64;
        self.pause_max = self.pauses.iter().copied().max().unwrap_or(0);
        self.pause_p999 = p999(&self.pauses);
        let o = sh.oracle.lock();
        self.oracle_checks = o.checks;
        self.oracle_violations = o.violations.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        assert_eq!(p999(&[]), 0);
        assert_eq!(p999(&[5]), 5);
        let v: Vec<u64> = (1..=1000).collect();
        assert_eq!(p999(&v), 999);
        let v: Vec<u64> = (1..=2000).rev().collect();
        assert_eq!(p999(&v), 1998);
        let v: Vec<u64> = (1..=10).collect();
        assert_eq!(p999(&v), 10);
    }

    #[test]
    fn million_samples_against_sorting() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let v: Vec<u64> = (0..1_000_000).map(|_| rng.gen_range(0..1_000_000_000)).collect();
        let mut sorted = v.clone();
        sorted.sort();
        let idx = (0.999f64 * v.len() as f64).ceil() as usize - 1;
        assert_eq!(p999(&v), sorted[idx]);
    }
}
