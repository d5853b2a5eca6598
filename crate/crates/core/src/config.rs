use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

pub const WORD_BYTES: usize = 8;
pub const MAX_ARENA_BYTES: usize = 16 << 20;
pub const MAX_DOMAINS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MinorVariant {
    /// Stop-the-world parallel promotion.
    Stw,
    /// Private arenas with read faults.
    Conc,
}

impl MinorVariant {
    pub fn name(self) -> &'static str {
        match self {
            MinorVariant::Stw => "stw",
            MinorVariant::Conc => "conc",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    /// Number of arenas reserved; also the cap on simultaneously live domains.
    pub max_domains: usize,
    /// Minor arena size in words; a power of two.
    pub arena_words: usize,
    pub minor: MinorVariant,
    pub pacing: f64,
    pub min_slice: usize,
    pub max_slice: Option<usize>,
    /// Direct major allocation (words) that forces a slice.
    pub major_slice_trigger: usize,
    /// Fraction of the arena, measured from the allocation cursor, whose
    /// objects are promoted by closure rather than by a full collection.
    pub young_fraction: f64,
    /// Number of slots in the shared global-roots block.
    pub global_slots: usize,
    pub debug_oracle: bool,
    /// Measure pauses in work units rather than nanoseconds.
    pub logical_clock: bool,
    /// Words of opportunistic work done per spin while waiting at a barrier.
    pub opportunistic_budget: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            max_domains: MAX_DOMAINS,
            arena_words: 256 * 1024,
            minor: MinorVariant::Stw,
            pacing: 1.5,
            min_slice: 4096,
            max_slice: None,
            major_slice_trigger: 1 << 20,
            young_fraction: 0.05,
            global_slots: 64,
            debug_oracle: std::env::var("RETROHEAP_DEBUG_ORACLE").map(|v| v == "1").unwrap_or(false),
            logical_clock: false,
            opportunistic_budget: 256,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.arena_words.is_power_of_two() {
            return Err(ConfigError::ArenaNotPowerOfTwo(self.arena_words));
        }
        if self.arena_words * WORD_BYTES > MAX_ARENA_BYTES {
            return Err(ConfigError::ArenaTooLarge(self.arena_words * WORD_BYTES));
        }
        if self.arena_words < 64 {
            return Err(ConfigError::Invalid(format!("arena of {} words is too small", self.arena_words)));
        }
        if !self.max_domains.is_power_of_two() || self.max_domains > MAX_DOMAINS {
            return Err(ConfigError::BadDomainCount(self.max_domains));
        }
        if !(self.pacing > 0.0) {
            return Err(ConfigError::Invalid("pacing factor must be positive".into()));
        }
        if self.min_slice == 0 {
            return Err(ConfigError::Invalid("min_slice must be positive".into()));
        }
        if self.max_slice == Some(0) {
            return Err(ConfigError::Invalid("max_slice must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.young_fraction) {
            return Err(ConfigError::Invalid("young_fraction must lie in [0, 1]".into()));
        }
        if self.global_slots == 0 {
            return Err(ConfigError::Invalid("need at least one global slot".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_arenas() {
        let c = Config { arena_words: 1000, ..Config::default() };
        assert!(matches!(c.validate(), Err(ConfigError::ArenaNotPowerOfTwo(1000))));
        let c = Config { arena_words: 4 << 20, ..Config::default() };
        assert!(matches!(c.validate(), Err(ConfigError::ArenaTooLarge(_))));
        let c = Config { max_domains: 256, ..Config::default() };
        assert!(c.validate().is_err());
    }
}
