use thiserror::Error;

pub use crate::value::RangeError;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("arena size of {0} words is not a power of two")]
    ArenaNotPowerOfTwo(usize),
    #[error("arena size of {0} bytes exceeds the 16 MiB limit")]
    ArenaTooLarge(usize),
    #[error("domain count {0} must be a power of two between 1 and 128")]
    BadDomainCount(usize),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("address space reservation of {bytes} bytes failed: {source}")]
    Reserve {
        bytes: usize,
        #[source]
        source: std::io::Error,
    },
    #[error("domain limit of {0} reached")]
    DomainLimit(usize),
    #[error("out of memory allocating {0} words")]
    OutOfMemory(usize),
    #[error("domain thread panicked: {0}")]
    DomainPanicked(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LazyError {
    #[error("lazy value forced recursively")]
    RecursiveForce,
    #[error("lazy value is being forced by domain {0}")]
    ConcurrentForce(u64),
    #[error("lazy computation raised: {0}")]
    Raised(String),
    #[error("value is not a lazy cell")]
    NotLazy,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeliveryError {
    #[error("target domain is not running")]
    Terminated,
}
