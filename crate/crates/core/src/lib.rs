//! A multicore managed-heap runtime.
//!
//! Each domain (a mutator thread) allocates into a private minor arena and
//! owns part of a shared, non-moving major heap. The major heap is collected
//! by an incremental, mostly-concurrent mark-and-sweep collector whose phase
//! changes are agreed in short stop-the-world barriers. Two minor collectors
//! are provided: a stop-the-world parallel one and a concurrent one based on
//! read faults.

pub mod config;
pub mod domains;
pub mod error;
pub mod features;
pub mod harness;
pub mod major_alloc;
pub mod major_gc;
pub(crate) mod mem;
pub mod minor_conc;
pub mod minor_stw;
pub mod protocol;
pub mod stats;
pub mod value;

pub use config::{Config, MinorVariant};
pub use domains::{Domain, DomainHandle, GcSnapshot, Runtime};
pub use error::{ConfigError, DeliveryError, LazyError, RangeError, RuntimeError};
pub use features::{FinaliserKind, LazyState};
pub use stats::{DomainStats, GcReport};
pub use value::{ColorMap, GcState, Header, Tag, Value};
