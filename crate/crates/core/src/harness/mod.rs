//! Benchmark workloads, reporting, the debug oracle and the protocol
//! explorer.

pub mod explore;
pub(crate) mod oracle;
pub mod report;
pub mod workloads;
