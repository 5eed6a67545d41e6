//! NUMA-aware queue locks.
//!
//! The centerpiece is [`CnaLock`], a compact NUMA-aware lock whose shared
//! state is a single word. Waiters form a main queue; the lock holder passes
//! ownership to a waiter on its own socket when one exists and parks the
//! skipped remote waiters in a secondary queue threaded through the waiters'
//! own nodes. A cheap per-thread random draw periodically flushes the
//! secondary queue back into the main queue to bound unfairness.
//!
//! Alongside the lock the crate ships:
//!
//! - [`baseline`]: MCS, test-and-set with backoff, and a ticket lock.
//! - [`word`]: a 4-byte kernel-style lock word with a test-and-set fast
//!   path, a pending bit, and an MCS or CNA slow path over per-thread node
//!   pools.
//! - [`sim`]: a deterministic step-by-step simulator, a sequential
//!   two-queue reference model, and exhaustive/random schedule exploration.
//! - [`bench`]: the key-value map and raw-throughput contention benchmarks
//!   behind the `cna-bench` binary.

pub mod baseline;
pub mod bench;
pub mod cna;
pub mod metrics;
pub mod raw;
pub mod sim;
mod spin;
pub mod topology;
pub mod word;

pub use baseline::{McsLock, McsNode, TasLock, TicketLock};
pub use cna::{
    keep_lock_local, AtomicOpCounter, CnaConfig, CnaContext, CnaLock, CnaNode, ConfigError,
    FairnessPolicy, OpCounts, XorShift32,
};
pub use metrics::{fairness_factor, MetricsError};
pub use raw::{Guard, LockKind, Locked, RawLock};
pub use topology::{SocketId, Topology, TopologyError};
pub use word::{SlowPath, WordContext, WordLock, WordLockError};
