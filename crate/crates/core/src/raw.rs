//! The acquire/release interface shared by every lock in the crate.

use std::cell::UnsafeCell;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A lock driven through a per-thread context.
///
/// Queue locks thread their waiters through the context (the queue node),
/// so a context must stay put from `acquire` until the matching `release`
/// returns. Locks that need no node use `()`.
///
/// # Safety
///
/// Implementors must provide mutual exclusion between a returned `acquire`
/// and the matching `release`.
pub unsafe trait RawLock: Send + Sync {
    type Context;

    /// Blocks until the caller holds the lock.
    ///
    /// # Safety
    ///
    /// `ctx` must not be moved, dropped, or used for another acquisition
    /// until the matching [`release`](RawLock::release) returns.
    unsafe fn acquire(&self, ctx: &Self::Context);

    /// Releases the lock.
    ///
    /// # Safety
    ///
    /// The caller must hold the lock, acquired with this same `ctx` on this
    /// same thread.
    unsafe fn release(&self, ctx: &Self::Context);

    /// Acquires the lock and returns a guard that releases it on drop.
    ///
    /// The guard borrows `ctx` mutably, which pins it for the duration of
    /// the critical section.
    fn lock<'a>(&'a self, ctx: &'a mut Self::Context) -> Guard<'a, Self>
    where
        Self: Sized,
    {
        let ctx = &*ctx;
        // SAFETY: the exclusive borrow keeps ctx in place and unused until
        // the guard drops and releases.
        unsafe { self.acquire(ctx) };
        Guard { lock: self, ctx }
    }
}

/// RAII guard returned by [`RawLock::lock`].
pub struct Guard<'a, L: RawLock> {
    lock: &'a L,
    ctx: &'a L::Context,
}

impl<L: RawLock> Drop for Guard<'_, L> {
    fn drop(&mut self) {
        // SAFETY: the guard exists only while the lock is held through ctx.
        unsafe { self.lock.release(self.ctx) }
    }
}

/// Data protected by a [`RawLock`].
pub struct Locked<L, T> {
    lock: L,
    data: UnsafeCell<T>,
}

// SAFETY: access to `data` is serialized by the lock.
unsafe impl<L: RawLock, T: Send> Sync for Locked<L, T> {}

impl<L: RawLock, T> Locked<L, T> {
    pub fn new(lock: L, data: T) -> Self {
        Locked {
            lock,
            data: UnsafeCell::new(data),
        }
    }

    /// Runs `f` on the protected data while holding the lock.
    pub fn with<R>(&self, ctx: &mut L::Context, f: impl FnOnce(&mut T) -> R) -> R {
        let _guard = self.lock.lock(ctx);
        // SAFETY: the guard gives exclusive access until it drops.
        f(unsafe { &mut *self.data.get() })
    }

    pub fn lock_ref(&self) -> &L {
        &self.lock
    }

    pub fn into_inner(self) -> T {
        self.data.into_inner()
    }

    pub fn get_mut(&mut self) -> &mut T {
        self.data.get_mut()
    }
}

/// Lock selection strings used by the benchmark CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LockKind {
    Cna,
    CnaOpt,
    Mcs,
    Tas,
    Ticket,
    WordMcs,
    WordCna,
}

impl LockKind {
    pub const ALL: [LockKind; 7] = [
        LockKind::Cna,
        LockKind::CnaOpt,
        LockKind::Mcs,
        LockKind::Tas,
        LockKind::Ticket,
        LockKind::WordMcs,
        LockKind::WordCna,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LockKind::Cna => "cna",
            LockKind::CnaOpt => "cna-opt",
            LockKind::Mcs => "mcs",
            LockKind::Tas => "tas",
            LockKind::Ticket => "ticket",
            LockKind::WordMcs => "word-mcs",
            LockKind::WordCna => "word-cna",
        }
    }
}

impl fmt::Display for LockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown lock kind `{0}` (expected one of cna, cna-opt, mcs, tas, ticket, word-mcs, word-cna)")]
pub struct UnknownLockKind(pub String);

impl FromStr for LockKind {
    type Err = UnknownLockKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LockKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownLockKind(s.to_owned()))
    }
}
