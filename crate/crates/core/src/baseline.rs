//! Comparison locks: MCS, test-and-set with exponential backoff, and a
//! ticket lock. All of them implement [`RawLock`]; TAS and ticket ignore
//! their context.

use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU32, Ordering};

use crate::raw::RawLock;
use crate::spin::{wait_until, SpinWait};

/// Queue record of an MCS waiter.
#[repr(C, align(64))]
#[derive(Debug, Default)]
pub struct McsNode {
    locked: AtomicBool,
    next: AtomicPtr<McsNode>,
}

impl McsNode {
    pub const fn new() -> Self {
        McsNode {
            locked: AtomicBool::new(false),
            next: AtomicPtr::new(ptr::null_mut()),
        }
    }

    fn as_ptr(&self) -> *mut McsNode {
        self as *const McsNode as *mut McsNode
    }
}

/// Classic MCS queue lock: one exchange to enqueue, local spinning on the
/// waiter's own node, strict FIFO handover.
#[derive(Debug, Default)]
pub struct McsLock {
    tail: AtomicPtr<McsNode>,
}

impl McsLock {
    pub const fn new() -> Self {
        McsLock {
            tail: AtomicPtr::new(ptr::null_mut()),
        }
    }

    pub fn is_locked(&self) -> bool {
        !self.tail.load(Ordering::Relaxed).is_null()
    }
}

unsafe impl RawLock for McsLock {
    type Context = McsNode;

    unsafe fn acquire(&self, me: &McsNode) {
        me.next.store(ptr::null_mut(), Ordering::Relaxed);
        me.locked.store(true, Ordering::Relaxed);

        let pred = self.tail.swap(me.as_ptr(), Ordering::AcqRel);
        if pred.is_null() {
            return;
        }
        (*pred).next.store(me.as_ptr(), Ordering::Release);
        wait_until(|| (!me.locked.load(Ordering::Acquire)).then_some(()));
    }

    unsafe fn release(&self, me: &McsNode) {
        let mut next = me.next.load(Ordering::Acquire);
        if next.is_null() {
            if self
                .tail
                .compare_exchange(me.as_ptr(), ptr::null_mut(), Ordering::AcqRel, Ordering::Relaxed)
                .is_ok()
            {
                return;
            }
            next = wait_until(|| {
                let n = me.next.load(Ordering::Acquire);
                (!n.is_null()).then_some(n)
            });
        }
        (*next).locked.store(false, Ordering::Release);
    }
}

/// Default backoff bounds, in relax iterations.
pub const DEFAULT_MIN_BACKOFF: u32 = 1;
pub const DEFAULT_MAX_BACKOFF: u32 = 4096;

/// Test-and-set lock with bounded exponential backoff between attempts.
#[derive(Debug)]
pub struct TasLock {
    state: AtomicBool,
    min_backoff: u32,
    max_backoff: u32,
}

impl Default for TasLock {
    fn default() -> Self {
        Self::new()
    }
}

impl TasLock {
    pub const fn new() -> Self {
        Self::with_backoff(DEFAULT_MIN_BACKOFF, DEFAULT_MAX_BACKOFF)
    }

    pub const fn with_backoff(min: u32, max: u32) -> Self {
        let min = if min == 0 { 1 } else { min };
        TasLock {
            state: AtomicBool::new(false),
            min_backoff: min,
            max_backoff: if max < min { min } else { max },
        }
    }

    /// One test-and-set attempt.
    pub fn try_acquire(&self) -> bool {
        !self.state.swap(true, Ordering::Acquire)
    }

    pub fn is_locked(&self) -> bool {
        self.state.load(Ordering::Relaxed)
    }

    /// Number of failed attempts before the lock was taken.
    pub fn acquire_counting(&self) -> u32 {
        let mut failures = 0;
        let mut limit = self.min_backoff;
        while !self.try_acquire() {
            failures += 1;
            let mut wait = SpinWait::new();
            for _ in 0..limit {
                wait.spin();
                if !self.state.load(Ordering::Relaxed) {
                    break;
                }
            }
            limit = limit.saturating_mul(2).min(self.max_backoff);
        }
        failures
    }
}

unsafe impl RawLock for TasLock {
    type Context = ();

    unsafe fn acquire(&self, _: &()) {
        self.acquire_counting();
    }

    unsafe fn release(&self, _: &()) {
        self.state.store(false, Ordering::Release);
    }
}

/// FIFO ticket lock.
#[derive(Debug, Default)]
pub struct TicketLock {
    next_ticket: AtomicU32,
    now_serving: AtomicU32,
}

impl TicketLock {
    pub const fn new() -> Self {
        TicketLock {
            next_ticket: AtomicU32::new(0),
            now_serving: AtomicU32::new(0),
        }
    }

    /// Takes a ticket and waits for it; returns the ticket number.
    pub fn acquire_ticket(&self) -> u32 {
        let ticket = self.next_ticket.fetch_add(1, Ordering::Relaxed);
        let mut wait = SpinWait::new();
        while self.now_serving.load(Ordering::Acquire) != ticket {
            wait.spin();
        }
        ticket
    }

    pub fn now_serving(&self) -> u32 {
        self.now_serving.load(Ordering::Relaxed)
    }

    pub fn next_ticket(&self) -> u32 {
        self.next_ticket.load(Ordering::Relaxed)
    }
}

unsafe impl RawLock for TicketLock {
    type Context = ();

    unsafe fn acquire(&self, _: &()) {
        self.acquire_ticket();
    }

    unsafe fn release(&self, _: &()) {
        // Only the holder writes now_serving.
        let v = self.now_serving.load(Ordering::Relaxed);
        self.now_serving.store(v.wrapping_add(1), Ordering::Release);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raw::Locked;
    use std::sync::{Arc, Mutex};
    use std::thread;
    use std::time::Duration;

    fn stress<L, F>(lock: L, make_ctx: F)
    where
        L: RawLock + 'static,
        F: Fn() -> L::Context + Send + Sync + 'static,
    {
        let locked = Arc::new(Locked::new(lock, 0u64));
        let make_ctx = Arc::new(make_ctx);
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let locked = Arc::clone(&locked);
                let make_ctx = Arc::clone(&make_ctx);
                thread::spawn(move || {
                    let mut ctx = make_ctx();
                    for _ in 0..20_000 {
                        locked.with(&mut ctx, |c| *c += 1);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(Arc::try_unwrap(locked).ok().unwrap().into_inner(), 80_000);
    }

    #[test]
    fn mcs_stress() {
        stress(McsLock::new(), McsNode::new);
    }

    #[test]
    fn tas_stress() {
        stress(TasLock::new(), || ());
    }

    #[test]
    fn ticket_stress() {
        stress(TicketLock::new(), || ());
    }

    #[test]
    fn mcs_uncontended_grant() {
        let lock = McsLock::new();
        let mut node = McsNode::new();
        {
            let _g = lock.lock(&mut node);
            assert!(lock.is_locked());
        }
        assert!(!lock.is_locked());
    }

    #[test]
    fn tas_uncontended_first_attempt_succeeds() {
        let lock = TasLock::new();
        assert_eq!(lock.acquire_counting(), 0);
        unsafe { lock.release(&()) };
        assert!(!lock.is_locked());
    }

    #[test]
    fn tas_backoff_bounds_normalized() {
        let lock = TasLock::with_backoff(0, 0);
        assert_eq!((lock.min_backoff, lock.max_backoff), (1, 1));
    }

    #[test]
    fn tas_alternating_threads_both_acquire() {
        let lock = Arc::new(TasLock::new());
        let counts = Arc::new(Mutex::new([0u32; 2]));
        let handles: Vec<_> = (0..2)
            .map(|i| {
                let lock = Arc::clone(&lock);
                let counts = Arc::clone(&counts);
                thread::spawn(move || {
                    let mut ctx = ();
                    for _ in 0..100 {
                        let _g = lock.lock(&mut ctx);
                        counts.lock().unwrap()[i] += 1;
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(*counts.lock().unwrap(), [100, 100]);
    }

    #[test]
    fn ticket_fresh_lock_grants_ticket_zero() {
        let lock = TicketLock::new();
        assert_eq!((lock.next_ticket(), lock.now_serving()), (0, 0));
        assert_eq!(lock.acquire_ticket(), 0);
        unsafe { lock.release(&()) };
        assert_eq!(lock.now_serving(), 1);
    }

    fn wait_for(cond: impl Fn() -> bool) {
        while !cond() {
            thread::sleep(Duration::from_millis(1));
        }
    }

    #[test]
    fn ticket_grants_in_ticket_order() {
        let lock = Arc::new(TicketLock::new());
        let order = Arc::new(Mutex::new(Vec::new()));
        let first = lock.acquire_ticket();
        let mut handles = Vec::new();
        for i in 1..=2u32 {
            let worker_lock = Arc::clone(&lock);
            let order = Arc::clone(&order);
            handles.push(thread::spawn(move || {
                let t = worker_lock.acquire_ticket();
                order.lock().unwrap().push((i, t));
                unsafe { worker_lock.release(&()) };
            }));
            wait_for(|| lock.next_ticket() == i + 1);
        }
        assert_eq!(first, 0);
        unsafe { lock.release(&()) };
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(*order.lock().unwrap(), vec![(1, 1), (2, 2)]);
    }

    #[test]
    fn mcs_grants_in_arrival_order() {
        let lock = Arc::new(McsLock::new());
        let order = Arc::new(Mutex::new(vec![0]));
        let holder = Box::new(McsNode::new());
        unsafe { lock.acquire(&holder) };
        let mut handles = Vec::new();
        for i in 1..=2usize {
            let worker_lock = Arc::clone(&lock);
            let order = Arc::clone(&order);
            let before = lock.tail.load(Ordering::Relaxed);
            handles.push(thread::spawn(move || {
                let mut node = McsNode::new();
                let _g = worker_lock.lock(&mut node);
                order.lock().unwrap().push(i);
            }));
            wait_for(|| lock.tail.load(Ordering::Relaxed) != before);
        }
        unsafe { lock.release(&holder) };
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(*order.lock().unwrap(), vec![0, 1, 2]);
    }
}
