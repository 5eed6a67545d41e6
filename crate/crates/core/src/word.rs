//! A 4-byte lock word in the style of the Linux qspinlock.
//!
//! Layout of the word:
//!
//! ```text
//!  31            16 15      9  8  7       0
//! +----------------+---------+---+---------+
//! |   tail code    | reserved| P | locked  |
//! +----------------+---------+---+---------+
//! ```
//!
//! The tail code is `((cpu + 1) << 2) | ctx`, naming node `ctx` of the node
//! pool registered under `cpu`; zero means the queue is empty.
//!
//! Acquisition tries, in order: a CAS from 0 to locked (fast path); if only
//! the locked byte is set, claiming the pending bit and spinning until the
//! holder leaves; otherwise queueing. The queue is MCS or CNA; reaching its
//! head only means "next in line", and the head then waits for the locked
//! byte and the pending bit to clear before taking the lock. Release clears
//! the locked byte and never looks at queue nodes.

use std::cell::Cell;
use std::mem;
use std::sync::atomic::{AtomicPtr, AtomicU32, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::cna::{self, AtomicOpCounter, CnaConfig, CnaNode, FairnessPolicy, OpCounts};
use crate::raw::RawLock;
use crate::spin::wait_until;
use crate::topology::Topology;

pub const LOCKED_MASK: u32 = 0xff;
pub const LOCKED_VAL: u32 = 1;
pub const PENDING: u32 = 1 << 8;
pub const TAIL_SHIFT: u32 = 16;

/// Nodes per pool, and thus the nesting limit.
pub const MAX_NESTING: usize = 4;
/// Largest registrable cpu index is `MAX_CPUS - 1`: `cpu + 1` must fit in
/// the 14 bits above the context index.
pub const MAX_CPUS: u32 = (1 << 14) - 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WordLockError {
    #[error("cpu index {0} does not fit in a tail code")]
    CpuOutOfRange(u32),
    #[error("nesting context {0} is out of range (limit {MAX_NESTING})")]
    ContextOutOfRange(u32),
    #[error("nesting depth {MAX_NESTING} exhausted")]
    NestingExceeded,
    #[error("all {MAX_CPUS} node pools are registered")]
    PoolsExhausted,
}

pub fn encode_tail(cpu: u32, ctx: u32) -> Result<u16, WordLockError> {
    if cpu >= MAX_CPUS {
        return Err(WordLockError::CpuOutOfRange(cpu));
    }
    if ctx as usize >= MAX_NESTING {
        return Err(WordLockError::ContextOutOfRange(ctx));
    }
    Ok((((cpu + 1) << 2) | ctx) as u16)
}

/// `None` for the empty code and for codes no valid input encodes to.
pub fn decode_tail(code: u16) -> Option<(u32, u32)> {
    let cpu_plus_one = u32::from(code >> 2);
    (cpu_plus_one != 0).then(|| (cpu_plus_one - 1, u32::from(code & 3)))
}

/// Which queue discipline the slow path uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlowPath {
    Mcs,
    Cna,
}

/// Which path an acquisition took.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquirePath {
    Fast,
    Pending,
    Queued,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCounts {
    pub fast: u64,
    pub pending: u64,
    pub queued: u64,
}

#[repr(C)]
struct PoolNode {
    node: CnaNode,
    code: u16,
}

struct NodePool {
    nodes: [PoolNode; MAX_NESTING],
}

struct Registry {
    pools: Box<[AtomicPtr<NodePool>]>,
    free: Mutex<Vec<u32>>,
    next: AtomicU32,
}

fn registry() -> &'static Registry {
    static REGISTRY: OnceLock<Registry> = OnceLock::new();
    REGISTRY.get_or_init(|| Registry {
        pools: (0..MAX_CPUS).map(|_| AtomicPtr::default()).collect(),
        free: Mutex::new(Vec::new()),
        next: AtomicU32::new(0),
    })
}

impl Registry {
    fn register(&self) -> Result<(u32, &'static NodePool), WordLockError> {
        let recycled = self.free.lock().unwrap_or_else(|e| e.into_inner()).pop();
        let cpu = match recycled {
            Some(cpu) => cpu,
            None => {
                let cpu = self.next.fetch_add(1, Ordering::Relaxed);
                if cpu >= MAX_CPUS {
                    self.next.fetch_sub(1, Ordering::Relaxed);
                    return Err(WordLockError::PoolsExhausted);
                }
                cpu
            }
        };
        let slot = &self.pools[cpu as usize];
        let mut pool = slot.load(Ordering::Acquire);
        if pool.is_null() {
            // Pools are never freed: a recycled slot reuses its pool.
            let fresh = Box::new(NodePool {
                nodes: std::array::from_fn(|i| PoolNode {
                    node: CnaNode::new(),
                    code: encode_tail(cpu, i as u32).expect("registered cpu fits"),
                }),
            });
            pool = Box::into_raw(fresh);
            slot.store(pool, Ordering::Release);
        }
        // SAFETY: pools are leaked and live for the rest of the program.
        Ok((cpu, unsafe { &*pool }))
    }

    fn release(&self, cpu: u32) {
        self.free.lock().unwrap_or_else(|e| e.into_inner()).push(cpu);
    }

    fn node(&self, code: u16) -> &'static CnaNode {
        let (cpu, ctx) = decode_tail(code).expect("non-empty tail code");
        let pool = self.pools[cpu as usize].load(Ordering::Acquire);
        debug_assert!(!pool.is_null());
        // SAFETY: a code in a lock word names a registered, leaked pool.
        unsafe { &(*pool).nodes[ctx as usize].node }
    }
}

fn code_of(node: *const CnaNode) -> u16 {
    // SAFETY: every node reachable from a word lock queue is the first field
    // of a repr(C) PoolNode.
    unsafe { (*(node as *const PoolNode)).code }
}

/// Per-thread state for [`WordLock`]: a registered pool of four queue nodes,
/// the nesting depth, and the CNA policy used when the slow path is CNA.
pub struct WordContext {
    cpu: u32,
    pool: &'static NodePool,
    depth: Cell<u8>,
    slow_path: SlowPath,
    policy: FairnessPolicy,
    counters: AtomicOpCounter,
    paths: Cell<PathCounts>,
    topology: Arc<Topology>,
}

impl WordContext {
    pub fn new(
        slow_path: SlowPath,
        config: &CnaConfig,
        thread: usize,
        topology: Arc<Topology>,
    ) -> Result<Self, WordLockError> {
        let (cpu, pool) = registry().register()?;
        Ok(WordContext {
            cpu,
            pool,
            depth: Cell::new(0),
            slow_path,
            policy: config.policy_for(thread),
            counters: AtomicOpCounter::default(),
            paths: Cell::new(PathCounts::default()),
            topology,
        })
    }

    pub fn cpu(&self) -> u32 {
        self.cpu
    }

    pub fn depth(&self) -> usize {
        usize::from(self.depth.get())
    }

    pub fn slow_path(&self) -> SlowPath {
        self.slow_path
    }

    pub fn path_counts(&self) -> PathCounts {
        self.paths.get()
    }

    /// Handover audit of the CNA slow path.
    pub fn counts(&self) -> OpCounts {
        self.counters.snapshot()
    }

    fn record(&self, path: AcquirePath) {
        let mut p = self.paths.get();
        match path {
            AcquirePath::Fast => p.fast += 1,
            AcquirePath::Pending => p.pending += 1,
            AcquirePath::Queued => p.queued += 1,
        }
        self.paths.set(p);
    }
}

impl Drop for WordContext {
    fn drop(&mut self) {
        registry().release(self.cpu);
    }
}

/// The 4-byte lock word.
#[repr(transparent)]
#[derive(Debug, Default)]
pub struct WordLock {
    word: AtomicU32,
}

const _: () = assert!(mem::size_of::<WordLock>() == 4);

impl WordLock {
    pub const fn new() -> Self {
        WordLock {
            word: AtomicU32::new(0),
        }
    }

    pub fn raw_word(&self) -> u32 {
        self.word.load(Ordering::Relaxed)
    }

    pub fn tail_code(&self) -> u16 {
        (self.raw_word() >> TAIL_SHIFT) as u16
    }

    pub fn is_locked(&self) -> bool {
        self.raw_word() & LOCKED_MASK != 0
    }

    /// Takes the lock, reporting the path used.
    ///
    /// Fails without touching the word when the calling context already
    /// holds [`MAX_NESTING`] word locks.
    pub fn acquire(&self, ctx: &WordContext) -> Result<AcquirePath, WordLockError> {
        let depth = ctx.depth.get();
        if usize::from(depth) >= MAX_NESTING {
            return Err(WordLockError::NestingExceeded);
        }
        ctx.depth.set(depth + 1);
        let path = self.acquire_inner(ctx, usize::from(depth));
        ctx.record(path);
        Ok(path)
    }

    fn acquire_inner(&self, ctx: &WordContext, depth: usize) -> AcquirePath {
        if self
            .word
            .compare_exchange(0, LOCKED_VAL, Ordering::Acquire, Ordering::Relaxed)
            .is_ok()
        {
            return AcquirePath::Fast;
        }

        let val = self.word.load(Ordering::Relaxed);
        if val & !LOCKED_MASK == 0 {
            let prev = self.word.fetch_or(PENDING, Ordering::Acquire);
            if prev & !LOCKED_MASK == 0 {
                if prev & LOCKED_MASK != 0 {
                    wait_until(|| {
                        (self.word.load(Ordering::Acquire) & LOCKED_MASK == 0).then_some(())
                    });
                }
                // pending -> 0, locked -> 1 in one step.
                self.word
                    .fetch_sub(PENDING - LOCKED_VAL, Ordering::Acquire);
                return AcquirePath::Pending;
            }
            if prev & PENDING == 0 {
                // The bit we set raced with a queue; take it back.
                self.word.fetch_and(!PENDING, Ordering::Relaxed);
            }
        }

        self.queue(ctx, depth);
        AcquirePath::Queued
    }

    fn queue(&self, ctx: &WordContext, depth: usize) {
        let pool_node = &ctx.pool.nodes[depth];
        let node = &pool_node.node;
        let code = pool_node.code;
        node.reset();

        let mut old = self.word.load(Ordering::Relaxed);
        loop {
            let new = (old & 0xffff) | (u32::from(code) << TAIL_SHIFT);
            match self
                .word
                .compare_exchange_weak(old, new, Ordering::AcqRel, Ordering::Relaxed)
            {
                Ok(_) => break,
                Err(v) => old = v,
            }
        }

        let prev_code = (old >> TAIL_SHIFT) as u16;
        if prev_code != 0 {
            if ctx.slow_path == SlowPath::Cna {
                node.record_socket(ctx.topology.current_numa_node());
            }
            registry().node(prev_code).link_successor(node);
            node.wait_for_grant();
        } else {
            node.mark_head_of_empty_queue();
        }

        // Queue head: wait for the holder and any pending waiter to leave.
        loop {
            let val = wait_until(|| {
                let v = self.word.load(Ordering::Acquire);
                (v & (LOCKED_MASK | PENDING) == 0).then_some(v)
            });
            if (val >> TAIL_SHIFT) as u16 != code {
                break;
            }
            let secondary = match ctx.slow_path {
                SlowPath::Cna => node.secondary_head(),
                SlowPath::Mcs => None,
            };
            let new = match secondary {
                // SAFETY: the secondary head is a waiting pool node.
                Some(head) => {
                    LOCKED_VAL
                        | u32::from(code_of(unsafe { head.as_ref() }.secondary_tail())) << TAIL_SHIFT
                }
                None => LOCKED_VAL,
            };
            if self
                .word
                .compare_exchange(val, new, Ordering::Acquire, Ordering::Relaxed)
                .is_ok()
            {
                if let Some(head) = secondary {
                    CnaNode::grant(head, 1, &ctx.counters);
                }
                return;
            }
        }

        self.word.fetch_or(LOCKED_VAL, Ordering::Acquire);
        let next = node.wait_for_next();
        match ctx.slow_path {
            SlowPath::Mcs => CnaNode::grant(next, 1, &ctx.counters),
            // SAFETY: this node heads the queue and has a linked successor.
            SlowPath::Cna => unsafe {
                cna::pass_lock(node, &ctx.policy, &ctx.counters, &ctx.topology)
            },
        }
    }

    /// Clears the locked byte.
    ///
    /// # Safety
    ///
    /// The calling context holds this lock.
    pub unsafe fn release_word(&self, ctx: &WordContext) {
        self.word.fetch_and(!LOCKED_MASK, Ordering::Release);
        let depth = ctx.depth.get();
        debug_assert!(depth > 0);
        ctx.depth.set(depth.saturating_sub(1));
    }
}

unsafe impl RawLock for WordLock {
    type Context = WordContext;

    unsafe fn acquire(&self, ctx: &WordContext) {
        if let Err(e) = WordLock::acquire(self, ctx) {
            panic!("word lock acquisition failed: {e}");
        }
    }

    unsafe fn release(&self, ctx: &WordContext) {
        self.release_word(ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raw::Locked;
    use std::thread;
    use std::time::Duration;

    fn ctx(slow: SlowPath) -> WordContext {
        WordContext::new(
            slow,
            &CnaConfig::default(),
            0,
            Arc::new(Topology::mock(Vec::new()).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn tail_code_examples() {
        assert_eq!(decode_tail(encode_tail(5, 2).unwrap()), Some((5, 2)));
        assert_ne!(encode_tail(0, 0).unwrap(), 0);
        assert_eq!(decode_tail(0), None);
        assert_eq!(decode_tail(3), None);
        assert_eq!(
            encode_tail(MAX_CPUS, 0),
            Err(WordLockError::CpuOutOfRange(MAX_CPUS))
        );
        assert_eq!(encode_tail(0, 4), Err(WordLockError::ContextOutOfRange(4)));
        assert_eq!(
            decode_tail(encode_tail(MAX_CPUS - 1, 3).unwrap()),
            Some((MAX_CPUS - 1, 3))
        );
    }

    #[test]
    fn uncontended_fast_path() {
        let lock = WordLock::new();
        let c = ctx(SlowPath::Mcs);
        assert_eq!(lock.acquire(&c), Ok(AcquirePath::Fast));
        assert_eq!(lock.raw_word(), LOCKED_VAL);
        unsafe { lock.release_word(&c) };
        assert_eq!(lock.raw_word(), 0);
        assert_eq!(c.depth(), 0);
    }

    #[test]
    fn nesting_limit() {
        let locks: Vec<WordLock> = (0..5).map(|_| WordLock::new()).collect();
        let c = ctx(SlowPath::Cna);
        for lock in &locks[..4] {
            assert!(lock.acquire(&c).is_ok());
        }
        assert_eq!(locks[4].acquire(&c), Err(WordLockError::NestingExceeded));
        assert_eq!(locks[4].raw_word(), 0);
        for lock in locks[..4].iter().rev() {
            unsafe { lock.release_word(&c) };
        }
        assert_eq!(c.depth(), 0);
    }

    fn wait_for(cond: impl Fn() -> bool) {
        while !cond() {
            thread::sleep(Duration::from_millis(1));
        }
    }

    fn paths_under(slow: SlowPath) {
        let lock = Arc::new(WordLock::new());
        let holder = ctx(slow);
        assert_eq!(lock.acquire(&holder), Ok(AcquirePath::Fast));

        let spawn = |lock: &Arc<WordLock>| {
            let lock = Arc::clone(lock);
            thread::spawn(move || {
                let c = ctx(slow);
                let path = lock.acquire(&c).unwrap();
                unsafe { lock.release_word(&c) };
                (path, c.cpu())
            })
        };

        let pending = spawn(&lock);
        wait_for(|| lock.raw_word() & PENDING != 0);
        assert_eq!(lock.tail_code(), 0);

        let queued = spawn(&lock);
        wait_for(|| lock.tail_code() != 0);
        let queued_cpu = decode_tail(lock.tail_code()).unwrap().0;

        unsafe { lock.release_word(&holder) };
        assert_eq!(pending.join().unwrap().0, AcquirePath::Pending);
        let (path, cpu) = queued.join().unwrap();
        assert_eq!(path, AcquirePath::Queued);
        assert_eq!(cpu, queued_cpu);
        assert_eq!(lock.raw_word(), 0);
    }

    #[test]
    fn pending_then_queue_mcs() {
        paths_under(SlowPath::Mcs);
    }

    #[test]
    fn pending_then_queue_cna() {
        paths_under(SlowPath::Cna);
    }

    fn stress(slow: SlowPath) {
        const THREADS: usize = 4;
        let topo = Arc::new(Topology::mock_round_robin(THREADS, 2));
        let locked = Arc::new(Locked::new(WordLock::new(), 0u64));
        let handles: Vec<_> = (0..THREADS)
            .map(|t| {
                let locked = Arc::clone(&locked);
                let topo = Arc::clone(&topo);
                thread::spawn(move || {
                    crate::topology::bind_thread(t);
                    let mut c =
                        WordContext::new(slow, &CnaConfig::default(), t, topo).unwrap();
                    for _ in 0..20_000 {
                        locked.with(&mut c, |v| *v += 1);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let locked = Arc::try_unwrap(locked).ok().unwrap();
        assert_eq!(locked.lock_ref().raw_word(), 0);
        assert_eq!(locked.into_inner(), 80_000);
    }

    #[test]
    fn stress_word_mcs() {
        stress(SlowPath::Mcs);
    }

    #[test]
    fn stress_word_cna() {
        stress(SlowPath::Cna);
    }
}
