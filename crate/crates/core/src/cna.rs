//! The compact NUMA-aware (CNA) lock.
//!
//! Shared state is one word: the tail of the main queue. Every waiter joins
//! the main queue with a single atomic exchange. On release the holder looks
//! for a waiter on its own socket; the waiters it skips are cut out of the
//! main queue and appended to a secondary queue. The head of the secondary
//! queue travels with the lock inside the grant word of each new holder:
//!
//! - `0`: still waiting,
//! - `1`: granted, secondary queue empty,
//! - anything else: granted, value is the address of the secondary head.
//!
//! The secondary head keeps a pointer to the secondary tail so that both
//! appending and splicing the queue back are O(1). Node alignment keeps
//! every node address out of `{0, 1}`.
//!
//! A per-thread xorshift draw decides on each handover whether the lock may
//! stay on the socket; when the draw masks to zero the whole secondary
//! queue is spliced in front of the holder's successor and its head gets
//! the lock.

use std::cell::Cell;
use std::mem;
use std::ops::{Add, AddAssign};
use std::ptr::{self, NonNull};
use std::sync::atomic::{AtomicI32, AtomicPtr, AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::raw::RawLock;
use crate::spin::wait_until;
use crate::topology::{SocketId, Topology};

/// Long-term fairness mask: the lock leaves the socket with probability
/// 1/65536 per handover.
pub const DEFAULT_THRESHOLD: u32 = 0xffff;
/// Shuffle-reduction mask: the same-socket search runs with probability
/// 1/256 while the secondary queue is empty.
pub const DEFAULT_SHUFFLE_THRESHOLD: u32 = 0xff;

pub const THRESHOLD_ENV: &str = "CNA_THRESHOLD";
pub const SHUFFLE_THRESHOLD_ENV: &str = "CNA_SHUFFLE_THRESHOLD";
pub const SEED_ENV: &str = "CNA_SEED";

const WAITING: usize = 0;
const GRANTED: usize = 1;

const XORSHIFT_FALLBACK_SEED: u32 = 0x9e37_79b9;

/// Marsaglia's 32-bit xorshift (13, 17, 5). Period 2^32 - 1; the zero state
/// is unreachable and a zero seed is replaced by a fixed constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct XorShift32 {
    state: u32,
}

impl XorShift32 {
    pub const fn new(seed: u32) -> Self {
        XorShift32 {
            state: if seed == 0 {
                XORSHIFT_FALLBACK_SEED
            } else {
                seed
            },
        }
    }

    /// Generator for logical thread `thread` under global seed `seed`.
    pub fn for_thread(seed: u64, thread: usize) -> Self {
        // splitmix64 finalizer over (seed, thread)
        let mut z = seed.wrapping_add((thread as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        Self::new((z ^ (z >> 32)) as u32)
    }

    #[inline]
    pub fn next_u32(&mut self) -> u32 {
        let mut x = self.state;
        x ^= x << 13;
        x ^= x >> 17;
        x ^= x << 5;
        self.state = x;
        x
    }
}

/// True when the handover may stay on the holder's socket.
#[inline]
pub fn keep_lock_local(draw: u32, threshold: u32) -> bool {
    draw & threshold != 0
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("{name} = {value:#x} is not of the form 2^k - 1")]
    NotAMask { name: &'static str, value: u32 },
    #[error("cannot parse {name} = `{value}`")]
    Parse { name: &'static str, value: String },
}

/// Tunables of the fairness policy, shared by every thread using a lock.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnaConfig {
    pub threshold: u32,
    pub shuffle_threshold: u32,
    pub shuffle_reduction: bool,
    pub seed: u64,
}

impl Default for CnaConfig {
    fn default() -> Self {
        CnaConfig {
            threshold: DEFAULT_THRESHOLD,
            shuffle_threshold: DEFAULT_SHUFFLE_THRESHOLD,
            shuffle_reduction: false,
            seed: 0,
        }
    }
}

impl CnaConfig {
    /// Defaults with shuffle reduction turned on.
    pub fn optimized() -> Self {
        CnaConfig {
            shuffle_reduction: true,
            ..Self::default()
        }
    }

    pub fn with_threshold(mut self, threshold: u32) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        check_mask("threshold", self.threshold)?;
        check_mask("shuffle_threshold", self.shuffle_threshold)
    }

    /// Applies `CNA_THRESHOLD`, `CNA_SHUFFLE_THRESHOLD` and `CNA_SEED`.
    pub fn with_env_overrides(self) -> Result<Self, ConfigError> {
        self.with_overrides(|name| std::env::var(name).ok())
    }

    pub(crate) fn with_overrides(
        mut self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        if let Some(v) = lookup(THRESHOLD_ENV) {
            self.threshold = parse_int(THRESHOLD_ENV, &v)? as u32;
        }
        if let Some(v) = lookup(SHUFFLE_THRESHOLD_ENV) {
            self.shuffle_threshold = parse_int(SHUFFLE_THRESHOLD_ENV, &v)? as u32;
        }
        if let Some(v) = lookup(SEED_ENV) {
            self.seed = parse_int(SEED_ENV, &v)?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Per-thread policy state for logical thread `thread`.
    pub fn policy_for(&self, thread: usize) -> FairnessPolicy {
        FairnessPolicy {
            threshold: self.threshold,
            shuffle_threshold: self.shuffle_threshold,
            shuffle_reduction_enabled: self.shuffle_reduction,
            rng: Cell::new(XorShift32::for_thread(self.seed, thread)),
        }
    }
}

fn check_mask(name: &'static str, value: u32) -> Result<(), ConfigError> {
    if value & value.wrapping_add(1) == 0 {
        Ok(())
    } else {
        Err(ConfigError::NotAMask { name, value })
    }
}

fn parse_int(name: &'static str, value: &str) -> Result<u64, ConfigError> {
    let v = value.trim();
    let parsed = match v.strip_prefix("0x").or_else(|| v.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => v.parse::<u64>(),
    };
    parsed.map_err(|_| ConfigError::Parse {
        name,
        value: value.to_owned(),
    })
}

/// Thread-confined fairness state: the masks plus this thread's generator.
#[derive(Debug)]
pub struct FairnessPolicy {
    pub threshold: u32,
    pub shuffle_threshold: u32,
    pub shuffle_reduction_enabled: bool,
    rng: Cell<XorShift32>,
}

impl FairnessPolicy {
    pub fn new(config: &CnaConfig, thread: usize) -> Self {
        config.policy_for(thread)
    }

    #[inline]
    pub fn pseudo_rand(&self) -> u32 {
        let mut rng = self.rng.get();
        let v = rng.next_u32();
        self.rng.set(rng);
        v
    }

    #[inline]
    pub fn keep_lock_local(&self) -> bool {
        keep_lock_local(self.pseudo_rand(), self.threshold)
    }

    /// Shuffle reduction: true when the holder should hand straight to its
    /// successor without searching for a same-socket waiter.
    #[inline]
    fn skip_search(&self) -> bool {
        self.pseudo_rand() & self.shuffle_threshold != 0
    }
}

/// Snapshot of an [`AtomicOpCounter`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub acquires: u64,
    pub releases: u64,
    pub swaps: u64,
    pub cas_attempts: u64,
    pub plain_grant_stores: u64,
    /// Releases that found a successor in the main queue.
    pub handovers: u64,
    pub find_successor_calls: u64,
    pub shuffle_skips: u64,
    /// Grants of the secondary head after a splice or tail swing.
    pub secondary_flushes: u64,
}

impl Add for OpCounts {
    type Output = OpCounts;

    fn add(mut self, rhs: OpCounts) -> OpCounts {
        self += rhs;
        self
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, rhs: OpCounts) {
        self.acquires += rhs.acquires;
        self.releases += rhs.releases;
        self.swaps += rhs.swaps;
        self.cas_attempts += rhs.cas_attempts;
        self.plain_grant_stores += rhs.plain_grant_stores;
        self.handovers += rhs.handovers;
        self.find_successor_calls += rhs.find_successor_calls;
        self.shuffle_skips += rhs.shuffle_skips;
        self.secondary_flushes += rhs.secondary_flushes;
    }
}

/// Per-thread audit of the atomic instructions the lock executes.
#[derive(Debug, Default)]
pub struct AtomicOpCounter {
    counts: Cell<OpCounts>,
}

impl AtomicOpCounter {
    #[inline]
    fn bump(&self, f: impl FnOnce(&mut OpCounts)) {
        let mut c = self.counts.get();
        f(&mut c);
        self.counts.set(c);
    }

    pub fn snapshot(&self) -> OpCounts {
        self.counts.get()
    }

    pub fn reset(&self) {
        self.counts.set(OpCounts::default());
    }
}

/// Queue record for one acquisition.
#[repr(C, align(64))]
#[derive(Debug)]
pub struct CnaNode {
    spin: AtomicUsize,
    socket: AtomicI32,
    sec_tail: AtomicPtr<CnaNode>,
    next: AtomicPtr<CnaNode>,
}

const _: () = assert!(mem::align_of::<CnaNode>() >= 4);

impl Default for CnaNode {
    fn default() -> Self {
        Self::new()
    }
}

impl CnaNode {
    pub const fn new() -> Self {
        CnaNode {
            spin: AtomicUsize::new(WAITING),
            socket: AtomicI32::new(-1),
            sec_tail: AtomicPtr::new(ptr::null_mut()),
            next: AtomicPtr::new(ptr::null_mut()),
        }
    }

    /// Current grant word.
    pub fn grant_word(&self) -> usize {
        self.spin.load(Ordering::Acquire)
    }

    pub fn socket(&self) -> SocketId {
        SocketId::from_raw(self.socket.load(Ordering::Relaxed))
    }

    fn as_ptr(&self) -> *mut CnaNode {
        self as *const CnaNode as *mut CnaNode
    }

    /// Numeric identity as stored in a grant word.
    pub fn handle(&self) -> usize {
        self.as_ptr() as usize
    }

    pub(crate) fn reset(&self) {
        self.next.store(ptr::null_mut(), Ordering::Relaxed);
        self.socket.store(-1, Ordering::Relaxed);
        self.spin.store(WAITING, Ordering::Relaxed);
    }

    pub(crate) fn mark_head_of_empty_queue(&self) {
        self.spin.store(GRANTED, Ordering::Relaxed);
    }

    pub(crate) fn record_socket(&self, socket: SocketId) {
        self.socket.store(socket.get(), Ordering::Relaxed);
    }

    pub(crate) fn link_successor(&self, succ: &CnaNode) {
        self.next.store(succ.as_ptr(), Ordering::Release);
    }

    pub(crate) fn wait_for_grant(&self) {
        wait_until(|| (self.spin.load(Ordering::Acquire) != WAITING).then_some(()));
    }

    pub(crate) fn wait_for_next(&self) -> NonNull<CnaNode> {
        wait_until(|| NonNull::new(self.next.load(Ordering::Acquire)))
    }

    pub(crate) fn next(&self) -> Option<NonNull<CnaNode>> {
        NonNull::new(self.next.load(Ordering::Acquire))
    }

    /// Head of the secondary queue carried in this holder's grant word.
    pub(crate) fn secondary_head(&self) -> Option<NonNull<CnaNode>> {
        match self.spin.load(Ordering::Relaxed) {
            WAITING | GRANTED => None,
            h => NonNull::new(h as *mut CnaNode),
        }
    }

    pub(crate) fn secondary_tail(&self) -> *mut CnaNode {
        self.sec_tail.load(Ordering::Relaxed)
    }

    /// Writes the grant word of `node` (a release store).
    #[inline]
    pub(crate) fn grant(node: NonNull<CnaNode>, value: usize, counters: &AtomicOpCounter) {
        debug_assert!(value != WAITING);
        // SAFETY: callers pass nodes that are enqueued and therefore alive
        // until granted.
        unsafe { node.as_ref() }.spin.store(value, Ordering::Release);
        counters.bump(|c| c.plain_grant_stores += 1);
    }
}

/// Looks for the first waiter after `me` on the holder's socket.
///
/// Skipped waiters are moved to the end of the secondary queue, whose head
/// is (or becomes) `me`'s grant word. Returns `None` without touching the
/// secondary queue when no such waiter exists.
///
/// # Safety
///
/// The caller holds the lock through `me` and `me.next` is non-null.
pub(crate) unsafe fn find_successor(
    me: &CnaNode,
    current_socket: impl FnOnce() -> SocketId,
) -> Option<NonNull<CnaNode>> {
    let next = me.next.load(Ordering::Acquire);
    debug_assert!(!next.is_null());
    let mut my_socket = me.socket.load(Ordering::Relaxed);
    if my_socket == -1 {
        my_socket = current_socket().get();
    }

    if (*next).socket.load(Ordering::Relaxed) == my_socket {
        return NonNull::new(next);
    }

    let sec_head = next;
    let mut sec_tail = next;
    let mut cur = (*next).next.load(Ordering::Acquire);

    while !cur.is_null() {
        if (*cur).socket.load(Ordering::Relaxed) == my_socket {
            match me.secondary_head() {
                Some(head) => {
                    let old_tail = head.as_ref().sec_tail.load(Ordering::Relaxed);
                    (*old_tail).next.store(sec_head, Ordering::Relaxed);
                }
                None => me.spin.store(sec_head as usize, Ordering::Relaxed),
            }
            (*sec_tail).next.store(ptr::null_mut(), Ordering::Relaxed);
            let head = me.spin.load(Ordering::Relaxed) as *const CnaNode;
            (*head).sec_tail.store(sec_tail, Ordering::Relaxed);
            return NonNull::new(cur);
        }
        sec_tail = cur;
        cur = (*cur).next.load(Ordering::Acquire);
    }

    None
}

/// Passes the lock to a waiter once `me` has a visible successor.
///
/// # Safety
///
/// The caller holds the lock through `me` and `me.next` is non-null.
pub(crate) unsafe fn pass_lock(
    me: &CnaNode,
    policy: &FairnessPolicy,
    counters: &AtomicOpCounter,
    topology: &Topology,
) {
    counters.bump(|c| c.handovers += 1);
    let next = NonNull::new_unchecked(me.next.load(Ordering::Acquire));

    if policy.shuffle_reduction_enabled
        && me.spin.load(Ordering::Relaxed) == GRANTED
        && policy.skip_search()
    {
        counters.bump(|c| c.shuffle_skips += 1);
        CnaNode::grant(next, GRANTED, counters);
        return;
    }

    if policy.keep_lock_local() {
        counters.bump(|c| c.find_successor_calls += 1);
        if let Some(succ) = find_successor(me, || topology.current_numa_node()) {
            CnaNode::grant(succ, me.spin.load(Ordering::Relaxed), counters);
            return;
        }
    }

    match me.secondary_head() {
        Some(head) => {
            // The stale sec_tail left in the new holder is never read.
            let sec_tail = head.as_ref().sec_tail.load(Ordering::Relaxed);
            (*sec_tail).next.store(next.as_ptr(), Ordering::Relaxed);
            counters.bump(|c| c.secondary_flushes += 1);
            CnaNode::grant(head, GRANTED, counters);
        }
        None => CnaNode::grant(next, GRANTED, counters),
    }
}

/// The lock: a single word holding the tail of the main queue.
#[repr(transparent)]
#[derive(Debug, Default)]
pub struct CnaLock {
    tail: AtomicPtr<CnaNode>,
}

const _: () = assert!(mem::size_of::<CnaLock>() == mem::size_of::<usize>());

impl CnaLock {
    pub const fn new() -> Self {
        CnaLock {
            tail: AtomicPtr::new(ptr::null_mut()),
        }
    }

    /// True while any thread holds or waits for the lock.
    pub fn is_locked(&self) -> bool {
        !self.tail.load(Ordering::Relaxed).is_null()
    }

    /// Acquires the lock with node `me`.
    ///
    /// # Safety
    ///
    /// `me` must not be enqueued anywhere and must stay in place until the
    /// matching [`release_with`](Self::release_with) returns.
    pub unsafe fn acquire_with(&self, me: &CnaNode, topology: &Topology, counters: &AtomicOpCounter) {
        me.reset();

        let tail = self.tail.swap(me.as_ptr(), Ordering::AcqRel);
        counters.bump(|c| {
            c.swaps += 1;
            c.acquires += 1;
        });

        if tail.is_null() {
            me.mark_head_of_empty_queue();
            return;
        }

        me.record_socket(topology.current_numa_node());
        (*tail).link_successor(me);
        me.wait_for_grant();
    }

    /// Releases the lock held through `me`.
    ///
    /// # Safety
    ///
    /// The caller holds the lock through `me`.
    pub unsafe fn release_with(
        &self,
        me: &CnaNode,
        policy: &FairnessPolicy,
        topology: &Topology,
        counters: &AtomicOpCounter,
    ) {
        counters.bump(|c| c.releases += 1);

        if me.next().is_none() {
            let swung = match me.secondary_head() {
                None => {
                    counters.bump(|c| c.cas_attempts += 1);
                    self.tail
                        .compare_exchange(
                            me.as_ptr(),
                            ptr::null_mut(),
                            Ordering::AcqRel,
                            Ordering::Relaxed,
                        )
                        .is_ok()
                }
                Some(head) => {
                    let sec_tail = head.as_ref().secondary_tail();
                    counters.bump(|c| c.cas_attempts += 1);
                    let ok = self
                        .tail
                        .compare_exchange(me.as_ptr(), sec_tail, Ordering::AcqRel, Ordering::Relaxed)
                        .is_ok();
                    if ok {
                        counters.bump(|c| c.secondary_flushes += 1);
                        CnaNode::grant(head, GRANTED, counters);
                    }
                    ok
                }
            };
            if swung {
                return;
            }
            me.wait_for_next();
        }

        pass_lock(me, policy, counters, topology);
    }
}

/// Per-thread state for [`CnaLock`]: the queue node, the fairness policy,
/// the atomic-operation audit and the topology handle.
#[derive(Debug)]
pub struct CnaContext {
    node: CnaNode,
    policy: FairnessPolicy,
    counters: AtomicOpCounter,
    topology: Arc<Topology>,
}

impl CnaContext {
    pub fn new(config: &CnaConfig, thread: usize, topology: Arc<Topology>) -> Self {
        CnaContext {
            node: CnaNode::new(),
            policy: config.policy_for(thread),
            counters: AtomicOpCounter::default(),
            topology,
        }
    }

    pub fn node(&self) -> &CnaNode {
        &self.node
    }

    pub fn policy(&self) -> &FairnessPolicy {
        &self.policy
    }

    pub fn counts(&self) -> OpCounts {
        self.counters.snapshot()
    }

    pub fn counters(&self) -> &AtomicOpCounter {
        &self.counters
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }
}

unsafe impl RawLock for CnaLock {
    type Context = CnaContext;

    #[inline]
    unsafe fn acquire(&self, ctx: &CnaContext) {
        self.acquire_with(&ctx.node, &ctx.topology, &ctx.counters)
    }

    #[inline]
    unsafe fn release(&self, ctx: &CnaContext) {
        self.release_with(&ctx.node, &ctx.policy, &ctx.topology, &ctx.counters)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    const S0: SocketId = SocketId::new(0);
    const S1: SocketId = SocketId::new(1);

    /// Nodes t1..tN (index 0 is t1) with fixed sockets.
    struct Queue {
        nodes: Box<[CnaNode]>,
    }

    impl Queue {
        fn new(sockets: &[SocketId]) -> Self {
            let nodes: Box<[CnaNode]> = sockets
                .iter()
                .map(|s| {
                    let n = CnaNode::new();
                    n.record_socket(*s);
                    n
                })
                .collect();
            Queue { nodes }
        }

        fn t(&self, i: usize) -> &CnaNode {
            &self.nodes[i - 1]
        }

        fn link(&self, chain: &[usize]) {
            for w in chain.windows(2) {
                self.t(w[0]).link_successor(self.t(w[1]));
            }
            if let Some(last) = chain.last() {
                self.t(*last).next.store(ptr::null_mut(), Ordering::Relaxed);
            }
        }

        fn name(&self, p: *const CnaNode) -> Option<usize> {
            self.nodes
                .iter()
                .position(|n| ptr::eq(n, p))
                .map(|i| i + 1)
        }

        fn chain_from(&self, i: usize) -> Vec<usize> {
            let mut out = vec![i];
            let mut cur = self.t(i).next.load(Ordering::Relaxed);
            while let Some(n) = self.name(cur) {
                out.push(n);
                cur = self.t(n).next.load(Ordering::Relaxed);
            }
            out
        }

        fn spin_of(&self, i: usize) -> usize {
            self.t(i).spin.load(Ordering::Relaxed)
        }
    }

    fn seed_with_first_draw(pred: impl Fn(u32) -> bool) -> u32 {
        (1u32..)
            .find(|s| pred(XorShift32::new(*s).next_u32()))
            .unwrap()
    }

    #[test]
    fn xorshift_first_draw_regression() {
        assert_eq!(XorShift32::new(1).next_u32(), 270_369);
    }

    #[test]
    fn xorshift_is_deterministic() {
        let mut a = XorShift32::for_thread(42, 3);
        let mut b = XorShift32::for_thread(42, 3);
        for _ in 0..1000 {
            assert_eq!(a.next_u32(), b.next_u32());
        }
        assert_ne!(XorShift32::new(0).next_u32(), 0);
    }

    #[test]
    fn xorshift_bits_are_balanced() {
        let mut rng = XorShift32::new(1);
        let draws = 1u32 << 20;
        let mut ones = [0u32; 32];
        for _ in 0..draws {
            let v = rng.next_u32();
            for (bit, count) in ones.iter_mut().enumerate() {
                *count += (v >> bit) & 1;
            }
        }
        for (bit, count) in ones.iter().enumerate() {
            let frac = f64::from(*count) / f64::from(draws);
            assert!((frac - 0.5).abs() <= 0.02, "bit {bit}: {frac}");
        }
    }

    #[test]
    fn keep_lock_local_masks() {
        assert!(!keep_lock_local(0, DEFAULT_THRESHOLD));
        assert!(!keep_lock_local(0x10000, 0xffff));
        assert!(keep_lock_local(0x1ffff, 0xffff));
        assert!(!keep_lock_local(u32::MAX, 0));
    }

    #[test]
    fn config_masks_validated() {
        assert!(CnaConfig::default().validate().is_ok());
        assert!(CnaConfig::default().with_threshold(0).validate().is_ok());
        assert!(CnaConfig::default()
            .with_threshold(u32::MAX)
            .validate()
            .is_ok());
        assert_eq!(
            CnaConfig::default().with_threshold(0x1000).validate(),
            Err(ConfigError::NotAMask {
                name: "threshold",
                value: 0x1000
            })
        );
    }

    #[test]
    fn env_overrides_parse_hex_and_decimal() {
        let env = |name: &str| match name {
            THRESHOLD_ENV => Some("0xff".to_owned()),
            SEED_ENV => Some("17".to_owned()),
            _ => None,
        };
        let cfg = CnaConfig::default().with_overrides(env).unwrap();
        assert_eq!(cfg.threshold, 0xff);
        assert_eq!(cfg.seed, 17);
        assert_eq!(cfg.shuffle_threshold, DEFAULT_SHUFFLE_THRESHOLD);

        let bad = |name: &str| (name == SHUFFLE_THRESHOLD_ENV).then(|| "0x100".to_owned());
        assert!(CnaConfig::default().with_overrides(bad).is_err());
    }

    // Running example on two sockets: t1, t4, t5 on socket 0, the rest on 1.
    fn running_example() -> Queue {
        Queue::new(&[S0, S1, S1, S0, S0, S1, S1])
    }

    #[test]
    fn find_successor_moves_skipped_nodes_to_secondary() {
        let q = running_example();
        q.link(&[1, 2, 3, 4, 5, 6]);
        q.t(1).spin.store(GRANTED, Ordering::Relaxed);

        let succ = unsafe { find_successor(q.t(1), || S0) }.unwrap();
        assert_eq!(q.name(succ.as_ptr()), Some(4));
        assert_eq!(q.spin_of(1), q.t(2).handle());
        assert_eq!(q.name(q.t(2).secondary_tail()), Some(3));
        assert_eq!(q.chain_from(2), vec![2, 3]);
        assert_eq!(q.chain_from(4), vec![4, 5, 6]);
    }

    #[test]
    fn find_successor_immediate_match_mutates_nothing() {
        let q = running_example();
        q.link(&[4, 5, 6, 1]);
        q.t(4).spin.store(q.t(2).handle(), Ordering::Relaxed);
        q.t(2).sec_tail.store(q.t(3).as_ptr(), Ordering::Relaxed);

        let succ = unsafe { find_successor(q.t(4), || unreachable!()) }.unwrap();
        assert_eq!(q.name(succ.as_ptr()), Some(5));
        assert_eq!(q.spin_of(4), q.t(2).handle());
        assert_eq!(q.chain_from(4), vec![4, 5, 6, 1]);
        assert_eq!(q.name(q.t(2).secondary_tail()), Some(3));
    }

    #[test]
    fn find_successor_appends_to_existing_secondary() {
        let q = running_example();
        q.link(&[2, 3]);
        q.link(&[5, 6, 1, 7]);
        q.t(5).spin.store(q.t(2).handle(), Ordering::Relaxed);
        q.t(2).sec_tail.store(q.t(3).as_ptr(), Ordering::Relaxed);

        let succ = unsafe { find_successor(q.t(5), || unreachable!()) }.unwrap();
        assert_eq!(q.name(succ.as_ptr()), Some(1));
        assert_eq!(q.chain_from(2), vec![2, 3, 6]);
        assert_eq!(q.name(q.t(2).secondary_tail()), Some(6));
        assert_eq!(q.chain_from(1), vec![1, 7]);
    }

    #[test]
    fn find_successor_without_local_waiter_returns_none() {
        let q = running_example();
        q.link(&[2, 3, 6]);
        q.link(&[1, 7]);
        q.t(1).spin.store(q.t(2).handle(), Ordering::Relaxed);
        q.t(2).sec_tail.store(q.t(6).as_ptr(), Ordering::Relaxed);

        assert!(unsafe { find_successor(q.t(1), || S0) }.is_none());
        assert_eq!(q.chain_from(2), vec![2, 3, 6]);
        assert_eq!(q.name(q.t(2).secondary_tail()), Some(6));
        assert_eq!(q.spin_of(1), q.t(2).handle());
    }

    #[test]
    fn find_successor_queries_topology_for_unrecorded_socket() {
        let q = running_example();
        q.link(&[1, 2, 4]);
        q.t(1).socket.store(-1, Ordering::Relaxed);
        q.t(1).spin.store(GRANTED, Ordering::Relaxed);
        let succ = unsafe { find_successor(q.t(1), || S0) }.unwrap();
        assert_eq!(q.name(succ.as_ptr()), Some(4));
    }

    fn keep_local_policy() -> FairnessPolicy {
        // Seed 1 draws 270369 first, which keeps the lock local.
        let cfg = CnaConfig::default().with_seed(1);
        let p = cfg.policy_for(0);
        p.rng.set(XorShift32::new(1));
        p
    }

    fn lock_with_tail(node: &CnaNode) -> CnaLock {
        let lock = CnaLock::new();
        lock.tail.store(node.as_ptr(), Ordering::Relaxed);
        lock
    }

    #[test]
    fn release_copies_grant_word_to_local_successor() {
        let q = running_example();
        q.link(&[4, 5, 6, 1]);
        q.t(4).spin.store(q.t(2).handle(), Ordering::Relaxed);
        q.t(2).sec_tail.store(q.t(3).as_ptr(), Ordering::Relaxed);
        let lock = lock_with_tail(q.t(1));
        let counters = AtomicOpCounter::default();
        let topo = Topology::mock(Vec::new()).unwrap();

        unsafe { lock.release_with(q.t(4), &keep_local_policy(), &topo, &counters) };
        assert_eq!(q.spin_of(5), q.t(2).handle());
        assert_eq!(counters.snapshot().cas_attempts, 0);
        assert_eq!(counters.snapshot().plain_grant_stores, 1);
    }

    #[test]
    fn release_splices_secondary_when_no_local_waiter() {
        let q = running_example();
        q.link(&[2, 3, 6]);
        q.link(&[1, 7]);
        q.t(1).spin.store(q.t(2).handle(), Ordering::Relaxed);
        q.t(2).sec_tail.store(q.t(6).as_ptr(), Ordering::Relaxed);
        let lock = lock_with_tail(q.t(7));
        let counters = AtomicOpCounter::default();
        let topo = Topology::mock(Vec::new()).unwrap();

        unsafe { lock.release_with(q.t(1), &keep_local_policy(), &topo, &counters) };
        assert_eq!(q.spin_of(2), GRANTED);
        assert_eq!(q.chain_from(2), vec![2, 3, 6, 7]);
        assert_eq!(q.spin_of(7), WAITING);
        assert_eq!(counters.snapshot().secondary_flushes, 1);
    }

    #[test]
    fn sole_holder_release_empties_lock() {
        let node = CnaNode::new();
        let lock = CnaLock::new();
        let topo = Topology::mock(Vec::new()).unwrap();
        let counters = AtomicOpCounter::default();
        unsafe { lock.acquire_with(&node, &topo, &counters) };
        assert_eq!(node.grant_word(), GRANTED);
        assert!(lock.is_locked());
        unsafe { lock.release_with(&node, &keep_local_policy(), &topo, &counters) };
        assert!(!lock.is_locked());
        let c = counters.snapshot();
        assert_eq!((c.swaps, c.cas_attempts, c.plain_grant_stores), (1, 1, 0));
    }

    #[test]
    fn release_with_only_secondary_swings_tail() {
        let q = running_example();
        q.link(&[2, 3]);
        q.t(1).next.store(ptr::null_mut(), Ordering::Relaxed);
        q.t(1).spin.store(q.t(2).handle(), Ordering::Relaxed);
        q.t(2).sec_tail.store(q.t(3).as_ptr(), Ordering::Relaxed);
        let lock = lock_with_tail(q.t(1));
        let counters = AtomicOpCounter::default();
        let topo = Topology::mock(Vec::new()).unwrap();

        unsafe { lock.release_with(q.t(1), &keep_local_policy(), &topo, &counters) };
        assert_eq!(lock.tail.load(Ordering::Relaxed), q.t(3).as_ptr());
        assert_eq!(q.spin_of(2), GRANTED);
    }

    #[test]
    fn zero_draw_flushes_secondary_before_successor() {
        let seed = seed_with_first_draw(|d| d & DEFAULT_THRESHOLD == 0);
        let policy = CnaConfig::default().policy_for(0);
        policy.rng.set(XorShift32::new(seed));

        // t4 holds with secondary [t2, t3]; t5 (same socket) waits next.
        let q = running_example();
        q.link(&[2, 3]);
        q.link(&[4, 5, 6]);
        q.t(4).spin.store(q.t(2).handle(), Ordering::Relaxed);
        q.t(2).sec_tail.store(q.t(3).as_ptr(), Ordering::Relaxed);
        let lock = lock_with_tail(q.t(6));
        let counters = AtomicOpCounter::default();
        let topo = Topology::mock(Vec::new()).unwrap();

        unsafe { lock.release_with(q.t(4), &policy, &topo, &counters) };
        assert_eq!(q.spin_of(2), GRANTED);
        assert_eq!(q.spin_of(5), WAITING);
        assert_eq!(q.chain_from(2), vec![2, 3, 5, 6]);
        assert_eq!(counters.snapshot().find_successor_calls, 0);
    }

    #[test]
    fn shuffle_reduction_hands_to_next_without_search() {
        let seed = seed_with_first_draw(|d| d & DEFAULT_SHUFFLE_THRESHOLD != 0);
        let policy = CnaConfig::optimized().policy_for(0);
        policy.rng.set(XorShift32::new(seed));

        let q = running_example();
        q.link(&[1, 2, 4]);
        q.t(1).spin.store(GRANTED, Ordering::Relaxed);
        let lock = lock_with_tail(q.t(4));
        let counters = AtomicOpCounter::default();
        let topo = Topology::mock(Vec::new()).unwrap();

        unsafe { lock.release_with(q.t(1), &policy, &topo, &counters) };
        assert_eq!(q.spin_of(2), GRANTED);
        assert_eq!(q.chain_from(2), vec![2, 4]);
        assert_eq!(counters.snapshot().shuffle_skips, 1);
        assert_eq!(counters.snapshot().find_successor_calls, 0);
    }

    #[test]
    fn concurrent_increments_are_not_lost() {
        const THREADS: usize = 4;
        const ITERS: u64 = 20_000;
        let topo = Arc::new(Topology::mock_round_robin(THREADS, 2));
        let lock = Arc::new(crate::raw::Locked::new(CnaLock::new(), 0u64));
        let handles: Vec<_> = (0..THREADS)
            .map(|t| {
                let lock = Arc::clone(&lock);
                let topo = Arc::clone(&topo);
                thread::spawn(move || {
                    crate::topology::bind_thread(t);
                    let mut ctx = CnaContext::new(&CnaConfig::default(), t, topo);
                    for _ in 0..ITERS {
                        lock.with(&mut ctx, |c| *c += 1);
                    }
                    ctx.counts()
                })
            })
            .collect();
        let total = handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .fold(OpCounts::default(), |a, b| a + b);
        let lock = Arc::try_unwrap(lock).ok().unwrap();
        assert!(!lock.lock_ref().is_locked());
        assert_eq!(lock.into_inner(), THREADS as u64 * ITERS);
        assert_eq!(total.swaps, total.acquires);
        assert!(total.cas_attempts <= total.releases);
    }
}
