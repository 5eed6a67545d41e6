//! Stepped CNA and MCS state machines.
//!
//! Every thread owns one queue node (its index). Node handles stored in a
//! grant word are `index + 2`, so 0 and 1 keep their waiting/granted
//! meaning. Each call to [`Simulator::step`] performs one shared-memory
//! action of one thread.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::oracle::OracleEvent;
use super::{DrawSource, EventKind, SimConfig, SimError, SimEvent, SimLock, SimTrace};
use crate::cna::keep_lock_local;
use crate::topology::SocketId;

const WAITING: usize = 0;
const GRANTED: usize = 1;

fn handle(thread: usize) -> usize {
    thread + 2
}

fn thread_of(grant_word: usize) -> Option<usize> {
    grant_word.checked_sub(2)
}

#[derive(Clone, Copy, Debug)]
struct Node {
    spin: usize,
    socket: SocketId,
    sec_tail: Option<usize>,
    next: Option<usize>,
}

impl Node {
    const EMPTY: Node = Node {
        spin: WAITING,
        socket: SocketId::UNKNOWN,
        sec_tail: None,
        next: None,
    };
}

/// Where a thread is in its acquire/release protocol; the next step
/// performs the named action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    /// Reset the node and swap it into the tail.
    Swap,
    /// Publish the socket and link behind `pred`.
    Link { pred: usize },
    /// Spin on the grant word.
    Wait,
    /// First half of the critical section: read the counter.
    CsEnter,
    /// Second half: write the incremented counter.
    CsExit,
    LoadNext,
    /// CAS the tail from this node to null.
    CasNull,
    /// CAS the tail from this node to the secondary tail.
    CasSec,
    /// Spin until a successor links in.
    WaitNext,
    /// Pick a successor (fairness draw and same-socket search).
    Decide,
    /// Attach the secondary queue in front of the main-queue successor.
    Splice { head: usize },
    /// Store `value` into the grant word of `target`.
    Grant { target: usize, value: usize },
    Done,
}

/// Counters gathered while stepping; always maintained, even when event
/// recording is off.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub steps: u64,
    pub grants_per_thread: Vec<u64>,
    /// Grants that directly follow a release.
    pub handovers: u64,
    /// Handovers where both holders share a socket.
    pub local_handovers: u64,
    pub swaps: u64,
    pub cas_attempts: u64,
    pub plain_grant_stores: u64,
    pub decisions: u64,
    pub find_successor_calls: u64,
    pub shuffle_skips: u64,
    pub secondary_flushes: u64,
    /// Largest number of grants to other threads between one thread's
    /// enqueue and its own grant.
    pub max_grant_wait: u64,
    pub max_swaps_per_acquire: u32,
    pub max_cas_per_release: u32,
}

impl SimStats {
    pub fn handover_ratio(&self) -> Option<f64> {
        (self.handovers > 0).then(|| self.local_handovers as f64 / self.handovers as f64)
    }
}

#[derive(Clone, Copy, Debug)]
struct ThreadState {
    phase: Phase,
    remaining: u64,
    read_value: u64,
    swaps: u32,
    cas: u32,
    enqueued_at: u64,
    announced: bool,
}

/// One execution of the lock under a caller-chosen interleaving.
#[derive(Clone, Debug)]
pub struct Simulator {
    config: Arc<SimConfig>,
    tail: Option<usize>,
    nodes: Vec<Node>,
    threads: Vec<ThreadState>,
    counter: u64,
    in_cs: u32,
    draws: DrawSource,
    owner: Option<usize>,
    last_release: Option<SocketId>,
    grants_total: u64,
    trace: SimTrace,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        Self::from_shared(Arc::new(config))
    }

    pub(crate) fn from_shared(config: Arc<SimConfig>) -> Result<Self, SimError> {
        config.validate()?;
        let n = config.threads();
        let threads = config
            .acquisitions
            .iter()
            .map(|&a| ThreadState {
                phase: if a == 0 { Phase::Done } else { Phase::Swap },
                remaining: a,
                read_value: 0,
                swaps: 0,
                cas: 0,
                enqueued_at: 0,
                announced: false,
            })
            .collect();
        let mut trace = SimTrace::default();
        trace.stats.grants_per_thread = vec![0; n];
        Ok(Simulator {
            draws: config.draw_source(),
            config,
            tail: None,
            nodes: vec![Node::EMPTY; n],
            threads,
            counter: 0,
            in_cs: 0,
            owner: None,
            last_release: None,
            grants_total: 0,
            trace,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn threads(&self) -> usize {
        self.threads.len()
    }

    pub fn phase(&self, thread: usize) -> Phase {
        self.threads[thread].phase
    }

    pub fn remaining(&self, thread: usize) -> u64 {
        self.threads[thread].remaining
    }

    /// Current grant word of `thread`'s node.
    pub fn grant_word(&self, thread: usize) -> usize {
        self.nodes[thread].spin
    }

    /// Thread whose node is the main-queue tail.
    pub fn tail(&self) -> Option<usize> {
        self.tail
    }

    /// Successor link of `thread`'s node.
    pub fn next_of(&self, thread: usize) -> Option<usize> {
        self.nodes[thread].next
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn trace(&self) -> &SimTrace {
        &self.trace
    }

    pub fn stats(&self) -> &SimStats {
        &self.trace.stats
    }

    pub fn into_trace(self) -> SimTrace {
        self.trace
    }

    pub fn is_enabled(&self, thread: usize) -> bool {
        match self.threads[thread].phase {
            Phase::Done => false,
            Phase::Wait => self.nodes[thread].spin != WAITING,
            Phase::WaitNext => self.nodes[thread].next.is_some(),
            _ => true,
        }
    }

    pub fn enabled_threads(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.threads.len());
        self.enabled_into(&mut out);
        out
    }

    pub(crate) fn enabled_into(&self, out: &mut Vec<usize>) {
        out.clear();
        out.extend((0..self.threads.len()).filter(|&t| self.is_enabled(t)));
    }

    pub fn is_complete(&self) -> bool {
        self.threads.iter().all(|t| t.phase == Phase::Done)
    }

    /// Steps `thread` until `stop` holds for its phase, or until it blocks.
    /// Returns whether `stop` was reached.
    pub fn run_thread_until(
        &mut self,
        thread: usize,
        mut stop: impl FnMut(&Simulator) -> bool,
    ) -> Result<bool, SimError> {
        loop {
            if stop(self) {
                return Ok(true);
            }
            if !self.is_enabled(thread) {
                return Ok(false);
            }
            self.step(thread)?;
        }
    }

    /// Executes the next action of `thread`.
    pub fn step(&mut self, thread: usize) -> Result<(), SimError> {
        if thread >= self.threads.len() {
            return Err(SimError::UnknownThread { thread });
        }
        if !self.is_enabled(thread) {
            return Err(SimError::NotEnabled {
                thread,
                step: self.trace.stats.steps,
            });
        }
        if self.config.record {
            self.trace.schedule.push(thread);
        }
        self.execute(thread)?;
        self.trace.stats.steps += 1;
        if self.config.record {
            self.announce_arrivals()?;
        }
        if self.config.check_invariants && self.is_quiescent() {
            self.check_partition()?;
        }
        Ok(())
    }

    fn socket(&self, thread: usize) -> SocketId {
        self.config.sockets[thread]
    }

    fn emit(&mut self, thread: usize, kind: EventKind) {
        if self.config.record {
            self.trace.events.push(SimEvent {
                step: self.trace.stats.steps,
                thread,
                kind,
                socket: self.config.sockets[thread],
            });
        }
    }

    fn log(&mut self, event: OracleEvent) {
        if self.config.record {
            self.trace.serialized.push(event);
        }
    }

    fn invariant(&self, detail: impl Into<String>) -> SimError {
        SimError::Invariant {
            step: self.trace.stats.steps,
            detail: detail.into(),
        }
    }

    fn execute(&mut self, t: usize) -> Result<(), SimError> {
        let cna = self.config.lock == SimLock::Cna;
        match self.threads[t].phase {
            Phase::Swap => {
                self.nodes[t] = Node::EMPTY;
                let pred = self.tail.replace(t);
                self.trace.stats.swaps += 1;
                let th = &mut self.threads[t];
                th.swaps += 1;
                th.cas = 0;
                th.announced = false;
                th.enqueued_at = self.grants_total;
                self.emit(t, EventKind::Enqueue);
                match pred {
                    None => {
                        self.nodes[t].spin = GRANTED;
                        self.owner = Some(t);
                        self.on_grant(t);
                        self.threads[t].phase = Phase::CsEnter;
                    }
                    Some(pred) => self.threads[t].phase = Phase::Link { pred },
                }
            }
            Phase::Link { pred } => {
                if cna {
                    self.nodes[t].socket = self.socket(t);
                }
                self.nodes[pred].next = Some(t);
                self.threads[t].phase = Phase::Wait;
            }
            Phase::Wait => {
                self.on_grant(t);
                self.threads[t].phase = Phase::CsEnter;
            }
            Phase::CsEnter => {
                self.in_cs += 1;
                if self.in_cs > 1 {
                    return Err(SimError::MutualExclusion {
                        step: self.trace.stats.steps,
                        thread: t,
                    });
                }
                self.threads[t].read_value = self.counter;
                self.threads[t].phase = Phase::CsExit;
            }
            Phase::CsExit => {
                self.counter = self.threads[t].read_value + 1;
                self.in_cs -= 1;
                self.last_release = Some(self.socket(t));
                self.emit(t, EventKind::Release);
                self.threads[t].phase = Phase::LoadNext;
            }
            Phase::LoadNext => {
                self.threads[t].phase = match (self.nodes[t].next, cna) {
                    (Some(_), true) => Phase::Decide,
                    (Some(next), false) => self.hand_to(next, GRANTED),
                    (None, true) if self.nodes[t].spin != GRANTED => Phase::CasSec,
                    (None, _) => Phase::CasNull,
                };
            }
            Phase::CasNull => {
                self.count_cas(t);
                if self.tail == Some(t) {
                    self.tail = None;
                    self.owner = None;
                    self.log(OracleEvent::Release);
                    self.finish_episode(t)?;
                } else {
                    self.threads[t].phase = Phase::WaitNext;
                }
            }
            Phase::CasSec => {
                self.count_cas(t);
                let head = thread_of(self.nodes[t].spin).expect("secondary head");
                let sec_tail = self.nodes[head]
                    .sec_tail
                    .ok_or_else(|| self.invariant("secondary head without a tail"))?;
                if self.tail == Some(t) {
                    self.tail = Some(sec_tail);
                    self.trace.stats.secondary_flushes += 1;
                    self.emit(t, EventKind::SpliceSecondary);
                    self.threads[t].phase = self.hand_to(head, GRANTED);
                } else {
                    self.threads[t].phase = Phase::WaitNext;
                }
            }
            Phase::WaitNext => {
                let next = self.nodes[t].next.expect("enabled only with a successor");
                self.threads[t].phase = if cna {
                    Phase::Decide
                } else {
                    self.hand_to(next, GRANTED)
                };
            }
            Phase::Decide => self.decide(t)?,
            Phase::Splice { head } => {
                let sec_tail = self.nodes[head]
                    .sec_tail
                    .ok_or_else(|| self.invariant("secondary head without a tail"))?;
                self.nodes[sec_tail].next = self.nodes[t].next;
                self.trace.stats.secondary_flushes += 1;
                self.emit(t, EventKind::SpliceSecondary);
                self.threads[t].phase = Phase::Grant {
                    target: head,
                    value: GRANTED,
                };
            }
            Phase::Grant { target, value } => {
                self.nodes[target].spin = value;
                self.trace.stats.plain_grant_stores += 1;
                self.finish_episode(t)?;
            }
            Phase::Done => unreachable!("disabled"),
        }
        Ok(())
    }

    /// Records the handover decision and returns the grant phase.
    fn hand_to(&mut self, target: usize, value: usize) -> Phase {
        self.owner = Some(target);
        self.log(OracleEvent::Release);
        Phase::Grant { target, value }
    }

    fn decide(&mut self, t: usize) -> Result<(), SimError> {
        let next = self.nodes[t].next.expect("decide with a successor");
        self.trace.stats.decisions += 1;
        let policy = self.config.policy;

        if policy.shuffle_reduction
            && self.nodes[t].spin == GRANTED
            && self.draws.next(t) & policy.shuffle_threshold != 0
        {
            self.trace.stats.shuffle_skips += 1;
            self.threads[t].phase = self.hand_to(next, GRANTED);
            return Ok(());
        }

        if keep_lock_local(self.draws.next(t), policy.threshold) {
            self.trace.stats.find_successor_calls += 1;
            if let Some(succ) = self.find_successor(t)? {
                let value = self.nodes[t].spin;
                self.threads[t].phase = self.hand_to(succ, value);
                return Ok(());
            }
        } else {
            self.emit(t, EventKind::FlushDraw);
        }

        self.threads[t].phase = match thread_of(self.nodes[t].spin) {
            Some(head) => {
                self.owner = Some(head);
                self.log(OracleEvent::Release);
                Phase::Splice { head }
            }
            None => self.hand_to(next, GRANTED),
        };
        Ok(())
    }

    fn find_successor(&mut self, t: usize) -> Result<Option<usize>, SimError> {
        let next = self.nodes[t].next.expect("successor");
        let mut my_socket = self.nodes[t].socket;
        if !my_socket.is_known() {
            my_socket = self.socket(t);
        }
        if self.nodes[next].socket == my_socket {
            return Ok(Some(next));
        }

        let sec_head = next;
        let mut sec_tail = next;
        let mut skipped = vec![next];
        let mut cur = self.nodes[next].next;
        while let Some(c) = cur {
            if self.nodes[c].socket == my_socket {
                match thread_of(self.nodes[t].spin) {
                    Some(head) => {
                        let old_tail = self.nodes[head]
                            .sec_tail
                            .ok_or_else(|| self.invariant("secondary head without a tail"))?;
                        self.nodes[old_tail].next = Some(sec_head);
                    }
                    None => self.nodes[t].spin = handle(sec_head),
                }
                self.nodes[sec_tail].next = None;
                let head = thread_of(self.nodes[t].spin).expect("secondary head");
                self.nodes[head].sec_tail = Some(sec_tail);
                for s in skipped {
                    if self.nodes[s].socket == my_socket {
                        return Err(self.invariant(format!(
                            "thread {s} moved to the secondary queue on the holder's socket"
                        )));
                    }
                    self.emit(s, EventKind::MoveToSecondary);
                }
                return Ok(Some(c));
            }
            sec_tail = c;
            skipped.push(c);
            if skipped.len() > self.threads.len() {
                return Err(self.invariant("cycle in the main queue"));
            }
            cur = self.nodes[c].next;
        }
        Ok(None)
    }

    fn count_cas(&mut self, t: usize) {
        self.trace.stats.cas_attempts += 1;
        self.threads[t].cas += 1;
    }

    fn on_grant(&mut self, t: usize) {
        let socket = self.socket(t);
        let stats = &mut self.trace.stats;
        stats.grants_per_thread[t] += 1;
        if let Some(prev) = self.last_release.take() {
            stats.handovers += 1;
            stats.local_handovers += u64::from(prev == socket);
        }
        let waited = self.grants_total - self.threads[t].enqueued_at;
        stats.max_grant_wait = stats.max_grant_wait.max(waited);
        self.grants_total += 1;
        self.emit(t, EventKind::Grant);
    }

    fn finish_episode(&mut self, t: usize) -> Result<(), SimError> {
        let th = self.threads[t];
        let stats = &mut self.trace.stats;
        stats.max_swaps_per_acquire = stats.max_swaps_per_acquire.max(th.swaps);
        stats.max_cas_per_release = stats.max_cas_per_release.max(th.cas);
        if th.swaps != 1 || th.cas > 1 {
            return Err(self.invariant(format!(
                "thread {t} used {} exchanges and {} CAS in one acquisition",
                th.swaps, th.cas
            )));
        }
        let th = &mut self.threads[t];
        th.swaps = 0;
        th.remaining -= 1;
        th.phase = if th.remaining == 0 {
            Phase::Done
        } else {
            Phase::Swap
        };
        Ok(())
    }

    /// Logs an arrival for every node newly reachable from the logical
    /// owner through successor links.
    fn announce_arrivals(&mut self) -> Result<(), SimError> {
        let Some(owner) = self.owner else {
            return Ok(());
        };
        let mut cur = Some(owner);
        let mut hops = 0;
        while let Some(n) = cur {
            if !self.threads[n].announced {
                self.threads[n].announced = true;
                let socket = self.socket(n);
                self.log(OracleEvent::Arrive { thread: n, socket });
            }
            hops += 1;
            if hops > self.threads.len() {
                return Err(self.invariant("cycle in the main queue"));
            }
            cur = self.nodes[n].next;
        }
        Ok(())
    }

    fn is_quiescent(&self) -> bool {
        self.threads.iter().enumerate().all(|(i, th)| match th.phase {
            Phase::Swap | Phase::Done | Phase::CsEnter | Phase::CsExit => true,
            Phase::Wait => self.nodes[i].spin == WAITING,
            _ => false,
        })
    }

    /// Every waiter sits in exactly one of the two queues, both queues are
    /// well formed, and the secondary queue holds no node of the holder's
    /// socket.
    fn check_partition(&self) -> Result<(), SimError> {
        let mut holder = None;
        let mut waiting = vec![false; self.threads.len()];
        for (i, th) in self.threads.iter().enumerate() {
            match th.phase {
                Phase::CsEnter | Phase::CsExit => holder = Some(i),
                Phase::Wait => waiting[i] = true,
                _ => {}
            }
        }
        let Some(h) = holder else {
            if self.tail.is_some() || waiting.iter().any(|w| *w) {
                return Err(self.invariant("waiters or a tail without a holder"));
            }
            return Ok(());
        };

        let mut seen = vec![false; self.threads.len()];
        let visit = |n: usize, seen: &mut Vec<bool>| -> Result<(), SimError> {
            if !waiting[n] || std::mem::replace(&mut seen[n], true) {
                return Err(self.invariant(format!("thread {n} misplaced in the queues")));
            }
            Ok(())
        };

        let mut last = h;
        let mut cur = self.nodes[h].next;
        while let Some(n) = cur {
            visit(n, &mut seen)?;
            last = n;
            cur = self.nodes[n].next;
        }
        if self.tail != Some(last) {
            return Err(self.invariant("main queue does not end at the tail"));
        }

        if let Some(head) = thread_of(self.nodes[h].spin) {
            let mut holder_socket = self.nodes[h].socket;
            if !holder_socket.is_known() {
                holder_socket = self.socket(h);
            }
            let mut last = head;
            let mut cur = Some(head);
            while let Some(n) = cur {
                visit(n, &mut seen)?;
                if self.socket(n) == holder_socket {
                    return Err(self.invariant(format!(
                        "thread {n} in the secondary queue shares the holder's socket"
                    )));
                }
                last = n;
                cur = self.nodes[n].next;
            }
            if self.nodes[head].sec_tail != Some(last) {
                return Err(self.invariant("secondary tail link is stale"));
            }
        }

        if waiting.iter().zip(&seen).any(|(w, s)| w != s) {
            return Err(self.invariant("a waiter is in neither queue"));
        }
        Ok(())
    }

    /// Checks performed once every thread is done.
    pub fn check_complete(&self) -> Result<(), SimError> {
        let expected: u64 = self.config.acquisitions.iter().sum();
        if self.counter != expected {
            return Err(SimError::LostUpdate {
                expected,
                actual: self.counter,
            });
        }
        if self.tail.is_some() {
            return Err(self.invariant("lock still held after completion"));
        }
        for (t, (&got, &want)) in self
            .trace
            .stats
            .grants_per_thread
            .iter()
            .zip(&self.config.acquisitions)
            .enumerate()
        {
            if got != want {
                return Err(self.invariant(format!("thread {t} granted {got} of {want} times")));
            }
        }
        Ok(())
    }
}
