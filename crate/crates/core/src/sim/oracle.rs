//! Sequential reference model of the two-queue discipline.
//!
//! The model keeps the queues as plain vectors and applies the handover
//! rule directly: on release, consult the fairness draw; if it keeps the
//! lock local, take the first main-queue waiter on the holder's socket and
//! move everyone ahead of it to the secondary queue; otherwise put the
//! whole secondary queue in front of the main queue and grant its head.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::DrawSource;
use crate::cna::{keep_lock_local, CnaConfig};
use crate::metrics::{same_socket_ratio, MetricsError};
use crate::topology::SocketId;

/// Input to the model: a waiter becoming visible, or the holder releasing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum OracleEvent {
    Arrive { thread: usize, socket: SocketId },
    Release,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discipline {
    /// Single FIFO queue (MCS).
    Fifo,
    /// Main and secondary queue (CNA).
    Cna,
}

#[derive(Clone, Debug)]
pub struct OracleState {
    discipline: Discipline,
    policy: CnaConfig,
    draws: DrawSource,
    holder: Option<(usize, SocketId)>,
    main: VecDeque<(usize, SocketId)>,
    secondary: VecDeque<(usize, SocketId)>,
    grants: Vec<usize>,
}

impl OracleState {
    pub fn new(discipline: Discipline, policy: CnaConfig, draws: DrawSource) -> Self {
        OracleState {
            discipline,
            policy,
            draws,
            holder: None,
            main: VecDeque::new(),
            secondary: VecDeque::new(),
            grants: Vec::new(),
        }
    }

    pub fn holder(&self) -> Option<usize> {
        self.holder.map(|(t, _)| t)
    }

    pub fn main_queue(&self) -> impl Iterator<Item = usize> + '_ {
        self.main.iter().map(|(t, _)| *t)
    }

    pub fn secondary_queue(&self) -> impl Iterator<Item = usize> + '_ {
        self.secondary.iter().map(|(t, _)| *t)
    }

    pub fn grants(&self) -> &[usize] {
        &self.grants
    }

    pub fn apply(&mut self, event: OracleEvent) -> Option<usize> {
        match event {
            OracleEvent::Arrive { thread, socket } => self.arrive(thread, socket),
            OracleEvent::Release => self.release(),
        }
    }

    /// Returns the thread granted by this arrival (only when the lock was
    /// free).
    pub fn arrive(&mut self, thread: usize, socket: SocketId) -> Option<usize> {
        if self.holder.is_none() && self.main.is_empty() && self.secondary.is_empty() {
            self.grant((thread, socket));
            Some(thread)
        } else {
            self.main.push_back((thread, socket));
            None
        }
    }

    /// Releases the lock; returns the next holder, if any.
    ///
    /// # Panics
    ///
    /// When nobody holds the lock.
    pub fn release(&mut self) -> Option<usize> {
        let (holder, holder_socket) = self.holder.take().expect("release without a holder");

        if self.main.is_empty() {
            if self.secondary.is_empty() {
                return None;
            }
            self.main = std::mem::take(&mut self.secondary);
            return Some(self.grant_main_head());
        }

        if self.discipline == Discipline::Fifo {
            return Some(self.grant_main_head());
        }

        if self.policy.shuffle_reduction
            && self.secondary.is_empty()
            && self.draws.next(holder) & self.policy.shuffle_threshold != 0
        {
            return Some(self.grant_main_head());
        }

        if keep_lock_local(self.draws.next(holder), self.policy.threshold) {
            if let Some(k) = self.main.iter().position(|(_, s)| *s == holder_socket) {
                let skipped: Vec<_> = self.main.drain(..k).collect();
                self.secondary.extend(skipped);
                return Some(self.grant_main_head());
            }
        }

        if !self.secondary.is_empty() {
            let mut spliced = std::mem::take(&mut self.secondary);
            spliced.append(&mut self.main);
            self.main = spliced;
        }
        Some(self.grant_main_head())
    }

    fn grant_main_head(&mut self) -> usize {
        let next = self.main.pop_front().expect("non-empty main queue");
        self.grant(next);
        next.0
    }

    fn grant(&mut self, who: (usize, SocketId)) {
        self.holder = Some(who);
        self.grants.push(who.0);
    }
}

/// Grant order predicted for an interleaved arrival/release sequence.
pub fn oracle_grant_order(
    events: &[OracleEvent],
    discipline: Discipline,
    policy: &CnaConfig,
    draws: DrawSource,
) -> Vec<usize> {
    let mut oracle = OracleState::new(discipline, *policy, draws);
    for e in events {
        oracle.apply(*e);
    }
    oracle.grants
}

/// Grant order when every waiter arrives before the first release and the
/// holder keeps releasing until both queues drain.
pub fn oracle_grant_order_for_arrivals(
    arrivals: &[(usize, SocketId)],
    discipline: Discipline,
    policy: &CnaConfig,
    draws: DrawSource,
) -> Vec<usize> {
    let mut oracle = OracleState::new(discipline, *policy, draws);
    for &(t, s) in arrivals {
        oracle.arrive(t, s);
    }
    while oracle.holder.is_some() {
        oracle.release();
    }
    oracle.grants
}

/// Result of [`saturated_replay`].
#[derive(Clone, Debug)]
pub struct SaturatedRun {
    pub grants: Vec<usize>,
    pub grants_per_thread: Vec<u64>,
    pub handovers: Vec<(SocketId, SocketId)>,
}

impl SaturatedRun {
    pub fn handover_ratio(&self) -> Result<f64, MetricsError> {
        same_socket_ratio(self.handovers.iter().copied())
    }
}

/// Closed-loop replay: every thread in `arrivals` starts queued, and each
/// releasing holder re-arrives at the main-queue tail right after passing
/// the lock on. Runs for `handovers` releases.
pub fn saturated_replay(
    arrivals: &[(usize, SocketId)],
    handovers: usize,
    discipline: Discipline,
    policy: &CnaConfig,
    draws: DrawSource,
) -> SaturatedRun {
    let threads = arrivals.iter().map(|(t, _)| t + 1).max().unwrap_or(0);
    let mut oracle = OracleState::new(discipline, *policy, draws);
    for &(t, s) in arrivals {
        oracle.arrive(t, s);
    }
    let mut per_thread = vec![0u64; threads];
    if let Some(h) = oracle.holder() {
        per_thread[h] += 1;
    }
    let mut pairs = Vec::with_capacity(handovers);
    for _ in 0..handovers {
        let Some(prev) = oracle.holder else { break };
        let Some(next) = oracle.release() else { break };
        let next_socket = oracle.holder.expect("just granted").1;
        pairs.push((prev.1, next_socket));
        per_thread[next] += 1;
        oracle.arrive(prev.0, prev.1);
    }
    SaturatedRun {
        grants: oracle.grants,
        grants_per_thread: per_thread,
        handovers: pairs,
    }
}
