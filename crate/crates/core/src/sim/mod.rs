//! Deterministic interleaving simulator for the CNA and MCS protocols.
//!
//! A [`Simulator`] executes one shared-memory action per step under an
//! interleaving chosen by the caller. [`run_schedule`] replays an explicit
//! schedule, [`for_each_schedule`] enumerates every interleaving of a small
//! configuration, and [`run_random`] / [`run_saturated`] sample schedules
//! from a seeded generator. The [`oracle`] module holds the sequential
//! two-queue reference model the traces are checked against.

mod machine;
pub mod oracle;

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cna::{CnaConfig, XorShift32};
use crate::metrics::{same_socket_ratio, MetricsError};
use crate::topology::SocketId;

pub use machine::{Phase, SimStats, Simulator};
pub use oracle::{
    oracle_grant_order, oracle_grant_order_for_arrivals, saturated_replay, Discipline,
    OracleEvent, OracleState, SaturatedRun,
};

/// Largest thread count accepted for exhaustive enumeration.
pub const MAX_EXHAUSTIVE_THREADS: usize = 3;
/// Largest depth bound accepted for exhaustive enumeration.
pub const MAX_DEPTH_BOUND: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimLock {
    Cna,
    Mcs,
}

impl SimLock {
    pub fn discipline(self) -> Discipline {
        match self {
            SimLock::Cna => Discipline::Cna,
            SimLock::Mcs => Discipline::Fifo,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerMode {
    Exhaustive { depth_bound: usize },
    Random { seed: u64, schedules: usize },
}

impl Default for SchedulerMode {
    fn default() -> Self {
        SchedulerMode::Random {
            seed: 0,
            schedules: 1,
        }
    }
}

/// Source of fairness draws: an explicit script shared by all threads and
/// consumed in decision order (cycling when exhausted), or one xorshift
/// generator per thread seeded exactly as the real lock seeds them.
#[derive(Clone, Debug)]
pub enum DrawSource {
    Script { draws: Arc<[u32]>, cursor: usize },
    Generator { seed: u64, threads: Vec<XorShift32> },
}

impl DrawSource {
    /// # Panics
    ///
    /// When `draws` is empty.
    pub fn script(draws: Vec<u32>) -> Self {
        assert!(!draws.is_empty(), "draw script must not be empty");
        DrawSource::Script {
            draws: draws.into(),
            cursor: 0,
        }
    }

    pub fn generator(seed: u64) -> Self {
        DrawSource::Generator {
            seed,
            threads: Vec::new(),
        }
    }

    /// Next draw made by `thread`.
    pub fn next(&mut self, thread: usize) -> u32 {
        match self {
            DrawSource::Script { draws, cursor } => {
                let v = draws[*cursor % draws.len()];
                *cursor += 1;
                v
            }
            DrawSource::Generator { seed, threads } => {
                while threads.len() <= thread {
                    threads.push(XorShift32::for_thread(*seed, threads.len()));
                }
                threads[thread].next_u32()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Socket of each thread; its length is the thread count.
    pub sockets: Vec<SocketId>,
    pub acquisitions: Vec<u64>,
    pub lock: SimLock,
    pub policy: CnaConfig,
    /// Overrides the per-thread generators when set.
    pub draw_script: Option<Vec<u32>>,
    pub mode: SchedulerMode,
    /// Keep the event log, schedule, and serialized oracle input.
    pub record: bool,
    /// Check the queue partition at every quiescent point.
    pub check_invariants: bool,
}

impl SimConfig {
    pub fn new(lock: SimLock, sockets: &[u16], acquisitions: u64) -> Self {
        SimConfig {
            sockets: sockets.iter().map(|s| SocketId::new(*s)).collect(),
            acquisitions: vec![acquisitions; sockets.len()],
            lock,
            policy: CnaConfig::default(),
            draw_script: None,
            mode: SchedulerMode::default(),
            record: true,
            check_invariants: true,
        }
    }

    pub fn threads(&self) -> usize {
        self.sockets.len()
    }

    pub fn with_acquisitions(mut self, acquisitions: Vec<u64>) -> Self {
        self.acquisitions = acquisitions;
        self
    }

    pub fn with_policy(mut self, policy: CnaConfig) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_draw_script(mut self, draws: Vec<u32>) -> Self {
        self.draw_script = Some(draws);
        self
    }

    pub fn with_mode(mut self, mode: SchedulerMode) -> Self {
        self.mode = mode;
        self
    }

    /// Counters only: no event log and no per-step invariant checks.
    pub fn counts_only(mut self) -> Self {
        self.record = false;
        self.check_invariants = false;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidConfig(msg));
        if self.sockets.is_empty() {
            return bad("at least one thread is required".into());
        }
        if self.acquisitions.len() != self.sockets.len() {
            return bad(format!(
                "{} acquisition counts for {} threads",
                self.acquisitions.len(),
                self.sockets.len()
            ));
        }
        if self.sockets.iter().any(|s| !s.is_known()) {
            return bad("every thread needs a known socket".into());
        }
        if matches!(&self.draw_script, Some(d) if d.is_empty()) {
            return bad("draw script is empty".into());
        }
        self.policy
            .validate()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        if let SchedulerMode::Exhaustive { depth_bound } = self.mode {
            if self.threads() > MAX_EXHAUSTIVE_THREADS || depth_bound > MAX_DEPTH_BOUND {
                return bad(format!(
                    "exhaustive mode allows at most {MAX_EXHAUSTIVE_THREADS} threads and depth \
                     {MAX_DEPTH_BOUND}"
                ));
            }
        }
        Ok(())
    }

    pub fn draw_source(&self) -> DrawSource {
        match &self.draw_script {
            Some(d) => DrawSource::script(d.clone()),
            None => DrawSource::generator(self.policy.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("no thread {thread}")]
    UnknownThread { thread: usize },
    #[error("thread {thread} has no enabled step at step {step}")]
    NotEnabled { thread: usize, step: u64 },
    #[error("deadlock after schedule {schedule:?}")]
    Deadlock { schedule: Vec<usize> },
    #[error("schedule exceeded depth bound {bound}: {schedule:?}")]
    BoundExceeded { bound: usize, schedule: Vec<usize> },
    #[error("thread {thread} entered an occupied critical section at step {step}")]
    MutualExclusion { step: u64, thread: usize },
    #[error("invariant violated at step {step}: {detail}")]
    Invariant { step: u64, detail: String },
    #[error("protected counter is {actual}, expected {expected}")]
    LostUpdate { expected: u64, actual: u64 },
    #[error("grant order {actual:?} differs from oracle {expected:?} under {schedule:?}")]
    OracleMismatch {
        schedule: Vec<usize>,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("bad schedule: {0}")]
    Parse(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Enqueue,
    Grant,
    Release,
    MoveToSecondary,
    SpliceSecondary,
    FlushDraw,
}

/// One trace record. `socket` is the socket of `thread`; for splice and
/// flush events `thread` is the releasing holder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub step: u64,
    pub thread: usize,
    #[serde(rename = "event")]
    pub kind: EventKind,
    pub socket: SocketId,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimTrace {
    pub events: Vec<SimEvent>,
    pub schedule: Vec<usize>,
    /// Arrivals and release decisions in the order the lock observed them.
    pub serialized: Vec<OracleEvent>,
    pub stats: SimStats,
}

impl SimTrace {
    pub fn grant_order(&self) -> Vec<usize> {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Grant)
            .map(|e| e.thread)
            .collect()
    }

    /// Events up to and including the `n`-th grant (1-based).
    pub fn through_grant(&self, n: usize) -> &[SimEvent] {
        let end = self
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EventKind::Grant)
            .nth(n.saturating_sub(1))
            .map_or(self.events.len(), |(i, _)| i + 1);
        &self.events[..end]
    }

    /// One JSON object per line: `{"step", "thread", "event", "socket"}`.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let line = serde_json::to_string(e).expect("plain record");
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<Vec<SimEvent>, SimError> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| SimError::Parse(e.to_string())))
            .collect()
    }
}

/// Fraction of handovers (a grant directly following a release) that stay
/// on one socket.
pub fn intra_socket_handover_ratio(events: &[SimEvent]) -> Result<f64, MetricsError> {
    let mut pending = None;
    let mut pairs = Vec::new();
    for e in events {
        match e.kind {
            EventKind::Release => pending = Some(e.socket),
            EventKind::Grant => {
                if let Some(prev) = pending.take() {
                    pairs.push((prev, e.socket));
                }
            }
            _ => {}
        }
    }
    same_socket_ratio(pairs)
}

pub fn parse_schedule(text: &str) -> Result<Vec<usize>, SimError> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse()
                .map_err(|_| SimError::Parse(format!("not a thread index: {tok:?}")))
        })
        .collect()
}

pub fn format_schedule(schedule: &[usize]) -> String {
    schedule
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Replays `schedule` step by step. A schedule that stops early yields a
/// partial trace unless no thread can move, which is a deadlock.
pub fn run_schedule(config: &SimConfig, schedule: &[usize]) -> Result<SimTrace, SimError> {
    let mut sim = Simulator::new(config.clone())?;
    for &t in schedule {
        sim.step(t)?;
    }
    if sim.is_complete() {
        sim.check_complete()?;
    } else if sim.enabled_threads().is_empty() {
        return Err(SimError::Deadlock {
            schedule: schedule.to_vec(),
        });
    }
    Ok(sim.into_trace())
}

/// Grant order the oracle predicts for `trace`'s serialized arrivals.
pub fn oracle_order_for(config: &SimConfig, trace: &SimTrace) -> Vec<usize> {
    oracle_grant_order(
        &trace.serialized,
        config.lock.discipline(),
        &config.policy,
        config.draw_source(),
    )
}

fn check_against_oracle(config: &SimConfig, trace: &SimTrace) -> Result<(), SimError> {
    let expected = oracle_order_for(config, trace);
    let actual = trace.grant_order();
    if expected != actual {
        return Err(SimError::OracleMismatch {
            schedule: trace.schedule.clone(),
            expected,
            actual,
        });
    }
    Ok(())
}

fn finish(config: &SimConfig, sim: &Simulator) -> Result<(), SimError> {
    sim.check_complete()?;
    if config.record {
        check_against_oracle(config, sim.trace())?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExplorationStats {
    pub schedules: u64,
    pub states: u64,
    pub max_depth: usize,
}

/// Visits every complete interleaving of an exhaustive-mode config. Each
/// trace has already passed mutual exclusion, completion, partition, and
/// oracle checks when `visit` sees it.
pub fn for_each_schedule(
    config: &SimConfig,
    mut visit: impl FnMut(&SimTrace) -> Result<(), SimError>,
) -> Result<ExplorationStats, SimError> {
    let SchedulerMode::Exhaustive { depth_bound } = config.mode else {
        return Err(SimError::InvalidConfig(
            "enumeration needs exhaustive mode".into(),
        ));
    };
    let config = Arc::new(SimConfig {
        record: true,
        ..config.clone()
    });
    let root = Simulator::from_shared(Arc::clone(&config))?;
    let mut stats = ExplorationStats::default();
    let mut stack = vec![(root, 0usize)];
    let mut enabled = Vec::new();
    while let Some((sim, depth)) = stack.pop() {
        stats.states += 1;
        if sim.is_complete() {
            finish(&config, &sim)?;
            stats.schedules += 1;
            stats.max_depth = stats.max_depth.max(depth);
            visit(sim.trace())?;
            continue;
        }
        sim.enabled_into(&mut enabled);
        if enabled.is_empty() {
            return Err(SimError::Deadlock {
                schedule: sim.trace().schedule.clone(),
            });
        }
        if depth >= depth_bound {
            return Err(SimError::BoundExceeded {
                bound: depth_bound,
                schedule: sim.trace().schedule.clone(),
            });
        }
        let mut sim = Some(sim);
        for (i, &t) in enabled.iter().enumerate().rev() {
            let mut child = if i == 0 {
                sim.take().expect("parent state")
            } else {
                sim.as_ref().expect("parent state").clone()
            };
            child.step(t)?;
            stack.push((child, depth + 1));
        }
    }
    Ok(stats)
}

/// Every complete trace of an exhaustive-mode config.
pub fn enumerate_schedules(config: &SimConfig) -> Result<Vec<SimTrace>, SimError> {
    let mut out = Vec::new();
    for_each_schedule(config, |t| {
        out.push(t.clone());
        Ok(())
    })?;
    Ok(out)
}

/// One complete run with each step chosen uniformly among the enabled
/// threads.
pub fn run_random(config: &SimConfig, seed: u64) -> Result<SimTrace, SimError> {
    let config = Arc::new(config.clone());
    let mut sim = Simulator::from_shared(Arc::clone(&config))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enabled = Vec::new();
    while !sim.is_complete() {
        sim.enabled_into(&mut enabled);
        if enabled.is_empty() {
            return Err(SimError::Deadlock {
                schedule: sim.trace().schedule.clone(),
            });
        }
        sim.step(enabled[rng.random_range(0..enabled.len())])?;
    }
    finish(&config, &sim)?;
    Ok(sim.into_trace())
}

/// Runs `schedules` random schedules of a random-mode config, seeding the
/// i-th with `seed + i`.
pub fn sample_schedules(
    config: &SimConfig,
    mut visit: impl FnMut(&SimTrace) -> Result<(), SimError>,
) -> Result<ExplorationStats, SimError> {
    let SchedulerMode::Random { seed, schedules } = config.mode else {
        return Err(SimError::InvalidConfig("sampling needs random mode".into()));
    };
    let mut stats = ExplorationStats::default();
    for i in 0..schedules {
        let trace = run_random(config, seed.wrapping_add(i as u64))?;
        stats.schedules += 1;
        stats.states += trace.stats.steps;
        stats.max_depth = stats.max_depth.max(trace.stats.steps as usize);
        visit(&trace)?;
    }
    Ok(stats)
}

/// Dispatches on the config's scheduler mode.
pub fn explore(
    config: &SimConfig,
    visit: impl FnMut(&SimTrace) -> Result<(), SimError>,
) -> Result<ExplorationStats, SimError> {
    match config.mode {
        SchedulerMode::Exhaustive { .. } => for_each_schedule(config, visit),
        SchedulerMode::Random { .. } => sample_schedules(config, visit),
    }
}

/// Closed-loop contention: every thread re-enters the lock as soon as it
/// leaves. Steps are picked uniformly among enabled threads until
/// `handovers` handovers have happened. Acquisition counts in `config` are
/// ignored.
pub fn run_saturated(
    config: &SimConfig,
    seed: u64,
    handovers: u64,
) -> Result<Simulator, SimError> {
    let config = SimConfig {
        acquisitions: vec![u64::MAX; config.threads()],
        ..config.clone()
    };
    let mut sim = Simulator::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enabled = Vec::new();
    while sim.stats().handovers < handovers {
        sim.enabled_into(&mut enabled);
        if enabled.is_empty() {
            return Err(SimError::Deadlock {
                schedule: sim.trace().schedule.clone(),
            });
        }
        sim.step(enabled[rng.random_range(0..enabled.len())])?;
    }
    Ok(sim)
}

/// One scripted driver action, see [`run_scripted`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", content = "thread", rename_all = "snake_case")]
pub enum Action {
    /// Run the thread until it is in the critical section.
    Acquire(usize),
    /// Run the thread until it holds the lock or spins in the queue.
    Enqueue(usize),
    /// Run the thread until it has finished passing the lock on.
    Release(usize),
    /// Run every thread to completion, lowest enabled index first.
    Drain,
}

/// Drives a simulator through `script` and returns the trace.
pub fn run_scripted(config: &SimConfig, script: &[Action]) -> Result<SimTrace, SimError> {
    let mut sim = Simulator::new(config.clone())?;
    for action in script {
        let reached = match *action {
            Action::Acquire(t) => {
                sim.run_thread_until(t, |s| s.phase(t) == Phase::CsEnter)?
            }
            Action::Enqueue(t) => sim.run_thread_until(t, |s| {
                s.phase(t) == Phase::CsEnter
                    || (s.phase(t) == Phase::Wait && s.grant_word(t) == 0)
            })?,
            Action::Release(t) => {
                let before = sim.remaining(t);
                sim.run_thread_until(t, |s| s.remaining(t) < before)?
            }
            Action::Drain => {
                while let Some(&t) = sim.enabled_threads().first() {
                    sim.step(t)?;
                }
                true
            }
        };
        if !reached {
            return Err(SimError::Deadlock {
                schedule: sim.trace().schedule.clone(),
            });
        }
    }
    if !sim.is_complete() {
        return Err(SimError::Deadlock {
            schedule: sim.trace().schedule.clone(),
        });
    }
    sim.check_complete()?;
    Ok(sim.into_trace())
}

/// Seven threads on two sockets: t1, t4, t5 on socket 0 (indices 0, 3, 4),
/// the rest on socket 1. t1 holds the lock while t2..t6 queue, releases,
/// re-arrives, and t7 arrives after the second handover. Every draw keeps
/// the lock local.
pub fn two_socket_example() -> (SimConfig, Vec<Action>) {
    let config = SimConfig::new(SimLock::Cna, &[0, 1, 1, 0, 0, 1, 1], 1)
        .with_acquisitions(vec![2, 1, 1, 1, 1, 1, 1])
        .with_draw_script(vec![1]);
    let mut script = vec![Action::Acquire(0)];
    script.extend((1..6).map(Action::Enqueue));
    script.extend([
        Action::Release(0),
        Action::Enqueue(0),
        Action::Release(3),
        Action::Enqueue(6),
        Action::Drain,
    ]);
    (config, script)
}

#[cfg(test)]
mod tests;
