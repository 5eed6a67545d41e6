//! Contention benchmarks.
//!
//! - [`run_kv_bench`]: threads apply a lookup/insert/remove mix to an AVL
//!   set guarded by one lock.
//! - [`run_raw_bench`]: threads increment a shared counter under the lock;
//!   the final counter is checked against the operation total.
//! - [`run_sim_bench`]: the CNA or MCS protocol executed by the stepped
//!   simulator under a seeded random scheduler with every thread always
//!   re-entering the lock. Deterministic for a given seed and socket map.

pub mod avl;

use std::hint::black_box;
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{McsLock, McsNode, TasLock, TicketLock};
use crate::cna::{CnaConfig, CnaContext, CnaLock, OpCounts, XorShift32};
use crate::metrics::fairness_factor;
use crate::raw::{LockKind, Locked, RawLock};
use crate::sim::{run_saturated, SimConfig, SimError, SimLock};
use crate::topology::{self, Topology, TopologyError};
use crate::word::{SlowPath, WordContext, WordLock, WordLockError};

pub use avl::AvlMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Kv,
    Raw,
    Sim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lock: LockKind,
    pub threads: usize,
    pub duration_s: f64,
    pub key_range: u64,
    /// Percentage of updates, split evenly between inserts and removes.
    pub update_pct: u32,
    /// Iterations of the pseudo-random loop run between operations.
    pub external_work: u32,
    pub seed: u64,
    pub warmup_s: f64,
    pub format: Format,
    pub pin: bool,
    /// When set, each thread performs exactly this many operations and the
    /// duration and warmup are ignored.
    pub ops_per_thread: Option<u64>,
    /// Handovers to simulate in [`BenchMode::Sim`].
    pub sim_handovers: u64,
    pub cna: CnaConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lock: LockKind::Cna,
            threads: 4,
            duration_s: 10.0,
            key_range: 1024,
            update_pct: 20,
            external_work: 0,
            seed: 0,
            warmup_s: 0.0,
            format: Format::Json,
            pin: false,
            ops_per_thread: None,
            sim_handovers: 1_000_000,
            cna: CnaConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid benchmark config: {0}")]
    Config(String),
    #[error("cannot spawn worker thread: {0}")]
    Spawn(#[from] std::io::Error),
    #[error("word lock context: {0}")]
    WordLock(#[from] WordLockError),
    #[error("protected counter is {actual}, expected {expected}")]
    CounterMismatch { expected: u64, actual: u64 },
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.to_owned()));
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        if self.update_pct > 100 {
            return bad("update percentage must be within 0..=100");
        }
        if self.key_range < 2 {
            return bad("key range must be at least 2");
        }
        if self.ops_per_thread.is_none() && !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad("duration must be positive");
        }
        if !(self.warmup_s >= 0.0 && self.warmup_s.is_finite()) {
            return bad("warmup must be non-negative");
        }
        self.cna
            .validate()
            .map_err(|e| BenchError::Config(e.to_string()))
    }

    /// The fairness tunables for this lock kind.
    pub fn cna_config(&self) -> CnaConfig {
        let mut c = self.cna;
        if self.lock == LockKind::CnaOpt {
            c.shuffle_reduction = true;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub lock: LockKind,
    pub mode: BenchMode,
    pub threads: usize,
    pub duration_s: f64,
    pub total_ops: u64,
    pub ops_per_us: f64,
    pub fairness: f64,
    /// False for a single thread, where the fairness factor is reported as
    /// 1.0 by convention.
    pub fairness_defined: bool,
    pub seed: u64,
    pub per_thread: Vec<u64>,
    /// Locality of handovers, when the run can observe them.
    pub handover_ratio: Option<f64>,
    /// Summed CNA handover audit, for CNA-based locks.
    pub op_counts: Option<OpCounts>,
    /// Keys in the map after the run (key-value mode).
    pub final_keys: Option<usize>,
    pub config: BenchConfig,
}

impl BenchReport {
    fn new(config: &BenchConfig, mode: BenchMode, per_thread: Vec<u64>, elapsed: Duration) -> Self {
        let total_ops: u64 = per_thread.iter().sum();
        let duration_s = elapsed.as_secs_f64();
        let (fairness, fairness_defined) = match fairness_factor(&per_thread) {
            Ok(f) => (f, true),
            Err(_) => (1.0, false),
        };
        BenchReport {
            lock: config.lock,
            mode,
            threads: config.threads,
            duration_s,
            total_ops,
            ops_per_us: if duration_s > 0.0 {
                total_ops as f64 / (duration_s * 1e6)
            } else {
                0.0
            },
            fairness,
            fairness_defined,
            seed: config.seed,
            per_thread,
            handover_ratio: None,
            op_counts: None,
            final_keys: None,
            config: config.clone(),
        }
    }
}

/// Column order of the CSV output.
pub const CSV_FIELDS: [&str; 7] = [
    "lock",
    "threads",
    "duration_s",
    "total_ops",
    "ops_per_us",
    "fairness",
    "seed",
];

/// One report as a JSON object, or as a CSV header plus row.
pub fn emit_report(report: &BenchReport, format: Format) -> String {
    emit_reports(std::slice::from_ref(report), format)
}

/// JSON: one object per line. CSV: the header, then one row per report.
pub fn emit_reports(reports: &[BenchReport], format: Format) -> String {
    let mut out = String::new();
    match format {
        Format::Json => {
            for r in reports {
                out.push_str(&serde_json::to_string(r).expect("report serializes"));
                out.push('\n');
            }
        }
        Format::Csv => {
            out.push_str(&CSV_FIELDS.join(","));
            out.push('\n');
            for r in reports {
                out.push_str(&format!(
                    "{},{},{:.6},{},{:.6},{:.6},{}\n",
                    r.lock, r.threads, r.duration_s, r.total_ops, r.ops_per_us, r.fairness, r.seed
                ));
            }
        }
    }
    out
}

/// Seeded arithmetic loop standing in for non-critical work.
#[inline]
pub fn external_work(rng: &mut XorShift32, iterations: u32) {
    for _ in 0..iterations {
        black_box(rng.next_u32());
    }
}

#[derive(Clone, Copy)]
struct KvWork {
    key_range: u64,
    update_pct: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum KvOp {
    Insert(u64),
    Remove(u64),
    Lookup(u64),
}

impl KvWork {
    fn pick(&self, rng: &mut ChaCha8Rng) -> KvOp {
        let key = rng.random_range(0..self.key_range);
        // Half of the update share each for inserts and removes.
        let r = rng.random_range(0..200u32);
        if r < self.update_pct {
            KvOp::Insert(key)
        } else if r < 2 * self.update_pct {
            KvOp::Remove(key)
        } else {
            KvOp::Lookup(key)
        }
    }
}

fn apply(map: &mut AvlMap, op: KvOp) -> bool {
    match op {
        KvOp::Insert(k) => map.insert(k),
        KvOp::Remove(k) => map.remove(k),
        KvOp::Lookup(k) => map.contains(k),
    }
}

/// The map every key-value run starts from: about half the key range,
/// chosen by `seed`.
pub fn prefilled_map(key_range: u64, seed: u64) -> AvlMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = AvlMap::new();
    let target = (key_range / 2) as usize;
    while map.len() < target {
        map.insert(rng.random_range(0..key_range));
    }
    map
}

#[derive(Default)]
struct Protected {
    map: AvlMap,
    counter: u64,
}

struct Outcome {
    per_thread: Vec<u64>,
    all_ops: u64,
    elapsed: Duration,
    op_counts: Option<OpCounts>,
    data: Protected,
}

const WARMUP: u8 = 0;
const MEASURE: u8 = 1;
const STOP: u8 = 2;

fn pin_to_cpu(index: usize) {
    let cpus = thread::available_parallelism().map_or(1, |n| n.get());
    // SAFETY: cpu_set_t is plain data and the calls only read it.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(index % cpus, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set);
    }
}

fn drive<L, F>(
    config: &BenchConfig,
    kv: Option<KvWork>,
    lock: L,
    make_ctx: F,
    audit: fn(&L::Context) -> Option<OpCounts>,
) -> Result<Outcome, BenchError>
where
    L: RawLock,
    F: Fn(usize) -> Result<L::Context, BenchError> + Sync,
{
    let data = Protected {
        map: kv.map_or_else(AvlMap::new, |k| prefilled_map(k.key_range, config.seed)),
        counter: 0,
    };
    let locked = Locked::new(lock, data);
    let phase = AtomicU8::new(if config.ops_per_thread.is_some() {
        MEASURE
    } else {
        WARMUP
    });
    let go = AtomicU8::new(0);

    let worker = |i: usize| -> Result<(u64, u64, Option<OpCounts>), BenchError> {
        if config.pin {
            pin_to_cpu(i);
        }
        topology::bind_thread(i);
        let mut ctx = make_ctx(i)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut work_rng = XorShift32::for_thread(config.seed, i);
        while go.load(Ordering::Acquire) == 0 {
            thread::yield_now();
        }
        let (mut measured, mut all) = (0u64, 0u64);
        loop {
            let p = phase.load(Ordering::Relaxed);
            if p == STOP || config.ops_per_thread == Some(all) {
                break;
            }
            match kv {
                Some(k) => {
                    let op = k.pick(&mut rng);
                    black_box(locked.with(&mut ctx, |d| apply(&mut d.map, op)));
                }
                None => locked.with(&mut ctx, |d| d.counter += 1),
            }
            all += 1;
            measured += u64::from(p == MEASURE);
            external_work(&mut work_rng, config.external_work);
        }
        Ok((measured, all, audit(&ctx)))
    };

    let results = thread::scope(|s| -> Result<_, BenchError> {
        let mut handles = Vec::with_capacity(config.threads);
        for i in 0..config.threads {
            let worker = &worker;
            let spawned = thread::Builder::new()
                .name(format!("bench-{i}"))
                .spawn_scoped(s, move || worker(i));
            match spawned {
                Ok(h) => handles.push(h),
                Err(e) => {
                    phase.store(STOP, Ordering::Relaxed);
                    go.store(1, Ordering::Release);
                    return Err(e.into());
                }
            }
        }
        go.store(1, Ordering::Release);
        let t0 = Instant::now();
        let elapsed = if config.ops_per_thread.is_some() {
            None
        } else {
            thread::sleep(Duration::from_secs_f64(config.warmup_s));
            phase.store(MEASURE, Ordering::Relaxed);
            let t1 = Instant::now();
            thread::sleep(Duration::from_secs_f64(config.duration_s));
            phase.store(STOP, Ordering::Relaxed);
            Some(t1.elapsed())
        };
        let joined: Vec<_> = handles
            .into_iter()
            .map(|h| h.join().expect("benchmark worker panicked"))
            .collect();
        Ok((joined, elapsed.unwrap_or_else(|| t0.elapsed())))
    });
    let (joined, elapsed) = results?;

    let mut per_thread = Vec::with_capacity(joined.len());
    let mut all_ops = 0;
    let mut op_counts: Option<OpCounts> = None;
    for r in joined {
        let (measured, all, counts) = r?;
        per_thread.push(measured);
        all_ops += all;
        if let Some(c) = counts {
            *op_counts.get_or_insert_with(OpCounts::default) += c;
        }
    }
    Ok(Outcome {
        per_thread,
        all_ops,
        elapsed,
        op_counts,
        data: locked.into_inner(),
    })
}

fn dispatch(
    config: &BenchConfig,
    kv: Option<KvWork>,
    topology: Arc<Topology>,
) -> Result<Outcome, BenchError> {
    let cna = config.cna_config();
    let word = |slow: SlowPath| {
        let topology = Arc::clone(&topology);
        move |i: usize| Ok(WordContext::new(slow, &cna, i, Arc::clone(&topology))?)
    };
    match config.lock {
        LockKind::Cna | LockKind::CnaOpt => drive(
            config,
            kv,
            CnaLock::new(),
            |i| Ok(CnaContext::new(&cna, i, Arc::clone(&topology))),
            |c| Some(c.counts()),
        ),
        LockKind::Mcs => drive(config, kv, McsLock::new(), |_| Ok(McsNode::new()), |_| None),
        LockKind::Tas => drive(config, kv, TasLock::new(), |_| Ok(()), |_| None),
        LockKind::Ticket => drive(config, kv, TicketLock::new(), |_| Ok(()), |_| None),
        LockKind::WordMcs => drive(config, kv, WordLock::new(), word(SlowPath::Mcs), |_| None),
        LockKind::WordCna => drive(
            config,
            kv,
            WordLock::new(),
            word(SlowPath::Cna),
            |c| Some(c.counts()),
        ),
    }
}

fn finish(config: &BenchConfig, mode: BenchMode, outcome: &Outcome) -> BenchReport {
    let mut report = BenchReport::new(config, mode, outcome.per_thread.clone(), outcome.elapsed);
    report.op_counts = outcome.op_counts;
    report
}

/// Key-value map benchmark with the topology taken from the environment.
pub fn run_kv_bench(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    run_kv_bench_on(config, Arc::new(Topology::from_env()?))
}

pub fn run_kv_bench_on(
    config: &BenchConfig,
    topology: Arc<Topology>,
) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let kv = KvWork {
        key_range: config.key_range,
        update_pct: config.update_pct,
    };
    let outcome = dispatch(config, Some(kv), topology)?;
    let mut report = finish(config, BenchMode::Kv, &outcome);
    report.final_keys = Some(outcome.data.map.len());
    Ok(report)
}

/// Shared-counter benchmark with the topology taken from the environment.
pub fn run_raw_bench(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    run_raw_bench_on(config, Arc::new(Topology::from_env()?))
}

pub fn run_raw_bench_on(
    config: &BenchConfig,
    topology: Arc<Topology>,
) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let outcome = dispatch(config, None, topology)?;
    if outcome.data.counter != outcome.all_ops {
        return Err(BenchError::CounterMismatch {
            expected: outcome.all_ops,
            actual: outcome.data.counter,
        });
    }
    Ok(finish(config, BenchMode::Raw, &outcome))
}

/// Simulated benchmark with the socket map taken from the environment.
pub fn run_sim_bench(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    run_sim_bench_on(config, &Topology::from_env()?)
}

/// Runs `config.sim_handovers` handovers of the stepped simulator, with
/// thread `i` on `topology.socket_of(i)`. Only the CNA and MCS kinds are
/// simulated.
pub fn run_sim_bench_on(config: &BenchConfig, topology: &Topology) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let lock = match config.lock {
        LockKind::Cna | LockKind::CnaOpt => SimLock::Cna,
        LockKind::Mcs => SimLock::Mcs,
        other => {
            return Err(BenchError::Config(format!(
                "lock `{other}` has no simulated model (use cna, cna-opt or mcs)"
            )))
        }
    };
    let sockets: Vec<u16> = (0..config.threads)
        .map(|i| topology.socket_of(i).get().clamp(0, i32::from(u16::MAX)) as u16)
        .collect();
    let sim_config = SimConfig::new(lock, &sockets, 1)
        .with_policy(config.cna_config())
        .counts_only();
    let t0 = Instant::now();
    let sim = run_saturated(&sim_config, config.seed, config.sim_handovers)?;
    let elapsed = t0.elapsed();
    let stats = sim.stats();
    let mut report = BenchReport::new(config, BenchMode::Sim, stats.grants_per_thread.clone(), elapsed);
    report.handover_ratio = stats.handover_ratio();
    report.op_counts = Some(OpCounts {
        acquires: stats.grants_per_thread.iter().sum(),
        releases: stats.grants_per_thread.iter().sum::<u64>().saturating_sub(1),
        swaps: stats.swaps,
        cas_attempts: stats.cas_attempts,
        plain_grant_stores: stats.plain_grant_stores,
        handovers: stats.decisions,
        find_successor_calls: stats.find_successor_calls,
        shuffle_skips: stats.shuffle_skips,
        secondary_flushes: stats.secondary_flushes,
    });
    Ok(report)
}

/// Runs the benchmark selected by `mode`.
pub fn run_bench(config: &BenchConfig, mode: BenchMode) -> Result<BenchReport, BenchError> {
    match mode {
        BenchMode::Kv => run_kv_bench(config),
        BenchMode::Raw => run_raw_bench(config),
        BenchMode::Sim => run_sim_bench(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(lock: LockKind, threads: usize) -> BenchConfig {
        BenchConfig {
            lock,
            threads,
            duration_s: 0.05,
            ..BenchConfig::default()
        }
    }

    fn mock() -> Arc<Topology> {
        Arc::new(Topology::mock_round_robin(8, 2))
    }

    #[test]
    fn validation_rejects_bad_values() {
        let base = BenchConfig::default();
        for bad in [
            BenchConfig { threads: 0, ..base.clone() },
            BenchConfig { update_pct: 101, ..base.clone() },
            BenchConfig { key_range: 1, ..base.clone() },
            BenchConfig { duration_s: 0.0, ..base.clone() },
            BenchConfig { warmup_s: -1.0, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(BenchError::Config(_))));
        }
        assert!(base.validate().is_ok());
    }

    #[test]
    fn mix_matches_update_share() {
        let work = KvWork { key_range: 1024, update_pct: 20 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let (mut ins, mut rem) = (0, 0);
        for _ in 0..n {
            match work.pick(&mut rng) {
                KvOp::Insert(_) => ins += 1,
                KvOp::Remove(_) => rem += 1,
                KvOp::Lookup(_) => {}
            }
        }
        for share in [ins, rem] {
            let f = share as f64 / n as f64;
            assert!((f - 0.10).abs() < 0.01, "{f}");
        }
    }

    #[test]
    fn prefill_is_half_the_range() {
        assert_eq!(prefilled_map(1024, 3).len(), 512);
        assert_eq!(prefilled_map(1024, 3).keys(), prefilled_map(1024, 3).keys());
    }

    #[test]
    fn single_thread_fairness_is_flagged() {
        let report = run_kv_bench_on(&quick(LockKind::Mcs, 1), mock()).unwrap();
        assert!(report.total_ops > 0);
        assert!(report.ops_per_us > 0.0);
        assert_eq!(report.fairness, 1.0);
        assert!(!report.fairness_defined);
    }

    #[test]
    fn raw_counter_matches_for_every_lock() {
        for lock in LockKind::ALL {
            let config = BenchConfig {
                ops_per_thread: Some(2_000),
                ..quick(lock, 3)
            };
            let report = run_raw_bench_on(&config, mock()).unwrap();
            assert_eq!(report.total_ops, 6_000, "{lock}");
        }
    }

    #[test]
    fn read_only_single_thread_keeps_prefill() {
        let config = BenchConfig {
            update_pct: 0,
            ops_per_thread: Some(5_000),
            ..quick(LockKind::Cna, 1)
        };
        let report = run_kv_bench_on(&config, mock()).unwrap();
        assert_eq!(report.final_keys, Some(512));
    }

    #[test]
    fn throughput_arithmetic() {
        let report = run_raw_bench_on(&quick(LockKind::Ticket, 2), mock()).unwrap();
        let expect = report.total_ops as f64 / report.duration_s / 1e6;
        assert!((report.ops_per_us - expect).abs() <= 1e-9 * expect.max(1.0));
        assert_eq!(report.total_ops, report.per_thread.iter().sum::<u64>());
    }

    #[test]
    fn csv_and_json_output() {
        let report = run_raw_bench_on(&quick(LockKind::Tas, 2), mock()).unwrap();
        let csv = emit_reports(&[report.clone(), report.clone()], Format::Csv);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "lock,threads,duration_s,total_ops,ops_per_us,fairness,seed");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("tas,2,"));
        let json = emit_report(&report, Format::Json);
        let v: serde_json::Value = serde_json::from_str(json.trim()).unwrap();
        for f in CSV_FIELDS {
            assert!(v.get(f).is_some(), "{f}");
        }
        let back: BenchReport = serde_json::from_str(json.trim()).unwrap();
        assert_eq!(back.total_ops, report.total_ops);
    }

    #[test]
    fn sim_bench_is_deterministic() {
        let config = BenchConfig {
            lock: LockKind::Cna,
            threads: 4,
            sim_handovers: 5_000,
            seed: 11,
            ..BenchConfig::default()
        };
        let topo = Topology::mock_round_robin(4, 2);
        let a = run_sim_bench_on(&config, &topo).unwrap();
        let b = run_sim_bench_on(&config, &topo).unwrap();
        assert_eq!(a.per_thread, b.per_thread);
        assert!(a.handover_ratio.unwrap() > 0.9);
        let tas = BenchConfig { lock: LockKind::Tas, ..config };
        assert!(matches!(run_sim_bench_on(&tas, &topo), Err(BenchError::Config(_))));
    }
}
