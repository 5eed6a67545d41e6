//! Python bindings: fairness tunables, tail encoding, the stepped
//! simulator and reference model, and the benchmark runners.

#![allow(clippy::too_many_arguments)]

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use numa_cna::bench::{self, BenchConfig, BenchMode};
use numa_cna::cna::{self, CnaConfig};
use numa_cna::sim::{self, Discipline, DrawSource, SimConfig, SimLock, SimTrace};
use numa_cna::{word, LockKind, SocketId};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Fairness tunables shared by every thread using a CNA lock.
#[pyclass(name = "CnaConfig", from_py_object)]
#[derive(Clone)]
struct PyCnaConfig {
    inner: CnaConfig,
}

#[pymethods]
impl PyCnaConfig {
    #[new]
    #[pyo3(signature = (threshold=cna::DEFAULT_THRESHOLD, shuffle_threshold=cna::DEFAULT_SHUFFLE_THRESHOLD, shuffle_reduction=false, seed=0))]
    fn new(threshold: u32, shuffle_threshold: u32, shuffle_reduction: bool, seed: u64) -> PyResult<Self> {
        let inner = CnaConfig {
            threshold,
            shuffle_threshold,
            shuffle_reduction,
            seed,
        };
        inner.validate().map_err(value_err)?;
        Ok(PyCnaConfig { inner })
    }

    /// Defaults with shuffle reduction on.
    #[staticmethod]
    fn optimized() -> Self {
        PyCnaConfig {
            inner: CnaConfig::optimized(),
        }
    }

    #[getter]
    fn threshold(&self) -> u32 {
        self.inner.threshold
    }

    #[getter]
    fn shuffle_threshold(&self) -> u32 {
        self.inner.shuffle_threshold
    }

    #[getter]
    fn shuffle_reduction(&self) -> bool {
        self.inner.shuffle_reduction
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "CnaConfig(threshold={:#x}, shuffle_threshold={:#x}, shuffle_reduction={}, seed={})",
            c.threshold,
            c.shuffle_threshold,
            if c.shuffle_reduction { "True" } else { "False" },
            c.seed
        )
    }
}

fn config_or_default(config: Option<PyCnaConfig>) -> CnaConfig {
    config.map_or_else(CnaConfig::default, |c| c.inner)
}

fn sim_lock(name: &str) -> PyResult<SimLock> {
    match name {
        "cna" => Ok(SimLock::Cna),
        "mcs" => Ok(SimLock::Mcs),
        other => Err(PyValueError::new_err(format!("no simulated model for `{other}` (use cna or mcs)"))),
    }
}

/// Events and scheduling record of one simulated run.
#[pyclass(name = "Trace", frozen)]
struct PyTrace {
    inner: SimTrace,
}

#[pymethods]
impl PyTrace {
    /// Thread indices in the order they were granted the lock.
    fn grant_order(&self) -> Vec<usize> {
        self.inner.grant_order()
    }

    /// Thread chosen at each scheduler step.
    #[getter]
    fn schedule(&self) -> Vec<usize> {
        self.inner.schedule.clone()
    }

    /// Events as `(step, thread, kind, socket)` tuples.
    fn events(&self) -> Vec<(u64, usize, String, i32)> {
        self.inner
            .events
            .iter()
            .map(|e| {
                let kind = serde_json::to_value(e.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default();
                (e.step, e.thread, kind, e.socket.get())
            })
            .collect()
    }

    /// Intra-socket handover ratio, optionally over the prefix ending at
    /// the `through_grant`-th grant.
    #[pyo3(signature = (through_grant=None))]
    fn handover_ratio(&self, through_grant: Option<usize>) -> PyResult<f64> {
        let events = match through_grant {
            Some(n) => self.inner.through_grant(n),
            None => &self.inner.events,
        };
        sim::intra_socket_handover_ratio(events).map_err(value_err)
    }

    /// One JSON object per event.
    fn to_lines(&self) -> String {
        self.inner.to_lines()
    }

    fn __len__(&self) -> usize {
        self.inner.events.len()
    }
}

/// Runs the stepped simulator. With `schedule` the given thread sequence is
/// replayed; otherwise a random schedule is drawn from `seed`. `draws`
/// scripts the fairness draws; without it each thread uses its seeded
/// generator.
#[pyfunction]
#[pyo3(signature = (sockets, lock="cna", acquisitions=1, schedule=None, seed=0, draws=None, config=None))]
fn simulate(
    py: Python<'_>,
    sockets: Vec<u16>,
    lock: &str,
    acquisitions: u64,
    schedule: Option<Vec<usize>>,
    seed: u64,
    draws: Option<Vec<u32>>,
    config: Option<PyCnaConfig>,
) -> PyResult<PyTrace> {
    let mut sim_config = SimConfig::new(sim_lock(lock)?, &sockets, acquisitions).with_policy(config_or_default(config));
    if let Some(d) = draws {
        if d.is_empty() {
            return Err(PyValueError::new_err("draws must not be empty"));
        }
        sim_config = sim_config.with_draw_script(d);
    }
    sim_config.validate().map_err(value_err)?;
    let trace = py
        .detach(|| match schedule {
            Some(s) => sim::run_schedule(&sim_config, &s),
            None => sim::run_random(&sim_config, seed),
        })
        .map_err(runtime_err)?;
    Ok(PyTrace { inner: trace })
}

/// The seven-thread, two-socket walkthrough replayed under keep-local draws.
#[pyfunction]
fn two_socket_example() -> PyResult<PyTrace> {
    let (config, script) = sim::two_socket_example();
    let trace = sim::run_scripted(&config, &script).map_err(runtime_err)?;
    Ok(PyTrace { inner: trace })
}

/// Grant order of the sequential reference model when `arrivals`, a list of
/// `(thread, socket)` pairs, queue behind an idle lock and every holder
/// releases once.
#[pyfunction]
#[pyo3(signature = (arrivals, discipline="cna", draws=None, config=None))]
fn reference_grant_order(
    arrivals: Vec<(usize, u16)>,
    discipline: &str,
    draws: Option<Vec<u32>>,
    config: Option<PyCnaConfig>,
) -> PyResult<Vec<usize>> {
    let discipline = match discipline {
        "cna" => Discipline::Cna,
        "fifo" | "mcs" => Discipline::Fifo,
        other => return Err(PyValueError::new_err(format!("unknown discipline `{other}`"))),
    };
    let policy = config_or_default(config);
    let draws = match draws {
        Some(d) if d.is_empty() => return Err(PyValueError::new_err("draws must not be empty")),
        Some(d) => DrawSource::script(d),
        None => DrawSource::generator(policy.seed),
    };
    let arrivals: Vec<(usize, SocketId)> = arrivals.into_iter().map(|(t, s)| (t, SocketId::new(s))).collect();
    Ok(sim::oracle_grant_order_for_arrivals(&arrivals, discipline, &policy, draws))
}

#[pyfunction]
fn fairness_factor(per_thread: Vec<u64>) -> PyResult<f64> {
    numa_cna::fairness_factor(&per_thread).map_err(value_err)
}

#[pyfunction]
fn encode_tail(cpu: u32, ctx: u32) -> PyResult<u16> {
    word::encode_tail(cpu, ctx).map_err(value_err)
}

#[pyfunction]
fn decode_tail(code: u16) -> Option<(u32, u32)> {
    word::decode_tail(code)
}

/// Runs a benchmark and returns its report as a dict. `mode` is `kv`,
/// `raw` or `sim`. With `ops_per_thread` each thread performs exactly that
/// many operations instead of running for `duration` seconds.
#[pyfunction]
#[pyo3(signature = (lock="cna", mode="kv", threads=4, duration=1.0, ops_per_thread=None, key_range=1024, update_pct=20, external_work=0, seed=0, sim_handovers=1_000_000, config=None))]
fn run_bench<'py>(
    py: Python<'py>,
    lock: &str,
    mode: &str,
    threads: usize,
    duration: f64,
    ops_per_thread: Option<u64>,
    key_range: u64,
    update_pct: u32,
    external_work: u32,
    seed: u64,
    sim_handovers: u64,
    config: Option<PyCnaConfig>,
) -> PyResult<Bound<'py, PyDict>> {
    let lock: LockKind = lock.parse().map_err(value_err)?;
    let mode = match mode {
        "kv" => BenchMode::Kv,
        "raw" => BenchMode::Raw,
        "sim" => BenchMode::Sim,
        other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    };
    let cna = config.map_or_else(
        || {
            if lock == LockKind::CnaOpt {
                CnaConfig::optimized()
            } else {
                CnaConfig::default()
            }
            .with_seed(seed)
        },
        |c| c.inner,
    );
    let bench_config = BenchConfig {
        lock,
        threads,
        duration_s: duration,
        key_range,
        update_pct,
        external_work,
        seed,
        ops_per_thread,
        sim_handovers,
        cna,
        ..BenchConfig::default()
    };
    bench_config.validate().map_err(value_err)?;
    let report = py
        .detach(|| bench::run_bench(&bench_config, mode))
        .map_err(runtime_err)?;
    let json = serde_json::to_string(&report).map_err(runtime_err)?;
    py.import("json")?
        .call_method1("loads", (json,))?
        .cast_into::<PyDict>()
        .map_err(Into::into)
}

#[pymodule]
fn numa_cna_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCnaConfig>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(two_socket_example, m)?)?;
    m.add_function(wrap_pyfunction!(reference_grant_order, m)?)?;
    m.add_function(wrap_pyfunction!(fairness_factor, m)?)?;
    m.add_function(wrap_pyfunction!(encode_tail, m)?)?;
    m.add_function(wrap_pyfunction!(decode_tail, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add(
        "LOCK_KINDS",
        LockKind::ALL.iter().map(ToString::to_string).collect::<Vec<_>>(),
    )?;
    m.add("MAX_NESTING", word::MAX_NESTING)?;
    m.add("MAX_CPUS", word::MAX_CPUS)?;
    Ok(())
}
