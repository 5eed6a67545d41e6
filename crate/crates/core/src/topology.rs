//! Socket (NUMA node) lookup for the calling thread.
//!
//! A [`Topology`] is either backed by the OS (`getcpu` on Linux) or by a
//! mock map from logical thread index to socket. Threads announce their
//! logical index with [`bind_thread`]; unbound threads and unmapped indices
//! report socket 0.
//!
//! Lookups are cached per thread and refreshed every `refresh_interval`
//! queries, so the acquisition path only pays for a thread-local read.

use std::cell::Cell;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

/// Queries between cache refreshes.
pub const DEFAULT_REFRESH_INTERVAL: u32 = 1024;

/// Environment variable selecting the mock topology, `"t0:0,t1:1,..."`.
pub const MOCK_TOPOLOGY_ENV: &str = "CNA_MOCK_TOPOLOGY";

/// A socket index, or the "not yet recorded" sentinel `-1`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SocketId(i32);

impl SocketId {
    pub const UNKNOWN: SocketId = SocketId(-1);

    pub const fn new(index: u16) -> Self {
        SocketId(index as i32)
    }

    pub const fn get(self) -> i32 {
        self.0
    }

    pub const fn is_known(self) -> bool {
        self.0 >= 0
    }

    pub(crate) const fn from_raw(raw: i32) -> Self {
        SocketId(raw)
    }
}

impl fmt::Debug for SocketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_known() {
            write!(f, "s{}", self.0)
        } else {
            f.write_str("s?")
        }
    }
}

impl fmt::Display for SocketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("socket id {socket} for thread {thread} is negative")]
    NegativeSocket { thread: usize, socket: i64 },
    #[error("socket id {socket} for thread {thread} is out of range")]
    SocketOutOfRange { thread: usize, socket: i64 },
    #[error("topology provider is not in mock mode")]
    NotMock,
    #[error("malformed mock topology entry `{0}` (expected tN:S)")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyMode {
    Real,
    Mock,
}

#[derive(Debug, Default)]
struct MockMap {
    sockets: HashMap<usize, SocketId>,
    socket_count: usize,
}

impl MockMap {
    fn new(sockets: HashMap<usize, SocketId>) -> Self {
        let socket_count = sockets
            .values()
            .collect::<BTreeSet<_>>()
            .len()
            .max(1);
        MockMap {
            sockets,
            socket_count,
        }
    }
}

enum Provider {
    Real { socket_count: usize },
    Mock(RwLock<Arc<MockMap>>),
}

/// Source of socket ids for the calling thread.
pub struct Topology {
    id: u64,
    provider: Provider,
    refresh_interval: u32,
    generation: AtomicU64,
    degraded: AtomicBool,
}

static NEXT_PROVIDER_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy)]
struct CacheEntry {
    provider: u64,
    generation: u64,
    socket: SocketId,
    remaining: u32,
}

thread_local! {
    static THREAD_INDEX: Cell<Option<usize>> = const { Cell::new(None) };
    static CACHE: Cell<Option<CacheEntry>> = const { Cell::new(None) };
}

/// Declares the calling thread's logical index (the key of the mock map).
pub fn bind_thread(index: usize) {
    THREAD_INDEX.with(|t| t.set(Some(index)));
    CACHE.with(|c| c.set(None));
}

/// The logical index declared with [`bind_thread`], if any.
pub fn bound_thread() -> Option<usize> {
    THREAD_INDEX.with(Cell::get)
}

impl Topology {
    /// An OS-backed provider.
    pub fn real() -> Self {
        let socket_count = os_socket_ids().len().max(1);
        Self::with_provider(Provider::Real { socket_count })
    }

    /// A mock provider consulting `map` (thread index to socket).
    pub fn mock<I>(map: I) -> Result<Self, TopologyError>
    where
        I: IntoIterator<Item = (usize, i64)>,
    {
        let map = validate_map(map)?;
        Ok(Self::with_provider(Provider::Mock(RwLock::new(Arc::new(
            MockMap::new(map),
        )))))
    }

    /// Mock provider spreading `threads` threads round-robin over `sockets`.
    pub fn mock_round_robin(threads: usize, sockets: u16) -> Self {
        let sockets = i64::from(sockets.max(1));
        Self::mock((0..threads).map(|t| (t, t as i64 % sockets)))
            .expect("round-robin sockets are in range")
    }

    /// Mock provider from [`MOCK_TOPOLOGY_ENV`] when set, else the OS.
    pub fn from_env() -> Result<Self, TopologyError> {
        match std::env::var(MOCK_TOPOLOGY_ENV) {
            Ok(spec) => Self::mock(parse_mock_spec(&spec)?),
            Err(_) => Ok(Self::real()),
        }
    }

    fn with_provider(provider: Provider) -> Self {
        Topology {
            id: NEXT_PROVIDER_ID.fetch_add(1, Ordering::Relaxed),
            provider,
            refresh_interval: DEFAULT_REFRESH_INTERVAL,
            generation: AtomicU64::new(0),
            degraded: AtomicBool::new(false),
        }
    }

    pub fn with_refresh_interval(mut self, interval: u32) -> Self {
        self.refresh_interval = interval.max(1);
        self
    }

    pub fn refresh_interval(&self) -> u32 {
        self.refresh_interval
    }

    pub fn mode(&self) -> TopologyMode {
        match self.provider {
            Provider::Real { .. } => TopologyMode::Real,
            Provider::Mock(_) => TopologyMode::Mock,
        }
    }

    /// Set once a real-mode OS query has failed and 0 was reported instead.
    pub fn is_degraded(&self) -> bool {
        self.degraded.load(Ordering::Relaxed)
    }

    /// Socket of the calling thread. Never returns [`SocketId::UNKNOWN`].
    pub fn current_numa_node(&self) -> SocketId {
        let generation = self.generation.load(Ordering::Acquire);
        if let Some(mut entry) = CACHE.with(Cell::get) {
            if entry.provider == self.id && entry.generation == generation && entry.remaining > 0
            {
                entry.remaining -= 1;
                CACHE.with(|c| c.set(Some(entry)));
                return entry.socket;
            }
        }
        let socket = self.query_uncached(bound_thread());
        CACHE.with(|c| {
            c.set(Some(CacheEntry {
                provider: self.id,
                generation,
                socket,
                remaining: self.refresh_interval - 1,
            }))
        });
        socket
    }

    /// Socket of logical thread `thread`, bypassing the cache. In real mode
    /// this reports the calling thread's socket.
    pub fn socket_of(&self, thread: usize) -> SocketId {
        self.query_uncached(Some(thread))
    }

    fn query_uncached(&self, thread: Option<usize>) -> SocketId {
        match &self.provider {
            Provider::Real { .. } => match os_current_node() {
                Some(node) => SocketId::from_raw(node),
                None => {
                    self.degraded.store(true, Ordering::Relaxed);
                    SocketId::new(0)
                }
            },
            Provider::Mock(map) => {
                let map = map.read().unwrap_or_else(|e| e.into_inner());
                thread
                    .and_then(|t| map.sockets.get(&t).copied())
                    .unwrap_or(SocketId::new(0))
            }
        }
    }

    /// Replaces the mock map. Later queries from any thread see the new map.
    pub fn set_mock_topology<I>(&self, map: I) -> Result<(), TopologyError>
    where
        I: IntoIterator<Item = (usize, i64)>,
    {
        let Provider::Mock(current) = &self.provider else {
            return Err(TopologyError::NotMock);
        };
        let map = Arc::new(MockMap::new(validate_map(map)?));
        *current.write().unwrap_or_else(|e| e.into_inner()) = map;
        self.generation.fetch_add(1, Ordering::Release);
        Ok(())
    }

    /// Number of distinct sockets known to the provider, at least 1.
    pub fn socket_count(&self) -> usize {
        match &self.provider {
            Provider::Real { socket_count } => *socket_count,
            Provider::Mock(map) => map.read().unwrap_or_else(|e| e.into_inner()).socket_count,
        }
    }
}

impl fmt::Debug for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Topology")
            .field("mode", &self.mode())
            .field("sockets", &self.socket_count())
            .field("refresh_interval", &self.refresh_interval)
            .finish()
    }
}

fn validate_map<I>(map: I) -> Result<HashMap<usize, SocketId>, TopologyError>
where
    I: IntoIterator<Item = (usize, i64)>,
{
    map.into_iter()
        .map(|(thread, socket)| {
            if socket < 0 {
                Err(TopologyError::NegativeSocket { thread, socket })
            } else if socket > i64::from(u16::MAX) {
                Err(TopologyError::SocketOutOfRange { thread, socket })
            } else {
                Ok((thread, SocketId::new(socket as u16)))
            }
        })
        .collect()
}

/// Parses `"t0:0,t1:1"` (the `t` prefix is optional) into a thread map.
pub fn parse_mock_spec(spec: &str) -> Result<Vec<(usize, i64)>, TopologyError> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|entry| {
            let bad = || TopologyError::Parse(entry.to_owned());
            let (thread, socket) = entry.split_once(':').ok_or_else(bad)?;
            let thread = thread.trim();
            let thread = thread.strip_prefix('t').unwrap_or(thread);
            let thread = thread.parse::<usize>().map_err(|_| bad())?;
            let socket = socket.trim().parse::<i64>().map_err(|_| bad())?;
            Ok((thread, socket))
        })
        .collect()
}

/// NUMA node ids the OS lists under sysfs; empty when unavailable.
pub fn os_socket_ids() -> BTreeSet<i32> {
    let Ok(dir) = fs::read_dir("/sys/devices/system/node") else {
        return BTreeSet::new();
    };
    dir.filter_map(Result::ok)
        .filter_map(|e| {
            e.file_name()
                .to_str()?
                .strip_prefix("node")?
                .parse::<i32>()
                .ok()
        })
        .collect()
}

#[cfg(target_os = "linux")]
fn os_current_node() -> Option<i32> {
    let mut cpu: libc::c_uint = 0;
    let mut node: libc::c_uint = 0;
    // SAFETY: getcpu writes two unsigned ints through valid pointers; the
    // third (cache) argument is unused by the kernel and may be null.
    let rc = unsafe {
        libc::syscall(
            libc::SYS_getcpu,
            &mut cpu as *mut libc::c_uint,
            &mut node as *mut libc::c_uint,
            std::ptr::null_mut::<libc::c_void>(),
        )
    };
    (rc == 0).then_some(node as i32)
}

#[cfg(not(target_os = "linux"))]
fn os_current_node() -> Option<i32> {
    None
}
