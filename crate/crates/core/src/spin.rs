use std::hint;
use std::thread;

/// Relax-hint iterations before a waiter starts yielding its time slice.
const SPIN_LIMIT: u32 = 64;

/// Polite busy wait: a CPU relax hint per iteration, falling back to
/// `yield_now` once the waiter has spun for a while. The waiter never parks.
pub(crate) struct SpinWait {
    iterations: u32,
}

impl SpinWait {
    #[inline]
    pub(crate) const fn new() -> Self {
        SpinWait { iterations: 0 }
    }

    #[inline]
    pub(crate) fn spin(&mut self) {
        if self.iterations < SPIN_LIMIT {
            self.iterations += 1;
            hint::spin_loop();
        } else {
            thread::yield_now();
        }
    }
}

/// Spins until `cond` returns `Some`, and hands back the value.
#[inline]
pub(crate) fn wait_until<T>(mut cond: impl FnMut() -> Option<T>) -> T {
    let mut wait = SpinWait::new();
    loop {
        if let Some(v) = cond() {
            return v;
        }
        wait.spin();
    }
}
