//! Fairness and locality metrics.

use crate::topology::SocketId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("fairness factor needs at least two threads, got {0}")]
    TooFewThreads(usize),
    #[error("all per-thread counts are zero")]
    AllZero,
    #[error("no handovers to measure")]
    NoHandovers,
}

/// Share of all operations performed by the busier half of the threads.
///
/// Counts are sorted in decreasing order and the top `ceil(n / 2)` are
/// summed. 0.5 means perfectly even, values near 1 mean starvation.
pub fn fairness_factor(per_thread: &[u64]) -> Result<f64, MetricsError> {
    if per_thread.len() < 2 {
        return Err(MetricsError::TooFewThreads(per_thread.len()));
    }
    let total: u64 = per_thread.iter().sum();
    if total == 0 {
        return Err(MetricsError::AllZero);
    }
    let mut sorted = per_thread.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let top: u64 = sorted[..per_thread.len().div_ceil(2)].iter().sum();
    Ok(top as f64 / total as f64)
}

/// Fraction of `(from, to)` handovers that stay on one socket.
pub fn same_socket_ratio<I>(handovers: I) -> Result<f64, MetricsError>
where
    I: IntoIterator<Item = (SocketId, SocketId)>,
{
    let (local, total) = handovers
        .into_iter()
        .fold((0u64, 0u64), |(l, t), (a, b)| (l + u64::from(a == b), t + 1));
    if total == 0 {
        return Err(MetricsError::NoHandovers);
    }
    Ok(local as f64 / total as f64)
}
