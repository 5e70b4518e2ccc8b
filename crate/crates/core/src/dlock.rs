//! Register and qubit locks with randomized backoff.
//!
//! Each node owns one [`LockTable`] that is authoritative for the locks on its
//! own registers and simulated qubits. A transaction that needs locks on
//! several nodes takes them one table at a time in [`LockId`] order; when any
//! table reports a conflict it drops everything it holds and sleeps for a
//! random delay before starting over (see [`with_backoff`]).

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::future::Future;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::Rng;
use thiserror::Error;
use tokio::sync::Notify;

pub type TxnId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LockKind {
    Register,
    Qubit,
}

/// Lock name, ordered by `(node, kind, id)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LockId {
    pub node: String,
    pub kind: LockKind,
    pub id: u64,
}

impl LockId {
    pub fn register(node: &str, id: u64) -> Self {
        LockId { node: node.to_string(), kind: LockKind::Register, id }
    }

    pub fn qubit(node: &str, id: u64) -> Self {
        LockId { node: node.to_string(), kind: LockKind::Qubit, id }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LockError {
    #[error("gave up after {attempts} lock attempts")]
    Timeout { attempts: u32 },
    #[error("transaction {txn} already holds locks in this table")]
    AlreadyHolding { txn: TxnId },
    #[error("transaction {txn} holds no locks in this table")]
    NotHeld { txn: TxnId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Acquire {
    Granted,
    Conflict { lock: LockId, holder: TxnId },
}

#[derive(Debug, Clone)]
pub struct BackoffPolicy {
    pub attempts: u32,
    pub min_delay: Duration,
    pub max_delay: Duration,
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        BackoffPolicy { attempts: 50, min_delay: Duration::from_millis(10), max_delay: Duration::from_millis(100) }
    }
}

impl BackoffPolicy {
    pub fn delay<R: Rng + ?Sized>(&self, rng: &mut R) -> Duration {
        if self.max_delay <= self.min_delay {
            return self.min_delay;
        }
        rng.gen_range(self.min_delay..=self.max_delay)
    }
}

#[derive(Debug, Default)]
pub struct LockMetrics {
    acquisitions: AtomicU64,
    conflicts: AtomicU64,
    backoffs: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MetricsSnapshot {
    pub acquisitions: u64,
    pub conflicts: u64,
    pub backoffs: u64,
}

impl LockMetrics {
    pub fn record_backoff(&self) {
        self.backoffs.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            acquisitions: self.acquisitions.load(Ordering::Relaxed),
            conflicts: self.conflicts.load(Ordering::Relaxed),
            backoffs: self.backoffs.load(Ordering::Relaxed),
        }
    }
}

#[derive(Default)]
struct Inner {
    held: BTreeMap<LockId, TxnId>,
    waiters: HashMap<LockId, VecDeque<TxnId>>,
    notifiers: HashMap<LockId, Arc<Notify>>,
    trace: Option<Vec<(TxnId, LockId)>>,
}

#[derive(Default)]
pub struct LockTable {
    inner: Mutex<Inner>,
    metrics: LockMetrics,
}

impl LockTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn metrics(&self) -> &LockMetrics {
        &self.metrics
    }

    /// Start recording every granted lock in acquisition order.
    pub fn enable_trace(&self) {
        self.inner.lock().trace = Some(Vec::new());
    }

    pub fn take_trace(&self) -> Vec<(TxnId, LockId)> {
        self.inner.lock().trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// All-or-nothing acquisition of `locks` in sorted order. On conflict
    /// nothing stays held and `txn` is queued as a waiter on the busy lock.
    pub fn try_acquire(&self, txn: TxnId, locks: &[LockId]) -> Result<Acquire, LockError> {
        let mut inner = self.inner.lock();
        if inner.held.values().any(|t| *t == txn) {
            return Err(LockError::AlreadyHolding { txn });
        }
        let mut sorted = locks.to_vec();
        sorted.sort();
        sorted.dedup();
        for (i, lock) in sorted.iter().enumerate() {
            if let Some(&holder) = inner.held.get(lock) {
                for taken in &sorted[..i] {
                    inner.held.remove(taken);
                }
                let queue = inner.waiters.entry(lock.clone()).or_default();
                if !queue.contains(&txn) {
                    queue.push_back(txn);
                }
                self.metrics.conflicts.fetch_add(1, Ordering::Relaxed);
                return Ok(Acquire::Conflict { lock: lock.clone(), holder });
            }
            let prev = inner.held.insert(lock.clone(), txn);
            assert!(prev.is_none(), "mutual exclusion violated on {lock:?}");
            if let Some(trace) = inner.trace.as_mut() {
                trace.push((txn, lock.clone()));
            }
        }
        for lock in &sorted {
            if let Some(queue) = inner.waiters.get_mut(lock) {
                queue.retain(|t| *t != txn);
            }
        }
        self.metrics.acquisitions.fetch_add(1, Ordering::Relaxed);
        Ok(Acquire::Granted)
    }

    /// Frees every lock `txn` holds here and wakes anyone waiting on them.
    pub fn release_all(&self, txn: TxnId) -> Result<usize, LockError> {
        let mut inner = self.inner.lock();
        let mine: Vec<LockId> = inner.held.iter().filter(|(_, t)| **t == txn).map(|(l, _)| l.clone()).collect();
        if mine.is_empty() {
            return Err(LockError::NotHeld { txn });
        }
        for lock in &mine {
            inner.held.remove(lock);
            if let Some(n) = inner.notifiers.remove(lock) {
                n.notify_waiters();
            }
        }
        inner.waiters.retain(|_, q| {
            q.retain(|t| *t != txn);
            !q.is_empty()
        });
        Ok(mine.len())
    }

    /// Drops `txn` from every waiter queue, for a transaction that gave up.
    pub fn forget(&self, txn: TxnId) {
        self.inner.lock().waiters.retain(|_, q| {
            q.retain(|t| *t != txn);
            !q.is_empty()
        });
    }

    pub fn holder(&self, lock: &LockId) -> Option<TxnId> {
        self.inner.lock().held.get(lock).copied()
    }

    pub fn held_by(&self, txn: TxnId) -> Vec<LockId> {
        self.inner.lock().held.iter().filter(|(_, t)| **t == txn).map(|(l, _)| l.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.lock().held.is_empty()
    }

    pub fn waiters(&self, lock: &LockId) -> Vec<TxnId> {
        self.inner.lock().waiters.get(lock).map(|q| q.iter().copied().collect()).unwrap_or_default()
    }

    /// Waits until `lock` is free or `timeout` passes. Returns whether it is free.
    pub async fn wait_released(&self, lock: &LockId, timeout: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let notify = {
                let mut inner = self.inner.lock();
                if !inner.held.contains_key(lock) {
                    return true;
                }
                inner.notifiers.entry(lock.clone()).or_default().clone()
            };
            let notified = notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if self.holder(lock).is_none() {
                return true;
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return self.holder(lock).is_none();
            }
        }
    }
}

/// Outcome of one attempt inside [`with_backoff`].
#[derive(Debug)]
pub enum Attempt<T> {
    Done(T),
    /// Conflict. The attempt must have released everything before returning.
    Retry,
}

#[derive(Debug, Error)]
pub enum BackoffError<E> {
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error("{0}")]
    Inner(E),
}

/// Runs `attempt` until it succeeds, sleeping a uniform random delay from
/// `policy` between conflicting attempts. Returns the value and the number of
/// attempts used.
pub async fn with_backoff<T, E, R, F, Fut>(
    policy: &BackoffPolicy,
    metrics: Option<&LockMetrics>,
    rng: &mut R,
    mut attempt: F,
) -> Result<(T, u32), BackoffError<E>>
where
    R: Rng + ?Sized,
    F: FnMut(u32) -> Fut,
    Fut: Future<Output = Result<Attempt<T>, E>>,
{
    for n in 1..=policy.attempts {
        match attempt(n).await.map_err(BackoffError::Inner)? {
            Attempt::Done(v) => return Ok((v, n)),
            Attempt::Retry => {
                if n == policy.attempts {
                    break;
                }
                if let Some(m) = metrics {
                    m.record_backoff();
                }
                tokio::time::sleep(policy.delay(rng)).await;
            }
        }
    }
    Err(LockError::Timeout { attempts: policy.attempts }.into())
}

/// Acquires `locks` on a single table with retries.
pub async fn acquire_all<R: Rng + ?Sized>(
    table: &LockTable,
    txn: TxnId,
    locks: &[LockId],
    policy: &BackoffPolicy,
    rng: &mut R,
) -> Result<u32, LockError> {
    let result = with_backoff::<(), LockError, R, _, _>(policy, Some(table.metrics()), rng, |_| async {
        match table.try_acquire(txn, locks)? {
            Acquire::Granted => Ok(Attempt::Done(())),
            Acquire::Conflict { .. } => Ok(Attempt::Retry),
        }
    })
    .await;
    match result {
        Ok((_, attempts)) => Ok(attempts),
        Err(BackoffError::Lock(e)) | Err(BackoffError::Inner(e)) => Err(e),
    }
}
