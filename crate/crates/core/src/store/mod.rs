//! Versioned key/value state store.
//!
//! A single-authority, in-process store. Each key carries a version that
//! starts at 1 and grows by one on every write (deletes included), which
//! gives compare-and-swap, gap-free watch streams and readiness barriers.
//! Persistence is a binary snapshot written through a [`SnapshotBackend`].

mod key;
mod snapshot;
mod wait;

use std::collections::BTreeMap;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::sync::{Arc, Weak};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Tick};

pub use key::{is_valid_segment, validate_segment, KeyError, StateKey, MAX_KEY_LEN};
pub use snapshot::{FileBackend, MemoryBackend, SnapshotBackend, SNAPSHOT_MAGIC};
pub use wait::{Wait, WaitStatus};

/// Largest value accepted by [`StateStore::put`].
pub const MAX_VALUE_LEN: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateEntry {
    pub key: StateKey,
    pub value: Vec<u8>,
    /// Per-key version; 0 is never stored and means "absent".
    pub version: u64,
    pub written_at: Tick,
}

impl StateEntry {
    pub fn value_str(&self) -> Option<&str> {
        std::str::from_utf8(&self.value).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WatchKind {
    Put,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchEvent {
    pub entry: StateEntry,
    pub kind: WatchKind,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("version conflict: current version is {current_version}")]
    VersionConflict { current_version: u64 },
    #[error("value of {len} bytes exceeds the {MAX_VALUE_LEN} byte limit")]
    ValueTooLarge { len: usize },
    #[error("subscription closed")]
    SubscriptionClosed,
    #[error("timed out waiting on {key} at tick {deadline}")]
    Timeout { key: StateKey, deadline: Tick },
    #[error("timeout must be positive")]
    InvalidTimeout,
    #[error("corrupt snapshot image: {0}")]
    CorruptImage(String),
    #[error("store is closed")]
    Closed,
    #[error("snapshot backend: {0}")]
    Backend(#[from] std::io::Error),
    #[error(transparent)]
    Key(#[from] KeyError),
}

#[derive(Default)]
struct Slot {
    latest: Option<StateEntry>,
    /// Last version handed out, kept across deletes.
    version: u64,
}

struct Watcher {
    id: u64,
    prefix: StateKey,
    tx: Sender<WatchEvent>,
}

#[derive(Default)]
struct Inner {
    slots: BTreeMap<StateKey, Slot>,
    /// Every event in write order, used to replay history to new watchers.
    log: Vec<WatchEvent>,
    watchers: Vec<Watcher>,
    next_watcher: u64,
    closed: bool,
}

impl Inner {
    fn current_version(&self, key: &StateKey) -> u64 {
        self.slots
            .get(key)
            .and_then(|s| s.latest.as_ref())
            .map_or(0, |e| e.version)
    }

    fn record(&mut self, event: WatchEvent) {
        self.watchers.retain(|w| {
            !w.prefix.is_prefix_of(&event.entry.key) || w.tx.send(event.clone()).is_ok()
        });
        self.log.push(event);
    }
}

struct Shared {
    inner: Mutex<Inner>,
    clock: Clock,
}

/// Cheaply clonable handle to one store.
#[derive(Clone)]
pub struct StateStore {
    shared: Arc<Shared>,
}

impl Default for StateStore {
    fn default() -> Self {
        Self::new(Clock::new())
    }
}

impl std::fmt::Debug for StateStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StateStore")
            .field("entries", &self.len())
            .finish()
    }
}

impl StateStore {
    pub fn new(clock: Clock) -> Self {
        Self {
            shared: Arc::new(Shared {
                inner: Mutex::new(Inner::default()),
                clock,
            }),
        }
    }

    pub fn clock(&self) -> &Clock {
        &self.shared.clock
    }

    /// Writes `value` under `key`.
    ///
    /// With `expected_version` set the write only happens when the key's
    /// current version matches (0 for an absent key).
    pub fn put(
        &self,
        key: &StateKey,
        value: impl Into<Vec<u8>>,
        expected_version: Option<u64>,
    ) -> Result<StateEntry, StoreError> {
        let value = value.into();
        if value.len() > MAX_VALUE_LEN {
            return Err(StoreError::ValueTooLarge { len: value.len() });
        }
        let mut inner = self.shared.inner.lock();
        if inner.closed {
            return Err(StoreError::Closed);
        }
        let current = inner.current_version(key);
        if let Some(expected) = expected_version {
            if expected != current {
                return Err(StoreError::VersionConflict {
                    current_version: current,
                });
            }
        }
        let slot = inner.slots.entry(key.clone()).or_default();
        slot.version += 1;
        let entry = StateEntry {
            key: key.clone(),
            value,
            version: slot.version,
            written_at: self.shared.clock.now(),
        };
        slot.latest = Some(entry.clone());
        inner.record(WatchEvent {
            entry: entry.clone(),
            kind: WatchKind::Put,
        });
        Ok(entry)
    }

    /// Removes `key`, emitting a DELETE event that carries the next version.
    /// Returns `None` when the key was already absent.
    pub fn delete(
        &self,
        key: &StateKey,
        expected_version: Option<u64>,
    ) -> Result<Option<StateEntry>, StoreError> {
        let mut inner = self.shared.inner.lock();
        if inner.closed {
            return Err(StoreError::Closed);
        }
        let current = inner.current_version(key);
        if let Some(expected) = expected_version {
            if expected != current {
                return Err(StoreError::VersionConflict {
                    current_version: current,
                });
            }
        }
        if current == 0 {
            return Ok(None);
        }
        let now = self.shared.clock.now();
        let slot = inner.slots.get_mut(key).expect("live key has a slot");
        slot.version += 1;
        slot.latest = None;
        let tombstone = StateEntry {
            key: key.clone(),
            value: Vec::new(),
            version: slot.version,
            written_at: now,
        };
        inner.record(WatchEvent {
            entry: tombstone.clone(),
            kind: WatchKind::Delete,
        });
        Ok(Some(tombstone))
    }

    pub fn get(&self, key: &StateKey) -> Option<StateEntry> {
        self.shared
            .inner
            .lock()
            .slots
            .get(key)
            .and_then(|s| s.latest.clone())
    }

    /// Live entries at or under `prefix`, in key order.
    pub fn list(&self, prefix: &StateKey) -> Vec<StateEntry> {
        let inner = self.shared.inner.lock();
        inner
            .slots
            .range(prefix.clone()..)
            .take_while(|(k, _)| prefix.is_prefix_of(k))
            .filter_map(|(_, s)| s.latest.clone())
            .collect()
    }

    /// All live entries in key order.
    pub fn entries(&self) -> Vec<StateEntry> {
        let inner = self.shared.inner.lock();
        inner
            .slots
            .values()
            .filter_map(|s| s.latest.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        let inner = self.shared.inner.lock();
        inner.slots.values().filter(|s| s.latest.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Subscribes to every event under `prefix` with a version greater than
    /// `from_version`. Matching history is replayed first, in write order.
    pub fn watch(&self, prefix: &StateKey, from_version: u64) -> Result<Subscription, StoreError> {
        let mut inner = self.shared.inner.lock();
        if inner.closed {
            return Err(StoreError::SubscriptionClosed);
        }
        let (tx, rx) = mpsc::channel();
        for event in &inner.log {
            if event.entry.version > from_version && prefix.is_prefix_of(&event.entry.key) {
                // The receiver is alive: it is still in this scope.
                let _ = tx.send(event.clone());
            }
        }
        let id = inner.next_watcher;
        inner.next_watcher += 1;
        inner.watchers.push(Watcher {
            id,
            prefix: prefix.clone(),
            tx,
        });
        Ok(Subscription {
            id,
            rx,
            shared: Arc::downgrade(&self.shared),
        })
    }

    /// Starts a barrier on `key` that resolves to the first entry (current or
    /// future) whose value satisfies `predicate`, or times out `timeout`
    /// ticks from now.
    pub fn wait_for<P>(&self, key: &StateKey, predicate: P, timeout: Tick) -> Result<Wait, StoreError>
    where
        P: Fn(&[u8]) -> bool + Send + 'static,
    {
        if timeout == 0 {
            return Err(StoreError::InvalidTimeout);
        }
        let deadline = self.shared.clock.now().saturating_add(timeout);
        let current = self.get(key);
        let from = current.as_ref().map_or(0, |e| e.version);
        let subscription = self.watch(key, from)?;
        Ok(Wait::new(
            key.clone(),
            Box::new(predicate),
            deadline,
            current,
            subscription,
            self.shared.clock.clone(),
        ))
    }

    /// Shuts the store down. Writes fail afterwards and every subscription
    /// ends with [`StoreError::SubscriptionClosed`] once drained.
    pub fn close(&self) {
        let mut inner = self.shared.inner.lock();
        inner.closed = true;
        inner.watchers.clear();
    }

    pub fn is_closed(&self) -> bool {
        self.shared.inner.lock().closed
    }

    pub fn watcher_count(&self) -> usize {
        self.shared.inner.lock().watchers.len()
    }

    /// Serialises every live entry into a snapshot image.
    pub fn snapshot(&self) -> Vec<u8> {
        snapshot::encode(&self.entries())
    }

    /// Rebuilds a store from an image produced by [`StateStore::snapshot`].
    /// Watches are not part of the image.
    pub fn restore(image: &[u8], clock: Clock) -> Result<Self, StoreError> {
        let entries = snapshot::decode(image)?;
        let store = Self::new(clock);
        {
            let mut inner = store.shared.inner.lock();
            for entry in entries {
                if inner.slots.contains_key(&entry.key) {
                    return Err(StoreError::CorruptImage(format!(
                        "duplicate key {}",
                        entry.key
                    )));
                }
                inner.log.push(WatchEvent {
                    entry: entry.clone(),
                    kind: WatchKind::Put,
                });
                inner.slots.insert(
                    entry.key.clone(),
                    Slot {
                        version: entry.version,
                        latest: Some(entry),
                    },
                );
            }
        }
        Ok(store)
    }

    pub fn save_to(&self, backend: &dyn SnapshotBackend) -> Result<(), StoreError> {
        backend.save(&self.snapshot())?;
        Ok(())
    }

    /// Restores from `backend`, or returns an empty store when the backend
    /// holds no image yet.
    pub fn load_from(backend: &dyn SnapshotBackend, clock: Clock) -> Result<Self, StoreError> {
        match backend.load()? {
            Some(image) => Self::restore(&image, clock),
            None => Ok(Self::new(clock)),
        }
    }

    /// Largest `written_at` among live entries.
    pub fn latest_write_tick(&self) -> Tick {
        let inner = self.shared.inner.lock();
        inner
            .slots
            .values()
            .filter_map(|s| s.latest.as_ref().map(|e| e.written_at))
            .max()
            .unwrap_or(0)
    }
}

/// Stream of [`WatchEvent`]s for one watcher. Dropping it unsubscribes.
pub struct Subscription {
    id: u64,
    rx: Receiver<WatchEvent>,
    shared: Weak<Shared>,
}

impl Subscription {
    /// Next buffered event, if any.
    pub fn try_next(&self) -> Result<Option<WatchEvent>, StoreError> {
        match self.rx.try_recv() {
            Ok(ev) => Ok(Some(ev)),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(StoreError::SubscriptionClosed),
        }
    }

    pub fn next_timeout(&self, timeout: Duration) -> Result<Option<WatchEvent>, StoreError> {
        match self.rx.recv_timeout(timeout) {
            Ok(ev) => Ok(Some(ev)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(StoreError::SubscriptionClosed),
        }
    }

    /// Every event buffered so far. Fails only if the store is closed and
    /// nothing was left to drain.
    pub fn drain(&self) -> Result<Vec<WatchEvent>, StoreError> {
        let mut out = Vec::new();
        loop {
            match self.rx.try_recv() {
                Ok(ev) => out.push(ev),
                Err(TryRecvError::Empty) => return Ok(out),
                Err(TryRecvError::Disconnected) if out.is_empty() => {
                    return Err(StoreError::SubscriptionClosed)
                }
                Err(TryRecvError::Disconnected) => return Ok(out),
            }
        }
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        if let Some(shared) = self.shared.upgrade() {
            shared.inner.lock().watchers.retain(|w| w.id != self.id);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(s: &str) -> StateKey {
        StateKey::parse(s).unwrap()
    }

    #[test]
    fn first_write_gets_version_one() {
        let store = StateStore::default();
        let e = store.put(&k("dep/d1/vpn/status"), "READY", None).unwrap();
        assert_eq!(e.version, 1);
        assert_eq!(e.value_str(), Some("READY"));
    }

    #[test]
    fn cas_against_absent_sentinel_conflicts_after_write() {
        let store = StateStore::default();
        let key = k("dep/d1/vpn/status");
        store.put(&key, "READY", None).unwrap();
        match store.put(&key, "RUNNING", Some(0)) {
            Err(StoreError::VersionConflict { current_version }) => assert_eq!(current_version, 1),
            other => panic!("expected conflict, got {other:?}"),
        }
        assert_eq!(store.put(&key, "RUNNING", Some(1)).unwrap().version, 2);
    }

    #[test]
    fn hundred_unconditional_puts_end_at_version_hundred() {
        let store = StateStore::default();
        let key = k("counter");
        let mut oracle = 0u64;
        for i in 0..100 {
            store.put(&key, format!("{i}"), None).unwrap();
            oracle += 1;
        }
        assert_eq!(store.get(&key).unwrap().version, oracle);
        assert_eq!(oracle, 100);
    }

    #[test]
    fn value_size_limit() {
        let store = StateStore::default();
        let ok = vec![0u8; MAX_VALUE_LEN];
        assert!(store.put(&k("big"), ok, None).is_ok());
        let too_big = vec![0u8; MAX_VALUE_LEN + 1];
        assert!(matches!(
            store.put(&k("big"), too_big, None),
            Err(StoreError::ValueTooLarge { .. })
        ));
    }

    #[test]
    fn get_absent_and_read_your_write() {
        let store = StateStore::default();
        assert!(store.get(&k("nope")).is_none());
        store.put(&k("a"), "v", None).unwrap();
        let e = store.get(&k("a")).unwrap();
        assert_eq!((e.value.as_slice(), e.version), (&b"v"[..], 1));
    }

    #[test]
    fn delete_keeps_counting_versions() {
        let store = StateStore::default();
        let key = k("x");
        store.put(&key, "1", None).unwrap();
        let tomb = store.delete(&key, None).unwrap().unwrap();
        assert_eq!(tomb.version, 2);
        assert!(store.get(&key).is_none());
        assert!(store.delete(&key, None).unwrap().is_none());
        // Absent again, so CAS on 0 succeeds and continues the counter.
        assert_eq!(store.put(&key, "3", Some(0)).unwrap().version, 3);
    }

    #[test]
    fn watch_sees_writes_in_order() {
        let store = StateStore::default();
        let sub = store.watch(&k("dep/d1"), 0).unwrap();
        let mut log = Vec::new();
        for (key, v) in [("dep/d1/a", "1"), ("dep/d1/b", "2"), ("dep/d1/a", "3")] {
            log.push(store.put(&k(key), v, None).unwrap());
        }
        let events: Vec<_> = sub.drain().unwrap().into_iter().map(|e| e.entry).collect();
        assert_eq!(events, log);
    }

    #[test]
    fn watch_prefix_mismatch_sees_nothing() {
        let store = StateStore::default();
        let sub = store.watch(&k("dep/d2"), 0).unwrap();
        for i in 0..3 {
            store.put(&k(&format!("dep/d1/k{i}")), "v", None).unwrap();
        }
        assert!(sub.drain().unwrap().is_empty());
    }

    #[test]
    fn watch_from_version_replays_only_newer() {
        let store = StateStore::default();
        let key = k("w");
        let log: Vec<_> = (1..=4)
            .map(|i| store.put(&key, format!("{i}"), None).unwrap())
            .collect();
        let sub = store.watch(&key, 2).unwrap();
        let seen: Vec<u64> = sub.drain().unwrap().iter().map(|e| e.entry.version).collect();
        let expected: Vec<u64> = log.iter().map(|e| e.version).filter(|v| *v > 2).collect();
        assert_eq!(seen, expected);
        assert_eq!(seen, vec![3, 4]);
    }

    #[test]
    fn watch_reports_deletes() {
        let store = StateStore::default();
        let key = k("d/x");
        store.put(&key, "a", None).unwrap();
        let sub = store.watch(&k("d"), 1).unwrap();
        store.delete(&key, None).unwrap();
        let events = sub.drain().unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, WatchKind::Delete);
        assert_eq!(events[0].entry.version, 2);
    }

    #[test]
    fn close_ends_subscriptions() {
        let store = StateStore::default();
        let sub = store.watch(&k("a"), 0).unwrap();
        store.put(&k("a"), "1", None).unwrap();
        store.close();
        assert_eq!(sub.drain().unwrap().len(), 1);
        assert!(matches!(sub.try_next(), Err(StoreError::SubscriptionClosed)));
        assert!(matches!(
            store.put(&k("a"), "2", None),
            Err(StoreError::Closed)
        ));
        assert!(matches!(
            store.watch(&k("a"), 0),
            Err(StoreError::SubscriptionClosed)
        ));
    }

    #[test]
    fn dropping_subscription_unregisters() {
        let store = StateStore::default();
        let sub = store.watch(&k("a"), 0).unwrap();
        assert_eq!(store.watcher_count(), 1);
        drop(sub);
        assert_eq!(store.watcher_count(), 0);
    }

    #[test]
    fn list_is_prefix_scoped() {
        let store = StateStore::default();
        for key in ["deploy/d1/a", "deploy/d1/b/c", "deploy/d10/a", "deploy/d2"] {
            store.put(&k(key), "v", None).unwrap();
        }
        let keys: Vec<String> = store
            .list(&k("deploy/d1"))
            .into_iter()
            .map(|e| e.key.render())
            .collect();
        assert_eq!(keys, vec!["deploy/d1/a", "deploy/d1/b/c"]);
    }

    #[test]
    fn written_at_comes_from_clock() {
        let clock = Clock::new();
        let store = StateStore::new(clock.clone());
        clock.advance_to(42);
        assert_eq!(store.put(&k("t"), "v", None).unwrap().written_at, 42);
    }

    #[test]
    fn interleaved_reads_never_go_backwards() {
        // Replay a fixed interleaving against a linear history oracle.
        let store = StateStore::default();
        let keys = [k("a"), k("b")];
        let mut oracle = [0u64; 2];
        let mut last_seen = [0u64; 2];
        for step in 0..60u64 {
            let i = (step * 7 % 5 % 2) as usize;
            if step % 3 == 0 {
                let seen = store.get(&keys[i]).map_or(0, |e| e.version);
                assert_eq!(seen, oracle[i]);
                assert!(seen >= last_seen[i]);
                last_seen[i] = seen;
            } else {
                store.put(&keys[i], "v", None).unwrap();
                oracle[i] += 1;
            }
        }
    }
}
