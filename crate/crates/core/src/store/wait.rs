use crate::clock::{Clock, Tick};

use super::{StateEntry, StateKey, StoreError, Subscription, WatchKind};

type Predicate = Box<dyn Fn(&[u8]) -> bool + Send>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WaitStatus {
    Ready(StateEntry),
    Pending,
    TimedOut { deadline: Tick },
}

/// A pending barrier created by [`StateStore::wait_for`](super::StateStore::wait_for).
///
/// The barrier never blocks: whoever drives the clock calls [`Wait::poll`]
/// after each event. The first satisfying write at or before the deadline
/// wins; after that the outcome is fixed.
pub struct Wait {
    key: StateKey,
    predicate: Predicate,
    deadline: Tick,
    outcome: Option<StateEntry>,
    subscription: Subscription,
    clock: Clock,
}

impl Wait {
    pub(super) fn new(
        key: StateKey,
        predicate: Predicate,
        deadline: Tick,
        current: Option<StateEntry>,
        subscription: Subscription,
        clock: Clock,
    ) -> Self {
        let outcome = current.filter(|e| predicate(&e.value));
        Self {
            key,
            predicate,
            deadline,
            outcome,
            subscription,
            clock,
        }
    }

    pub fn key(&self) -> &StateKey {
        &self.key
    }

    pub fn deadline(&self) -> Tick {
        self.deadline
    }

    pub fn poll(&mut self) -> WaitStatus {
        if let Some(entry) = &self.outcome {
            return WaitStatus::Ready(entry.clone());
        }
        // A closed store cannot produce more writes; fall through to the
        // deadline check.
        if let Ok(events) = self.subscription.drain() {
            for ev in events {
                if ev.entry.key != self.key || ev.kind != WatchKind::Put {
                    continue;
                }
                if ev.entry.written_at <= self.deadline && (self.predicate)(&ev.entry.value) {
                    self.outcome = Some(ev.entry.clone());
                    return WaitStatus::Ready(ev.entry);
                }
            }
        }
        if self.clock.now() >= self.deadline {
            WaitStatus::TimedOut {
                deadline: self.deadline,
            }
        } else {
            WaitStatus::Pending
        }
    }

    /// Polls once and converts the result; `Pending` stays `Ok(None)`.
    pub fn try_resolve(&mut self) -> Result<Option<StateEntry>, StoreError> {
        match self.poll() {
            WaitStatus::Ready(e) => Ok(Some(e)),
            WaitStatus::Pending => Ok(None),
            WaitStatus::TimedOut { deadline } => Err(StoreError::Timeout {
                key: self.key.clone(),
                deadline,
            }),
        }
    }
}
