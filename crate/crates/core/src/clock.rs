//! Logical time.
//!
//! Everything in the system measures time in ticks taken from a shared
//! [`Clock`]. The simulation harness owns the clock and advances it as it
//! pops events off an [`EventQueue`]; the store and the bus only read it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::Arc;

/// A point in logical time.
pub type Tick = u64;

/// Shared handle to a monotonically non-decreasing tick counter.
#[derive(Debug, Clone, Default)]
pub struct Clock {
    now: Arc<AtomicU64>,
}

impl Clock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(tick: Tick) -> Self {
        Self {
            now: Arc::new(AtomicU64::new(tick)),
        }
    }

    pub fn now(&self) -> Tick {
        self.now.load(AtomicOrdering::SeqCst)
    }

    /// Moves the clock forward to `tick`. Earlier ticks are ignored, so time
    /// never decreases.
    pub fn advance_to(&self, tick: Tick) -> Tick {
        self.now.fetch_max(tick, AtomicOrdering::SeqCst).max(tick)
    }

    pub fn advance_by(&self, delta: Tick) -> Tick {
        self.now.fetch_add(delta, AtomicOrdering::SeqCst) + delta
    }

    /// True when both handles share the same counter.
    pub fn same_as(&self, other: &Clock) -> bool {
        Arc::ptr_eq(&self.now, &other.now)
    }
}

struct Scheduled<E> {
    at: Tick,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // Reversed so the max-heap pops the earliest (tick, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Pending events ordered by `(tick, insertion sequence)`.
///
/// Popping an event advances the attached clock to the event's tick, so
/// two queues fed the same schedule always replay in the same order.
pub struct EventQueue<E> {
    clock: Clock,
    heap: BinaryHeap<Scheduled<E>>,
    seq: u64,
}

impl<E> EventQueue<E> {
    pub fn new(clock: Clock) -> Self {
        Self {
            clock,
            heap: BinaryHeap::new(),
            seq: 0,
        }
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn now(&self) -> Tick {
        self.clock.now()
    }

    /// Schedules `event` at `at`; ticks in the past are clamped to now.
    pub fn schedule_at(&mut self, at: Tick, event: E) {
        let at = at.max(self.clock.now());
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Scheduled { at, seq, event });
    }

    pub fn schedule_in(&mut self, delay: Tick, event: E) {
        let at = self.clock.now().saturating_add(delay);
        self.schedule_at(at, event);
    }

    pub fn peek_tick(&self) -> Option<Tick> {
        self.heap.peek().map(|s| s.at)
    }

    /// Removes the earliest event and advances the clock to its tick.
    pub fn pop(&mut self) -> Option<(Tick, E)> {
        let next = self.heap.pop()?;
        self.clock.advance_to(next.at);
        Some((next.at, next.event))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn clear(&mut self) {
        self.heap.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clock_never_moves_backwards() {
        let clock = Clock::new();
        assert_eq!(clock.advance_to(10), 10);
        assert_eq!(clock.advance_to(4), 10);
        assert_eq!(clock.now(), 10);
        assert_eq!(clock.advance_by(5), 15);
    }

    #[test]
    fn shared_handles_observe_the_same_time() {
        let a = Clock::new();
        let b = a.clone();
        a.advance_to(7);
        assert_eq!(b.now(), 7);
        assert!(a.same_as(&b));
        assert!(!a.same_as(&Clock::new()));
    }

    #[test]
    fn queue_pops_in_tick_then_sequence_order() {
        let clock = Clock::new();
        let mut q = EventQueue::new(clock.clone());
        q.schedule_at(5, "c");
        q.schedule_at(1, "a");
        q.schedule_at(5, "d");
        q.schedule_at(3, "b");
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).collect();
        assert_eq!(order, vec![(1, "a"), (3, "b"), (5, "c"), (5, "d")]);
        assert_eq!(clock.now(), 5);
    }

    #[test]
    fn past_events_are_clamped_to_now() {
        let clock = Clock::starting_at(20);
        let mut q = EventQueue::new(clock);
        q.schedule_at(3, ());
        assert_eq!(q.peek_tick(), Some(20));
    }
}
