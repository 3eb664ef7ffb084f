use std::collections::BTreeMap;

use crate::model::Time;

/// Handle for withdrawing a scheduled event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventKey(Time, u64);

/// Discrete-event clock. Events fire in time order, ties in insertion
/// order; `now` never decreases.
#[derive(Debug, Clone)]
pub struct VirtualClock<E> {
    now: Time,
    seq: u64,
    pending: BTreeMap<EventKey, E>,
}

impl<E> Default for VirtualClock<E> {
    fn default() -> Self {
        VirtualClock::new(0)
    }
}

impl<E> VirtualClock<E> {
    pub fn new(start: Time) -> VirtualClock<E> {
        VirtualClock {
            now: start,
            seq: 0,
            pending: BTreeMap::new(),
        }
    }

    pub fn now(&self) -> Time {
        self.now
    }

    /// Queues `event` at `at`; instants in the past are moved to `now`.
    pub fn schedule(&mut self, at: Time, event: E) -> EventKey {
        let key = EventKey(at.max(self.now), self.seq);
        self.seq += 1;
        self.pending.insert(key, event);
        key
    }

    /// Withdraws a pending event. Returns it if it had not fired.
    pub fn cancel(&mut self, key: EventKey) -> Option<E> {
        self.pending.remove(&key)
    }

    pub fn peek_time(&self) -> Option<Time> {
        self.pending.keys().next().map(|k| k.0)
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn pending(&self) -> impl Iterator<Item = (Time, &E)> {
        self.pending.iter().map(|(k, e)| (k.0, e))
    }

    /// Pops the earliest event and moves `now` to its instant.
    pub fn advance(&mut self) -> Option<(Time, E)> {
        let (key, event) = self.pending.pop_first()?;
        self.now = key.0;
        Some((key.0, event))
    }

    /// Pops the earliest event only if it is due at `now`.
    pub fn pop_due(&mut self) -> Option<E> {
        match self.peek_time() {
            Some(t) if t <= self.now => self.pending.pop_first().map(|(_, e)| e),
            _ => None,
        }
    }

    /// Moves `now` forward to `t` without firing anything. Refused when an
    /// event is pending before `t` or `t` is in the past.
    pub fn advance_to(&mut self, t: Time) -> bool {
        if t < self.now || self.peek_time().is_some_and(|p| p < t) {
            return false;
        }
        self.now = t;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_clock_yields_none() {
        let mut c: VirtualClock<()> = VirtualClock::new(0);
        assert_eq!(c.advance(), None);
        assert_eq!(c.now(), 0);
    }

    #[test]
    fn earliest_first() {
        let mut c = VirtualClock::new(0);
        c.schedule(5, "five");
        c.schedule(3, "three");
        assert_eq!(c.advance(), Some((3, "three")));
        assert_eq!(c.advance(), Some((5, "five")));
    }

    #[test]
    fn ties_in_insertion_order() {
        let mut c = VirtualClock::new(0);
        for i in 0..5 {
            c.schedule(7, i);
        }
        let order: Vec<i32> = std::iter::from_fn(|| c.advance().map(|(_, e)| e)).collect();
        assert_eq!(order, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn cancelled_event_never_fires() {
        let mut c = VirtualClock::new(0);
        let k = c.schedule(4, 'a');
        c.schedule(6, 'b');
        assert_eq!(c.cancel(k), Some('a'));
        assert_eq!(c.advance(), Some((6, 'b')));
        assert_eq!(c.cancel(k), None);
    }

    #[test]
    fn advance_to_refuses_to_skip_events() {
        let mut c = VirtualClock::new(10);
        c.schedule(20, ());
        assert!(!c.advance_to(5));
        assert!(!c.advance_to(25));
        assert!(c.advance_to(20));
        assert_eq!(c.pop_due(), Some(()));
    }

    proptest! {
        #[test]
        fn now_never_decreases(ops in prop::collection::vec((0i64..50, prop::bool::ANY), 1..60)) {
            let mut c = VirtualClock::new(0);
            let mut last = c.now();
            for (i, (dt, pop)) in ops.into_iter().enumerate() {
                if pop {
                    c.advance();
                } else {
                    c.schedule(c.now() + dt - 10, i);
                }
                prop_assert!(c.now() >= last);
                last = c.now();
            }
        }
    }
}
