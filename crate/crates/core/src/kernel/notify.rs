use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::{JobId, ParseError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Notification {
    Scheduling,
    /// A cancellation was requested; the payload is the first job named.
    Term(JobId),
    ChState,
    Monitoring,
    Shutdown,
}

/// Notification kind without payload; the unit of coalescing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NotificationKind {
    Scheduling,
    Term,
    ChState,
    Monitoring,
    Shutdown,
}

impl NotificationKind {
    pub const ALL: [NotificationKind; 5] = [
        NotificationKind::Scheduling,
        NotificationKind::Term,
        NotificationKind::ChState,
        NotificationKind::Monitoring,
        NotificationKind::Shutdown,
    ];
}

impl fmt::Display for NotificationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for NotificationKind {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NotificationKind::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| ParseError::new(format!("unknown notification kind '{s}'")))
    }
}

impl Notification {
    pub fn kind(&self) -> NotificationKind {
        match self {
            Notification::Scheduling => NotificationKind::Scheduling,
            Notification::Term(_) => NotificationKind::Term,
            Notification::ChState => NotificationKind::ChState,
            Notification::Monitoring => NotificationKind::Monitoring,
            Notification::Shutdown => NotificationKind::Shutdown,
        }
    }
}

#[derive(Debug, Default)]
struct Inner {
    queue: VecDeque<Notification>,
    drop_next: Vec<NotificationKind>,
    dropped: u64,
    coalesced: u64,
}

/// FIFO of notifications holding at most one per kind. Safe to share
/// between threads; [`NotificationBuffer::wait`] blocks until something
/// arrives.
#[derive(Debug, Default)]
pub struct NotificationBuffer {
    inner: Mutex<Inner>,
    ready: Condvar,
}

impl NotificationBuffer {
    pub fn new() -> NotificationBuffer {
        NotificationBuffer::default()
    }

    /// Enqueues unless a notification of the same kind is pending. Returns
    /// whether it was enqueued.
    pub fn notify(&self, n: Notification) -> bool {
        let mut inner = self.inner.lock().expect("buffer lock");
        if let Some(pos) = inner.drop_next.iter().position(|k| *k == n.kind()) {
            inner.drop_next.remove(pos);
            inner.dropped += 1;
            return false;
        }
        if inner.queue.iter().any(|p| p.kind() == n.kind()) {
            inner.coalesced += 1;
            return false;
        }
        inner.queue.push_back(n);
        self.ready.notify_all();
        true
    }

    pub fn pop(&self) -> Option<Notification> {
        self.inner.lock().expect("buffer lock").queue.pop_front()
    }

    /// Waits up to `timeout` for a notification to be pending.
    pub fn wait(&self, timeout: Duration) -> bool {
        let inner = self.inner.lock().expect("buffer lock");
        let (inner, _) = self
            .ready
            .wait_timeout_while(inner, timeout, |i| i.queue.is_empty())
            .expect("buffer lock");
        !inner.queue.is_empty()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("buffer lock").queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pending(&self) -> Vec<Notification> {
        self.inner.lock().expect("buffer lock").queue.iter().copied().collect()
    }

    /// Loses the next notification of `kind`, as if the message never
    /// arrived.
    pub fn drop_next(&self, kind: NotificationKind) {
        self.inner.lock().expect("buffer lock").drop_next.push(kind);
    }

    pub fn dropped(&self) -> u64 {
        self.inner.lock().expect("buffer lock").dropped
    }

    pub fn coalesced(&self) -> u64 {
        self.inner.lock().expect("buffer lock").coalesced
    }
}
