use std::collections::VecDeque;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum QueueError {
    /// Closed gracefully and drained.
    #[error("queue closed")]
    Closed,
    /// The pipeline is stopping.
    #[error("pipeline shut down")]
    Shutdown,
}

#[derive(Debug)]
struct State<T> {
    buf: VecDeque<T>,
    capacity: usize,
    closed: bool,
    aborted: bool,
}

/// Blocking FIFO with an adjustable capacity.
#[derive(Debug)]
pub struct BoundedQueue<T> {
    state: Mutex<State<T>>,
    not_empty: Condvar,
    not_full: Condvar,
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            state: Mutex::new(State {
                buf: VecDeque::with_capacity(capacity.min(1024)),
                capacity,
                closed: false,
                aborted: false,
            }),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State<T>> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Blocks while the queue is full.
    pub fn push(&self, item: T) -> Result<(), QueueError> {
        let mut s = self.lock();
        while !s.aborted && !s.closed && s.buf.len() >= s.capacity {
            s = self.not_full.wait(s).unwrap_or_else(|e| e.into_inner());
        }
        if s.aborted {
            return Err(QueueError::Shutdown);
        }
        if s.closed {
            return Err(QueueError::Closed);
        }
        s.buf.push_back(item);
        drop(s);
        self.not_empty.notify_one();
        Ok(())
    }

    /// Blocks while the queue is empty. A closed queue still yields its
    /// remaining items; an aborted one fails immediately.
    pub fn pop(&self) -> Result<T, QueueError> {
        let mut s = self.lock();
        while !s.aborted && !s.closed && s.buf.is_empty() {
            s = self.not_empty.wait(s).unwrap_or_else(|e| e.into_inner());
        }
        self.take(s)
    }

    /// Like [`pop`](Self::pop) with a deadline; `Ok(None)` on timeout.
    pub fn pop_timeout(&self, timeout: Duration) -> Result<Option<T>, QueueError> {
        let deadline = Instant::now() + timeout;
        let mut s = self.lock();
        while !s.aborted && !s.closed && s.buf.is_empty() {
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            s = self
                .not_empty
                .wait_timeout(s, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
        self.take(s).map(Some)
    }

    pub fn try_pop(&self) -> Result<Option<T>, QueueError> {
        let s = self.lock();
        if s.buf.is_empty() && !s.aborted && !s.closed {
            return Ok(None);
        }
        self.take(s).map(Some)
    }

    fn take(&self, mut s: MutexGuard<'_, State<T>>) -> Result<T, QueueError> {
        if s.aborted {
            return Err(QueueError::Shutdown);
        }
        match s.buf.pop_front() {
            Some(item) => {
                drop(s);
                self.not_full.notify_one();
                Ok(item)
            }
            None => Err(QueueError::Closed),
        }
    }

    pub fn len(&self) -> usize {
        self.lock().buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.lock().capacity
    }

    pub fn set_capacity(&self, capacity: usize) {
        assert!(capacity > 0, "queue capacity must be positive");
        self.lock().capacity = capacity;
        self.not_full.notify_all();
    }

    /// True once closed or aborted.
    pub fn is_closed(&self) -> bool {
        let s = self.lock();
        s.closed || s.aborted
    }

    /// No further pushes; pops drain what is left.
    pub fn close(&self) {
        self.lock().closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }

    /// Wakes every waiter with [`QueueError::Shutdown`].
    pub fn abort(&self) {
        self.lock().aborted = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }
}

/// Type-erased abort handle so one registry can stop queues of any item type.
pub(crate) trait Abort: Send + Sync {
    fn abort(&self);
}

impl<T: Send> Abort for BoundedQueue<T> {
    fn abort(&self) {
        BoundedQueue::abort(self)
    }
}

impl<T: Send> Abort for Vec<BoundedQueue<T>> {
    fn abort(&self) {
        self.iter().for_each(BoundedQueue::abort)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;

    #[test]
    fn fifo_and_capacity() {
        let q = BoundedQueue::new(2);
        q.push(1).unwrap();
        q.push(2).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q.pop().unwrap(), 1);
        assert_eq!(q.pop().unwrap(), 2);
        assert_eq!(q.try_pop().unwrap(), None);
    }

    #[test]
    fn full_queue_unblocks_after_pop() {
        let q = Arc::new(BoundedQueue::new(1));
        q.push(0).unwrap();
        let q2 = q.clone();
        let t = thread::spawn(move || q2.push(1));
        thread::sleep(Duration::from_millis(20));
        assert_eq!(q.pop().unwrap(), 0);
        t.join().unwrap().unwrap();
        assert_eq!(q.pop().unwrap(), 1);
    }

    #[test]
    fn close_drains_then_reports_closed() {
        let q = BoundedQueue::new(4);
        q.push(7).unwrap();
        q.close();
        assert_eq!(q.push(8), Err(QueueError::Closed));
        assert_eq!(q.pop(), Ok(7));
        assert_eq!(q.pop(), Err(QueueError::Closed));
    }

    #[test]
    fn abort_wakes_blocked_pop_and_rejects_push() {
        let q = Arc::new(BoundedQueue::<u8>::new(1));
        let q2 = q.clone();
        let t = thread::spawn(move || q2.pop());
        thread::sleep(Duration::from_millis(20));
        q.abort();
        assert_eq!(t.join().unwrap(), Err(QueueError::Shutdown));
        assert_eq!(q.push(1), Err(QueueError::Shutdown));
    }

    #[test]
    fn pop_timeout_expires() {
        let q = BoundedQueue::<u8>::new(1);
        assert_eq!(q.pop_timeout(Duration::from_millis(5)), Ok(None));
    }

    #[test]
    fn raising_capacity_releases_pusher() {
        let q = Arc::new(BoundedQueue::new(1));
        q.push(0).unwrap();
        let q2 = q.clone();
        let t = thread::spawn(move || q2.push(1));
        thread::sleep(Duration::from_millis(20));
        q.set_capacity(2);
        t.join().unwrap().unwrap();
        assert_eq!(q.len(), 2);
    }
}
