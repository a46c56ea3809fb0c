use std::sync::Arc;

use super::queue::{BoundedQueue, QueueError};

/// Output queues of one operator, one per worker.
pub type ProducerSet<T> = Arc<Vec<BoundedQueue<Msg<T>>>>;

pub fn producer_set<T>(workers: usize, capacity: usize) -> ProducerSet<T> {
    Arc::new((0..workers).map(|_| BoundedQueue::new(capacity)).collect())
}

/// What a worker writes to its output queue.
#[derive(Debug)]
pub enum Msg<T> {
    Item(T),
    /// This worker is retired; continue with the given queue set.
    Switch(ProducerSet<T>),
    /// No more items.
    End,
}

#[derive(Debug, PartialEq)]
pub enum PollEvent<T> {
    /// The item went to `local_queues[consumer]`; the round is not complete.
    Staged { consumer: usize },
    /// `expect_consumer` wrapped: the whole staged round, with consumer ids.
    Released(Vec<(usize, T)>),
    /// Every producer has finished.
    Exhausted,
}

/// Round-robin staging towards `consumer_size` consumers.
#[derive(Debug)]
pub struct Stager<T> {
    local_queues: Vec<Option<T>>,
    expect_consumer: usize,
}

impl<T> Stager<T> {
    pub fn new(consumer_size: usize) -> Self {
        assert!(consumer_size > 0);
        Self {
            local_queues: (0..consumer_size).map(|_| None).collect(),
            expect_consumer: 0,
        }
    }

    pub fn consumer_size(&self) -> usize {
        self.local_queues.len()
    }

    pub fn expect_consumer(&self) -> usize {
        self.expect_consumer
    }

    pub fn stage(&mut self, item: T) -> PollEvent<T> {
        let consumer = self.expect_consumer;
        self.local_queues[consumer] = Some(item);
        self.expect_consumer = (consumer + 1) % self.local_queues.len();
        if self.expect_consumer == 0 {
            PollEvent::Released(self.flush())
        } else {
            PollEvent::Staged { consumer }
        }
    }

    /// Releases a partial round and restarts at consumer 0.
    pub fn flush(&mut self) -> Vec<(usize, T)> {
        self.expect_consumer = 0;
        self.local_queues
            .iter_mut()
            .enumerate()
            .filter_map(|(i, s)| s.take().map(|x| (i, x)))
            .collect()
    }

    /// Changes the consumer count; any partial round must be flushed first.
    pub fn resize(&mut self, consumer_size: usize) {
        assert!(consumer_size > 0);
        debug_assert!(
            self.local_queues.iter().all(Option::is_none),
            "resize with staged items"
        );
        self.local_queues = (0..consumer_size).map(|_| None).collect();
        self.expect_consumer = 0;
    }
}

/// Junction between an operator's workers (producers) and the next
/// operator's workers (consumers), polled by a single thread.
///
/// Producer `w` receives the items whose arrival index is `w` modulo the
/// producer count, so popping the producer queues in turn yields items in
/// arrival order.
#[derive(Debug)]
pub struct Connector<T> {
    queues: ProducerSet<T>,
    pop_from: usize,
    stager: Stager<T>,
    exhausted: bool,
}

impl<T> Connector<T> {
    pub fn new(producer_size: usize, consumer_size: usize, capacity: usize) -> Self {
        Self::with_producers(producer_set(producer_size, capacity), consumer_size)
    }

    pub fn with_producers(queues: ProducerSet<T>, consumer_size: usize) -> Self {
        assert!(!queues.is_empty());
        Self {
            queues,
            pop_from: 0,
            stager: Stager::new(consumer_size),
            exhausted: false,
        }
    }

    pub fn producers(&self) -> ProducerSet<T> {
        self.queues.clone()
    }

    pub fn producer_size(&self) -> usize {
        self.queues.len()
    }

    pub fn pop_from(&self) -> usize {
        self.pop_from
    }

    pub fn expect_consumer(&self) -> usize {
        self.stager.expect_consumer()
    }

    /// Blocking push into producer `worker_id`'s queue.
    pub fn push(&self, worker_id: usize, item: T) -> Result<(), QueueError> {
        self.queues[worker_id].push(Msg::Item(item))
    }

    /// Signals that producer `worker_id` has finished.
    pub fn finish(&self, worker_id: usize) -> Result<(), QueueError> {
        self.queues[worker_id].push(Msg::End)
    }

    /// Pops the next item in arrival order without staging it, following
    /// queue-set switches. `None` once every producer has finished.
    pub fn next_item(&mut self) -> Result<Option<T>, QueueError> {
        if self.exhausted {
            return Ok(None);
        }
        loop {
            match self.queues[self.pop_from].pop()? {
                Msg::Item(item) => {
                    self.pop_from = (self.pop_from + 1) % self.queues.len();
                    return Ok(Some(item));
                }
                Msg::Switch(next) => {
                    self.drain_markers()?;
                    self.queues = next;
                    self.pop_from = 0;
                }
                Msg::End => {
                    self.drain_markers()?;
                    self.exhausted = true;
                    return Ok(None);
                }
            }
        }
    }

    /// Every item older than the marker just seen has been popped, so the
    /// other producers hold only their own marker.
    fn drain_markers(&mut self) -> Result<(), QueueError> {
        for (i, q) in self.queues.iter().enumerate() {
            if i != self.pop_from {
                let msg = q.pop()?;
                debug_assert!(
                    !matches!(msg, Msg::Item(_)),
                    "item behind a marker in producer {i}"
                );
            }
        }
        Ok(())
    }

    /// Stages an item for the next consumer in turn.
    pub fn stage(&mut self, item: T) -> PollEvent<T> {
        self.stager.stage(item)
    }

    /// One polling step: pop from `queues[pop_from]` and stage into
    /// `local_queues[expect_consumer]`.
    pub fn poll(&mut self) -> Result<PollEvent<T>, QueueError> {
        Ok(match self.next_item()? {
            Some(item) => self.stage(item),
            None => PollEvent::Exhausted,
        })
    }

    pub fn flush(&mut self) -> Vec<(usize, T)> {
        self.stager.flush()
    }

    pub fn set_consumer_size(&mut self, consumer_size: usize) {
        self.stager.resize(consumer_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference recurrence for the two counters, simulated on plain integers.
    fn simulate(
        producers: usize,
        consumers: usize,
        items: usize,
    ) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let (mut pop_from, mut expect) = (0, 0);
        let (mut pops, mut stages, mut releases) = (vec![], vec![], vec![]);
        for k in 1..=items {
            pops.push(pop_from);
            pop_from = (pop_from + 1) % producers;
            stages.push(expect);
            expect = (expect + 1) % consumers;
            if expect == 0 {
                releases.push(k);
            }
        }
        (pops, stages, releases)
    }

    #[test]
    fn single_producer_is_fifo() {
        let mut c = Connector::new(1, 1, 8);
        for i in 0..5 {
            c.push(0, i).unwrap();
        }
        c.finish(0).unwrap();
        let mut out = vec![];
        while let Some(x) = c.next_item().unwrap() {
            out.push(x);
        }
        assert_eq!(out, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn two_producers_interleave() {
        let mut c = Connector::new(2, 1, 4);
        c.push(0, 'A').unwrap();
        c.push(0, 'C').unwrap();
        c.push(1, 'B').unwrap();
        c.push(1, 'D').unwrap();
        let got: Vec<char> = (0..4).map(|_| c.next_item().unwrap().unwrap()).collect();
        assert_eq!(got, vec!['A', 'B', 'C', 'D']);
    }

    #[test]
    fn counters_follow_reference_recurrence() {
        let (pops, stages, releases) = simulate(3, 2, 6);
        let mut c = Connector::new(3, 2, 8);
        for k in 0..6 {
            c.push(k % 3, k).unwrap();
        }
        let mut got_pops = vec![];
        let mut got_stages = vec![];
        let mut got_releases = vec![];
        for k in 1..=6 {
            got_pops.push(c.pop_from());
            got_stages.push(c.expect_consumer());
            match c.poll().unwrap() {
                PollEvent::Staged { consumer } => assert_eq!(consumer, got_stages[k - 1]),
                PollEvent::Released(items) => {
                    got_releases.push(k);
                    assert_eq!(items, vec![(0, k - 2), (1, k - 1)]);
                }
                PollEvent::Exhausted => unreachable!(),
            }
        }
        assert_eq!(got_pops, pops);
        assert_eq!(got_stages, vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(got_stages, stages);
        assert_eq!(got_releases, vec![2, 4, 6]);
        assert_eq!(got_releases, releases);
    }

    #[test]
    fn switch_moves_to_new_producers() {
        let mut c = Connector::new(2, 1, 8);
        let next = producer_set::<u32>(3, 8);
        // old set held items 0..5 round-robin, then everyone switches
        for k in 0..5 {
            c.push(k % 2, k as u32).unwrap();
        }
        for q in c.producers().iter() {
            q.push(Msg::Switch(next.clone())).unwrap();
        }
        for k in 5..11u32 {
            next[(k as usize - 5) % 3].push(Msg::Item(k)).unwrap();
        }
        for q in next.iter() {
            q.push(Msg::End).unwrap();
        }
        let mut out = vec![];
        while let Some(x) = c.next_item().unwrap() {
            out.push(x);
        }
        assert_eq!(out, (0..11).collect::<Vec<_>>());
        assert_eq!(c.producer_size(), 3);
    }

    #[test]
    fn flush_releases_partial_round() {
        let mut c: Connector<u8> = Connector::new(1, 3, 4);
        assert_eq!(c.stage(1), PollEvent::Staged { consumer: 0 });
        assert_eq!(c.stage(2), PollEvent::Staged { consumer: 1 });
        assert_eq!(c.flush(), vec![(0, 1), (1, 2)]);
        assert_eq!(c.expect_consumer(), 0);
    }
}
