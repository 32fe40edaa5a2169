use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Priority {
    High,
    Low,
}

impl Priority {
    pub fn as_str(self) -> &'static str {
        match self {
            Priority::High => "high",
            Priority::Low => "low",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Discipline {
    Fifo,
    StrictPriority,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Accepted,
    /// The arriving packet was dropped.
    Dropped,
    /// The arrival was accepted by evicting the newest low-priority packet.
    Displaced { evicted: u64 },
}

/// Bounded waiting room in front of the uplink, kept as two class queues
/// tagged with an arrival sequence so FIFO order survives switching
/// between disciplines.
#[derive(Debug, Clone)]
pub struct GatewayQueue {
    capacity: usize,
    next_seq: u64,
    high: VecDeque<(u64, u64)>,
    low: VecDeque<(u64, u64)>,
}

impl GatewayQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            next_seq: 0,
            high: VecDeque::new(),
            low: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.high.len() + self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Drop-tail admission. Under strict priority a high-priority arrival to
    /// a full queue evicts the most recent low-priority packet if one exists.
    pub fn enqueue(&mut self, packet: u64, priority: Priority, discipline: Discipline) -> EnqueueOutcome {
        let mut outcome = EnqueueOutcome::Accepted;
        if self.len() >= self.capacity {
            match (discipline, priority, self.low.pop_back()) {
                (Discipline::StrictPriority, Priority::High, Some((_, evicted))) => {
                    outcome = EnqueueOutcome::Displaced { evicted };
                }
                (_, _, popped) => {
                    if let Some(p) = popped {
                        self.low.push_back(p);
                    }
                    return EnqueueOutcome::Dropped;
                }
            }
        }
        let entry = (self.next_seq, packet);
        self.next_seq += 1;
        match priority {
            Priority::High => self.high.push_back(entry),
            Priority::Low => self.low.push_back(entry),
        }
        outcome
    }

    pub fn dequeue(&mut self, discipline: Discipline) -> Option<u64> {
        let from_high = match (discipline, self.high.front(), self.low.front()) {
            (_, None, None) => return None,
            (_, Some(_), None) => true,
            (_, None, Some(_)) => false,
            (Discipline::StrictPriority, Some(_), Some(_)) => true,
            (Discipline::Fifo, Some(h), Some(l)) => h.0 < l.0,
        };
        let queue = if from_high { &mut self.high } else { &mut self.low };
        queue.pop_front().map(|(_, id)| id)
    }
}
