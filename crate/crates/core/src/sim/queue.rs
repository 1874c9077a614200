//! Virtual-time event queue ordered by (time, insertion sequence).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::addr::Gva;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    /// Tracked executes its next operation.
    Write,
    /// userfaultfd fault on `gva`; `missing` when the page was absent.
    PageFault {
        gva: Gva,
        missing: bool,
    },
    /// Tracked's time slice ran out.
    Schedule,
    VmExit,
    SelfIpi,
    Softirq,
    RingDrain {
        periodic: bool,
    },
    CheckpointTick,
    MigrationRound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub vm: usize,
    pub kind: EventKind,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    seq: u64,
    last: Option<(f64, u64)>,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: f64, vm: usize, kind: EventKind) {
        debug_assert!(time.is_finite(), "event at {time}");
        self.seq += 1;
        self.heap.push(Event {
            time,
            seq: self.seq,
            vm,
            kind,
        });
    }

    pub fn pop(&mut self) -> Option<Event> {
        let e = self.heap.pop()?;
        if let Some((t, _)) = self.last {
            debug_assert!(e.time >= t, "event order violated");
        }
        self.last = Some((e.time, e.seq));
        Some(e)
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_by_time_then_seq() {
        let mut q = EventQueue::new();
        q.push(5.0, 0, EventKind::Write);
        q.push(1.0, 0, EventKind::VmExit);
        q.push(5.0, 1, EventKind::Softirq);
        q.push(1.0, 0, EventKind::SelfIpi);
        let got: Vec<_> = std::iter::from_fn(|| q.pop()).map(|e| (e.time, e.kind)).collect();
        assert_eq!(
            got,
            vec![
                (1.0, EventKind::VmExit),
                (1.0, EventKind::SelfIpi),
                (5.0, EventKind::Write),
                (5.0, EventKind::Softirq)
            ]
        );
    }
}
