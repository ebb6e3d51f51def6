//! Bounded message queues. Items are copied word by word through buffers only
//! the runtime holds capabilities for.

use super::{System, TaskState};
use crate::capmachine::{Capability, FaultKind, Perms, Violation};
use crate::faulthandling::{dispatch_fault, Continuation};
use crate::loader::Region;

/// Entry cost of a queue operation (argument checks, bookkeeping).
pub const IPC_ENTRY_COST: u64 = 6;
/// Per copied word: one load and one store.
pub const IPC_WORD_COST: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueOp {
    Send,
    Recv,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Queue {
    pub name: String,
    pub capacity: u32,
    pub item_size: u32,
    /// Compartments allowed to send or receive.
    pub users: Vec<u32>,
    pub buffer: Region,
    head: u32,
    len: u32,
}

impl Queue {
    pub fn new(name: &str, capacity: u32, item_size: u32, users: Vec<u32>, buffer: Region) -> Queue {
        Queue { name: name.to_string(), capacity, item_size, users, buffer, head: 0, len: 0 }
    }

    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity
    }

    fn slot(&self, i: u32) -> u32 {
        self.buffer.base + ((self.head + i) % self.capacity) * self.item_size
    }

    pub fn copy_cost(&self) -> u64 {
        IPC_ENTRY_COST + IPC_WORD_COST * self.item_size.div_ceil(4) as u64
    }
}

impl System {
    /// Complete a `qsend`/`qrecv` for task `t`, block it, or fault it.
    pub(super) fn queue_service(&mut self, t: usize, q: u32, op: QueueOp, cap: Capability) -> Continuation {
        match self.try_queue(q, op, cap) {
            Err(v) => {
                let f = self.linked.machine.fault(v);
                dispatch_fault(self, t, f)
            }
            Ok(false) => {
                // The instruction re-executes once a peer makes progress.
                self.tasks[t].state = TaskState::Blocked;
                self.tasks[t].blocked_on = Some((q, op));
                Continuation::Stop
            }
            Ok(true) => {
                let cost = self.queues[q as usize].copy_cost();
                let m = &mut self.linked.machine;
                m.charge(cost);
                m.complete_service();
                let wake = match op {
                    QueueOp::Send => QueueOp::Recv,
                    QueueOp::Recv => QueueOp::Send,
                };
                for task in self.tasks.iter_mut() {
                    if task.state == TaskState::Blocked && task.blocked_on == Some((q, wake)) {
                        task.state = TaskState::Ready;
                        task.blocked_on = None;
                    }
                }
                Continuation::Resume
            }
        }
    }

    /// `Ok(true)` when the item moved, `Ok(false)` when the caller must wait.
    fn try_queue(&mut self, q: u32, op: QueueOp, cap: Capability) -> Result<bool, Violation> {
        let m = &mut self.linked.machine;
        let queue = self
            .queues
            .get_mut(q as usize)
            .ok_or_else(|| Violation::new(FaultKind::IllegalInstruction, format!("no queue {q}")))?;
        if !queue.users.contains(&m.ctx.compid) {
            return Err(Violation::new(
                FaultKind::PermViolation,
                format!("compartment {} may not use queue {}", m.ctx.compid, queue.name),
            ));
        }
        let (need, len) = match op {
            QueueOp::Send => (Perms::LOAD, queue.item_size),
            QueueOp::Recv => (Perms::STORE, queue.item_size),
        };
        let addr = m.mem.check_access(&cap, 0, len, need, m.enforcement())?;
        match op {
            QueueOp::Send => {
                if queue.is_full() {
                    return Ok(false);
                }
                let item = m.mem.read_bytes(addr, len).to_vec();
                m.mem.write_bytes(queue.slot(queue.len), &item);
                queue.len += 1;
            }
            QueueOp::Recv => {
                if queue.is_empty() {
                    return Ok(false);
                }
                let item = m.mem.read_bytes(queue.slot(0), len).to_vec();
                m.mem.write_bytes(addr, &item);
                queue.head = (queue.head + 1) % queue.capacity;
                queue.len -= 1;
            }
        }
        Ok(true)
    }
}
