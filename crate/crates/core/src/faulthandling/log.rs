//! Append-only record of every trap and what recovery did about it.

use serde::Serialize;

use crate::capmachine::FaultKind;

/// Bumped whenever a field of [`FaultLogEntry`] changes meaning.
pub const FAULT_LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Outcome {
    /// Recovery still running (unwind or handler in progress).
    Pending,
    /// The caller resumed after its call with `code` in `x0`.
    ReturnedError { code: u32 },
    /// A custom handler ran and the caller resumed with its `x0`.
    HandlerReturned { code: u32 },
    /// Nothing to return to, or the return path was unusable.
    TaskDead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FaultLogEntry {
    pub v: u32,
    pub seq: usize,
    pub task: usize,
    pub kind: FaultKind,
    pub compartment: Option<String>,
    pub pc: u32,
    pub depth: usize,
    pub detail: String,
    /// Strategy applied, `escalated_kill` when recovery itself faulted.
    pub strategy: String,
    pub killed: bool,
    pub rebooted: bool,
    /// Instructions charged to recovery, trap entry to the caller's resumption.
    pub recovery_cost: u64,
    pub outcome: Outcome,
    #[serde(skip)]
    pub(crate) cost_start: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultLog {
    entries: Vec<FaultLogEntry>,
}

impl FaultLog {
    pub fn entries(&self) -> &[FaultLogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn push(&mut self, mut e: FaultLogEntry) -> usize {
        e.seq = self.entries.len();
        self.entries.push(e);
        self.entries.len() - 1
    }

    pub(crate) fn get_mut(&mut self, i: usize) -> &mut FaultLogEntry {
        &mut self.entries[i]
    }
}
