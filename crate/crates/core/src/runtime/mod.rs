//! Cooperative task layer: tasks with a compartment context, IPC queues and a
//! round-robin scheduler whose context switches swap CGP with the rest of the
//! register file.

mod queue;

use std::collections::BTreeMap;

use serde::Serialize;

use crate::capmachine::{
    Capability, CompartmentContext, CostCounters, FaultRecord, RegisterFile, Service, StepOutcome, NO_COMPARTMENT,
};
use crate::faulthandling::{dispatch_fault, handler_returned, recovery_step, Continuation, FaultLog};
use crate::loader::{boot, BootError, BootOptions, LinkedSystem, LoadError, ModuleResolver, Region, SecurityPolicy};

pub use queue::{Queue, QueueOp};

/// Modeled cost of saving and restoring the full register file (12 capability
/// registers, 8 integer registers and the compartment id, each saved and restored).
pub const CONTEXT_SWITCH_COST: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Ready,
    Running,
    Blocked,
    Dead,
    Finished,
}

/// Fault-recovery work in progress on a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recovery {
    None,
    /// Executing a trampoline return path on behalf of an unwind.
    Unwinding {
        log: usize,
    },
    /// Running the compartment's custom handler.
    Handler {
        comp: u32,
        log: usize,
        depth: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Task {
    pub id: usize,
    pub name: String,
    pub home: u32,
    pub regs: RegisterFile,
    pub ctx: CompartmentContext,
    pub stack: Region,
    pub state: TaskState,
    pub blocked_on: Option<(u32, QueueOp)>,
    pub counters: CostCounters,
    pub recovery: Recovery,
}

impl Task {
    pub fn entry_depth(&self) -> usize {
        self.ctx.depth()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleOutcome {
    AllDone,
    Deadlock,
    BudgetExhausted,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskReport {
    pub id: usize,
    pub name: String,
    pub state: TaskState,
    pub counters: CostCounters,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub outcome: ScheduleOutcome,
    pub steps: u64,
    pub counters: CostCounters,
    pub context_switches: u64,
    /// Scheduler boundaries at which CGP did not match the current compartment.
    pub coherence_violations: u64,
    pub tasks: Vec<TaskReport>,
}

#[derive(Debug, Clone)]
pub struct System {
    pub linked: LinkedSystem,
    pub tasks: Vec<Task>,
    pub queues: Vec<Queue>,
    pub fault_log: FaultLog,
    current: Option<usize>,
    next: usize,
    pub context_switches: u64,
    pub coherence_violations: u64,
}

impl System {
    pub fn new(linked: LinkedSystem) -> System {
        System {
            linked,
            tasks: Vec::new(),
            queues: Vec::new(),
            fault_log: FaultLog::default(),
            current: None,
            next: 0,
            context_switches: 0,
            coherence_violations: 0,
        }
    }

    /// Boot `policy`, then create its queues and tasks.
    pub fn boot(
        policy: &SecurityPolicy,
        resolve: &mut ModuleResolver<'_>,
        options: BootOptions,
    ) -> Result<System, BootError> {
        let linked = boot(policy, resolve, options)?;
        let mut sys = System::new(linked);
        let mut errors = Vec::new();
        for q in &policy.queues {
            if let Err(e) = sys.create_queue(&q.name, q.capacity, q.item_size, &q.users) {
                errors.push(e);
            }
        }
        for t in &policy.tasks {
            if let Err(e) = sys.create_task(&t.compartment, &t.entry, t.stack_size) {
                errors.push(e);
            }
        }
        if errors.is_empty() {
            Ok(sys)
        } else {
            Err(BootError { errors })
        }
    }

    /// Create a task that starts at function `entry` of compartment `home`.
    pub fn create_task(&mut self, home: &str, entry: &str, stack_size: u32) -> Result<usize, LoadError> {
        let home_id = self.linked.id_of(home)?;
        let c = self.linked.compartment(home_id).unwrap();
        let pcc = c
            .function_cap(entry)
            .ok_or_else(|| LoadError::UnknownSymbol { compartment: home.to_string(), symbol: entry.to_string() })?;
        let cgp = c.cgp();
        let stack = self.linked.alloc_stack(stack_size)?;
        let regs = RegisterFile { pcc, cgp, csp: stack.cap, cra: self.linked.exit_stub, ..RegisterFile::default() };
        let id = self.tasks.len();
        self.tasks.push(Task {
            id,
            name: format!("{home}.{entry}"),
            home: home_id,
            regs,
            ctx: CompartmentContext { compid: home_id, frames: Vec::new() },
            stack,
            state: TaskState::Ready,
            blocked_on: None,
            counters: CostCounters::default(),
            recovery: Recovery::None,
        });
        Ok(id)
    }

    pub fn create_queue(
        &mut self,
        name: &str,
        capacity: u32,
        item_size: u32,
        users: &[String],
    ) -> Result<u32, LoadError> {
        let users = users.iter().map(|u| self.linked.id_of(u)).collect::<Result<Vec<_>, _>>()?;
        let buffer = self.linked.alloc_private(capacity * item_size)?;
        self.queues.push(Queue::new(name, capacity, item_size, users, buffer));
        Ok(self.queues.len() as u32 - 1)
    }

    pub fn queue_id(&self, name: &str) -> Option<u32> {
        self.queues.iter().position(|q| q.name == name).map(|i| i as u32)
    }

    pub fn task_by_name(&self, name: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.name == name)
    }

    /// Task currently loaded in the machine.
    pub fn current_task(&self) -> Option<usize> {
        self.current
    }

    fn save_current(&mut self) {
        if let Some(t) = self.current {
            let m = &self.linked.machine;
            let task = &mut self.tasks[t];
            task.regs = m.regs;
            task.ctx = m.ctx.clone();
        }
    }

    fn switch_to(&mut self, t: usize) {
        if self.current == Some(t) {
            return;
        }
        let had_previous = self.current.is_some();
        self.save_current();
        let task = &self.tasks[t];
        let m = &mut self.linked.machine;
        m.regs = task.regs;
        m.ctx = task.ctx.clone();
        m.recovery_mode = false;
        self.current = Some(t);
        if had_previous {
            self.context_switches += 1;
            m.charge(CONTEXT_SWITCH_COST);
        }
        m.recovery_mode = task.recovery != Recovery::None;
        if !self.cgp_coherent() {
            self.coherence_violations += 1;
        }
    }

    /// Whether the live CGP is the captable of the live compartment id.
    pub fn cgp_coherent(&self) -> bool {
        let m = &self.linked.machine;
        if m.ctx.compid == NO_COMPARTMENT {
            return true;
        }
        match self.linked.compartment(m.ctx.compid) {
            None => false,
            Some(c) => {
                let (a, b) = (m.regs.cgp, c.cgp());
                // A killed compartment's CGP copies are untagged; the range still names it.
                a.base == b.base && a.length == b.length && a.perms == b.perms
            }
        }
    }

    fn pick(&mut self) -> Option<usize> {
        let n = self.tasks.len();
        (0..n).map(|i| (self.next + i) % n).find(|&t| self.tasks[t].state == TaskState::Ready)
    }

    /// Mark the running task and stop executing it.
    pub fn set_current_state(&mut self, state: TaskState) {
        if let Some(t) = self.current {
            self.tasks[t].state = state;
        }
    }

    /// Run tasks round-robin until all are done, all are blocked, or `max_steps` instructions.
    pub fn schedule(&mut self, max_steps: u64) -> RunReport {
        let start = self.linked.machine.counters;
        let mut steps = 0u64;
        let outcome = 'outer: loop {
            let Some(t) = self.pick() else {
                let blocked = self.tasks.iter().any(|t| t.state == TaskState::Blocked);
                break if blocked { ScheduleOutcome::Deadlock } else { ScheduleOutcome::AllDone };
            };
            self.next = (t + 1) % self.tasks.len();
            let before = self.linked.machine.counters;
            self.switch_to(t);
            self.tasks[t].state = TaskState::Running;
            let stop = loop {
                if steps >= max_steps {
                    self.tasks[t].state = TaskState::Ready;
                    break true;
                }
                steps += 1;
                match self.linked.machine.step() {
                    StepOutcome::Executed => recovery_step(self, t),
                    StepOutcome::Halted => {
                        self.tasks[t].state = TaskState::Finished;
                        break false;
                    }
                    StepOutcome::Trapped(f) => {
                        if self.fault(t, f) == Continuation::Stop {
                            break false;
                        }
                    }
                    StepOutcome::Service(Service::Yield) => {
                        self.linked.machine.complete_service();
                        self.tasks[t].state = TaskState::Ready;
                        break false;
                    }
                    StepOutcome::Service(Service::FaultReturn) => {
                        if handler_returned(self, t) == Continuation::Stop {
                            break false;
                        }
                    }
                    StepOutcome::Service(Service::QueueSend { queue, item }) => {
                        if self.queue_service(t, queue, QueueOp::Send, item) == Continuation::Stop {
                            break false;
                        }
                    }
                    StepOutcome::Service(Service::QueueRecv { queue, dest }) => {
                        if self.queue_service(t, queue, QueueOp::Recv, dest) == Continuation::Stop {
                            break false;
                        }
                    }
                }
            };
            let delta = self.linked.machine.counters.since(&before);
            self.tasks[t].counters.add(&delta);
            self.save_current();
            if stop {
                break 'outer ScheduleOutcome::BudgetExhausted;
            }
        };
        RunReport {
            outcome,
            steps,
            counters: self.linked.machine.counters.since(&start),
            context_switches: self.context_switches,
            coherence_violations: self.coherence_violations,
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskReport { id: t.id, name: t.name.clone(), state: t.state, counters: t.counters })
                .collect(),
        }
    }

    fn fault(&mut self, t: usize, f: FaultRecord) -> Continuation {
        dispatch_fault(self, t, f)
    }

    /// Per-compartment capability roots held by tasks right now, and the stacks they own.
    pub fn runtime_roots(&self) -> (BTreeMap<u32, Vec<Capability>>, BTreeMap<u32, Vec<Region>>) {
        let mut roots: BTreeMap<u32, Vec<Capability>> = BTreeMap::new();
        let mut owned: BTreeMap<u32, Vec<Region>> = BTreeMap::new();
        for (i, task) in self.tasks.iter().enumerate() {
            let (regs, ctx) = if self.current == Some(i) {
                (&self.linked.machine.regs, &self.linked.machine.ctx)
            } else {
                (&task.regs, &task.ctx)
            };
            if ctx.frames.is_empty() && matches!(task.state, TaskState::Ready | TaskState::Blocked | TaskState::Running)
            {
                roots.entry(ctx.compid).or_default().extend(regs.capabilities());
            }
            owned.entry(task.home).or_default().push(task.stack);
        }
        (roots, owned)
    }

    /// Isolation audit over the loader state plus live task registers.
    pub fn audit_isolation(&self) -> Vec<crate::loader::IsolationFinding> {
        let (roots, owned) = self.runtime_roots();
        self.linked.audit_isolation(&roots, &owned)
    }
}
