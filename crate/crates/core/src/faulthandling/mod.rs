//! Fault dispatch and the per-compartment recovery strategies.
//!
//! A trap is attributed to the compartment in the task's live context. Unless
//! a custom handler takes it, recovery unwinds exactly one compartment entry:
//! the top frame's trampoline return path runs with `x0` holding an error
//! code, restoring the caller's registers from its save area.

mod log;
pub mod strategy;

pub use log::{FaultLog, FaultLogEntry, Outcome, FAULT_LOG_VERSION};
pub use strategy::{FaultStrategy, StrategyKind, HANDLER_SYMBOL};

use crate::capmachine::{Capability, FaultKind, FaultRecord, RegisterFile, Violation, NO_COMPARTMENT};
use crate::loader::trampoline::{FRAME_CGP, FRAME_CRA, FRAME_SIZE};
use crate::loader::{LinkedSystem, LoadError, HANDLER_STACK_SIZE};
use crate::modformat::SectionKind;
use crate::runtime::{Recovery, System, TaskState};

/// Saving state and decoding the cause on trap entry.
pub const TRAP_ENTRY_COST: u64 = 12;
/// Locating the top entry frame and redirecting pcc into its return path.
pub const UNWIND_SETUP_COST: u64 = 4;
/// Per 32-bit word restored from a snapshot.
pub const RESTORE_WORD_COST: u64 = 2;
/// Per captable slot re-derived or untagged.
pub const SLOT_COST: u64 = 2;
/// Fixed part of a full-system reboot: machine reset and loader entry.
pub const FULL_REBOOT_BASE_COST: u64 = 2000;

/// Error code a caller sees in `x0` when its callee faulted.
pub fn error_code(kind: FaultKind) -> u32 {
    0xFFFF_FFF0 | kind.code()
}

pub fn is_error_code(x0: u32) -> bool {
    x0 & 0xFFFF_FFF0 == 0xFFFF_FFF0 && FaultKind::from_code(x0 & 0xF).is_some()
}

/// What the scheduler does with the task after a fault-related event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Continuation {
    Resume,
    Stop,
}

/// Install custom handlers: a compartment defining [`HANDLER_SYMBOL`] as a
/// function gets it, whatever its policy strategy, plus a private handler stack.
pub fn register_handlers(sys: &mut LinkedSystem) -> Result<(), Vec<LoadError>> {
    let mut errors = Vec::new();
    for i in 0..sys.compartments.len() {
        let c = &sys.compartments[i];
        let present = c.symbol(HANDLER_SYMBOL).is_some_and(|s| s.is_function);
        if !present {
            if c.strategy_kind == StrategyKind::Custom {
                errors.push(LoadError::MissingFaultHandler {
                    compartment: c.name.clone(),
                    symbol: HANDLER_SYMBOL.to_string(),
                });
            }
            continue;
        }
        match sys.alloc_stack(HANDLER_STACK_SIZE) {
            Ok(stack) => {
                let c = &mut sys.compartments[i];
                c.strategy = FaultStrategy::CustomHandler(HANDLER_SYMBOL.to_string());
                c.handler_stack = Some(stack);
            }
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

/// Handle a trap taken by task `t`, which is loaded in the machine.
pub fn dispatch_fault(sys: &mut System, t: usize, f: FaultRecord) -> Continuation {
    let m = &mut sys.linked.machine;
    let cost_start = m.counters.trap_instructions;
    m.charge_recovery(TRAP_ENTRY_COST);
    let comp = m.ctx.compid;
    let depth = m.ctx.depth();
    let name = sys.linked.compartment(comp).map(|c| c.name.clone());
    let log = sys.fault_log.push(FaultLogEntry {
        v: FAULT_LOG_VERSION,
        seq: 0,
        task: t,
        kind: f.kind,
        compartment: name,
        pc: f.pc,
        depth,
        detail: f.detail.clone(),
        strategy: String::new(),
        killed: false,
        rebooted: false,
        recovery_cost: 0,
        outcome: Outcome::Pending,
        cost_start,
    });

    match sys.tasks[t].recovery {
        Recovery::Handler { comp: hc, depth: hd, log: prev } => {
            // The handler itself faulted: its compartment is beyond repair.
            sys.fault_log.get_mut(prev).outcome = Outcome::TaskDead;
            sys.fault_log.get_mut(log).strategy = "escalated_kill".into();
            kill_compartment(sys, hc, log);
            sys.linked.machine.ctx.frames.truncate(hd);
            return unwind(sys, t, error_code(f.kind), log);
        }
        Recovery::Unwinding { log: prev } => {
            sys.fault_log.get_mut(prev).outcome = Outcome::TaskDead;
            sys.fault_log.get_mut(log).strategy = "escalated_kill".into();
            if comp != NO_COMPARTMENT {
                kill_compartment(sys, comp, log);
            }
            return task_dead(sys, t, log);
        }
        Recovery::None => {}
    }

    let Some(c) = sys.linked.compartment(comp) else {
        sys.fault_log.get_mut(log).strategy = "none".into();
        return task_dead(sys, t, log);
    };
    let strategy = if c.killed { FaultStrategy::Kill } else { c.strategy.clone() };
    sys.fault_log.get_mut(log).strategy = strategy.name().into();
    match strategy {
        FaultStrategy::ReturnError => unwind(sys, t, error_code(f.kind), log),
        FaultStrategy::Kill => {
            kill_compartment(sys, comp, log);
            unwind(sys, t, error_code(f.kind), log)
        }
        FaultStrategy::MicroReboot => {
            micro_reboot(sys, comp, log);
            unwind(sys, t, error_code(f.kind), log)
        }
        FaultStrategy::CustomHandler(symbol) => enter_handler(sys, t, comp, &symbol, &f, log),
    }
}

fn task_dead(sys: &mut System, t: usize, log: usize) -> Continuation {
    let m = &mut sys.linked.machine;
    m.recovery_mode = false;
    let e = sys.fault_log.get_mut(log);
    e.outcome = Outcome::TaskDead;
    e.recovery_cost = m.counters.trap_instructions - e.cost_start;
    sys.tasks[t].recovery = Recovery::None;
    sys.tasks[t].state = TaskState::Dead;
    Continuation::Stop
}

/// Resume the caller of the current compartment entry with `code` in `x0`.
fn unwind(sys: &mut System, t: usize, code: u32, log: usize) -> Continuation {
    let m = &mut sys.linked.machine;
    let Some(frame) = m.ctx.frames.last().copied() else {
        return task_dead(sys, t, log);
    };
    let save = frame.caller_stack.cursor;
    let intact = (save as u64 + FRAME_SIZE as u64) <= m.mem.size() as u64
        && m.mem.tag_at(save + FRAME_CGP as u32)
        && m.mem.tag_at(save + FRAME_CRA as u32);
    if !intact {
        // The caller's saved context is gone: nothing trustworthy to return to.
        let comp = m.ctx.compid;
        sys.fault_log.get_mut(log).strategy = "escalated_kill".into();
        if comp != NO_COMPARTMENT {
            kill_compartment(sys, comp, log);
        }
        return task_dead(sys, t, log);
    }
    m.charge_recovery(UNWIND_SETUP_COST);
    m.regs.pcc = frame.resume;
    m.regs.x[0] = code;
    m.regs.c[0] = Capability::NULL;
    m.recovery_mode = true;
    sys.tasks[t].recovery = Recovery::Unwinding { log };
    let e = sys.fault_log.get_mut(log);
    if e.outcome == Outcome::Pending {
        e.outcome = Outcome::ReturnedError { code };
    }
    Continuation::Resume
}

/// Called after every executed instruction: ends an unwind once the return
/// path has handed control back to the caller's code.
pub fn recovery_step(sys: &mut System, t: usize) {
    if let Recovery::Unwinding { log } = sys.tasks[t].recovery {
        let m = &mut sys.linked.machine;
        if !m.in_switcher(m.regs.pcc.cursor) {
            m.recovery_mode = false;
            sys.tasks[t].recovery = Recovery::None;
            let e = sys.fault_log.get_mut(log);
            e.recovery_cost = m.counters.trap_instructions - e.cost_start;
        }
    }
}

fn enter_handler(sys: &mut System, t: usize, comp: u32, symbol: &str, f: &FaultRecord, log: usize) -> Continuation {
    let c = sys.linked.compartment(comp).expect("faulting compartment exists");
    let (Some(pcc), Some(stack)) = (c.function_cap(symbol), c.handler_stack) else {
        return unwind(sys, t, error_code(f.kind), log);
    };
    let mut regs = RegisterFile {
        pcc,
        cgp: c.cgp(),
        csp: stack.cap,
        cra: sys.linked.fault_return_stub,
        ..RegisterFile::default()
    };
    let m = &mut sys.linked.machine;
    let depth = m.ctx.depth();
    regs.x[0] = f.kind.code();
    regs.x[1] = f.pc;
    m.regs = regs;
    m.recovery_mode = true;
    sys.tasks[t].recovery = Recovery::Handler { comp, log, depth };
    Continuation::Resume
}

/// A `faultret` executed by task `t`.
pub fn handler_returned(sys: &mut System, t: usize) -> Continuation {
    let Recovery::Handler { depth, log, .. } = sys.tasks[t].recovery else {
        let v = Violation::new(FaultKind::IllegalInstruction, "faultret outside a fault handler");
        let f = sys.linked.machine.fault(v);
        return dispatch_fault(sys, t, f);
    };
    let m = &mut sys.linked.machine;
    m.complete_service();
    let code = m.regs.x[0];
    m.ctx.frames.truncate(depth);
    sys.fault_log.get_mut(log).outcome = Outcome::HandlerReturned { code };
    sys.tasks[t].recovery = Recovery::None;
    unwind(sys, t, code, log)
}

/// Revoke every way into `comp`: trampoline captable slots and live CGP copies.
pub fn kill_compartment(sys: &mut System, comp: u32, log: usize) {
    let current = sys.current_task();
    let Some(c) = sys.linked.compartment_mut(comp) else { return };
    sys.fault_log.get_mut(log).killed = true;
    if c.killed {
        return;
    }
    c.killed = true;
    let linked = &mut sys.linked;
    for tr in linked.trampolines.iter().filter(|tr| tr.callee == comp) {
        linked.machine.mem.invalidate_granule(tr.captable_slot_addr());
        linked.machine.charge_recovery(SLOT_COST);
    }
    for (i, task) in sys.tasks.iter_mut().enumerate() {
        if Some(i) != current && task.ctx.compid == comp {
            task.regs.cgp = task.regs.cgp.untagged();
        }
    }
    let m = &mut sys.linked.machine;
    if m.ctx.compid == comp {
        m.regs.cgp = m.regs.cgp.untagged();
    }
}

/// Restore `comp`'s mutable sections from the load-time snapshot, re-derive
/// its data capabilities and, if it was killed, re-enable its trampolines.
pub fn micro_reboot(sys: &mut System, comp: u32, log: usize) {
    sys.fault_log.get_mut(log).rebooted = true;
    reboot_compartment(&mut sys.linked, comp);
    for task in sys.tasks.iter_mut() {
        if task.ctx.compid == comp {
            task.regs.cgp = sys.linked.compartment(comp).unwrap().cgp();
        }
    }
}

/// The loader-level part of a micro-reboot. Returns the recovery cost charged.
pub fn reboot_compartment(linked: &mut LinkedSystem, comp: u32) -> u64 {
    let start = linked.machine.counters.trap_instructions;
    let Some(c) = linked.compartment(comp) else { return 0 };
    let (base, len) = c.mutable;
    let snapshot = c.snapshot.clone();
    let slots: Vec<(u32, Capability)> = c
        .symbols
        .iter()
        .filter(|s| !s.is_function && s.section != SectionKind::Code)
        .map(|s| (c.captable.slot_addr(s.slot), c.slot_cap(s)))
        .collect();
    let was_killed = c.killed;
    let m = &mut linked.machine;
    m.mem.write_bytes(base, &snapshot);
    m.charge_recovery(RESTORE_WORD_COST * len.div_ceil(4) as u64);
    for (addr, cap) in slots {
        m.mem.write_cap_raw(addr, cap);
        m.charge_recovery(SLOT_COST);
    }
    if was_killed {
        let c = linked.compartment_mut(comp).unwrap();
        c.killed = false;
        let cgp = c.cgp();
        for tr in linked.trampolines.iter().filter(|tr| tr.callee == comp) {
            linked.machine.mem.write_cap_raw(tr.captable_slot_addr(), cgp);
            linked.machine.charge_recovery(SLOT_COST);
        }
    }
    linked.machine.counters.trap_instructions - start
}

/// Modeled cost of recovering by rebooting the whole system instead: every
/// section of every compartment reloaded and every captable slot re-derived.
pub fn full_reboot_cost(linked: &LinkedSystem) -> u64 {
    let mut cost = FULL_REBOOT_BASE_COST;
    for c in &linked.compartments {
        let words: u64 = c.regions.values().map(|r| r.size.div_ceil(4) as u64).sum();
        cost += RESTORE_WORD_COST * words;
        cost += SLOT_COST * c.captable.slots.len() as u64;
    }
    for tr in &linked.trampolines {
        cost += RESTORE_WORD_COST * tr.region.size.div_ceil(4) as u64;
    }
    cost
}
