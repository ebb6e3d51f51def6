//! Fetch/decode/execute over the toy ISA.

use serde::Serialize;
use thiserror::Error;

use super::capability::{Capability, Perms, Seal, CAP_SIZE};
use super::fault::{FaultKind, FaultRecord, Violation};
use super::isa::{CReg, Instr, RegImm, XReg, INSTR_SIZE};
use super::memory::{Enforcement, TaggedMemory};

/// Compartment id meaning "no compartment" (loader or bare machine code).
pub const NO_COMPARTMENT: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RegisterFile {
    pub pcc: Capability,
    pub cgp: Capability,
    pub csp: Capability,
    pub cra: Capability,
    pub c: [Capability; CReg::GENERAL],
    pub x: [u32; XReg::COUNT],
}

impl RegisterFile {
    pub fn read_c(&self, r: CReg) -> Capability {
        match r {
            CReg::C(n) => self.c[n as usize],
            CReg::Cgp => self.cgp,
            CReg::Csp => self.csp,
            CReg::Cra => self.cra,
            CReg::Pcc => self.pcc,
            CReg::Null => Capability::NULL,
        }
    }

    pub fn write_c(&mut self, r: CReg, v: Capability) {
        match r {
            CReg::C(n) => self.c[n as usize] = v,
            CReg::Cgp => self.cgp = v,
            CReg::Csp => self.csp = v,
            CReg::Cra => self.cra = v,
            CReg::Pcc | CReg::Null => unreachable!("decoder rejects writes to {r}"),
        }
    }

    /// Every capability held in the register file, in a fixed order.
    pub fn capabilities(&self) -> Vec<Capability> {
        let mut v = vec![self.pcc, self.cgp, self.csp, self.cra];
        v.extend_from_slice(&self.c);
        v
    }
}

/// One entry of the trusted compartment-entry stack pushed by a trampoline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryFrame {
    /// Caller's stack capability, pointing at the trampoline save area.
    pub caller_stack: Capability,
    pub caller_compid: u32,
    /// Where the trampoline resumes after the callee returns (or is unwound).
    pub resume: Capability,
}

/// Per-thread compartment context: current compartment id plus nested entries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CompartmentContext {
    pub compid: u32,
    pub frames: Vec<EntryFrame>,
}

impl CompartmentContext {
    pub fn depth(&self) -> usize {
        self.frames.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CostCounters {
    pub instructions: u64,
    pub trampoline_instructions: u64,
    pub trap_instructions: u64,
}

impl CostCounters {
    pub fn since(&self, earlier: &CostCounters) -> CostCounters {
        CostCounters {
            instructions: self.instructions - earlier.instructions,
            trampoline_instructions: self.trampoline_instructions - earlier.trampoline_instructions,
            trap_instructions: self.trap_instructions - earlier.trap_instructions,
        }
    }

    pub fn add(&mut self, other: &CostCounters) {
        self.instructions += other.instructions;
        self.trampoline_instructions += other.trampoline_instructions;
        self.trap_instructions += other.trap_instructions;
    }
}

/// Requests the machine cannot satisfy by itself; the runtime completes them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Service {
    Yield,
    QueueSend { queue: u32, item: Capability },
    QueueRecv { queue: u32, dest: Capability },
    FaultReturn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Executed,
    Halted,
    Trapped(FaultRecord),
    /// The instruction at pcc needs the runtime; pcc has not advanced.
    Service(Service),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunOutcome {
    Halted,
    Trapped(FaultRecord),
    BudgetExhausted,
    Service(Service),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunResult {
    pub outcome: RunOutcome,
    pub steps: u64,
    pub counters: CostCounters,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MachineError {
    #[error("memory size must be positive")]
    ZeroMemory,
}

#[derive(Debug, Clone)]
pub struct Machine {
    pub mem: TaggedMemory,
    pub regs: RegisterFile,
    pub ctx: CompartmentContext,
    pub counters: CostCounters,
    enforcement: Enforcement,
    switcher: Option<(u32, u32)>,
    /// When set, executed instructions are also charged as fault-recovery cost.
    pub recovery_mode: bool,
}

enum Flow {
    Next,
    Goto(u32),
    Jump(Capability),
    Halt,
    Service(Service),
}

impl Machine {
    pub fn new(memory_size: u32) -> Result<Machine, MachineError> {
        if memory_size == 0 {
            return Err(MachineError::ZeroMemory);
        }
        Ok(Machine {
            mem: TaggedMemory::new(memory_size),
            regs: RegisterFile::default(),
            ctx: CompartmentContext::default(),
            counters: CostCounters::default(),
            enforcement: Enforcement::Enforced,
            switcher: None,
            recovery_mode: false,
        })
    }

    /// Root capability for this machine's memory.
    pub fn root(&self) -> Capability {
        Capability::root(self.mem.size())
    }

    /// Disable (`true`) or enable tag/seal/perm/bounds enforcement.
    pub fn set_insecure(&mut self, insecure: bool) {
        self.enforcement = if insecure { Enforcement::Disabled } else { Enforcement::Enforced };
    }

    pub fn is_insecure(&self) -> bool {
        self.enforcement == Enforcement::Disabled
    }

    pub fn enforcement(&self) -> Enforcement {
        self.enforcement
    }

    /// Declare `[base, base+len)` as the switcher arena, the only code allowed
    /// to run switcher-only instructions.
    pub fn set_switcher_range(&mut self, base: u32, len: u32) {
        self.switcher = Some((base, len));
    }

    pub fn in_switcher(&self, addr: u32) -> bool {
        self.switcher.is_some_and(|(b, l)| addr as u64 >= b as u64 && (addr as u64) < b as u64 + l as u64)
    }

    pub fn current_compartment(&self) -> Option<u32> {
        (self.ctx.compid != NO_COMPARTMENT).then_some(self.ctx.compid)
    }

    fn enforced(&self) -> bool {
        self.enforcement == Enforcement::Enforced
    }

    /// Charge modeled (non-emulated) work to the counters.
    pub fn charge(&mut self, instructions: u64) {
        self.counters.instructions += instructions;
        if self.recovery_mode {
            self.counters.trap_instructions += instructions;
        }
    }

    pub fn charge_recovery(&mut self, instructions: u64) {
        self.counters.instructions += instructions;
        self.counters.trap_instructions += instructions;
    }

    fn retire(&mut self, pc: u32) {
        self.counters.instructions += 1;
        if self.in_switcher(pc) {
            self.counters.trampoline_instructions += 1;
        }
        if self.recovery_mode {
            self.counters.trap_instructions += 1;
        }
    }

    /// Finish a pending [`Service`] request: retire the instruction and advance.
    pub fn complete_service(&mut self) {
        let pc = self.regs.pcc.cursor;
        self.retire(pc);
        self.regs.pcc.cursor = pc.wrapping_add(INSTR_SIZE);
    }

    pub fn fault(&self, v: Violation) -> FaultRecord {
        FaultRecord { kind: v.kind, comp_id: self.current_compartment(), pc: self.regs.pcc.cursor, detail: v.detail }
    }

    fn fetch(&self) -> Result<Instr, Violation> {
        let pcc = self.regs.pcc;
        let addr = self.mem.check_access(&pcc, 0, INSTR_SIZE, Perms::EXECUTE, self.enforcement)?;
        let word: [u8; 8] = self.mem.read_bytes(addr, INSTR_SIZE).try_into().unwrap();
        Instr::decode(&word)
            .ok_or_else(|| Violation::new(FaultKind::IllegalInstruction, format!("cannot decode {word:02x?}")))
    }

    /// Execute one instruction.
    pub fn step(&mut self) -> StepOutcome {
        let pc = self.regs.pcc.cursor;
        let result = self.fetch().and_then(|instr| self.execute(instr, pc));
        match result {
            Err(v) => StepOutcome::Trapped(self.fault(v)),
            Ok(Flow::Service(s)) => StepOutcome::Service(s),
            Ok(flow) => {
                self.retire(pc);
                match flow {
                    Flow::Next => self.regs.pcc.cursor = pc.wrapping_add(INSTR_SIZE),
                    Flow::Goto(target) => self.regs.pcc.cursor = target,
                    Flow::Jump(cap) => self.regs.pcc = cap,
                    Flow::Halt => return StepOutcome::Halted,
                    Flow::Service(_) => unreachable!(),
                }
                StepOutcome::Executed
            }
        }
    }

    /// Step until halt, trap, an unhandled service request, or `max_steps`.
    /// `yield` is a no-op on a bare machine.
    pub fn run(&mut self, max_steps: u64) -> RunResult {
        let start = self.counters;
        let mut steps = 0;
        let outcome = loop {
            if steps >= max_steps {
                break RunOutcome::BudgetExhausted;
            }
            steps += 1;
            match self.step() {
                StepOutcome::Executed => {}
                StepOutcome::Halted => break RunOutcome::Halted,
                StepOutcome::Trapped(f) => break RunOutcome::Trapped(f),
                StepOutcome::Service(Service::Yield) => self.complete_service(),
                StepOutcome::Service(s) => break RunOutcome::Service(s),
            }
        };
        RunResult { outcome, steps, counters: self.counters.since(&start) }
    }

    fn reg_imm(&self, v: RegImm) -> i64 {
        v.reg.map_or(0, |r| self.regs.x[r.index()] as i32 as i64) + v.imm as i64
    }

    fn check_jump_target(&self, target: Capability) -> Result<Capability, Violation> {
        if self.enforced() {
            if !target.tag {
                return Err(Violation::new(FaultKind::TagViolation, format!("jump through untagged {target:?}")));
            }
            if !target.perms.contains(Perms::EXECUTE) {
                return Err(Violation::new(FaultKind::PermViolation, format!("jump target not executable {target:?}")));
            }
        }
        Ok(target.unsealed())
    }

    fn execute(&mut self, instr: Instr, pc: u32) -> Result<Flow, Violation> {
        use Instr::*;
        if instr.is_switcher_only() && !self.in_switcher(pc) {
            return Err(Violation::new(FaultKind::IllegalInstruction, format!("{instr:?} outside the switcher")));
        }
        let e = self.enforcement;
        let x = |r: XReg| self.regs.x[r.index()];
        let branch = |taken: bool, off: i32| {
            if taken {
                Flow::Goto((pc as i64 + off as i64) as u32)
            } else {
                Flow::Next
            }
        };
        let flow = match instr {
            Halt => Flow::Halt,
            Nop => Flow::Next,
            Li { rd, imm } => {
                self.regs.x[rd.index()] = imm as u32;
                Flow::Next
            }
            Add { rd, rs1, rs2 } => {
                self.regs.x[rd.index()] = x(rs1).wrapping_add(x(rs2));
                Flow::Next
            }
            Sub { rd, rs1, rs2 } => {
                self.regs.x[rd.index()] = x(rs1).wrapping_sub(x(rs2));
                Flow::Next
            }
            Addi { rd, rs1, imm } => {
                self.regs.x[rd.index()] = x(rs1).wrapping_add(imm as u32);
                Flow::Next
            }
            Mul { rd, rs1, rs2 } => {
                self.regs.x[rd.index()] = x(rs1).wrapping_mul(x(rs2));
                Flow::Next
            }
            And { rd, rs1, rs2 } => {
                self.regs.x[rd.index()] = x(rs1) & x(rs2);
                Flow::Next
            }
            Beq { rs1, rs2, off } => branch(x(rs1) == x(rs2), off),
            Bne { rs1, rs2, off } => branch(x(rs1) != x(rs2), off),
            Blt { rs1, rs2, off } => branch((x(rs1) as i32) < (x(rs2) as i32), off),
            Bge { rs1, rs2, off } => branch((x(rs1) as i32) >= (x(rs2) as i32), off),
            Jmp { off } => branch(true, off),
            CMove { cd, cs } => {
                let v = self.regs.read_c(cs);
                self.regs.write_c(cd, v);
                Flow::Next
            }
            CIncOffset { cd, cs, by } => {
                let src = self.regs.read_c(cs);
                let delta = self.reg_imm(by);
                let v = if self.enforced() {
                    src.offset_by(delta)?
                } else {
                    Capability { cursor: (src.cursor as i64).wrapping_add(delta) as u32, ..src }
                };
                self.regs.write_c(cd, v);
                Flow::Next
            }
            CSetBounds { cd, cs, len } => {
                let src = self.regs.read_c(cs);
                let len = self.reg_imm(len);
                let v = if self.enforced() {
                    let len = u32::try_from(len)
                        .map_err(|_| Violation::new(FaultKind::BoundsViolation, format!("bad length {len}")))?;
                    src.set_bounds(src.cursor, len)?
                } else {
                    Capability { base: src.cursor, length: len as u32, ..src }
                };
                self.regs.write_c(cd, v);
                Flow::Next
            }
            CSetAddr { cd, cs, rs } => {
                let src = self.regs.read_c(cs);
                let v = if self.enforced() { src.with_cursor(x(rs))? } else { Capability { cursor: x(rs), ..src } };
                self.regs.write_c(cd, v);
                Flow::Next
            }
            CAndPerm { cd, cs, mask } => {
                let src = self.regs.read_c(cs);
                let v =
                    if self.enforced() { src.and_perms(mask)? } else { Capability { perms: src.perms & mask, ..src } };
                self.regs.write_c(cd, v);
                Flow::Next
            }
            CSealEntry { cd, cs } => {
                let src = self.regs.read_c(cs);
                let v = if self.enforced() { src.seal_sentry()? } else { Capability { seal: Seal::Sentry, ..src } };
                self.regs.write_c(cd, v);
                Flow::Next
            }
            CGetBase { rd, cs } => {
                self.regs.x[rd.index()] = self.regs.read_c(cs).base;
                Flow::Next
            }
            CGetLen { rd, cs } => {
                self.regs.x[rd.index()] = self.regs.read_c(cs).length;
                Flow::Next
            }
            CGetAddr { rd, cs } => {
                self.regs.x[rd.index()] = self.regs.read_c(cs).cursor;
                Flow::Next
            }
            CGetTag { rd, cs } => {
                self.regs.x[rd.index()] = self.regs.read_c(cs).tag as u32;
                Flow::Next
            }
            CGetPerm { rd, cs } => {
                self.regs.x[rd.index()] = self.regs.read_c(cs).perms.bits() as u32;
                Flow::Next
            }
            Clc { cd, idx } => {
                let v = self.mem.load_cap(&self.regs.cgp, idx as i64 * CAP_SIZE as i64, e)?;
                self.regs.write_c(cd, v);
                Flow::Next
            }
            Clw { rd, cs, off } => {
                let v = self.mem.load_word(&self.regs.read_c(cs), off as i64, e)?;
                self.regs.x[rd.index()] = v;
                Flow::Next
            }
            Clb { rd, cs, off } => {
                let v = self.mem.load_byte(&self.regs.read_c(cs), off as i64, e)?;
                self.regs.x[rd.index()] = v as u32;
                Flow::Next
            }
            Csw { rs, cs, off } => {
                let base = self.regs.read_c(cs);
                self.mem.store_word(&base, off as i64, x(rs), e)?;
                Flow::Next
            }
            Csb { rs, cs, off } => {
                let base = self.regs.read_c(cs);
                self.mem.store_byte(&base, off as i64, x(rs) as u8, e)?;
                Flow::Next
            }
            Clcr { cd, cs, off } => {
                let v = self.mem.load_cap(&self.regs.read_c(cs), off as i64, e)?;
                self.regs.write_c(cd, v);
                Flow::Next
            }
            Cscr { cv, cs, off } => {
                let base = self.regs.read_c(cs);
                let v = self.regs.read_c(cv);
                self.mem.store_cap(&base, off as i64, v, e)?;
                Flow::Next
            }
            CJalr { cs } => {
                let target = self.check_jump_target(self.regs.read_c(cs))?;
                let pcc = self.regs.pcc;
                self.regs.cra = Capability { cursor: pc.wrapping_add(INSTR_SIZE), seal: Seal::Sentry, ..pcc };
                Flow::Jump(target)
            }
            CRet => Flow::Jump(self.check_jump_target(self.regs.cra)?),
            TrapIf { rs, kind } => {
                if x(rs) != 0 {
                    return Err(Violation::new(kind, "trapif"));
                }
                Flow::Next
            }
            Yield => Flow::Service(Service::Yield),
            QSend { rq, cs } => Flow::Service(Service::QueueSend { queue: x(rq), item: self.regs.read_c(cs) }),
            QRecv { rq, cs } => Flow::Service(Service::QueueRecv { queue: x(rq), dest: self.regs.read_c(cs) }),
            RdInstr { rd } => {
                self.regs.x[rd.index()] = self.counters.instructions as u32;
                Flow::Next
            }
            GetCid { rd } => {
                self.regs.x[rd.index()] = self.ctx.compid;
                Flow::Next
            }
            SetCid { cs } => {
                self.ctx.compid = self.regs.read_c(cs).cursor;
                Flow::Next
            }
            CtxPush { resume_off } => {
                let resume = Capability { cursor: (pc as i64 + resume_off as i64) as u32, ..self.regs.pcc };
                self.ctx.frames.push(EntryFrame {
                    caller_stack: self.regs.csp,
                    caller_compid: self.ctx.compid,
                    resume,
                });
                Flow::Next
            }
            CtxPop => {
                // Only the resume point recorded by the matching push may pop the frame.
                match self.ctx.frames.last() {
                    None => {
                        return Err(Violation::new(FaultKind::IllegalInstruction, "compartment context stack is empty"))
                    }
                    Some(f) if f.resume.cursor != pc => {
                        return Err(Violation::new(
                            FaultKind::IllegalInstruction,
                            format!("ctxpop at {pc:#x} does not match frame resume {:#x}", f.resume.cursor),
                        ))
                    }
                    Some(_) => {}
                }
                let frame = self.ctx.frames.pop().unwrap();
                self.regs.csp = frame.caller_stack;
                self.ctx.compid = frame.caller_compid;
                Flow::Next
            }
            FaultRet => Flow::Service(Service::FaultReturn),
        };
        Ok(flow)
    }
}
