//! Compartment-switch trampolines.
//!
//! ```text
//! +0   .Lfunc      target function capability
//! +16  .Lcaptable  callee captable capability (untagged once the callee is killed)
//! +32  .Lcompid    untagged capability whose cursor is the callee id
//! +48  code
//! ```
//!
//! The region capability is EXECUTE|LOAD_CAP: the code reads its metadata
//! pcc-relative and can write nothing. Callers only ever hold a sentry to it.

use super::{LinkedSystem, LoadError, Region};
use crate::capmachine::{CReg, Capability, Instr, Perms, RegImm, XReg, CAP_SIZE, INSTR_SIZE};
use crate::modformat::{SectionKind, SymbolClass};

pub const META_FUNC: u32 = 0;
pub const META_CAPTABLE: u32 = CAP_SIZE;
pub const META_COMPID: u32 = 2 * CAP_SIZE;
pub const METADATA_SLOTS: u32 = 3;
pub const CODE_OFFSET: u32 = METADATA_SLOTS * CAP_SIZE;

/// Caller context saved on the caller's stack: c0-c7, cgp, cra, x0-x7.
pub const FRAME_SIZE: i32 = 192;
pub const FRAME_CGP: i32 = 128;
pub const FRAME_CRA: i32 = 144;
const FRAME_X: i32 = 160;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trampoline {
    pub region: Region,
    /// Compartment whose captable holds the entry sentry; `None` for wrapped pointers.
    pub caller: Option<u32>,
    pub callee: u32,
    pub symbol: String,
    /// Sentry handed to callers.
    pub entry: Capability,
    pub instructions: Vec<Instr>,
    /// Index of the first instruction of the return path.
    pub resume_index: usize,
}

impl Trampoline {
    pub fn captable_slot_addr(&self) -> u32 {
        self.region.base + META_CAPTABLE
    }

    /// Instructions executed by one clean call plus return, when the code is straight-line.
    pub fn switch_cost(&self) -> Option<u64> {
        let loops = self.instructions.iter().any(|i| matches!(i, Instr::Jmp { .. } | Instr::Beq { .. }));
        (!loops).then_some(self.instructions.len() as u64)
    }
}

fn x(n: u8) -> XReg {
    XReg::new(n).unwrap()
}

/// Build the switch code. Returns the instructions and the resume index.
pub fn trampoline_code(bound_stack: bool, scrub_stack: bool) -> (Vec<Instr>, usize) {
    use Instr::*;
    let mut code: Vec<Instr> = Vec::new();
    // pcc-relative offset of a metadata slot from the instruction about to be pushed.
    let meta =
        |code: &Vec<Instr>, slot: u32| slot as i32 - (CODE_OFFSET as i32 + code.len() as i32 * INSTR_SIZE as i32);

    // Save caller context (register set, CGP, return address).
    code.push(CIncOffset { cd: CReg::Csp, cs: CReg::Csp, by: RegImm { reg: None, imm: -FRAME_SIZE } });
    for n in 0..8u8 {
        code.push(Cscr { cv: CReg::c(n), cs: CReg::Csp, off: n as i32 * CAP_SIZE as i32 });
    }
    code.push(Cscr { cv: CReg::Cgp, cs: CReg::Csp, off: FRAME_CGP });
    code.push(Cscr { cv: CReg::Cra, cs: CReg::Csp, off: FRAME_CRA });
    for n in 0..8u8 {
        code.push(Csw { rs: x(n), cs: CReg::Csp, off: FRAME_X + n as i32 * 4 });
    }
    // Record caller stack and compid; resume offset patched below.
    let push_at = code.len();
    code.push(CtxPush { resume_off: 0 });
    // Install the callee's captable and identity.
    code.push(Clcr { cd: CReg::Cgp, cs: CReg::Pcc, off: meta(&code, META_CAPTABLE) });
    code.push(Clcr { cd: CReg::c(7), cs: CReg::Pcc, off: meta(&code, META_COMPID) });
    code.push(SetCid { cs: CReg::c(7) });
    // Probe the canary slot: faults here if the callee has been killed.
    code.push(Clc { cd: CReg::c(7), idx: 0 });
    if bound_stack {
        // csp = [stack base, caller's save area): the donated remainder only.
        code.push(CGetBase { rd: x(7), cs: CReg::Csp });
        code.push(CGetAddr { rd: x(6), cs: CReg::Csp });
        code.push(Sub { rd: x(6), rs1: x(6), rs2: x(7) });
        code.push(CSetAddr { cd: CReg::c(7), cs: CReg::Csp, rs: x(7) });
        code.push(CSetBounds { cd: CReg::c(7), cs: CReg::c(7), len: RegImm { reg: Some(x(6)), imm: 0 } });
        code.push(CIncOffset { cd: CReg::Csp, cs: CReg::c(7), by: RegImm { reg: Some(x(6)), imm: 0 } });
    }
    if scrub_stack {
        // Zero every word of the donated stack below the save area.
        code.push(CGetBase { rd: x(7), cs: CReg::Csp });
        code.push(CGetAddr { rd: x(6), cs: CReg::Csp });
        code.push(Sub { rd: x(6), rs1: x(6), rs2: x(7) });
        code.push(CSetAddr { cd: CReg::c(7), cs: CReg::Csp, rs: x(7) });
        code.push(Li { rd: x(5), imm: 0 });
        let top = code.len();
        code.push(Beq { rs1: x(6), rs2: x(5), off: 5 * INSTR_SIZE as i32 });
        code.push(Csw { rs: x(5), cs: CReg::c(7), off: 0 });
        code.push(CIncOffset { cd: CReg::c(7), cs: CReg::c(7), by: RegImm { reg: None, imm: 4 } });
        code.push(Addi { rd: x(6), rs1: x(6), imm: -4 });
        code.push(Jmp { off: -((code.len() - top) as i32) * INSTR_SIZE as i32 });
    }
    // Scrub non-argument registers so nothing of the caller leaks.
    for n in 4..8u8 {
        code.push(Li { rd: x(n), imm: 0 });
    }
    for n in 4..8u8 {
        code.push(CMove { cd: CReg::c(n), cs: CReg::Null });
    }
    code.push(Clcr { cd: CReg::c(7), cs: CReg::Pcc, off: meta(&code, META_FUNC) });
    code.push(CJalr { cs: CReg::c(7) });

    // Return path: the callee's CRET lands here, and so does a fault unwind.
    let resume = code.len();
    code[push_at] = CtxPush { resume_off: ((resume - push_at) as u32 * INSTR_SIZE) as i32 };
    code.push(CtxPop);
    for n in 1..8u8 {
        code.push(Clcr { cd: CReg::c(n), cs: CReg::Csp, off: n as i32 * CAP_SIZE as i32 });
    }
    code.push(Clcr { cd: CReg::Cgp, cs: CReg::Csp, off: FRAME_CGP });
    code.push(Clcr { cd: CReg::Cra, cs: CReg::Csp, off: FRAME_CRA });
    for n in 1..8u8 {
        code.push(Clw { rd: x(n), cs: CReg::Csp, off: FRAME_X + n as i32 * 4 });
    }
    code.push(CIncOffset { cd: CReg::Csp, cs: CReg::Csp, by: RegImm { reg: None, imm: FRAME_SIZE } });
    code.push(CRet);
    (code, resume)
}

impl LinkedSystem {
    /// Emit a trampoline that enters `callee` at the interface function `symbol`.
    pub fn emit_trampoline(&mut self, caller: Option<u32>, callee: u32, symbol: &str) -> Result<usize, LoadError> {
        let c = self.compartment(callee).ok_or_else(|| LoadError::UnknownCompartment(callee.to_string()))?;
        let sym = c
            .symbol(symbol)
            .ok_or_else(|| LoadError::UnknownSymbol { compartment: c.name.clone(), symbol: symbol.to_string() })?;
        if sym.class != SymbolClass::Interface || !sym.is_function {
            return Err(LoadError::NotInterface { compartment: c.name.clone(), symbol: symbol.to_string() });
        }
        let func = c.function_cap(symbol).expect("interface symbols are functions");
        self.emit_trampoline_to(caller, callee, func, symbol.to_string())
    }

    pub(super) fn emit_trampoline_to(
        &mut self,
        caller: Option<u32>,
        callee: u32,
        func: Capability,
        label: String,
    ) -> Result<usize, LoadError> {
        let c = self.compartment(callee).expect("callee exists");
        let (bound, scrub, cgp) = (c.bound_stack, c.scrub_stack, c.cgp());
        let (instructions, resume_index) = trampoline_code(bound, scrub);
        let size = CODE_OFFSET + instructions.len() as u32 * INSTR_SIZE;
        let base = self.switcher.alloc(size, CAP_SIZE)?;
        let mem = &mut self.machine.mem;
        mem.write_bytes(base + CODE_OFFSET, &crate::capmachine::encode_all(&instructions));
        mem.write_cap_raw(base + META_FUNC, func);
        mem.write_cap_raw(base + META_CAPTABLE, cgp);
        mem.write_cap_raw(base + META_COMPID, Capability::from_int(callee));
        let region_cap = self.mint(base, size, Perms::EXECUTE | Perms::LOAD_CAP);
        let entry = region_cap
            .with_cursor(base + CODE_OFFSET)
            .and_then(|c| c.seal_sentry())
            .expect("trampoline region is executable");
        self.trampolines.push(Trampoline {
            region: Region { base, size, cap: region_cap },
            caller,
            callee,
            symbol: label,
            entry,
            instructions,
            resume_index,
        });
        Ok(self.trampolines.len() - 1)
    }

    /// Wrap a function capability of `owner` in a fresh trampoline so it can be
    /// handed to other compartments.
    pub fn wrap_function_pointer(&mut self, cap: Capability, owner: u32) -> Result<Capability, LoadError> {
        let c = self.compartment(owner).ok_or_else(|| LoadError::UnknownCompartment(owner.to_string()))?;
        let text = c.region(SectionKind::Code).copied();
        let inside = text.is_some_and(|t| cap.range_within(&t.cap));
        if !cap.tag || !cap.perms.contains(Perms::EXECUTE) || !inside {
            return Err(LoadError::NotAFunction(c.name.clone()));
        }
        let func = cap.unsealed();
        let label = format!("<fnptr {:#x}>", func.cursor);
        let idx = self.emit_trampoline_to(None, owner, func, label)?;
        Ok(self.trampolines[idx].entry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metadata_is_three_capability_slots() {
        assert_eq!(METADATA_SLOTS, 3);
        assert_eq!(CODE_OFFSET, 3 * CAP_SIZE);
    }

    #[test]
    fn code_shape() {
        let (code, resume) = trampoline_code(true, false);
        assert_eq!(code.len(), 59);
        assert_eq!(code[resume], Instr::CtxPop);
        assert_eq!(code[resume - 1], Instr::CJalr { cs: CReg::c(7) });
        assert!(code.iter().all(|i| !matches!(i, Instr::Clc { idx, .. } if *idx != 0)));
        let (unbounded, _) = trampoline_code(false, false);
        assert_eq!(unbounded.len(), 53);
        // Metadata loads address the right slots pcc-relatively.
        for (i, ins) in code.iter().enumerate() {
            if let Instr::Clcr { cs: CReg::Pcc, off, cd } = ins {
                let slot = CODE_OFFSET as i32 + i as i32 * 8 + off;
                let expect = match cd {
                    CReg::Cgp => META_CAPTABLE,
                    _ if i < resume - 2 => META_COMPID,
                    _ => META_FUNC,
                };
                assert_eq!(slot as u32, expect, "instruction {i}");
            }
        }
    }
}
