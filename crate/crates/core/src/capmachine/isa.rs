//! Toy capability ISA.
//!
//! Every instruction is 8 bytes, little-endian: `opcode, rd, rs1, rs2, imm:i32`.
//! Register fields that an instruction does not use must be zero; an absent
//! optional register operand is encoded as [`NO_REG`].

use std::fmt;

use super::capability::Perms;
use super::fault::FaultKind;

pub const INSTR_SIZE: u32 = 8;
pub const NO_REG: u8 = 0xff;

/// Integer register `x0..x7`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct XReg(u8);

impl XReg {
    pub const COUNT: usize = 8;

    pub fn new(n: u8) -> Option<XReg> {
        (n < Self::COUNT as u8).then_some(XReg(n))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for XReg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.0)
    }
}

/// Capability register operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CReg {
    C(u8),
    Cgp,
    Csp,
    Cra,
    /// Read-only; as a memory base it addresses relative to the current instruction.
    Pcc,
    /// Always reads as the null capability.
    Null,
}

impl CReg {
    pub const GENERAL: usize = 8;

    pub fn c(n: u8) -> CReg {
        assert!((n as usize) < Self::GENERAL);
        CReg::C(n)
    }

    pub fn code(self) -> u8 {
        match self {
            CReg::C(n) => n,
            CReg::Cgp => 8,
            CReg::Csp => 9,
            CReg::Cra => 10,
            CReg::Pcc => 11,
            CReg::Null => 12,
        }
    }

    pub fn from_code(code: u8) -> Option<CReg> {
        Some(match code {
            0..=7 => CReg::C(code),
            8 => CReg::Cgp,
            9 => CReg::Csp,
            10 => CReg::Cra,
            11 => CReg::Pcc,
            12 => CReg::Null,
            _ => return None,
        })
    }

    pub fn parse(s: &str) -> Option<CReg> {
        match s {
            "cgp" => Some(CReg::Cgp),
            "csp" => Some(CReg::Csp),
            "cra" => Some(CReg::Cra),
            "pcc" => Some(CReg::Pcc),
            "cnull" => Some(CReg::Null),
            _ => {
                let n: u8 = s.strip_prefix('c')?.parse().ok()?;
                ((n as usize) < Self::GENERAL).then_some(CReg::C(n))
            }
        }
    }

    /// Registers an instruction may write.
    pub fn writable(self) -> bool {
        !matches!(self, CReg::Pcc | CReg::Null)
    }
}

impl fmt::Display for CReg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CReg::C(n) => write!(f, "c{n}"),
            CReg::Cgp => f.write_str("cgp"),
            CReg::Csp => f.write_str("csp"),
            CReg::Cra => f.write_str("cra"),
            CReg::Pcc => f.write_str("pcc"),
            CReg::Null => f.write_str("cnull"),
        }
    }
}

/// Register-or-immediate operand used by cursor and bounds arithmetic:
/// the effective value is `reg + imm` (reg absent reads as zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegImm {
    pub reg: Option<XReg>,
    pub imm: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instr {
    Halt,
    Nop,
    Li {
        rd: XReg,
        imm: i32,
    },
    Add {
        rd: XReg,
        rs1: XReg,
        rs2: XReg,
    },
    Sub {
        rd: XReg,
        rs1: XReg,
        rs2: XReg,
    },
    Addi {
        rd: XReg,
        rs1: XReg,
        imm: i32,
    },
    Mul {
        rd: XReg,
        rs1: XReg,
        rs2: XReg,
    },
    And {
        rd: XReg,
        rs1: XReg,
        rs2: XReg,
    },
    Beq {
        rs1: XReg,
        rs2: XReg,
        off: i32,
    },
    Bne {
        rs1: XReg,
        rs2: XReg,
        off: i32,
    },
    Blt {
        rs1: XReg,
        rs2: XReg,
        off: i32,
    },
    Bge {
        rs1: XReg,
        rs2: XReg,
        off: i32,
    },
    Jmp {
        off: i32,
    },
    CMove {
        cd: CReg,
        cs: CReg,
    },
    CIncOffset {
        cd: CReg,
        cs: CReg,
        by: RegImm,
    },
    CSetBounds {
        cd: CReg,
        cs: CReg,
        len: RegImm,
    },
    CSetAddr {
        cd: CReg,
        cs: CReg,
        rs: XReg,
    },
    CAndPerm {
        cd: CReg,
        cs: CReg,
        mask: Perms,
    },
    CSealEntry {
        cd: CReg,
        cs: CReg,
    },
    CGetBase {
        rd: XReg,
        cs: CReg,
    },
    CGetLen {
        rd: XReg,
        cs: CReg,
    },
    CGetAddr {
        rd: XReg,
        cs: CReg,
    },
    CGetTag {
        rd: XReg,
        cs: CReg,
    },
    CGetPerm {
        rd: XReg,
        cs: CReg,
    },
    /// Load capability from captable slot `idx` through CGP.
    Clc {
        cd: CReg,
        idx: i32,
    },
    Clw {
        rd: XReg,
        cs: CReg,
        off: i32,
    },
    Csw {
        rs: XReg,
        cs: CReg,
        off: i32,
    },
    Clb {
        rd: XReg,
        cs: CReg,
        off: i32,
    },
    Csb {
        rs: XReg,
        cs: CReg,
        off: i32,
    },
    Clcr {
        cd: CReg,
        cs: CReg,
        off: i32,
    },
    Cscr {
        cv: CReg,
        cs: CReg,
        off: i32,
    },
    CJalr {
        cs: CReg,
    },
    CRet,
    /// Trap with `kind` when the register is non-zero.
    TrapIf {
        rs: XReg,
        kind: FaultKind,
    },
    Yield,
    QSend {
        rq: XReg,
        cs: CReg,
    },
    QRecv {
        rq: XReg,
        cs: CReg,
    },
    RdInstr {
        rd: XReg,
    },
    GetCid {
        rd: XReg,
    },
    // Switcher-only instructions: legal only while executing in the switcher arena.
    SetCid {
        cs: CReg,
    },
    CtxPush {
        resume_off: i32,
    },
    CtxPop,
    FaultRet,
}

mod op {
    pub const HALT: u8 = 0x01;
    pub const NOP: u8 = 0x02;
    pub const LI: u8 = 0x03;
    pub const ADD: u8 = 0x04;
    pub const SUB: u8 = 0x05;
    pub const ADDI: u8 = 0x06;
    pub const MUL: u8 = 0x07;
    pub const AND: u8 = 0x08;
    pub const BEQ: u8 = 0x09;
    pub const BNE: u8 = 0x0a;
    pub const BLT: u8 = 0x0b;
    pub const BGE: u8 = 0x0c;
    pub const JMP: u8 = 0x0d;
    pub const CMOVE: u8 = 0x10;
    pub const CINCOFFSET: u8 = 0x11;
    pub const CSETBOUNDS: u8 = 0x12;
    pub const CSETADDR: u8 = 0x13;
    pub const CANDPERM: u8 = 0x14;
    pub const CSEALENTRY: u8 = 0x15;
    pub const CGETBASE: u8 = 0x16;
    pub const CGETLEN: u8 = 0x17;
    pub const CGETADDR: u8 = 0x18;
    pub const CGETTAG: u8 = 0x19;
    pub const CGETPERM: u8 = 0x1a;
    pub const CLC: u8 = 0x20;
    pub const CLW: u8 = 0x21;
    pub const CSW: u8 = 0x22;
    pub const CLB: u8 = 0x23;
    pub const CSB: u8 = 0x24;
    pub const CLCR: u8 = 0x25;
    pub const CSCR: u8 = 0x26;
    pub const CJALR: u8 = 0x30;
    pub const CRET: u8 = 0x31;
    pub const TRAPIF: u8 = 0x38;
    pub const YIELD: u8 = 0x39;
    pub const QSEND: u8 = 0x3a;
    pub const QRECV: u8 = 0x3b;
    pub const RDINSTR: u8 = 0x3c;
    pub const GETCID: u8 = 0x3d;
    pub const SETCID: u8 = 0x40;
    pub const CTXPUSH: u8 = 0x41;
    pub const CTXPOP: u8 = 0x42;
    pub const FAULTRET: u8 = 0x43;
}

/// Opcode byte of a CLC instruction, the only legal site of a captable-slot relocation.
pub const CLC_OPCODE: u8 = op::CLC;

fn pack(opcode: u8, rd: u8, rs1: u8, rs2: u8, imm: i32) -> [u8; 8] {
    let mut w = [0u8; 8];
    w[0] = opcode;
    w[1] = rd;
    w[2] = rs1;
    w[3] = rs2;
    w[4..8].copy_from_slice(&imm.to_le_bytes());
    w
}

fn opt_x(r: Option<XReg>) -> u8 {
    r.map_or(NO_REG, |r| r.0)
}

impl Instr {
    pub fn encode(&self) -> [u8; 8] {
        use Instr::*;
        match *self {
            Halt => pack(op::HALT, 0, 0, 0, 0),
            Nop => pack(op::NOP, 0, 0, 0, 0),
            Li { rd, imm } => pack(op::LI, rd.0, 0, 0, imm),
            Add { rd, rs1, rs2 } => pack(op::ADD, rd.0, rs1.0, rs2.0, 0),
            Sub { rd, rs1, rs2 } => pack(op::SUB, rd.0, rs1.0, rs2.0, 0),
            Addi { rd, rs1, imm } => pack(op::ADDI, rd.0, rs1.0, 0, imm),
            Mul { rd, rs1, rs2 } => pack(op::MUL, rd.0, rs1.0, rs2.0, 0),
            And { rd, rs1, rs2 } => pack(op::AND, rd.0, rs1.0, rs2.0, 0),
            Beq { rs1, rs2, off } => pack(op::BEQ, 0, rs1.0, rs2.0, off),
            Bne { rs1, rs2, off } => pack(op::BNE, 0, rs1.0, rs2.0, off),
            Blt { rs1, rs2, off } => pack(op::BLT, 0, rs1.0, rs2.0, off),
            Bge { rs1, rs2, off } => pack(op::BGE, 0, rs1.0, rs2.0, off),
            Jmp { off } => pack(op::JMP, 0, 0, 0, off),
            CMove { cd, cs } => pack(op::CMOVE, cd.code(), cs.code(), 0, 0),
            CIncOffset { cd, cs, by } => pack(op::CINCOFFSET, cd.code(), cs.code(), opt_x(by.reg), by.imm),
            CSetBounds { cd, cs, len } => pack(op::CSETBOUNDS, cd.code(), cs.code(), opt_x(len.reg), len.imm),
            CSetAddr { cd, cs, rs } => pack(op::CSETADDR, cd.code(), cs.code(), rs.0, 0),
            CAndPerm { cd, cs, mask } => pack(op::CANDPERM, cd.code(), cs.code(), 0, mask.bits() as i32),
            CSealEntry { cd, cs } => pack(op::CSEALENTRY, cd.code(), cs.code(), 0, 0),
            CGetBase { rd, cs } => pack(op::CGETBASE, rd.0, cs.code(), 0, 0),
            CGetLen { rd, cs } => pack(op::CGETLEN, rd.0, cs.code(), 0, 0),
            CGetAddr { rd, cs } => pack(op::CGETADDR, rd.0, cs.code(), 0, 0),
            CGetTag { rd, cs } => pack(op::CGETTAG, rd.0, cs.code(), 0, 0),
            CGetPerm { rd, cs } => pack(op::CGETPERM, rd.0, cs.code(), 0, 0),
            Clc { cd, idx } => pack(op::CLC, cd.code(), 0, 0, idx),
            Clw { rd, cs, off } => pack(op::CLW, rd.0, cs.code(), 0, off),
            Csw { rs, cs, off } => pack(op::CSW, 0, cs.code(), rs.0, off),
            Clb { rd, cs, off } => pack(op::CLB, rd.0, cs.code(), 0, off),
            Csb { rs, cs, off } => pack(op::CSB, 0, cs.code(), rs.0, off),
            Clcr { cd, cs, off } => pack(op::CLCR, cd.code(), cs.code(), 0, off),
            Cscr { cv, cs, off } => pack(op::CSCR, 0, cs.code(), cv.code(), off),
            CJalr { cs } => pack(op::CJALR, 0, cs.code(), 0, 0),
            CRet => pack(op::CRET, 0, 0, 0, 0),
            TrapIf { rs, kind } => pack(op::TRAPIF, 0, rs.0, 0, kind.code() as i32),
            Yield => pack(op::YIELD, 0, 0, 0, 0),
            QSend { rq, cs } => pack(op::QSEND, 0, rq.0, cs.code(), 0),
            QRecv { rq, cs } => pack(op::QRECV, 0, rq.0, cs.code(), 0),
            RdInstr { rd } => pack(op::RDINSTR, rd.0, 0, 0, 0),
            GetCid { rd } => pack(op::GETCID, rd.0, 0, 0, 0),
            SetCid { cs } => pack(op::SETCID, 0, cs.code(), 0, 0),
            CtxPush { resume_off } => pack(op::CTXPUSH, 0, 0, 0, resume_off),
            CtxPop => pack(op::CTXPOP, 0, 0, 0, 0),
            FaultRet => pack(op::FAULTRET, 0, 0, 0, 0),
        }
    }

    /// Decode one instruction word. Returns `None` for anything that is not
    /// the canonical encoding of some instruction.
    pub fn decode(w: &[u8; 8]) -> Option<Instr> {
        let (opcode, rd, rs1, rs2) = (w[0], w[1], w[2], w[3]);
        let imm = i32::from_le_bytes(w[4..8].try_into().unwrap());
        let x = XReg::new;
        let c = CReg::from_code;
        let cw = |code: u8| CReg::from_code(code).filter(|r| r.writable());
        let opt = |code: u8| -> Option<Option<XReg>> {
            if code == NO_REG {
                Some(None)
            } else {
                XReg::new(code).map(Some)
            }
        };
        use Instr::*;
        let instr = match opcode {
            op::HALT => Halt,
            op::NOP => Nop,
            op::LI => Li { rd: x(rd)?, imm },
            op::ADD => Add { rd: x(rd)?, rs1: x(rs1)?, rs2: x(rs2)? },
            op::SUB => Sub { rd: x(rd)?, rs1: x(rs1)?, rs2: x(rs2)? },
            op::ADDI => Addi { rd: x(rd)?, rs1: x(rs1)?, imm },
            op::MUL => Mul { rd: x(rd)?, rs1: x(rs1)?, rs2: x(rs2)? },
            op::AND => And { rd: x(rd)?, rs1: x(rs1)?, rs2: x(rs2)? },
            op::BEQ => Beq { rs1: x(rs1)?, rs2: x(rs2)?, off: imm },
            op::BNE => Bne { rs1: x(rs1)?, rs2: x(rs2)?, off: imm },
            op::BLT => Blt { rs1: x(rs1)?, rs2: x(rs2)?, off: imm },
            op::BGE => Bge { rs1: x(rs1)?, rs2: x(rs2)?, off: imm },
            op::JMP => Jmp { off: imm },
            op::CMOVE => CMove { cd: cw(rd)?, cs: c(rs1)? },
            op::CINCOFFSET => CIncOffset { cd: cw(rd)?, cs: c(rs1)?, by: RegImm { reg: opt(rs2)?, imm } },
            op::CSETBOUNDS => CSetBounds { cd: cw(rd)?, cs: c(rs1)?, len: RegImm { reg: opt(rs2)?, imm } },
            op::CSETADDR => CSetAddr { cd: cw(rd)?, cs: c(rs1)?, rs: x(rs2)? },
            op::CANDPERM => {
                let mask = u8::try_from(imm).ok().and_then(Perms::from_bits)?;
                CAndPerm { cd: cw(rd)?, cs: c(rs1)?, mask }
            }
            op::CSEALENTRY => CSealEntry { cd: cw(rd)?, cs: c(rs1)? },
            op::CGETBASE => CGetBase { rd: x(rd)?, cs: c(rs1)? },
            op::CGETLEN => CGetLen { rd: x(rd)?, cs: c(rs1)? },
            op::CGETADDR => CGetAddr { rd: x(rd)?, cs: c(rs1)? },
            op::CGETTAG => CGetTag { rd: x(rd)?, cs: c(rs1)? },
            op::CGETPERM => CGetPerm { rd: x(rd)?, cs: c(rs1)? },
            op::CLC => Clc { cd: cw(rd)?, idx: imm },
            op::CLW => Clw { rd: x(rd)?, cs: c(rs1)?, off: imm },
            op::CSW => Csw { rs: x(rs2)?, cs: c(rs1)?, off: imm },
            op::CLB => Clb { rd: x(rd)?, cs: c(rs1)?, off: imm },
            op::CSB => Csb { rs: x(rs2)?, cs: c(rs1)?, off: imm },
            op::CLCR => Clcr { cd: cw(rd)?, cs: c(rs1)?, off: imm },
            op::CSCR => Cscr { cv: c(rs2)?, cs: c(rs1)?, off: imm },
            op::CJALR => CJalr { cs: c(rs1)? },
            op::CRET => CRet,
            op::TRAPIF => TrapIf { rs: x(rs1)?, kind: FaultKind::from_code(u32::try_from(imm).ok()?)? },
            op::YIELD => Yield,
            op::QSEND => QSend { rq: x(rs1)?, cs: c(rs2)? },
            op::QRECV => QRecv { rq: x(rs1)?, cs: c(rs2)? },
            op::RDINSTR => RdInstr { rd: x(rd)? },
            op::GETCID => GetCid { rd: x(rd)? },
            op::SETCID => SetCid { cs: c(rs1)? },
            op::CTXPUSH => CtxPush { resume_off: imm },
            op::CTXPOP => CtxPop,
            op::FAULTRET => FaultRet,
            _ => return None,
        };
        // Canonical form only: unused fields must be zero.
        (instr.encode() == *w).then_some(instr)
    }

    /// Whether this instruction may only run inside the switcher arena.
    pub fn is_switcher_only(&self) -> bool {
        matches!(self, Instr::SetCid { .. } | Instr::CtxPush { .. } | Instr::CtxPop | Instr::FaultRet)
    }
}

/// Encode a sequence of instructions into a contiguous byte image.
pub fn encode_all(prog: &[Instr]) -> Vec<u8> {
    prog.iter().flat_map(|i| i.encode()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_opcode_rd_rs1_rs2_imm() {
        let w = Instr::Addi { rd: XReg(1), rs1: XReg(2), imm: -3 }.encode();
        assert_eq!(w, [op::ADDI, 1, 2, 0, 0xfd, 0xff, 0xff, 0xff]);
        let w = Instr::Csw { rs: XReg(3), cs: CReg::Csp, off: 16 }.encode();
        assert_eq!(w, [op::CSW, 0, 9, 3, 16, 0, 0, 0]);
    }

    #[test]
    fn zero_word_is_illegal() {
        assert_eq!(Instr::decode(&[0; 8]), None);
    }

    #[test]
    fn non_canonical_rejected() {
        let mut w = Instr::Halt.encode();
        w[1] = 1;
        assert_eq!(Instr::decode(&w), None);
        let mut w = Instr::CMove { cd: CReg::c(1), cs: CReg::c(2) }.encode();
        w[1] = CReg::Pcc.code();
        assert_eq!(Instr::decode(&w), None, "pcc is not writable");
    }

    proptest! {
        #[test]
        fn decode_encode_is_identity_on_accepted_words(w in any::<[u8; 8]>()) {
            if let Some(i) = Instr::decode(&w) {
                prop_assert_eq!(i.encode(), w);
            }
        }

        #[test]
        fn decode_accepts_every_opcode_family(opcode in 0u8..0x50, rd in 0u8..13, rs1 in 0u8..13, imm in -64i32..64) {
            let w = pack(opcode, rd, rs1, 0, imm);
            if let Some(i) = Instr::decode(&w) {
                prop_assert_eq!(Instr::decode(&i.encode()), Some(i));
            }
        }
    }
}
