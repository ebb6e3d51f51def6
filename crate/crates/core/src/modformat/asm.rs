//! Two-pass assembler from a small textual syntax to [`ModuleImage`].
//!
//! ```text
//! .section .text            # or .text / .rodata / .data / .bss
//! .interface get            # .global, .local (the default)
//! get:
//!     clc   c1, cap(counter)   # every global reference goes through the captable
//!     clw   x0, 0(c1)
//!     cret
//! .section .data
//! counter: .word 7
//! ```
//!
//! Labels starting with `.L` are local to the assembler and never become
//! symbols. A symbol extends to the next symbol in its section. `.text`
//! symbols are functions. Memory operands based on `pcc` are rejected: that
//! addressing form belongs to loader-generated code.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::{validate, Diagnostic, ModuleImage, RelocKind, Relocation, Section, SectionKind, Symbol, SymbolClass};
use crate::capmachine::{CReg, FaultKind, Instr, Perms, RegImm, XReg, INSTR_SIZE};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: duplicate symbol {name}")]
    DuplicateSymbol { line: usize, name: String },
    #[error("line {line}: unknown mnemonic {mnemonic}")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: undefined label {name}")]
    UndefinedLabel { line: usize, name: String },
    #[error("interface symbol {name} is not a function")]
    InterfaceNotFunction { name: String },
    #[error("assembled module is invalid: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
}

/// An assembled module plus every label (including `.L` ones) and its location.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub image: ModuleImage,
    pub labels: BTreeMap<String, (SectionKind, u32)>,
}

pub fn assemble(name: &str, source: &str) -> Result<ModuleImage, AsmError> {
    assemble_with_labels(name, source).map(|a| a.image)
}

enum Item {
    Instr { mnemonic: String, ops: Vec<String> },
    Words(Vec<String>),
    Bytes(Vec<String>),
    Zero(u32),
}

struct Stmt {
    line: usize,
    section: SectionKind,
    offset: u32,
    item: Item,
}

fn syntax(line: usize, message: impl Into<String>) -> AsmError {
    AsmError::Syntax { line, message: message.into() }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$')
}

fn split_ops(s: &str) -> Vec<String> {
    if s.trim().is_empty() {
        return Vec::new();
    }
    s.split(',').map(|o| o.trim().to_string()).collect()
}

fn parse_int(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = if let Some(h) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(h, 16).ok()?
    } else if let Some(b) = body.strip_prefix("0b") {
        i64::from_str_radix(b, 2).ok()?
    } else {
        body.parse::<i64>().ok()?
    };
    Some(if neg { -v } else { v })
}

fn section_size(kind: SectionKind, sizes: &HashMap<SectionKind, u32>) -> u32 {
    sizes.get(&kind).copied().unwrap_or(0)
}

pub fn assemble_with_labels(name: &str, source: &str) -> Result<Assembly, AsmError> {
    let mut section: Option<SectionKind> = None;
    let mut sizes: HashMap<SectionKind, u32> = HashMap::new();
    let mut stmts: Vec<Stmt> = Vec::new();
    let mut labels: BTreeMap<String, (SectionKind, u32)> = BTreeMap::new();
    let mut label_order: Vec<(String, usize)> = Vec::new();
    let mut decls: HashMap<String, (SymbolClass, usize)> = HashMap::new();

    // Pass 1: layout.
    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let mut text = raw.split(['#', ';']).next().unwrap_or("").trim();
        while let Some(colon) = text.find(':') {
            let label = text[..colon].trim();
            if !is_ident(label) {
                break;
            }
            let sec = section.ok_or_else(|| syntax(line, "label outside any section"))?;
            if labels.contains_key(label) {
                return Err(AsmError::DuplicateSymbol { line, name: label.to_string() });
            }
            labels.insert(label.to_string(), (sec, section_size(sec, &sizes)));
            label_order.push((label.to_string(), line));
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        let (head, rest) = match text.find(char::is_whitespace) {
            Some(i) => (&text[..i], text[i..].trim()),
            None => (text, ""),
        };
        let head = head.to_ascii_lowercase();
        let shorthand = SectionKind::from_name(&head);
        if head == ".section" || shorthand.is_some() {
            let kind = match shorthand {
                Some(k) => k,
                None => {
                    SectionKind::from_name(rest).ok_or_else(|| syntax(line, format!("unknown section {rest:?}")))?
                }
            };
            section = Some(kind);
            sizes.entry(kind).or_insert(0);
            continue;
        }
        let class = match head.as_str() {
            ".global" | ".globl" => Some(SymbolClass::Global),
            ".interface" => Some(SymbolClass::Interface),
            ".local" => Some(SymbolClass::Local),
            _ => None,
        };
        if let Some(class) = class {
            for n in split_ops(rest) {
                if !is_ident(&n) || n.starts_with(".L") {
                    return Err(syntax(line, format!("bad symbol name {n:?}")));
                }
                if let Some((prev, _)) = decls.get(&n) {
                    if *prev != class {
                        return Err(syntax(line, format!("conflicting visibility for {n}")));
                    }
                }
                decls.insert(n, (class, line));
            }
            continue;
        }

        let sec = section.ok_or_else(|| syntax(line, "statement outside any section"))?;
        let offset = section_size(sec, &sizes);
        let (item, size) = match head.as_str() {
            ".word" | ".byte" => {
                if matches!(sec, SectionKind::Code | SectionKind::ZeroFill) {
                    return Err(syntax(line, format!("{head} not allowed in {sec}")));
                }
                let ops = split_ops(rest);
                if ops.is_empty() {
                    return Err(syntax(line, format!("{head} needs at least one value")));
                }
                if head == ".word" {
                    let n = ops.len() as u32 * 4;
                    (Item::Words(ops), n)
                } else {
                    let n = ops.len() as u32;
                    (Item::Bytes(ops), n)
                }
            }
            ".zero" | ".space" => {
                if sec == SectionKind::Code {
                    return Err(syntax(line, ".zero not allowed in .text"));
                }
                let n = parse_int(rest)
                    .and_then(|v| u32::try_from(v).ok())
                    .ok_or_else(|| syntax(line, format!("bad size {rest:?}")))?;
                (Item::Zero(n), n)
            }
            ".align" => {
                let n = parse_int(rest)
                    .and_then(|v| u32::try_from(v).ok())
                    .filter(|v| v.is_power_of_two())
                    .ok_or_else(|| syntax(line, format!("bad alignment {rest:?}")))?;
                if sec == SectionKind::Code {
                    if n > INSTR_SIZE {
                        return Err(syntax(line, "code cannot be aligned beyond one instruction"));
                    }
                    continue;
                }
                let pad = (n - offset % n) % n;
                (Item::Zero(pad), pad)
            }
            h if h.starts_with('.') => return Err(syntax(line, format!("unknown directive {h}"))),
            _ => {
                if sec != SectionKind::Code {
                    return Err(syntax(line, format!("instruction in {sec}")));
                }
                (Item::Instr { mnemonic: head.clone(), ops: split_ops(rest) }, INSTR_SIZE)
            }
        };
        let new_size = offset.checked_add(size).ok_or_else(|| syntax(line, "section larger than 4 GiB"))?;
        sizes.insert(sec, new_size);
        stmts.push(Stmt { line, section: sec, offset, item });
    }

    for (n, (_, line)) in &decls {
        if !labels.contains_key(n) {
            return Err(AsmError::UndefinedLabel { line: *line, name: n.clone() });
        }
    }

    // Symbols in definition order; sized up to the next symbol in the section.
    let mut symbols = Vec::new();
    for (n, _) in &label_order {
        if n.starts_with(".L") {
            continue;
        }
        let (sec, off) = labels[n];
        let end = label_order
            .iter()
            .filter(|(m, _)| !m.starts_with(".L"))
            .map(|(m, _)| labels[m])
            .filter(|(s, o)| *s == sec && *o > off)
            .map(|(_, o)| o)
            .min()
            .unwrap_or(section_size(sec, &sizes));
        let class = decls.get(n).map_or(SymbolClass::Local, |(c, _)| *c);
        let is_function = sec == SectionKind::Code;
        if class == SymbolClass::Interface && !is_function {
            return Err(AsmError::InterfaceNotFunction { name: n.clone() });
        }
        symbols.push(Symbol { name: n.clone(), class, section: sec, offset: off, size: end - off, is_function });
    }

    // Pass 2: encode.
    let mut payloads: HashMap<SectionKind, Vec<u8>> = HashMap::new();
    let mut relocations = Vec::new();
    for st in &stmts {
        let buf = payloads.entry(st.section).or_default();
        debug_assert_eq!(buf.len() as u32, st.offset);
        match &st.item {
            Item::Zero(n) => buf.resize(buf.len() + *n as usize, 0),
            Item::Bytes(vals) => {
                for v in vals {
                    let b = parse_int(v)
                        .filter(|b| (-128..=255).contains(b))
                        .ok_or_else(|| syntax(st.line, format!("bad byte {v:?}")))?;
                    buf.push(b as u8);
                }
            }
            Item::Words(vals) => {
                for v in vals {
                    let word = match parse_int(v) {
                        Some(w) if (i32::MIN as i64..=u32::MAX as i64).contains(&w) => w as u32,
                        Some(_) => return Err(syntax(st.line, format!("word {v:?} out of range"))),
                        None => {
                            if !is_ident(v) || v.starts_with(".L") || !labels.contains_key(v.as_str()) {
                                return Err(AsmError::UndefinedLabel { line: st.line, name: v.clone() });
                            }
                            relocations.push(Relocation {
                                kind: RelocKind::AbsInSection,
                                section: st.section,
                                offset: buf.len() as u32,
                                target: v.clone(),
                            });
                            0
                        }
                    };
                    buf.extend_from_slice(&word.to_le_bytes());
                }
            }
            Item::Instr { mnemonic, ops } => {
                let mut cx = InstrCx { line: st.line, pc: st.offset, labels: &labels, reloc: None };
                let instr = cx.encode(mnemonic, ops)?;
                if let Some(target) = cx.reloc {
                    relocations.push(Relocation {
                        kind: RelocKind::GprelSlot,
                        section: SectionKind::Code,
                        offset: st.offset + 4,
                        target,
                    });
                }
                buf.extend_from_slice(&instr.encode());
            }
        }
    }

    let mut kinds: Vec<SectionKind> = sizes.keys().copied().collect();
    kinds.sort();
    let sections = kinds
        .into_iter()
        .map(|kind| {
            let size = sizes[&kind];
            let payload =
                if kind == SectionKind::ZeroFill { Vec::new() } else { payloads.remove(&kind).unwrap_or_default() };
            Section { kind, payload, size }
        })
        .collect();

    let mut image = ModuleImage::new(name);
    image.sections = sections;
    image.symbols = symbols;
    image.relocations = relocations;
    let diags = validate(&image);
    if !diags.is_empty() {
        return Err(AsmError::Invalid(diags));
    }
    Ok(Assembly { image, labels })
}

struct InstrCx<'a> {
    line: usize,
    pc: u32,
    labels: &'a BTreeMap<String, (SectionKind, u32)>,
    reloc: Option<String>,
}

impl InstrCx<'_> {
    fn err(&self, message: impl Into<String>) -> AsmError {
        syntax(self.line, message)
    }

    fn x(&self, s: &str) -> Result<XReg, AsmError> {
        s.strip_prefix('x')
            .and_then(|n| n.parse::<u8>().ok())
            .and_then(XReg::new)
            .ok_or_else(|| self.err(format!("expected integer register, got {s:?}")))
    }

    fn c(&self, s: &str) -> Result<CReg, AsmError> {
        CReg::parse(s).ok_or_else(|| self.err(format!("expected capability register, got {s:?}")))
    }

    fn cw(&self, s: &str) -> Result<CReg, AsmError> {
        let r = self.c(s)?;
        if !r.writable() {
            return Err(self.err(format!("{r} is not writable")));
        }
        Ok(r)
    }

    fn imm(&self, s: &str) -> Result<i32, AsmError> {
        parse_int(s)
            .filter(|v| (i32::MIN as i64..=u32::MAX as i64).contains(v))
            .map(|v| v as i32)
            .ok_or_else(|| self.err(format!("bad immediate {s:?}")))
    }

    fn reg_imm(&self, s: &str) -> Result<RegImm, AsmError> {
        if s.starts_with('x') {
            let split = s.find(['+', '-']);
            let (r, rest) = match split {
                Some(i) => (&s[..i], Some(&s[i..])),
                None => (s, None),
            };
            let reg = Some(self.x(r.trim())?);
            let imm = match rest {
                Some(t) => self.imm(&t.replace(' ', ""))?,
                None => 0,
            };
            return Ok(RegImm { reg, imm });
        }
        Ok(RegImm { reg: None, imm: self.imm(s)? })
    }

    /// `off(creg)`, with `off` optional.
    fn mem(&self, s: &str) -> Result<(i32, CReg), AsmError> {
        let open = s.find('(').ok_or_else(|| self.err(format!("expected off(creg), got {s:?}")))?;
        let inner =
            s[open + 1..].strip_suffix(')').ok_or_else(|| self.err(format!("expected off(creg), got {s:?}")))?;
        let base = self.c(inner.trim())?;
        if base == CReg::Pcc {
            return Err(self.err("pcc-relative access is reserved for loader-generated code"));
        }
        let off = s[..open].trim();
        let off = if off.is_empty() { 0 } else { self.imm(off)? };
        Ok((off, base))
    }

    fn target(&self, s: &str) -> Result<i32, AsmError> {
        match self.labels.get(s) {
            Some((SectionKind::Code, off)) => Ok(*off as i32 - self.pc as i32),
            Some(_) => Err(self.err(format!("branch target {s} is not in .text"))),
            None => Err(AsmError::UndefinedLabel { line: self.line, name: s.to_string() }),
        }
    }

    fn perms(&self, s: &str) -> Result<Perms, AsmError> {
        if let Some(v) = parse_int(s) {
            return u8::try_from(v)
                .ok()
                .and_then(Perms::from_bits)
                .ok_or_else(|| self.err(format!("bad permission mask {s:?}")));
        }
        let mut p = Perms::empty();
        for part in s.split('|') {
            p |= match part.trim() {
                "load" => Perms::LOAD,
                "store" => Perms::STORE,
                "execute" => Perms::EXECUTE,
                "load_cap" => Perms::LOAD_CAP,
                "store_cap" => Perms::STORE_CAP,
                "code" => Perms::CODE,
                "rodata" => Perms::RODATA,
                "data" => Perms::DATA,
                other => return Err(self.err(format!("unknown permission {other:?}"))),
            };
        }
        Ok(p)
    }

    fn encode(&mut self, mnemonic: &str, ops: &[String]) -> Result<Instr, AsmError> {
        let arity = |n: usize| -> Result<(), AsmError> {
            if ops.len() != n {
                return Err(syntax(self.line, format!("{mnemonic} takes {n} operand(s), got {}", ops.len())));
            }
            Ok(())
        };
        let o = |i: usize| ops[i].as_str();
        use Instr::*;
        let instr = match mnemonic {
            "halt" | "nop" | "cret" | "ret" | "yield" | "ctxpop" | "faultret" => {
                arity(0)?;
                match mnemonic {
                    "halt" => Halt,
                    "nop" => Nop,
                    "yield" => Yield,
                    "ctxpop" => CtxPop,
                    "faultret" => FaultRet,
                    _ => CRet,
                }
            }
            "li" => {
                arity(2)?;
                Li { rd: self.x(o(0))?, imm: self.imm(o(1))? }
            }
            "add" | "sub" | "mul" | "and" => {
                arity(3)?;
                let (rd, rs1, rs2) = (self.x(o(0))?, self.x(o(1))?, self.x(o(2))?);
                match mnemonic {
                    "add" => Add { rd, rs1, rs2 },
                    "sub" => Sub { rd, rs1, rs2 },
                    "mul" => Mul { rd, rs1, rs2 },
                    _ => And { rd, rs1, rs2 },
                }
            }
            "addi" => {
                arity(3)?;
                Addi { rd: self.x(o(0))?, rs1: self.x(o(1))?, imm: self.imm(o(2))? }
            }
            "beq" | "bne" | "blt" | "bge" => {
                arity(3)?;
                let (rs1, rs2, off) = (self.x(o(0))?, self.x(o(1))?, self.target(o(2))?);
                match mnemonic {
                    "beq" => Beq { rs1, rs2, off },
                    "bne" => Bne { rs1, rs2, off },
                    "blt" => Blt { rs1, rs2, off },
                    _ => Bge { rs1, rs2, off },
                }
            }
            "j" | "jmp" => {
                arity(1)?;
                Jmp { off: self.target(o(0))? }
            }
            "cmove" | "csealentry" => {
                arity(2)?;
                let (cd, cs) = (self.cw(o(0))?, self.c(o(1))?);
                if mnemonic == "cmove" {
                    CMove { cd, cs }
                } else {
                    CSealEntry { cd, cs }
                }
            }
            "cincoffset" => {
                arity(3)?;
                CIncOffset { cd: self.cw(o(0))?, cs: self.c(o(1))?, by: self.reg_imm(o(2))? }
            }
            "csetbounds" => {
                arity(3)?;
                CSetBounds { cd: self.cw(o(0))?, cs: self.c(o(1))?, len: self.reg_imm(o(2))? }
            }
            "csetaddr" => {
                arity(3)?;
                CSetAddr { cd: self.cw(o(0))?, cs: self.c(o(1))?, rs: self.x(o(2))? }
            }
            "candperm" => {
                arity(3)?;
                CAndPerm { cd: self.cw(o(0))?, cs: self.c(o(1))?, mask: self.perms(o(2))? }
            }
            "cgetbase" | "cgetlen" | "cgetaddr" | "cgettag" | "cgetperm" => {
                arity(2)?;
                let (rd, cs) = (self.x(o(0))?, self.c(o(1))?);
                match mnemonic {
                    "cgetbase" => CGetBase { rd, cs },
                    "cgetlen" => CGetLen { rd, cs },
                    "cgetaddr" => CGetAddr { rd, cs },
                    "cgettag" => CGetTag { rd, cs },
                    _ => CGetPerm { rd, cs },
                }
            }
            "clc" => {
                arity(2)?;
                let cd = self.cw(o(0))?;
                let slot = o(1);
                let idx = if let Some(sym) = slot.strip_prefix("cap(").and_then(|s| s.strip_suffix(')')) {
                    let sym = sym.trim();
                    if !is_ident(sym) || sym.starts_with(".L") {
                        return Err(self.err(format!("captable reference to non-symbol {sym:?}")));
                    }
                    self.reloc = Some(sym.to_string());
                    0
                } else {
                    self.imm(slot)?
                };
                Clc { cd, idx }
            }
            "clw" | "clb" => {
                arity(2)?;
                let rd = self.x(o(0))?;
                let (off, cs) = self.mem(o(1))?;
                if mnemonic == "clw" {
                    Clw { rd, cs, off }
                } else {
                    Clb { rd, cs, off }
                }
            }
            "csw" | "csb" => {
                arity(2)?;
                let rs = self.x(o(0))?;
                let (off, cs) = self.mem(o(1))?;
                if mnemonic == "csw" {
                    Csw { rs, cs, off }
                } else {
                    Csb { rs, cs, off }
                }
            }
            "clcr" => {
                arity(2)?;
                let cd = self.cw(o(0))?;
                let (off, cs) = self.mem(o(1))?;
                Clcr { cd, cs, off }
            }
            "cscr" => {
                arity(2)?;
                let cv = self.c(o(0))?;
                let (off, cs) = self.mem(o(1))?;
                Cscr { cv, cs, off }
            }
            "cjalr" => {
                arity(1)?;
                CJalr { cs: self.c(o(0))? }
            }
            "trapif" => {
                if ops.is_empty() || ops.len() > 2 {
                    return Err(self.err("trapif takes a register and an optional fault kind"));
                }
                let kind = match ops.get(1) {
                    Some(k) => FaultKind::parse(k).ok_or_else(|| self.err(format!("unknown fault kind {k:?}")))?,
                    None => FaultKind::IllegalInstruction,
                };
                TrapIf { rs: self.x(o(0))?, kind }
            }
            "qsend" | "qrecv" => {
                arity(2)?;
                let (rq, cs) = (self.x(o(0))?, self.c(o(1))?);
                if mnemonic == "qsend" {
                    QSend { rq, cs }
                } else {
                    QRecv { rq, cs }
                }
            }
            "rdinstr" => {
                arity(1)?;
                RdInstr { rd: self.x(o(0))? }
            }
            "getcid" => {
                arity(1)?;
                GetCid { rd: self.x(o(0))? }
            }
            "setcid" => {
                arity(1)?;
                SetCid { cs: self.c(o(0))? }
            }
            "ctxpush" => {
                arity(1)?;
                CtxPush { resume_off: self.imm(o(0))? }
            }
            _ => return Err(AsmError::UnknownMnemonic { line: self.line, mnemonic: mnemonic.to_string() }),
        };
        Ok(instr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
        .section .text
        .interface get
        .global helper
        get:
            clc   c1, cap(counter)
            clw   x0, 0(c1)
            li    x1, 3
        .Lloop:
            addi  x1, x1, -1
            bne   x1, x2, .Lloop   # x2 is zero
            cret
        helper:
            clc   c2, cap(other_comp_fn)
            cjalr c2
            cret
        .section .data
        counter: .word 7, 8
        ptr:     .word counter
        .bss
        buf: .zero 32
    ";

    #[test]
    fn assembles_sample() {
        let a = assemble_with_labels("m", SAMPLE).unwrap();
        let img = &a.image;
        assert_eq!(img.section(SectionKind::Code).unwrap().size, 9 * 8);
        assert_eq!(img.section(SectionKind::Data).unwrap().size, 12);
        assert_eq!(img.section(SectionKind::ZeroFill).unwrap().size, 32);
        let get = img.symbol("get").unwrap();
        assert_eq!((get.class, get.offset, get.size, get.is_function), (SymbolClass::Interface, 0, 48, true));
        assert_eq!(img.symbol("counter").unwrap().size, 8);
        assert!(img.symbol(".Lloop").is_none());
        assert_eq!(a.labels[".Lloop"], (SectionKind::Code, 24));
        assert_eq!(img.externals(), vec!["other_comp_fn".to_string()]);
        let abs: Vec<_> = img.relocations.iter().filter(|r| r.kind == RelocKind::AbsInSection).collect();
        assert_eq!(abs.len(), 1);
        assert_eq!((abs[0].offset, abs[0].target.as_str()), (8, "counter"));
    }

    #[test]
    fn branch_offsets_are_relative_to_the_branch() {
        let img = assemble("m", SAMPLE).unwrap();
        let text = &img.section(SectionKind::Code).unwrap().payload;
        let w: [u8; 8] = text[32..40].try_into().unwrap();
        assert_eq!(
            Instr::decode(&w),
            Some(Instr::Bne { rs1: XReg::new(1).unwrap(), rs2: XReg::new(2).unwrap(), off: -8 })
        );
    }

    #[test]
    fn errors_carry_lines() {
        let e = assemble("m", ".text\nf:\n  frob x1\n").unwrap_err();
        assert_eq!(e, AsmError::UnknownMnemonic { line: 3, mnemonic: "frob".into() });
        let e = assemble("m", ".text\nf: cret\nf: cret\n").unwrap_err();
        assert_eq!(e, AsmError::DuplicateSymbol { line: 3, name: "f".into() });
        let e = assemble("m", ".text\nf: j nowhere\n").unwrap_err();
        assert_eq!(e, AsmError::UndefinedLabel { line: 2, name: "nowhere".into() });
        let e = assemble("m", ".interface d\n.data\nd: .word 1\n").unwrap_err();
        assert_eq!(e, AsmError::InterfaceNotFunction { name: "d".into() });
        assert!(matches!(assemble("m", "cret\n"), Err(AsmError::Syntax { line: 1, .. })));
        assert!(matches!(assemble("m", ".text\nf: clw x1, 0(pcc)\n"), Err(AsmError::Syntax { line: 2, .. })));
        assert!(matches!(assemble("m", ".data\nx: .word missing\n"), Err(AsmError::UndefinedLabel { .. })));
    }

    #[test]
    fn reg_imm_and_perm_operands() {
        let img = assemble("m", ".text\nf:\n cincoffset c1, c1, x2-16\n candperm c1, c1, load|store\n").unwrap();
        let text = &img.section(SectionKind::Code).unwrap().payload;
        let i0 = Instr::decode(&text[0..8].try_into().unwrap()).unwrap();
        assert_eq!(
            i0,
            Instr::CIncOffset { cd: CReg::c(1), cs: CReg::c(1), by: RegImm { reg: XReg::new(2), imm: -16 } }
        );
        let i1 = Instr::decode(&text[8..16].try_into().unwrap()).unwrap();
        assert_eq!(i1, Instr::CAndPerm { cd: CReg::c(1), cs: CReg::c(1), mask: Perms::LOAD | Perms::STORE });
    }

    #[test]
    fn data_alignment() {
        let img = assemble("m", ".data\na: .byte 1\n.align 16\nb: .word 2\n").unwrap();
        assert_eq!(img.symbol("b").unwrap().offset, 16);
        assert_eq!(img.symbol("a").unwrap().size, 16);
    }
}
