//! Structural checks on a decoded module.

use std::collections::HashSet;
use std::fmt;

use super::{ModuleImage, RelocKind, SectionKind, SymbolClass, MAX_NAME_LEN};
use crate::capmachine::{CLC_OPCODE, INSTR_SIZE};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    /// Where in the module: a section, symbol or relocation.
    pub context: String,
    pub message: String,
}

impl Diagnostic {
    fn new(context: impl Into<String>, message: impl Into<String>) -> Diagnostic {
        Diagnostic { context: context.into(), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.context, self.message)
    }
}

fn name_ok(n: &str) -> bool {
    !n.is_empty() && n.len() <= MAX_NAME_LEN && n.is_ascii() && !n.contains('\0')
}

/// Every problem found; an empty list means the module is loadable.
pub fn validate(image: &ModuleImage) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let m = &image.name;

    if image.format_version != super::FORMAT_VERSION {
        out.push(Diagnostic::new(m, format!("unknown format version {}", image.format_version)));
    }
    if image.name.len() > MAX_NAME_LEN || !image.name.is_ascii() {
        out.push(Diagnostic::new(m, "module name is not 1..=63 ASCII bytes"));
    }

    let mut seen = HashSet::new();
    for s in &image.sections {
        let ctx = format!("{m}:{}", s.name());
        if !seen.insert(s.kind) {
            out.push(Diagnostic::new(&ctx, "duplicate section"));
        }
        let expected = if s.kind == SectionKind::ZeroFill { 0 } else { s.size as usize };
        if s.payload.len() != expected {
            out.push(Diagnostic::new(&ctx, "payload length does not match size"));
        }
        if s.kind == SectionKind::Code && s.size % INSTR_SIZE != 0 {
            out.push(Diagnostic::new(&ctx, "size is not a whole number of instructions"));
        }
    }

    let mut names = HashSet::new();
    for sym in &image.symbols {
        let ctx = format!("{m}:{}", sym.name);
        if !name_ok(&sym.name) {
            out.push(Diagnostic::new(&ctx, "symbol name is not 1..=63 ASCII bytes"));
        }
        if !names.insert(sym.name.as_str()) {
            out.push(Diagnostic::new(&ctx, "duplicate symbol"));
        }
        match image.section(sym.section) {
            None => out.push(Diagnostic::new(&ctx, format!("section {} not present", sym.section))),
            Some(sec) => {
                if sym.offset as u64 + sym.size as u64 > sec.size as u64 {
                    out.push(Diagnostic::new(&ctx, format!("extends past the end of {}", sym.section)));
                }
            }
        }
        if sym.is_function != (sym.section == SectionKind::Code) {
            out.push(Diagnostic::new(&ctx, "function flag disagrees with section"));
        }
        if sym.is_function && sym.offset % INSTR_SIZE != 0 {
            out.push(Diagnostic::new(&ctx, "function entry is not instruction aligned"));
        }
        if sym.class == SymbolClass::Interface && !sym.is_function {
            out.push(Diagnostic::new(&ctx, "interface symbol is not a function"));
        }
    }

    for (i, r) in image.relocations.iter().enumerate() {
        let ctx = format!("{m}:reloc#{i}({})", r.target);
        if !name_ok(&r.target) {
            out.push(Diagnostic::new(&ctx, "target name is not 1..=63 ASCII bytes"));
        }
        let Some(sec) = image.section(r.section) else {
            out.push(Diagnostic::new(&ctx, format!("section {} not present", r.section)));
            continue;
        };
        if r.offset as u64 + 4 > sec.size as u64 {
            out.push(Diagnostic::new(&ctx, "patch site outside its section"));
            continue;
        }
        match r.kind {
            RelocKind::GprelSlot => {
                if r.section != SectionKind::Code {
                    out.push(Diagnostic::new(&ctx, "GPREL_SLOT outside .text"));
                } else if r.offset % INSTR_SIZE != 4 || sec.payload[(r.offset - 4) as usize] != CLC_OPCODE {
                    out.push(Diagnostic::new(&ctx, "GPREL_SLOT does not patch a CLC immediate"));
                }
            }
            RelocKind::AbsInSection => {
                if !matches!(r.section, SectionKind::Data | SectionKind::ReadOnlyData) {
                    out.push(Diagnostic::new(&ctx, format!("ABS_IN_SECTION in {}", r.section)));
                } else if r.offset % 4 != 0 {
                    out.push(Diagnostic::new(&ctx, "ABS_IN_SECTION site is not word aligned"));
                }
                if image.symbol(&r.target).is_none() {
                    out.push(Diagnostic::new(&ctx, "ABS_IN_SECTION target is not defined in the module"));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capmachine::{encode_all, CReg, Instr};
    use crate::modformat::{Relocation, Section, Symbol};

    fn base() -> ModuleImage {
        let code = encode_all(&[Instr::Clc { cd: CReg::c(1), idx: 0 }, Instr::CRet]);
        let mut img = ModuleImage::new("m");
        img.sections.push(Section { kind: SectionKind::Code, size: code.len() as u32, payload: code });
        img.sections.push(Section { kind: SectionKind::Data, size: 8, payload: vec![0; 8] });
        img.symbols.push(Symbol {
            name: "f".into(),
            class: SymbolClass::Interface,
            section: SectionKind::Code,
            offset: 0,
            size: 16,
            is_function: true,
        });
        img.relocations.push(Relocation {
            kind: RelocKind::GprelSlot,
            section: SectionKind::Code,
            offset: 4,
            target: "ext".into(),
        });
        img
    }

    fn messages(img: &ModuleImage) -> Vec<String> {
        validate(img).into_iter().map(|d| d.message).collect()
    }

    #[test]
    fn well_formed_module_is_clean() {
        assert!(validate(&base()).is_empty(), "{:?}", validate(&base()));
    }

    #[test]
    fn gprel_outside_text() {
        let mut img = base();
        img.relocations[0].section = SectionKind::Data;
        assert_eq!(messages(&img), vec!["GPREL_SLOT outside .text"]);
    }

    #[test]
    fn gprel_must_patch_clc() {
        let mut img = base();
        img.relocations[0].offset = 12; // the CRET
        assert_eq!(messages(&img), vec!["GPREL_SLOT does not patch a CLC immediate"]);
    }

    #[test]
    fn interface_data_rejected() {
        let mut img = base();
        img.symbols.push(Symbol {
            name: "d".into(),
            class: SymbolClass::Interface,
            section: SectionKind::Data,
            offset: 0,
            size: 8,
            is_function: false,
        });
        assert_eq!(messages(&img), vec!["interface symbol is not a function"]);
    }

    #[test]
    fn symbol_past_section_end() {
        let mut img = base();
        img.symbols[0].size = 24;
        assert_eq!(messages(&img), vec!["extends past the end of .text"]);
    }

    #[test]
    fn abs_target_must_be_local() {
        let mut img = base();
        img.relocations.push(Relocation {
            kind: RelocKind::AbsInSection,
            section: SectionKind::Data,
            offset: 4,
            target: "nowhere".into(),
        });
        assert_eq!(messages(&img), vec!["ABS_IN_SECTION target is not defined in the module"]);
    }
}
