//! Relocatable linkage modules: the in-memory image, the `.cpo` codec, the
//! validator and the assembler that produces them.

pub mod asm;
pub mod codec;
pub mod validate;

use std::fmt;

pub use asm::{assemble, assemble_with_labels, AsmError, Assembly};
pub use codec::{decode, encode, DecodeError, EncodeError, FORMAT_VERSION, MAGIC};
pub use validate::{validate, Diagnostic};

/// Longest symbol or module name, in bytes.
pub const MAX_NAME_LEN: usize = 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SectionKind {
    Code,
    ReadOnlyData,
    Data,
    ZeroFill,
}

impl SectionKind {
    pub const ALL: [SectionKind; 4] =
        [SectionKind::Code, SectionKind::ReadOnlyData, SectionKind::Data, SectionKind::ZeroFill];

    pub fn name(self) -> &'static str {
        match self {
            SectionKind::Code => ".text",
            SectionKind::ReadOnlyData => ".rodata",
            SectionKind::Data => ".data",
            SectionKind::ZeroFill => ".bss",
        }
    }

    pub fn from_name(name: &str) -> Option<SectionKind> {
        SectionKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<SectionKind> {
        SectionKind::ALL.get(c as usize).copied()
    }

    /// Sections whose contents are rolled back by a micro-reboot.
    pub fn is_mutable(self) -> bool {
        matches!(self, SectionKind::Data | SectionKind::ZeroFill)
    }
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub kind: SectionKind,
    /// Initial contents; empty for `.bss`.
    pub payload: Vec<u8>,
    pub size: u32,
}

impl Section {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SymbolClass {
    /// Visible only inside its module.
    Local,
    /// Visible to the module's own compartment (and library siblings).
    Global,
    /// Callable from other compartments through a trampoline.
    Interface,
}

impl SymbolClass {
    pub fn name(self) -> &'static str {
        match self {
            SymbolClass::Local => "local",
            SymbolClass::Global => "global",
            SymbolClass::Interface => "interface",
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<SymbolClass> {
        [SymbolClass::Local, SymbolClass::Global, SymbolClass::Interface].get(c as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symbol {
    pub name: String,
    pub class: SymbolClass,
    pub section: SectionKind,
    pub offset: u32,
    pub size: u32,
    pub is_function: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RelocKind {
    /// Patch a CLC immediate with the captable slot index of the target.
    GprelSlot,
    /// Patch a word with the absolute address of a symbol defined in the module.
    AbsInSection,
}

impl RelocKind {
    pub fn name(self) -> &'static str {
        match self {
            RelocKind::GprelSlot => "GPREL_SLOT",
            RelocKind::AbsInSection => "ABS_IN_SECTION",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relocation {
    pub kind: RelocKind,
    pub section: SectionKind,
    pub offset: u32,
    /// May name a symbol not defined in this module: an external reference.
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleImage {
    pub name: String,
    pub format_version: u16,
    pub sections: Vec<Section>,
    pub symbols: Vec<Symbol>,
    pub relocations: Vec<Relocation>,
}

impl ModuleImage {
    pub fn new(name: impl Into<String>) -> ModuleImage {
        ModuleImage {
            name: name.into(),
            format_version: FORMAT_VERSION,
            sections: Vec::new(),
            symbols: Vec::new(),
            relocations: Vec::new(),
        }
    }

    pub fn section(&self, kind: SectionKind) -> Option<&Section> {
        self.sections.iter().find(|s| s.kind == kind)
    }

    pub fn symbol(&self, name: &str) -> Option<&Symbol> {
        self.symbols.iter().find(|s| s.name == name)
    }

    /// Names referenced by captable relocations but not defined here, in first-use order.
    pub fn externals(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.relocations {
            if r.kind == RelocKind::GprelSlot && self.symbol(&r.target).is_none() && !out.contains(&r.target) {
                out.push(r.target.clone());
            }
        }
        out
    }

    /// Total bytes occupied by sections of the given kinds.
    pub fn size_of(&self, kinds: &[SectionKind]) -> u32 {
        self.sections.iter().filter(|s| kinds.contains(&s.kind)).map(|s| s.size).sum()
    }
}
