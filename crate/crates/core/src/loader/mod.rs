//! The secure loader/linker: turns module images into compartments, builds
//! their captables, mints cross-compartment sentries through trampolines and
//! boots a policy. It is the only holder of the root capability.

pub mod audit;
mod link;
mod load;
pub mod policy;
pub mod trampoline;

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::capmachine::{Capability, Instr, Machine, MachineError, Perms, CAP_SIZE, INSTR_SIZE};
use crate::faulthandling::{FaultStrategy, StrategyKind};
use crate::modformat::{Diagnostic, SectionKind, SymbolClass};

pub use audit::{reachable, IsolationFinding};
pub use link::{boot, BootError, BootOptions, ModuleResolver};
pub use load::merge_images;
pub use policy::{AllowRule, CompartmentDecl, PolicyError, QueueDecl, SecurityPolicy, SymbolPattern, TaskDecl};
pub use trampoline::Trampoline;

pub const DEFAULT_MEMORY_SIZE: u32 = 0x10_0000;

/// Physical memory map. Everything below `SWITCHER_BASE` belongs to the loader.
pub const LOADER_PRIVATE: (u32, u32) = (0, 0x1000);
pub const SWITCHER_BASE: u32 = 0x1000;
pub const SWITCHER_SIZE: u32 = 0x1_0000;
pub const CODE_POOL: (u32, u32) = (0x1_1000, 0x4_0000);
pub const DATA_POOL: (u32, u32) = (0x4_0000, 0x8_0000);
pub const STACK_POOL_BASE: u32 = 0x8_0000;

/// Size of the fresh stack a custom fault handler runs on.
pub const HANDLER_STACK_SIZE: u32 = 512;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoadError {
    #[error("out of memory in the {0} pool")]
    OutOfMemory(&'static str),
    #[error("module {module} failed validation: {}", .diagnostics.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    ValidationFailed { module: String, diagnostics: Vec<Diagnostic> },
    #[error("duplicate compartment name {0}")]
    DuplicateCompartmentName(String),
    #[error("{compartment}: symbol {symbol} defined by more than one module")]
    DuplicateSymbol { compartment: String, symbol: String },
    #[error("{compartment}: unresolved external {symbol}")]
    UnresolvedRequiredSymbol { compartment: String, symbol: String },
    #[error("{compartment}: cannot load {path}: {message}")]
    Module { compartment: String, path: String, message: String },
    #[error("{compartment}: {symbol} is not an interface function")]
    NotInterface { compartment: String, symbol: String },
    #[error("{compartment}: unknown symbol {symbol}")]
    UnknownSymbol { compartment: String, symbol: String },
    #[error("unknown compartment {0}")]
    UnknownCompartment(String),
    #[error("{compartment}: strategy is custom but {symbol} is not defined")]
    MissingFaultHandler { compartment: String, symbol: String },
    #[error("capability is not an executable function capability of {0}")]
    NotAFunction(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Machine(#[from] MachineError),
}

/// A contiguous range of machine memory and the capability minted for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub base: u32,
    pub size: u32,
    pub cap: Capability,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.base as u64 + self.size as u64
    }

    pub fn overlaps(&self, cap: &Capability) -> bool {
        let (b, e) = (cap.base as u64, cap.end());
        // Zero-length capabilities overlap a region they sit inside.
        if b == e {
            return b >= self.base as u64 && b < self.end();
        }
        b < self.end() && (self.base as u64) < e
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base && (addr as u64) < self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotClass {
    Canary,
    Local,
    Global,
    Interface,
    External,
}

impl SlotClass {
    fn from_symbol(c: SymbolClass) -> SlotClass {
        match c {
            SymbolClass::Local => SlotClass::Local,
            SymbolClass::Global => SlotClass::Global,
            SymbolClass::Interface => SlotClass::Interface,
        }
    }
}

/// What an External slot was bound to at link time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Binding {
    Unlinked,
    Trampoline(usize),
    Denied(DenyReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenyReason {
    NoAllowRule,
    NotInterface,
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DenyReason::NoAllowRule => "no allow rule",
            DenyReason::NotInterface => "not an interface symbol",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub class: SlotClass,
    pub binding: Binding,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Captable {
    pub region: Region,
    pub slots: Vec<Slot>,
}

impl Captable {
    pub fn index_of(&self, name: &str) -> Option<u32> {
        self.slots.iter().position(|s| s.name == name && s.class != SlotClass::Canary).map(|i| i as u32)
    }

    /// Number of resources the compartment can name: every slot but the canary.
    pub fn resources(&self) -> usize {
        self.slots.len() - 1
    }

    pub fn slot_addr(&self, index: u32) -> u32 {
        self.region.base + index * CAP_SIZE
    }

    /// Slots holding a symbol defined by the compartment.
    pub fn populated(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s.class, SlotClass::Local | SlotClass::Global | SlotClass::Interface))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedSymbol {
    pub name: String,
    pub class: SymbolClass,
    pub section: SectionKind,
    pub addr: u32,
    pub size: u32,
    pub is_function: bool,
    pub slot: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Compartment {
    pub id: u32,
    pub name: String,
    pub modules: Vec<String>,
    pub regions: BTreeMap<SectionKind, Region>,
    pub captable: Captable,
    pub symbols: Vec<LoadedSymbol>,
    pub strategy_kind: StrategyKind,
    pub strategy: FaultStrategy,
    pub bound_stack: bool,
    pub scrub_stack: bool,
    /// `.data` followed by `.bss`: the range a micro-reboot restores.
    pub mutable: (u32, u32),
    pub snapshot: Vec<u8>,
    pub killed: bool,
    pub handler_stack: Option<Region>,
}

impl Compartment {
    pub fn symbol(&self, name: &str) -> Option<&LoadedSymbol> {
        self.symbols.iter().find(|s| s.name == name)
    }

    pub fn region(&self, kind: SectionKind) -> Option<&Region> {
        self.regions.get(&kind)
    }

    /// Every memory range the compartment owns, captable included.
    pub fn owned(&self) -> Vec<(&'static str, Region)> {
        let mut v: Vec<(&'static str, Region)> = self.regions.iter().map(|(k, r)| (k.name(), *r)).collect();
        v.push(("captable", self.captable.region));
        if let Some(h) = self.handler_stack {
            v.push(("handler stack", h));
        }
        v
    }

    pub fn owns(&self, addr: u32) -> bool {
        self.owned().iter().any(|(_, r)| r.contains(addr))
    }

    /// Unsealed code capability for a function symbol, as `CJALR` would see it after unsealing.
    pub fn function_cap(&self, name: &str) -> Option<Capability> {
        let s = self.symbol(name).filter(|s| s.is_function)?;
        let text = self.region(SectionKind::Code)?;
        text.cap.set_bounds(s.addr, s.size).ok()
    }

    /// Captable capability; untagged while the compartment is killed.
    pub fn cgp(&self) -> Capability {
        if self.killed {
            self.captable.region.cap.untagged()
        } else {
            self.captable.region.cap
        }
    }

    /// Capability the loader derives into a defined symbol's captable slot.
    pub fn slot_cap(&self, s: &LoadedSymbol) -> Capability {
        load::symbol_cap(&self.regions[&s.section], s)
    }

    /// SHA-256 over the given sections, in section order, as currently in memory.
    pub fn digest(&self, machine: &Machine, kinds: &[SectionKind]) -> String {
        let mut h = Sha256::new();
        for (k, r) in &self.regions {
            if kinds.contains(k) {
                h.update(machine.mem.read_bytes(r.base, r.size));
            }
        }
        hex_digest(h)
    }

    pub fn mutable_digest(&self, machine: &Machine) -> String {
        let mut h = Sha256::new();
        h.update(machine.mem.read_bytes(self.mutable.0, self.mutable.1));
        hex_digest(h)
    }

    pub fn snapshot_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(&self.snapshot);
        hex_digest(h)
    }
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Bump allocator over one pool of the memory map.
#[derive(Debug, Clone)]
struct Pool {
    name: &'static str,
    next: u32,
    end: u32,
}

impl Pool {
    fn alloc(&mut self, size: u32, align: u32) -> Result<u32, LoadError> {
        let base = self.next.next_multiple_of(align);
        let end = base as u64 + size as u64;
        if end > self.end as u64 {
            return Err(LoadError::OutOfMemory(self.name));
        }
        self.next = end as u32;
        Ok(base)
    }
}

/// Link-time finding that does not stop the boot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkDiagnostic {
    pub caller: String,
    pub callee: String,
    pub symbol: String,
    pub reason: DenyReason,
}

impl fmt::Display for LinkDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {} : {} not minted ({})", self.caller, self.callee, self.symbol, self.reason)
    }
}

/// Machine plus everything the loader created on it.
#[derive(Debug, Clone)]
pub struct LinkedSystem {
    pub machine: Machine,
    pub compartments: Vec<Compartment>,
    pub trampolines: Vec<Trampoline>,
    pub diagnostics: Vec<LinkDiagnostic>,
    /// Sentry to a `halt`: the return address a task's entry function starts with.
    pub exit_stub: Capability,
    /// Sentry to a `faultret`: the return address of a custom fault handler.
    pub fault_return_stub: Capability,
    switcher: Pool,
    code: Pool,
    data: Pool,
    stacks: Pool,
}

impl LinkedSystem {
    pub fn new(memory_size: u32) -> Result<LinkedSystem, LoadError> {
        if memory_size < DEFAULT_MEMORY_SIZE {
            return Err(LoadError::OutOfMemory("machine"));
        }
        let mut machine = Machine::new(memory_size)?;
        machine.set_switcher_range(SWITCHER_BASE, SWITCHER_SIZE);
        let mut switcher = Pool { name: "switcher", next: SWITCHER_BASE, end: SWITCHER_BASE + SWITCHER_SIZE };
        let root = machine.root();
        let mut stub = |machine: &mut Machine, instr: Instr| -> Result<Capability, LoadError> {
            let addr = switcher.alloc(CAP_SIZE, CAP_SIZE)?;
            machine.mem.write_bytes(addr, &instr.encode());
            Ok(root
                .set_bounds(addr, INSTR_SIZE)
                .and_then(|c| c.and_perms(Perms::EXECUTE))
                .and_then(|c| c.seal_sentry())
                .expect("stub derivation from root"))
        };
        let exit_stub = stub(&mut machine, Instr::Halt)?;
        let fault_return_stub = stub(&mut machine, Instr::FaultRet)?;
        Ok(LinkedSystem {
            machine,
            compartments: Vec::new(),
            trampolines: Vec::new(),
            diagnostics: Vec::new(),
            exit_stub,
            fault_return_stub,
            switcher,
            code: Pool { name: "code", next: CODE_POOL.0, end: CODE_POOL.1 },
            data: Pool { name: "data", next: DATA_POOL.0, end: DATA_POOL.1 },
            stacks: Pool { name: "stack", next: STACK_POOL_BASE, end: memory_size },
        })
    }

    pub fn compartment(&self, id: u32) -> Option<&Compartment> {
        self.compartments.get((id as usize).checked_sub(1)?)
    }

    pub fn compartment_mut(&mut self, id: u32) -> Option<&mut Compartment> {
        self.compartments.get_mut((id as usize).checked_sub(1)?)
    }

    pub fn by_name(&self, name: &str) -> Option<&Compartment> {
        self.compartments.iter().find(|c| c.name == name)
    }

    pub fn id_of(&self, name: &str) -> Result<u32, LoadError> {
        self.by_name(name).map(|c| c.id).ok_or_else(|| LoadError::UnknownCompartment(name.to_string()))
    }

    fn root(&self) -> Capability {
        self.machine.root()
    }

    fn mint(&self, base: u32, size: u32, perms: Perms) -> Capability {
        self.root()
            .set_bounds(base, size)
            .and_then(|c| c.and_perms(perms))
            .expect("loader derives only inside physical memory")
    }

    /// Allocate a zeroed stack; the capability's cursor starts at the top.
    pub fn alloc_stack(&mut self, size: u32) -> Result<Region, LoadError> {
        let size = size.next_multiple_of(CAP_SIZE);
        let base = self.stacks.alloc(size, CAP_SIZE)?;
        self.machine.mem.fill(base, size, 0);
        let cap = self.mint(base, size, Perms::DATA);
        let cap = cap.with_cursor(base + size).expect("unsealed");
        Ok(Region { base, size, cap })
    }

    /// Memory owned by the loader or runtime (queue buffers); never handed to a compartment.
    pub fn alloc_private(&mut self, size: u32) -> Result<Region, LoadError> {
        let size = size.max(1).next_multiple_of(CAP_SIZE);
        let base = self.stacks.alloc(size, CAP_SIZE)?;
        let cap = self.mint(base, size, Perms::DATA);
        Ok(Region { base, size, cap })
    }

    pub fn switcher_region(&self) -> Region {
        Region {
            base: SWITCHER_BASE,
            size: SWITCHER_SIZE,
            cap: self.mint(SWITCHER_BASE, SWITCHER_SIZE, Perms::EXECUTE | Perms::LOAD_CAP),
        }
    }

    /// Whether `addr` lies in memory that only the loader may hold capabilities for.
    pub fn is_loader_private(addr: u32) -> bool {
        addr < LOADER_PRIVATE.1
    }
}
