//! Placing one module image into memory as a compartment.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::{
    Binding, Captable, Compartment, CompartmentDecl, LinkedSystem, LoadError, LoadedSymbol, Region, Slot, SlotClass,
};
use crate::capmachine::{Capability, Perms, CAP_SIZE, INSTR_SIZE};
use crate::faulthandling::{FaultStrategy, StrategyKind, HANDLER_SYMBOL};
use crate::modformat::{
    validate, ModuleImage, RelocKind, Relocation, Section, SectionKind, Symbol, SymbolClass, MAX_NAME_LEN,
};

fn section_perms(kind: SectionKind) -> Perms {
    match kind {
        SectionKind::Code => Perms::CODE,
        SectionKind::ReadOnlyData => Perms::RODATA,
        SectionKind::Data | SectionKind::ZeroFill => Perms::DATA,
    }
}

fn section_align(kind: SectionKind) -> u32 {
    if kind == SectionKind::Code {
        INSTR_SIZE
    } else {
        CAP_SIZE
    }
}

/// Concatenate the modules of a library into one image sharing one captable.
///
/// Local symbols whose names collide with another member's symbols or
/// references are renamed `module$name`; a Global or Interface symbol defined
/// twice is an error.
pub fn merge_images(name: &str, images: &[ModuleImage]) -> Result<ModuleImage, LoadError> {
    if images.len() == 1 {
        let mut img = images[0].clone();
        img.name = name.to_string();
        return Ok(img);
    }
    let mut names_by_module: Vec<HashSet<&str>> = Vec::new();
    for img in images {
        let mut s: HashSet<&str> = img.symbols.iter().map(|s| s.name.as_str()).collect();
        s.extend(img.relocations.iter().map(|r| r.target.as_str()));
        names_by_module.push(s);
    }
    let clashes = |i: usize, n: &str| names_by_module.iter().enumerate().any(|(j, s)| j != i && s.contains(n));

    let mut out = ModuleImage::new(name);
    let mut payloads: BTreeMap<SectionKind, (Vec<u8>, u32)> = BTreeMap::new();
    let mut exported: HashSet<String> = HashSet::new();
    for (i, img) in images.iter().enumerate() {
        let mut offsets = HashMap::new();
        for s in &img.sections {
            let entry = payloads.entry(s.kind).or_insert((Vec::new(), 0));
            let off = entry.1.next_multiple_of(section_align(s.kind));
            if s.kind != SectionKind::ZeroFill {
                entry.0.resize(off as usize, 0);
                entry.0.extend_from_slice(&s.payload);
            }
            entry.1 = off + s.size;
            offsets.insert(s.kind, off);
        }
        let mut renames: HashMap<&str, String> = HashMap::new();
        for sym in &img.symbols {
            let mut new_name = sym.name.clone();
            if sym.class == SymbolClass::Local {
                if clashes(i, &sym.name) {
                    new_name = format!("{}${}", img.name, sym.name);
                    if new_name.len() > MAX_NAME_LEN {
                        return Err(LoadError::DuplicateSymbol { compartment: name.into(), symbol: sym.name.clone() });
                    }
                    renames.insert(&sym.name, new_name.clone());
                }
            } else if !exported.insert(sym.name.clone()) {
                return Err(LoadError::DuplicateSymbol { compartment: name.into(), symbol: sym.name.clone() });
            }
            out.symbols.push(Symbol { name: new_name, offset: sym.offset + offsets[&sym.section], ..sym.clone() });
        }
        for r in &img.relocations {
            out.relocations.push(Relocation {
                target: renames.get(r.target.as_str()).cloned().unwrap_or_else(|| r.target.clone()),
                offset: r.offset + offsets[&r.section],
                ..r.clone()
            });
        }
    }
    for (kind, (mut payload, size)) in payloads {
        if kind == SectionKind::ZeroFill {
            payload.clear();
        } else {
            payload.resize(size as usize, 0);
        }
        out.sections.push(Section { kind, payload, size });
    }
    Ok(out)
}

impl LinkedSystem {
    /// Place `image` in fresh memory as a new compartment and return its id.
    pub fn load_compartment(&mut self, image: &ModuleImage, decl: &CompartmentDecl) -> Result<u32, LoadError> {
        let diagnostics = validate(image);
        if !diagnostics.is_empty() {
            return Err(LoadError::ValidationFailed { module: image.name.clone(), diagnostics });
        }
        if self.by_name(&decl.name).is_some() {
            return Err(LoadError::DuplicateCompartmentName(decl.name.clone()));
        }
        let id = self.compartments.len() as u32 + 1;
        let size = |k: SectionKind| image.section(k).map_or(0, |s| s.size);

        // Code pool: .text, .rodata, captable. Data pool: .data then .bss, adjacent.
        let mut bases: BTreeMap<SectionKind, u32> = BTreeMap::new();
        for kind in [SectionKind::Code, SectionKind::ReadOnlyData] {
            if image.section(kind).is_some() {
                bases.insert(kind, self.code.alloc(size(kind), CAP_SIZE)?);
            }
        }
        let externals = image.externals();
        let nslots = 1 + image.symbols.len() as u32 + externals.len() as u32;
        let captable_base = self.code.alloc(nslots * CAP_SIZE, CAP_SIZE)?;
        let data_len = size(SectionKind::Data).next_multiple_of(CAP_SIZE);
        let mutable_len = data_len + size(SectionKind::ZeroFill);
        let mutable_base = self.data.alloc(mutable_len, CAP_SIZE)?;
        if image.section(SectionKind::Data).is_some() {
            bases.insert(SectionKind::Data, mutable_base);
        }
        if image.section(SectionKind::ZeroFill).is_some() {
            bases.insert(SectionKind::ZeroFill, mutable_base + data_len);
        }

        let mut regions = BTreeMap::new();
        for s in &image.sections {
            let base = bases[&s.kind];
            if s.kind == SectionKind::ZeroFill {
                self.machine.mem.fill(base, s.size, 0);
            } else {
                self.machine.mem.write_bytes(base, &s.payload);
            }
            let cap = self.mint(base, s.size, section_perms(s.kind));
            regions.insert(s.kind, Region { base, size: s.size, cap });
        }

        // Slot 0 is the canary; then one slot per defined symbol, then externals.
        let mut slots = vec![Slot { name: String::new(), class: SlotClass::Canary, binding: Binding::Unlinked }];
        let mut symbols = Vec::new();
        for sym in &image.symbols {
            let slot = slots.len() as u32;
            slots.push(Slot {
                name: sym.name.clone(),
                class: SlotClass::from_symbol(sym.class),
                binding: Binding::Unlinked,
            });
            symbols.push(LoadedSymbol {
                name: sym.name.clone(),
                class: sym.class,
                section: sym.section,
                addr: bases[&sym.section] + sym.offset,
                size: sym.size,
                is_function: sym.is_function,
                slot,
            });
        }
        for e in &externals {
            slots.push(Slot { name: e.clone(), class: SlotClass::External, binding: Binding::Unlinked });
        }
        let slot_of: HashMap<&str, u32> =
            slots.iter().enumerate().skip(1).map(|(i, s)| (s.name.as_str(), i as u32)).collect();

        for r in &image.relocations {
            let site = bases[&r.section] + r.offset;
            let value = match r.kind {
                RelocKind::GprelSlot => slot_of[r.target.as_str()],
                RelocKind::AbsInSection => symbols.iter().find(|s| s.name == r.target).unwrap().addr,
            };
            self.machine.mem.write_bytes(site, &value.to_le_bytes());
        }

        let captable_cap = self.mint(captable_base, nslots * CAP_SIZE, Perms::RODATA);
        self.machine.mem.fill(captable_base, nslots * CAP_SIZE, 0);
        for s in &symbols {
            let cap = symbol_cap(&regions[&s.section], s);
            self.machine.mem.write_cap_raw(captable_base + s.slot * CAP_SIZE, cap);
        }

        let snapshot = self.machine.mem.read_bytes(mutable_base, mutable_len).to_vec();
        let strategy = match decl.strategy {
            StrategyKind::ReturnError => FaultStrategy::ReturnError,
            StrategyKind::Custom => FaultStrategy::CustomHandler(HANDLER_SYMBOL.to_string()),
            StrategyKind::Kill => FaultStrategy::Kill,
            StrategyKind::MicroReboot => FaultStrategy::MicroReboot,
        };
        self.compartments.push(Compartment {
            id,
            name: decl.name.clone(),
            modules: decl.modules.clone(),
            regions,
            captable: Captable {
                region: Region { base: captable_base, size: nslots * CAP_SIZE, cap: captable_cap },
                slots,
            },
            symbols,
            strategy_kind: decl.strategy,
            strategy,
            bound_stack: decl.bound_stack,
            scrub_stack: decl.scrub_stack,
            mutable: (mutable_base, mutable_len),
            snapshot,
            killed: false,
            handler_stack: None,
        });
        Ok(id)
    }
}

/// Captable entry for a defined symbol: a sentry for functions, a bounded
/// data capability otherwise.
pub(super) fn symbol_cap(region: &Region, s: &LoadedSymbol) -> Capability {
    let cap = region.cap.set_bounds(s.addr, s.size).expect("symbol inside its section");
    if s.is_function {
        cap.seal_sentry().expect("code is executable")
    } else {
        cap
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modformat::assemble;

    fn decl(name: &str) -> CompartmentDecl {
        CompartmentDecl {
            name: name.into(),
            modules: vec![format!("{name}.s")],
            strategy: StrategyKind::ReturnError,
            bound_stack: true,
            scrub_stack: false,
        }
    }

    const SRC: &str = "
        .text
        .interface get
        get:
            clc c1, cap(counter)
            clw x0, 0(c1)
            cret
        .rodata
        k: .word 1
        .data
        counter: .word 41
        self_ptr: .word counter
        .bss
        scratch: .zero 20
    ";

    #[test]
    fn regions_perms_and_captable() {
        let mut sys = LinkedSystem::new(crate::loader::DEFAULT_MEMORY_SIZE).unwrap();
        let img = assemble("m", SRC).unwrap();
        let id = sys.load_compartment(&img, &decl("m")).unwrap();
        let c = sys.compartment(id).unwrap();
        assert_eq!(id, 1);
        for (k, r) in &c.regions {
            let p = r.cap.perms;
            match k {
                SectionKind::Code | SectionKind::ReadOnlyData => {
                    assert!(!p.intersects(Perms::STORE | Perms::STORE_CAP), "{k}")
                }
                _ => assert!(!p.contains(Perms::EXECUTE), "{k}"),
            }
        }
        assert_eq!(c.captable.populated(), 5);
        assert_eq!(c.captable.slots.len(), 6);
        // Canary untagged, symbol slots tagged and bounded to their symbol.
        let mem = &sys.machine.mem;
        assert!(!mem.tag_at(c.captable.slot_addr(0)));
        let get = mem.read_cap_raw(c.captable.slot_addr(c.captable.index_of("get").unwrap()));
        assert!(get.tag && get.is_sentry() && get.length == 24);
        let counter = c.symbol("counter").unwrap();
        assert_eq!(mem.read_word_raw(counter.addr), 41);
        // ABS relocation resolved to the absolute address.
        assert_eq!(mem.read_word_raw(c.symbol("self_ptr").unwrap().addr), counter.addr);
        // GPREL immediate patched to the counter slot.
        let text = c.region(SectionKind::Code).unwrap();
        assert_eq!(mem.read_word_raw(text.base + 4), c.captable.index_of("counter").unwrap());
        // Snapshot covers .data (padded) and .bss.
        assert_eq!(c.mutable.1, 16 + 20);
        assert_eq!(c.snapshot.len(), 36);
    }

    #[test]
    fn text_only_module_has_empty_snapshot() {
        let mut sys = LinkedSystem::new(crate::loader::DEFAULT_MEMORY_SIZE).unwrap();
        let img = assemble("t", ".text\nf: cret\n").unwrap();
        let id = sys.load_compartment(&img, &decl("t")).unwrap();
        assert!(sys.compartment(id).unwrap().snapshot.is_empty());
    }

    #[test]
    fn duplicate_name_and_invalid_module() {
        let mut sys = LinkedSystem::new(crate::loader::DEFAULT_MEMORY_SIZE).unwrap();
        let img = assemble("t", ".text\nf: cret\n").unwrap();
        sys.load_compartment(&img, &decl("t")).unwrap();
        assert_eq!(sys.load_compartment(&img, &decl("t")), Err(LoadError::DuplicateCompartmentName("t".into())));
        let mut bad = img.clone();
        bad.sections[0].size = 3;
        assert!(matches!(sys.load_compartment(&bad, &decl("u")), Err(LoadError::ValidationFailed { .. })));
    }

    #[test]
    fn out_of_memory() {
        let mut sys = LinkedSystem::new(crate::loader::DEFAULT_MEMORY_SIZE).unwrap();
        let img = assemble("big", ".data\nd: .zero 0x50000\n").unwrap();
        assert_eq!(sys.load_compartment(&img, &decl("big")), Err(LoadError::OutOfMemory("data")));
    }

    #[test]
    fn merge_renames_clashing_locals() {
        let a = assemble("a", ".text\n.global fa\nfa: clc c1, cap(helper)\n cret\nhelper: cret\n.data\nx: .word 1\n")
            .unwrap();
        let b = assemble("b", ".text\n.global fb\nfb: clc c1, cap(fa)\n cret\nhelper: cret\n").unwrap();
        let m = merge_images("lib", &[a, b]).unwrap();
        assert!(validate(&m).is_empty(), "{:?}", validate(&m));
        let names: Vec<_> = m.symbols.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, vec!["fa", "a$helper", "x", "fb", "b$helper"]);
        assert!(m.externals().is_empty(), "intra-library reference resolved internally");
        assert_eq!(m.symbol("fb").unwrap().offset, 24);
        assert_eq!(m.relocations[1].offset, 28);

        let c = assemble("c", ".text\n.global fa\nfa: cret\n").unwrap();
        let a2 = assemble("a", ".text\n.global fa\nfa: cret\n").unwrap();
        assert!(matches!(merge_images("lib", &[a2, c]), Err(LoadError::DuplicateSymbol { .. })));
    }
}
