use proptest::prelude::*;

use linkcap_core::capmachine::{
    encode_all, CReg, CapError, Capability, Enforcement, FaultKind, Instr, Machine, Perms, RegImm, Seal, StepOutcome,
    TaggedMemory, XReg, CAP_SIZE,
};
use linkcap_core::loader::{boot, BootOptions, SecurityPolicy, SlotClass};
use linkcap_core::modformat::{
    assemble, decode, encode, validate, ModuleImage, RelocKind, Relocation, Section, SectionKind, Symbol, SymbolClass,
};
use linkcap_core::runtime::System;

const E: Enforcement = Enforcement::Enforced;

fn perms() -> impl Strategy<Value = Perms> {
    any::<u8>().prop_map(Perms::from_bits_truncate)
}

fn cap_in(mem: u32) -> impl Strategy<Value = Capability> {
    (0..mem, any::<bool>(), perms(), any::<bool>(), any::<u32>()).prop_map(move |(base, tag, perms, sentry, c)| {
        let length = c % (mem - base + 1);
        Capability {
            tag,
            base,
            length,
            cursor: base + c % (length + 1),
            perms,
            seal: if sentry { Seal::Sentry } else { Seal::Unsealed },
        }
    })
}

#[derive(Debug, Clone)]
enum Derive {
    Bounds(u32, u32),
    Perms(Perms),
    Offset(i64),
    Seal,
}

fn derive() -> impl Strategy<Value = Derive> {
    prop_oneof![
        (any::<u32>(), any::<u32>()).prop_map(|(a, b)| Derive::Bounds(a, b)),
        perms().prop_map(Derive::Perms),
        (-70_000i64..70_000).prop_map(Derive::Offset),
        Just(Derive::Seal),
    ]
}

fn apply(c: &Capability, d: &Derive) -> Result<Capability, CapError> {
    match *d {
        // Keep most requests near the source so some succeed.
        Derive::Bounds(a, b) => {
            let base = c.base.wrapping_add(a % (c.length.max(1) * 2));
            c.set_bounds(base, b % (c.length.max(1) + 16))
        }
        Derive::Perms(p) => c.and_perms(p),
        Derive::Offset(o) => c.offset_by(o),
        Derive::Seal => c.seal_sentry(),
    }
}

proptest! {
    #[test]
    fn derivation_is_monotonic(steps in prop::collection::vec(derive(), 1..24)) {
        let root = Capability::root(1 << 20);
        let mut c = root;
        for d in &steps {
            if let Ok(next) = apply(&c, d) {
                prop_assert!(next.range_within(&c));
                prop_assert!(c.perms.contains(next.perms));
                prop_assert!(!next.tag || c.tag);
                c = next;
            }
        }
        prop_assert!(c.range_within(&root));
    }

    #[test]
    fn untagged_grants_nothing(cap in cap_in(1024), off in -32i64..32, v in any::<u32>()) {
        let cap = cap.untagged();
        let mut mem = TaggedMemory::new(1024);
        prop_assert_eq!(mem.load_word(&cap, off, E).unwrap_err().kind, FaultKind::TagViolation);
        prop_assert_eq!(mem.store_word(&cap, off, v, E).unwrap_err().kind, FaultKind::TagViolation);
        prop_assert_eq!(mem.load_cap(&cap, off, E).unwrap_err().kind, FaultKind::TagViolation);
        prop_assert_eq!(cap.set_bounds(cap.base, 0), Err(CapError::TagViolation));
        prop_assert_eq!(cap.seal_sentry(), Err(CapError::TagViolation));
    }

    #[test]
    fn sentries_are_opaque(cap in cap_in(1024), d in derive(), off in -32i64..32) {
        let s = Capability { tag: true, seal: Seal::Sentry, ..cap };
        let mem = TaggedMemory::new(1024);
        prop_assert_eq!(mem.load_byte(&s, off, E).unwrap_err().kind, FaultKind::SealViolation);
        prop_assert_eq!(apply(&s, &d), Err(CapError::SealViolation));
    }

    #[test]
    fn word_store_clears_granule_tag(g in 0u32..16, w in 0u32..4, v in any::<u32>()) {
        let root = Capability::root(256);
        let mut mem = TaggedMemory::new(256);
        let at = g * CAP_SIZE;
        mem.store_cap(&root, at as i64, root, E).unwrap();
        prop_assert!(mem.tag_at(at));
        mem.store_word(&root, (at + 4 * w) as i64, v, E).unwrap();
        prop_assert!(!mem.tag_at(at));
        prop_assert!(!mem.load_cap(&root, at as i64, E).unwrap().tag);
    }

    #[test]
    fn stored_capabilities_round_trip(cap in cap_in(4096), g in 0u32..64) {
        let root = Capability::root(4096);
        let mut mem = TaggedMemory::new(4096);
        let cap = Capability { tag: true, ..cap };
        mem.store_cap(&root, (g * CAP_SIZE) as i64, cap, E).unwrap();
        prop_assert_eq!(mem.load_cap(&root, (g * CAP_SIZE) as i64, E).unwrap(), cap);
    }
}

// Random capability programs ----------------------------------------------

const CODE_BASE: u32 = 0x100;
const DATA: (u32, u32) = (0x800, 0x100);
const STACK: (u32, u32) = (0x900, 0x100);

fn creg() -> impl Strategy<Value = CReg> {
    prop_oneof![(1u8..4).prop_map(CReg::c), Just(CReg::Csp), Just(CReg::Cra)]
}

fn xreg() -> impl Strategy<Value = XReg> {
    (0u8..4).prop_map(|n| XReg::new(n).unwrap())
}

fn cap_instr() -> impl Strategy<Value = Instr> {
    prop_oneof![
        (xreg(), -64i32..0x400).prop_map(|(rd, imm)| Instr::Li { rd, imm }),
        (creg(), creg()).prop_map(|(cd, cs)| Instr::CMove { cd, cs }),
        (creg(), creg(), -64i32..64).prop_map(|(cd, cs, imm)| Instr::CIncOffset {
            cd,
            cs,
            by: RegImm { reg: None, imm }
        }),
        (creg(), creg(), xreg()).prop_map(|(cd, cs, r)| Instr::CSetBounds {
            cd,
            cs,
            len: RegImm { reg: Some(r), imm: 0 }
        }),
        (creg(), creg(), xreg()).prop_map(|(cd, cs, rs)| Instr::CSetAddr { cd, cs, rs }),
        (creg(), creg(), perms()).prop_map(|(cd, cs, mask)| Instr::CAndPerm { cd, cs, mask }),
        (creg(), creg()).prop_map(|(cd, cs)| Instr::CSealEntry { cd, cs }),
        (creg(), creg(), -32i32..32).prop_map(|(cd, cs, o)| Instr::Clcr { cd, cs, off: o * 16 }),
        (creg(), creg(), -32i32..32).prop_map(|(cv, cs, o)| Instr::Cscr { cv, cs, off: o * 16 }),
        (xreg(), creg(), -64i32..64).prop_map(|(rs, cs, off)| Instr::Csw { rs, cs, off }),
        creg().prop_map(|cs| Instr::CJalr { cs }),
        Just(Instr::CRet),
    ]
}

/// A capability is derivable from the initial set if some initial capability covers it.
fn derived_from(c: &Capability, initial: &[Capability]) -> bool {
    !c.tag || initial.iter().any(|i| c.range_within(i) && i.perms.contains(c.perms))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn execution_keeps_pcc_executable_and_caps_derived(prog in prop::collection::vec(cap_instr(), 1..48)) {
        let mut m = Machine::new(0x1000).unwrap();
        let code = encode_all(&prog);
        m.mem.write_bytes(CODE_BASE, &code);
        let root = m.root();
        let pcc = root.set_bounds(CODE_BASE, code.len() as u32).unwrap().and_perms(Perms::CODE).unwrap();
        let data = root.set_bounds(DATA.0, DATA.1).unwrap().and_perms(Perms::DATA).unwrap();
        let stack = root.set_bounds(STACK.0, STACK.1).unwrap().and_perms(Perms::DATA).unwrap();
        m.regs.pcc = pcc;
        m.regs.c[1] = data;
        m.regs.c[2] = pcc;
        m.regs.csp = stack;
        let initial = [pcc, data, stack];
        for _ in 0..256 {
            match m.step() {
                StepOutcome::Executed => {
                    prop_assert!(m.regs.pcc.tag && m.regs.pcc.perms.contains(Perms::EXECUTE));
                    for c in m.regs.capabilities() {
                        prop_assert!(derived_from(&c, &initial), "{:?} not derived", c);
                    }
                    for g in m.mem.tagged_granules().collect::<Vec<_>>() {
                        prop_assert!(derived_from(&m.mem.read_cap_raw(g), &initial));
                    }
                }
                _ => break,
            }
        }
    }
}

// Module format --------------------------------------------------------------

fn name(min: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(b"abcxyz_019.".to_vec()), min..=63)
        .prop_map(|v| String::from_utf8(v).unwrap())
}

fn kind() -> impl Strategy<Value = SectionKind> {
    prop::sample::select(SectionKind::ALL.to_vec())
}

fn section() -> impl Strategy<Value = Section> {
    (kind(), prop::collection::vec(any::<u8>(), 0..64), 0u32..256).prop_map(|(kind, payload, bss)| {
        if kind == SectionKind::ZeroFill {
            Section { kind, payload: Vec::new(), size: bss }
        } else {
            Section { kind, size: payload.len() as u32, payload }
        }
    })
}

fn image() -> impl Strategy<Value = ModuleImage> {
    let sym =
        (name(1), 0u8..3, kind(), any::<bool>(), 0u32..80, 0u32..80).prop_map(|(name, c, section, f, offset, size)| {
            let class = [SymbolClass::Local, SymbolClass::Global, SymbolClass::Interface][c as usize];
            Symbol { name, class, section, offset, size, is_function: f }
        });
    let rel = (name(1), any::<bool>(), kind(), 0u32..80).prop_map(|(target, g, section, offset)| Relocation {
        kind: if g { RelocKind::GprelSlot } else { RelocKind::AbsInSection },
        section,
        offset,
        target,
    });
    (
        name(0),
        prop::collection::vec(section(), 0..5),
        prop::collection::vec(sym, 0..8),
        prop::collection::vec(rel, 0..8),
    )
        .prop_map(|(n, sections, symbols, relocations)| {
            let mut img = ModuleImage::new(n);
            img.sections = sections;
            img.symbols = symbols;
            img.relocations = relocations;
            img
        })
}

proptest! {
    #[test]
    fn codec_round_trip(img in image()) {
        let blob = encode(&img).unwrap();
        let back = decode(&blob).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(encode(&back).unwrap(), blob);
    }

    #[test]
    fn valid_images_satisfy_the_format_invariants(img in image()) {
        if validate(&img).is_empty() {
            let mut kinds: Vec<_> = img.sections.iter().map(|s| s.kind).collect();
            kinds.sort();
            kinds.dedup();
            prop_assert_eq!(kinds.len(), img.sections.len());
            for r in &img.relocations {
                let sec = img.section(r.section);
                prop_assert!(sec.is_some());
                prop_assert!(r.offset < sec.unwrap().size);
                if r.kind == RelocKind::AbsInSection {
                    prop_assert!(img.symbol(&r.target).is_some());
                }
            }
        }
    }
}

// Loader ---------------------------------------------------------------------

fn provider(functions: usize, data: &[u32], rodata: bool) -> String {
    let mut s = String::from("    .text\n");
    for f in 0..functions {
        s.push_str(&format!("    .interface f{f}\nf{f}:\n    li x0, {f}\n    cret\n"));
    }
    s.push_str("    .data\n");
    for (i, words) in data.iter().enumerate() {
        s.push_str(&format!("d{i}: .zero {}\n", words * 4));
    }
    if rodata {
        s.push_str("    .rodata\nk: .word 7, 8\n");
    }
    s.push_str("    .bss\nscratch: .zero 32\n");
    s
}

fn consumer(functions: usize) -> String {
    let mut s =
        String::from("    .text\n    .global main\nmain:\n    cincoffset csp, csp, -16\n    cscr cra, 0(csp)\n");
    for f in 0..functions {
        s.push_str(&format!("    clc c1, cap(f{f})\n    cjalr c1\n"));
    }
    s.push_str("    clcr cra, 0(csp)\n    cincoffset csp, csp, 16\n    cret\n");
    s
}

fn boot_pair(functions: usize, data: &[u32], rodata: bool, bound_stack: bool) -> System {
    let policy = format!(
        "compartment lib lib.s strategy=kill bound_stack={bound_stack}\n\
         compartment app app.s strategy=return_error bound_stack={bound_stack}\n\
         allow app -> lib : *\n\
         task app main\n"
    );
    let policy = SecurityPolicy::parse(&policy).unwrap();
    let (lib, app) = (provider(functions, data, rodata), consumer(functions));
    let mut resolve = |p: &str| {
        let src = if p == "lib.s" { &lib } else { &app };
        assemble(p, src).map_err(|e| e.to_string())
    };
    System::boot(&policy, &mut resolve, BootOptions::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loaded_compartments_respect_the_region_rules(
        functions in 1usize..6,
        data in prop::collection::vec(1u32..40, 1..6),
        rodata in any::<bool>(),
        bound_stack in any::<bool>(),
    ) {
        let sys = boot_pair(functions, &data, rodata, bound_stack);
        let l = &sys.linked;
        for c in &l.compartments {
            for (k, r) in &c.regions {
                match k {
                    SectionKind::Code | SectionKind::ReadOnlyData => {
                        prop_assert!(!r.cap.perms.intersects(Perms::STORE | Perms::STORE_CAP))
                    }
                    SectionKind::Data | SectionKind::ZeroFill => prop_assert!(!r.cap.perms.contains(Perms::EXECUTE)),
                }
            }
            for (i, slot) in c.captable.slots.iter().enumerate() {
                let cap = l.machine.mem.read_cap_raw(c.captable.slot_addr(i as u32));
                match slot.class {
                    SlotClass::Canary => prop_assert!(!cap.tag),
                    SlotClass::External => {
                        prop_assert!(!cap.tag || cap.is_sentry());
                        if cap.tag {
                            prop_assert!(l.trampolines.iter().any(|t| t.region.contains(cap.cursor)));
                        }
                    }
                    _ => {
                        prop_assert!(cap.tag);
                        prop_assert!(c.owned().iter().any(|(_, r)| cap.range_within(&r.cap)), "{} escapes", slot.name);
                    }
                }
            }
        }
        for t in &sys.tasks {
            prop_assert!(!t.regs.csp.perms.contains(Perms::EXECUTE));
        }
        let sizes: Vec<usize> = l.trampolines.iter().map(|t| t.instructions.len()).collect();
        prop_assert!(sizes.iter().all(|n| *n == sizes[0]));
        for t in &l.trampolines {
            prop_assert_eq!(t.region.cap.perms, Perms::EXECUTE | Perms::LOAD_CAP);
            prop_assert!(t.entry.is_sentry());
        }
    }

    #[test]
    fn compid_tracks_cgp_and_depth_tracks_home(functions in 1usize..5, bound_stack in any::<bool>()) {
        let mut sys = boot_pair(functions, &[4], false, bound_stack);
        let home = sys.tasks[0].home;
        sys.linked.machine.regs = sys.tasks[0].regs;
        sys.linked.machine.ctx = sys.tasks[0].ctx.clone();
        let mut steps = 0;
        loop {
            let m = &sys.linked.machine;
            if !m.in_switcher(m.regs.pcc.cursor) {
                prop_assert!(sys.cgp_coherent());
                prop_assert_eq!(m.ctx.depth() == 0, m.ctx.compid == home);
            }
            match sys.linked.machine.step() {
                StepOutcome::Executed => steps += 1,
                StepOutcome::Halted => break,
                other => prop_assert!(false, "{:?}", other),
            }
        }
        prop_assert!(steps > functions);
    }
}

#[test]
fn boot_without_runtime_matches_system_boot() {
    let policy = SecurityPolicy::parse("compartment a a.s strategy=kill\n").unwrap();
    let src = ".text\n.interface f\nf:\n    cret\n";
    let mut resolve = |p: &str| assemble(p, src).map_err(|e| e.to_string());
    let linked = boot(&policy, &mut resolve, BootOptions::default()).unwrap();
    assert_eq!(linked.compartments.len(), 1);
    assert_eq!(linked.compartments[0].captable.resources(), 1);
}
