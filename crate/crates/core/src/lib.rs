//! Linkage-based compartmentalization on a tagged-capability machine.
//!
//! - [`capmachine`]: capabilities, tagged memory and the toy ISA interpreter.
//! - [`modformat`]: relocatable module images, their binary codec and the assembler.
//! - [`loader`]: the secure loader/linker that turns modules into compartments.
//! - [`runtime`]: cooperative tasks, queues and compartment-aware context switches.
//! - [`faulthandling`]: fault dispatch and the recovery strategies.

pub mod capmachine;
pub mod faulthandling;
pub mod loader;
pub mod modformat;
pub mod runtime;

#[cfg(test)]
pub(crate) mod testutil {
    use crate::loader::{BootOptions, SecurityPolicy};
    use crate::modformat::assemble;
    use crate::runtime::System;

    /// Boot a policy whose module paths name entries of `sources`.
    pub fn boot(policy: &str, sources: &[(&str, &str)]) -> System {
        let policy = SecurityPolicy::parse(policy).expect("policy parses");
        let mut resolve = |path: &str| {
            let (_, src) = sources.iter().find(|(p, _)| *p == path).ok_or("no such source")?;
            assemble(path, src).map_err(|e| e.to_string())
        };
        System::boot(&policy, &mut resolve, BootOptions::default()).expect("boots")
    }

    pub fn word(sys: &System, comp: &str, sym: &str, index: u32) -> u32 {
        let s = sys.linked.by_name(comp).unwrap().symbol(sym).unwrap();
        sys.linked.machine.mem.read_word_raw(s.addr + 4 * index)
    }

    /// Caller calling three entries of a library; results land in `app:out`.
    pub const APP: &str = "
        .text
        .global main
        main:
            cincoffset csp, csp, -16
            cscr  cra, 0(csp)
            clc   c2, cap(out)
            clc   c1, cap(get)
            cjalr c1
            csw   x0, 0(c2)
            clc   c1, cap(crash)
            cjalr c1
            csw   x0, 4(c2)
            clc   c1, cap(get)
            cjalr c1
            csw   x0, 8(c2)
            clcr  cra, 0(csp)
            cincoffset csp, csp, 16
            cret
        .data
        out: .zero 12
    ";

    /// `get` returns 42 plus a counter that `crash` bumps before faulting.
    pub const LIB: &str = "
        .text
        .interface get
        .interface crash
        get:
            clc   c1, cap(state)
            clw   x1, 0(c1)
            li    x0, 42
            add   x0, x0, x1
            cret
        crash:
            clc   c1, cap(state)
            li    x1, 100
            csw   x1, 0(c1)
            clw   x0, 64(c1)
            cret
        .data
        state: .word 0
    ";

    pub fn app_lib_policy(strategy: &str) -> String {
        format!(
            "compartment app app.s strategy=return_error\n\
             compartment lib lib.s strategy={strategy}\n\
             allow app -> lib : *\n\
             task app main\n"
        )
    }
}
