//! Compartment graph as text and as DOT.

use std::fmt::Write as _;

use linkcap_core::loader::{Binding, LinkedSystem, SlotClass};

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// DOT digraph: one node per compartment, one edge per live trampoline,
/// dashed edges for imports the policy refused.
pub fn to_dot(sys: &LinkedSystem) -> String {
    let mut s = String::from("digraph compartments {\n    node [shape=box];\n");
    for c in &sys.compartments {
        let mut label = format!("{}\\n{}", c.name, c.strategy);
        if c.killed {
            label.push_str("\\nkilled");
        }
        let _ = writeln!(s, "    {} [label={}];", quote(&c.name), quote(&label));
    }
    for (caller, callee, symbol) in sys.live_edges() {
        let Some(caller) = caller.and_then(|id| sys.compartment(id)) else { continue };
        let callee = sys.compartment(callee).expect("trampoline callee exists");
        let _ = writeln!(s, "    {} -> {} [label={}];", quote(&caller.name), quote(&callee.name), quote(&symbol));
    }
    for d in &sys.diagnostics {
        let _ = writeln!(
            s,
            "    {} -> {} [label={}, style=dashed, color=red];",
            quote(&d.caller),
            quote(&d.callee),
            quote(&format!("{} ({})", d.symbol, d.reason))
        );
    }
    s.push_str("}\n");
    s
}

/// Human-readable link summary: compartments, regions, imports, diagnostics.
pub fn to_text(sys: &LinkedSystem) -> String {
    let mut s = String::new();
    for c in &sys.compartments {
        let _ = writeln!(
            s,
            "compartment {} id={} strategy={} resources={}",
            c.name,
            c.id,
            c.strategy,
            c.captable.resources()
        );
        for (kind, r) in c.owned() {
            let _ = writeln!(s, "    {kind:<13} {:#08x}..{:#08x} ({} bytes)", r.base, r.end(), r.size);
        }
        for slot in c.captable.slots.iter().filter(|s| s.class == SlotClass::External) {
            let target = match &slot.binding {
                Binding::Trampoline(t) => {
                    let callee = sys.compartment(sys.trampolines[*t].callee).expect("callee exists");
                    format!("-> {} via trampoline {t}", callee.name)
                }
                Binding::Denied(reason) => format!("denied ({reason})"),
                Binding::Unlinked => "unlinked".to_string(),
            };
            let _ = writeln!(s, "    import {} {target}", slot.name);
        }
    }
    for t in &sys.trampolines {
        let _ = writeln!(
            s,
            "trampoline {:#08x} -> {}:{} ({} instructions)",
            t.region.base,
            sys.compartment(t.callee).map_or("?", |c| c.name.as_str()),
            t.symbol,
            t.instructions.len()
        );
    }
    for d in &sys.diagnostics {
        let _ = writeln!(s, "diagnostic: {d}");
    }
    s
}
