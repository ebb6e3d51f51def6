//! Cross-compartment linking and secure boot.

use std::fmt;

use super::{merge_images, Binding, DenyReason, LinkDiagnostic, LinkedSystem, LoadError, SecurityPolicy, SlotClass};
use crate::faulthandling::register_handlers;
use crate::modformat::{ModuleImage, SymbolClass};

/// Supplies module images by the path written in the policy.
pub type ModuleResolver<'a> = dyn FnMut(&str) -> Result<ModuleImage, String> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootOptions {
    pub memory_size: u32,
    pub insecure: bool,
}

impl Default for BootOptions {
    fn default() -> Self {
        BootOptions { memory_size: super::DEFAULT_MEMORY_SIZE, insecure: false }
    }
}

/// Every load and link error of a boot attempt.
#[derive(Debug, PartialEq, Eq)]
pub struct BootError {
    pub errors: Vec<LoadError>,
}

impl fmt::Display for BootError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<String> = self.errors.iter().map(|e| e.to_string()).collect();
        f.write_str(&msgs.join("\n"))
    }
}

impl std::error::Error for BootError {}

impl From<LoadError> for BootError {
    fn from(e: LoadError) -> Self {
        BootError { errors: vec![e] }
    }
}

impl LinkedSystem {
    /// Bind every External slot of every compartment.
    ///
    /// An external with no Global or Interface definition anywhere is an
    /// error. A candidate that is not an Interface, or an Interface no allow
    /// rule covers, leaves the slot untagged and records a diagnostic.
    pub fn link_all(&mut self, policy: &SecurityPolicy) -> Result<(), Vec<LoadError>> {
        let mut errors = Vec::new();
        for ci in 0..self.compartments.len() {
            let caller_id = self.compartments[ci].id;
            let caller = self.compartments[ci].name.clone();
            let externals: Vec<(u32, String)> = self.compartments[ci]
                .captable
                .slots
                .iter()
                .enumerate()
                .filter(|(_, s)| s.class == SlotClass::External && s.binding == Binding::Unlinked)
                .map(|(i, s)| (i as u32, s.name.clone()))
                .collect();
            for (slot, symbol) in externals {
                let candidates: Vec<(u32, String, SymbolClass)> = self
                    .compartments
                    .iter()
                    .filter(|c| c.id != caller_id)
                    .filter_map(|c| {
                        c.symbol(&symbol)
                            .filter(|s| s.class != SymbolClass::Local)
                            .map(|s| (c.id, c.name.clone(), s.class))
                    })
                    .collect();
                if candidates.is_empty() {
                    errors.push(LoadError::UnresolvedRequiredSymbol { compartment: caller.clone(), symbol });
                    continue;
                }
                let chosen = candidates
                    .iter()
                    .find(|(_, name, class)| *class == SymbolClass::Interface && policy.allows(&caller, name, &symbol));
                let binding = match chosen {
                    Some((callee, _, _)) => match self.emit_trampoline(Some(caller_id), *callee, &symbol) {
                        Ok(t) => {
                            let entry = self.trampolines[t].entry;
                            let addr = self.compartments[ci].captable.slot_addr(slot);
                            self.machine.mem.write_cap_raw(addr, entry);
                            Binding::Trampoline(t)
                        }
                        Err(e) => {
                            errors.push(e);
                            continue;
                        }
                    },
                    None => {
                        let (_, callee, class) =
                            candidates.iter().find(|(_, _, c)| *c == SymbolClass::Interface).unwrap_or(&candidates[0]);
                        let reason = if *class == SymbolClass::Interface {
                            DenyReason::NoAllowRule
                        } else {
                            DenyReason::NotInterface
                        };
                        self.diagnostics.push(LinkDiagnostic {
                            caller: caller.clone(),
                            callee: callee.clone(),
                            symbol: symbol.clone(),
                            reason,
                        });
                        Binding::Denied(reason)
                    }
                };
                self.compartments[ci].captable.slots[slot as usize].binding = binding;
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// Trampolines whose callee captable slot is still tagged: the live call graph.
    pub fn live_edges(&self) -> Vec<(Option<u32>, u32, String)> {
        self.trampolines
            .iter()
            .filter(|t| self.machine.mem.tag_at(t.captable_slot_addr()))
            .map(|t| (t.caller, t.callee, t.symbol.clone()))
            .collect()
    }
}

/// Load every compartment of `policy` in boot order, link, and register fault
/// handlers. Errors from all compartments are reported together.
pub fn boot(
    policy: &SecurityPolicy,
    resolve: &mut ModuleResolver<'_>,
    options: BootOptions,
) -> Result<LinkedSystem, BootError> {
    let mut sys = LinkedSystem::new(options.memory_size)?;
    let mut errors = Vec::new();
    for decl in policy.boot_list() {
        let mut images = Vec::new();
        for path in &decl.modules {
            match resolve(path) {
                Ok(img) => images.push(img),
                Err(message) => {
                    errors.push(LoadError::Module { compartment: decl.name.clone(), path: path.clone(), message })
                }
            }
        }
        if images.len() != decl.modules.len() {
            continue;
        }
        let loaded = merge_images(&decl.name, &images).and_then(|img| sys.load_compartment(&img, decl));
        if let Err(e) = loaded {
            errors.push(e);
        }
    }
    if !errors.is_empty() {
        return Err(BootError { errors });
    }
    sys.link_all(policy).map_err(|errors| BootError { errors })?;
    register_handlers(&mut sys).map_err(|errors| BootError { errors })?;
    sys.machine.set_insecure(options.insecure);
    Ok(sys)
}
