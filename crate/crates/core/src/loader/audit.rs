//! Capability-graph reachability and the isolation audit built on it.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use super::{LinkedSystem, Region, LOADER_PRIVATE, SWITCHER_BASE, SWITCHER_SIZE};
use crate::capmachine::{Capability, Perms, TaggedMemory, CAP_SIZE};

/// Transitive closure of tagged capabilities reachable from `roots`.
///
/// A capability is followed into memory only when it is tagged, unsealed and
/// carries LOAD_CAP; sentries are recorded but not entered.
pub fn reachable(mem: &TaggedMemory, roots: &[Capability]) -> Vec<Capability> {
    let mut seen: HashSet<Capability> = HashSet::new();
    let mut order = Vec::new();
    let mut work: Vec<Capability> = roots.iter().copied().filter(|c| c.tag).collect();
    while let Some(cap) = work.pop() {
        if !seen.insert(cap) {
            continue;
        }
        order.push(cap);
        if cap.is_sentry() || !cap.perms.contains(Perms::LOAD_CAP) {
            continue;
        }
        let first = (cap.base as u64).next_multiple_of(CAP_SIZE as u64);
        let end = cap.end().min(mem.size() as u64);
        let mut g = first;
        while g + CAP_SIZE as u64 <= end {
            if mem.tag_at(g as u32) {
                work.push(mem.read_cap_raw(g as u32));
            }
            g += CAP_SIZE as u64;
        }
    }
    order
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsolationFinding {
    pub from: String,
    pub what: String,
    pub cap: Capability,
}

impl fmt::Display for IsolationFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} reaches {}: {:?}", self.from, self.what, self.cap)
    }
}

impl LinkedSystem {
    /// Capabilities a compartment holds from boot, before any task runs.
    pub fn compartment_roots(&self, id: u32) -> Vec<Capability> {
        let c = self.compartment(id).expect("compartment exists");
        let mut v = vec![c.cgp(), self.exit_stub, self.fault_return_stub];
        if let Some(h) = c.handler_stack {
            v.push(h.cap);
        }
        v
    }

    /// Check every compartment's reachable set against the isolation rules.
    ///
    /// `extra_roots` and `extra_owned` add per-compartment runtime state:
    /// live registers and task stacks.
    pub fn audit_isolation(
        &self,
        extra_roots: &BTreeMap<u32, Vec<Capability>>,
        extra_owned: &BTreeMap<u32, Vec<Region>>,
    ) -> Vec<IsolationFinding> {
        let mut owned: BTreeMap<u32, Vec<(String, Region)>> = BTreeMap::new();
        for c in &self.compartments {
            let mut v: Vec<(String, Region)> = c.owned().into_iter().map(|(k, r)| (k.to_string(), r)).collect();
            for r in extra_owned.get(&c.id).into_iter().flatten() {
                v.push(("stack".to_string(), *r));
            }
            owned.insert(c.id, v);
        }
        let loader = Region { base: LOADER_PRIVATE.0, size: LOADER_PRIVATE.1, cap: Capability::NULL };
        let switcher = Region { base: SWITCHER_BASE, size: SWITCHER_SIZE, cap: Capability::NULL };
        let mem_size = self.machine.mem.size();

        let mut findings = Vec::new();
        for a in &self.compartments {
            let mut roots = self.compartment_roots(a.id);
            roots.extend(extra_roots.get(&a.id).into_iter().flatten().copied());
            for cap in reachable(&self.machine.mem, &roots) {
                let mut flag = |what: String| findings.push(IsolationFinding { from: a.name.clone(), what, cap });
                if cap.length == mem_size || loader.overlaps(&cap) {
                    flag("loader memory or the root".into());
                }
                if switcher.overlaps(&cap) && !cap.is_sentry() {
                    flag("an unsealed switcher capability".into());
                }
                for b in self.compartments.iter().filter(|b| b.id != a.id) {
                    for (kind, r) in &owned[&b.id] {
                        if !r.overlaps(&cap) {
                            continue;
                        }
                        let what = if cap.perms.intersects(Perms::STORE | Perms::STORE_CAP) {
                            format!("writable {kind} of {}", b.name)
                        } else {
                            format!("{kind} of {}", b.name)
                        };
                        flag(what);
                    }
                }
            }
        }
        findings
    }
}
