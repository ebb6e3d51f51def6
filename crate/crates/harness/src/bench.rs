//! Microbenchmarks over the shipped `micro` compartments.
//!
//! Each operation is measured as the instruction counters of a fresh boot
//! running the operation's tasks, minus a fresh boot running baseline tasks
//! that do the same setup without the operation.

use std::fmt::Write as _;

use serde::Serialize;

use linkcap_core::capmachine::CostCounters;
use linkcap_core::loader::SecurityPolicy;
use linkcap_core::runtime::ScheduleOutcome;

use crate::resolve::boot_sources;
use crate::HarnessError;

pub const REPORT_VERSION: u32 = 1;

const POLICY: &str = include_str!("../../../scenarios/micro/policy.txt");
const SOURCES: [(&str, &str); 3] = [
    ("sender.s", include_str!("../../../scenarios/micro/sender.s")),
    ("receiver.s", include_str!("../../../scenarios/micro/receiver.s")),
    ("tiny.s", include_str!("../../../scenarios/micro/tiny.s")),
];

const MAX_STEPS: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Switch,
    Ipc,
    Fncall,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Suite> {
        Some(match s {
            "switch" => Suite::Switch,
            "ipc" => Suite::Ipc,
            "fncall" => Suite::Fncall,
            "all" => Suite::All,
            _ => return None,
        })
    }

    fn includes(self, op: &Op) -> bool {
        match self {
            // The switch comparison only means something next to its neighbours.
            Suite::Switch | Suite::All => true,
            Suite::Ipc => op.name.starts_with("ipc"),
            Suite::Fncall => op.name == "fncall",
        }
    }
}

struct Op {
    name: &'static str,
    tasks: &'static [(&'static str, &'static str)],
    baseline: &'static [(&'static str, &'static str)],
}

const OPS: [Op; 5] = [
    Op { name: "fncall", tasks: &[("sender", "fncall")], baseline: &[("sender", "baseline")] },
    Op { name: "switch/1", tasks: &[("sender", "switch_tiny")], baseline: &[("sender", "baseline")] },
    Op { name: "switch/18", tasks: &[("receiver", "switch_sender")], baseline: &[("receiver", "switch_baseline")] },
    Op { name: "switch/41", tasks: &[("sender", "switch_receiver")], baseline: &[("sender", "baseline")] },
    Op {
        name: "ipc/1B",
        tasks: &[("sender", "ipc"), ("receiver", "echo")],
        baseline: &[("sender", "ipc_baseline"), ("receiver", "idle")],
    },
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BenchRow {
    pub variant: String,
    pub operation: String,
    pub instructions: u64,
    pub trampoline_instructions: u64,
    pub trap_instructions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BenchmarkReport {
    pub version: u32,
    pub rows: Vec<BenchRow>,
}

impl BenchmarkReport {
    pub fn row(&self, variant: &str, operation: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant == variant && r.operation == operation)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# benchmark report v{}", self.version);
        let _ = writeln!(
            s,
            "{:<10} {:<10} {:>12} {:>11} {:>6}",
            "variant", "operation", "instructions", "trampoline", "trap"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:<10} {:>12} {:>11} {:>6}",
                r.variant, r.operation, r.instructions, r.trampoline_instructions, r.trap_instructions
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn micro_policy(bound_stack: bool) -> SecurityPolicy {
    let mut p = SecurityPolicy::parse(POLICY).expect("shipped micro policy parses");
    for c in &mut p.compartments {
        c.bound_stack = bound_stack;
    }
    p
}

fn measure(policy: &SecurityPolicy, tasks: &[(&str, &str)]) -> Result<CostCounters, HarnessError> {
    let mut sys = boot_sources(policy, &SOURCES, false)?;
    for (comp, entry) in tasks {
        sys.create_task(comp, entry, 1024).map_err(|e| HarnessError::Validation(e.to_string()))?;
    }
    let report = sys.schedule(MAX_STEPS);
    if report.outcome != ScheduleOutcome::AllDone || !sys.fault_log.is_empty() {
        return Err(HarnessError::Fault(format!("benchmark {tasks:?} did not complete: {:?}", report.outcome)));
    }
    Ok(report.counters)
}

pub fn run_suite(suite: Suite) -> Result<BenchmarkReport, HarnessError> {
    let mut rows = Vec::new();
    for (variant, bound) in [("bounded", true), ("unbounded", false)] {
        let policy = micro_policy(bound);
        for op in OPS.iter().filter(|op| suite.includes(op)) {
            let cost = measure(&policy, op.tasks)?.since(&measure(&policy, op.baseline)?);
            rows.push(BenchRow {
                variant: variant.to_string(),
                operation: op.name.to_string(),
                instructions: cost.instructions,
                trampoline_instructions: cost.trampoline_instructions,
                trap_instructions: cost.trap_instructions,
            });
        }
    }
    Ok(BenchmarkReport { version: REPORT_VERSION, rows })
}

/// The `micro` policy and sources, for callers that want to boot them directly.
pub fn micro_system(bound_stack: bool) -> Result<linkcap_core::runtime::System, HarnessError> {
    boot_sources(&micro_policy(bound_stack), &SOURCES, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resource_counts() {
        let sys = micro_system(true).unwrap();
        let n = |c: &str| sys.linked.by_name(c).unwrap().captable.resources();
        assert_eq!((n("tiny"), n("sender"), n("receiver")), (1, 18, 41));
    }

    #[test]
    fn suites_select_rows() {
        let r = run_suite(Suite::Fncall).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows.iter().all(|r| r.operation == "fncall"));
        assert_eq!(run_suite(Suite::Ipc).unwrap().rows.len(), 2);
    }
}
