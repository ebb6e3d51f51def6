//! Fault-injection scenarios.
//!
//! A scenario is a directory holding a `scenario.txt` driver script, one or
//! more policy files and the module sources they name. The script is a list
//! of variants, each booted fresh:
//!
//! ```text
//! variant <name> <policy-file> [insecure] [max_steps=N]
//! poke <comp>:<sym>[+<word>] <value>
//! run
//! expect_task <task> <ready|blocked|dead|finished>
//! expect_faults <n>
//! expect_fault <seq> <Kind> <comp|-> [strategy=<s>] [outcome=<action>]
//! expect_word <comp>:<sym>[+<word>] <==|!=|<=|<|>=|>> <value>
//! expect_pristine <comp>
//! expect_corrupted <comp>
//! expect_killed <comp> <yes|no>
//! expect_same <comp>:<sym> <earlier variant>
//! ```
//!
//! Values are integers (decimal or `0x` hex), `&comp:sym` for a symbol's
//! address, or `@comp:sym` for the address of its captable slot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use linkcap_core::capmachine::FaultKind;
use linkcap_core::faulthandling::Outcome;
use linkcap_core::runtime::{RunReport, System, TaskState};

use crate::resolve::{boot_in, read_policy};
use crate::HarnessError;

pub const SCRIPT: &str = "scenario.txt";
const DEFAULT_MAX_STEPS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Location {
    pub comp: String,
    pub symbol: String,
    pub word: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Int(u32),
    SymbolAddr(String, String),
    SlotAddr(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Le,
    Lt,
    Ge,
    Gt,
}

impl CmpOp {
    fn parse(s: &str) -> Option<CmpOp> {
        Some(match s {
            "==" => CmpOp::Eq,
            "!=" => CmpOp::Ne,
            "<=" => CmpOp::Le,
            "<" => CmpOp::Lt,
            ">=" => CmpOp::Ge,
            ">" => CmpOp::Gt,
            _ => return None,
        })
    }

    fn holds(self, a: u32, b: u32) -> bool {
        match self {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Le => a <= b,
            CmpOp::Lt => a < b,
            CmpOp::Ge => a >= b,
            CmpOp::Gt => a > b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expect {
    Task { name: String, state: TaskState },
    Faults(usize),
    Fault { seq: usize, kind: FaultKind, comp: Option<String>, strategy: Option<String>, outcome: Option<String> },
    Word { at: Location, op: CmpOp, value: Value },
    Pristine(String),
    Corrupted(String),
    Killed(String, bool),
    Same { at: Location, variant: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub line: usize,
    pub text: String,
    pub expect: Expect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub policy: String,
    pub insecure: bool,
    pub max_steps: u64,
    pub pokes: Vec<(Location, Value)>,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub dir: PathBuf,
    pub variants: Vec<Variant>,
}

fn err(line: usize, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Validation(format!("{SCRIPT}:{line}: {msg}"))
}

fn parse_int(s: &str) -> Option<u32> {
    if let Some(h) = s.strip_prefix("0x") {
        return u32::from_str_radix(h, 16).ok();
    }
    if let Some(n) = s.strip_prefix('-') {
        return n.parse::<u32>().ok().map(|v| v.wrapping_neg());
    }
    s.parse().ok()
}

fn parse_comp_sym(s: &str, line: usize) -> Result<(String, String), HarnessError> {
    let (c, sym) = s.split_once(':').ok_or_else(|| err(line, format!("expected comp:symbol, got {s:?}")))?;
    Ok((c.to_string(), sym.to_string()))
}

fn parse_location(s: &str, line: usize) -> Result<Location, HarnessError> {
    let (base, word) = match s.split_once('+') {
        Some((b, w)) => (b, parse_int(w).ok_or_else(|| err(line, format!("bad word index {w:?}")))?),
        None => (s, 0),
    };
    let (comp, symbol) = parse_comp_sym(base, line)?;
    Ok(Location { comp, symbol, word })
}

fn parse_value(s: &str, line: usize) -> Result<Value, HarnessError> {
    if let Some(r) = s.strip_prefix('&') {
        let (c, sym) = parse_comp_sym(r, line)?;
        return Ok(Value::SymbolAddr(c, sym));
    }
    if let Some(r) = s.strip_prefix('@') {
        let (c, sym) = parse_comp_sym(r, line)?;
        return Ok(Value::SlotAddr(c, sym));
    }
    parse_int(s).map(Value::Int).ok_or_else(|| err(line, format!("bad value {s:?}")))
}

fn parse_state(s: &str, line: usize) -> Result<TaskState, HarnessError> {
    Ok(match s {
        "ready" => TaskState::Ready,
        "running" => TaskState::Running,
        "blocked" => TaskState::Blocked,
        "dead" => TaskState::Dead,
        "finished" => TaskState::Finished,
        _ => return Err(err(line, format!("unknown task state {s:?}"))),
    })
}

impl Scenario {
    pub fn parse(name: &str, dir: &Path, text: &str) -> Result<Scenario, HarnessError> {
        let mut variants: Vec<Variant> = Vec::new();
        let mut ran = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let words: Vec<&str> = content.split_whitespace().collect();
            let (cmd, args) = (words[0], &words[1..]);
            if cmd == "variant" {
                if let Some(v) = variants.last() {
                    if !ran {
                        return Err(err(line, format!("variant {} has no run", v.name)));
                    }
                }
                let [vname, policy, rest @ ..] = args else {
                    return Err(err(line, "variant <name> <policy> [insecure] [max_steps=N]"));
                };
                if variants.iter().any(|v| v.name == *vname) {
                    return Err(err(line, format!("duplicate variant {vname}")));
                }
                let mut v = Variant {
                    name: vname.to_string(),
                    policy: policy.to_string(),
                    insecure: false,
                    max_steps: DEFAULT_MAX_STEPS,
                    pokes: Vec::new(),
                    checks: Vec::new(),
                };
                for opt in rest {
                    match opt.split_once('=') {
                        None if *opt == "insecure" => v.insecure = true,
                        Some(("max_steps", n)) => {
                            v.max_steps = n.parse().map_err(|_| err(line, format!("bad max_steps {n:?}")))?
                        }
                        _ => return Err(err(line, format!("unknown variant option {opt:?}"))),
                    }
                }
                variants.push(v);
                ran = false;
                continue;
            }
            let v = variants.last_mut().ok_or_else(|| err(line, "command before the first variant"))?;
            match cmd {
                "poke" => {
                    if ran {
                        return Err(err(line, "poke after run"));
                    }
                    let [loc, val] = args else { return Err(err(line, "poke <comp>:<sym>[+word] <value>")) };
                    v.pokes.push((parse_location(loc, line)?, parse_value(val, line)?));
                }
                "run" => {
                    if ran || !args.is_empty() {
                        return Err(err(line, "one argument-less run per variant"));
                    }
                    ran = true;
                }
                _ => {
                    if !ran {
                        return Err(err(line, format!("{cmd} before run")));
                    }
                    let expect = match (cmd, args) {
                        ("expect_task", [task, state]) => {
                            Expect::Task { name: task.to_string(), state: parse_state(state, line)? }
                        }
                        ("expect_faults", [n]) => {
                            Expect::Faults(n.parse().map_err(|_| err(line, format!("bad count {n:?}")))?)
                        }
                        ("expect_fault", [seq, kind, comp, opts @ ..]) => {
                            let mut strategy = None;
                            let mut outcome = None;
                            for o in opts {
                                match o.split_once('=') {
                                    Some(("strategy", s)) => strategy = Some(s.to_string()),
                                    Some(("outcome", s)) => outcome = Some(s.to_string()),
                                    _ => return Err(err(line, format!("unknown option {o:?}"))),
                                }
                            }
                            Expect::Fault {
                                seq: seq.parse().map_err(|_| err(line, format!("bad sequence {seq:?}")))?,
                                kind: FaultKind::parse(kind)
                                    .ok_or_else(|| err(line, format!("unknown fault {kind:?}")))?,
                                comp: (*comp != "-").then(|| comp.to_string()),
                                strategy,
                                outcome,
                            }
                        }
                        ("expect_word", [loc, op, val]) => Expect::Word {
                            at: parse_location(loc, line)?,
                            op: CmpOp::parse(op).ok_or_else(|| err(line, format!("unknown comparison {op:?}")))?,
                            value: parse_value(val, line)?,
                        },
                        ("expect_pristine", [c]) => Expect::Pristine(c.to_string()),
                        ("expect_corrupted", [c]) => Expect::Corrupted(c.to_string()),
                        ("expect_killed", [c, yn]) => Expect::Killed(
                            c.to_string(),
                            match *yn {
                                "yes" => true,
                                "no" => false,
                                _ => return Err(err(line, "expect_killed <comp> yes|no")),
                            },
                        ),
                        ("expect_same", [loc, other]) => {
                            if !variants[..variants.len() - 1].iter().any(|p| p.name == *other) {
                                return Err(err(line, format!("{other} is not an earlier variant")));
                            }
                            Expect::Same { at: parse_location(loc, line)?, variant: other.to_string() }
                        }
                        _ => return Err(err(line, format!("cannot parse {content:?}"))),
                    };
                    let v = variants.last_mut().unwrap();
                    v.checks.push(Check { line, text: content.to_string(), expect });
                }
            }
        }
        if !ran {
            return Err(err(text.lines().count(), "last variant has no run"));
        }
        Ok(Scenario { name: name.to_string(), dir: dir.to_path_buf(), variants })
    }

    pub fn load(dir: &Path) -> Result<Scenario, HarnessError> {
        let path = dir.join(SCRIPT);
        let text = fs::read_to_string(&path).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("scenario");
        Scenario::parse(name, dir, &text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckResult {
    pub line: usize,
    pub text: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug)]
pub struct VariantResult {
    pub name: String,
    pub report: RunReport,
    pub system: System,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug)]
pub struct ScenarioResult {
    pub name: String,
    pub variants: Vec<VariantResult>,
}

impl ScenarioResult {
    pub fn failures(&self) -> usize {
        self.variants.iter().flat_map(|v| &v.checks).filter(|c| !c.ok).count()
    }

    pub fn checks(&self) -> usize {
        self.variants.iter().map(|v| v.checks.len()).sum()
    }

    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Stable text rendering: run summary, fault log as JSON lines, check results.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# scenario {}", self.name);
        for v in &self.variants {
            let r = &v.report;
            let secure = if v.system.linked.machine.is_insecure() { "insecure" } else { "secure" };
            let _ = writeln!(s, "== variant {} ({secure})", v.name);
            let _ = writeln!(
                s,
                "run: {} steps={} instructions={} trampoline={} trap={} switches={}",
                serde_json::to_value(r.outcome).unwrap().as_str().unwrap_or("?"),
                r.steps,
                r.counters.instructions,
                r.counters.trampoline_instructions,
                r.counters.trap_instructions,
                r.context_switches
            );
            for t in &r.tasks {
                let state = serde_json::to_value(t.state).unwrap();
                let _ = writeln!(s, "task {} {}", t.name, state.as_str().unwrap_or("?"));
            }
            for line in fault_log_lines(&v.name, &v.system) {
                let _ = writeln!(s, "fault {line}");
            }
            for c in &v.checks {
                let mark = if c.ok { "ok  " } else { "FAIL" };
                let _ = writeln!(s, "{mark} {} ({})", c.text, c.detail);
            }
        }
        let _ = writeln!(s, "summary: {} checks, {} failed", self.checks(), self.failures());
        s
    }
}

#[derive(Serialize)]
struct TaggedEntry<'a, T: Serialize> {
    variant: &'a str,
    #[serde(flatten)]
    entry: &'a T,
}

/// The fault log as JSON lines, each tagged with the variant name.
pub fn fault_log_lines(variant: &str, sys: &System) -> Vec<String> {
    sys.fault_log
        .entries()
        .iter()
        .map(|e| serde_json::to_string(&TaggedEntry { variant, entry: e }).expect("fault log serializes"))
        .collect()
}

fn outcome_name(o: &Outcome) -> &'static str {
    match o {
        Outcome::Pending => "pending",
        Outcome::ReturnedError { .. } => "returned_error",
        Outcome::HandlerReturned { .. } => "handler_returned",
        Outcome::TaskDead => "task_dead",
    }
}

fn resolve_value(sys: &System, v: &Value) -> Result<u32, String> {
    let comp = |c: &str| sys.linked.by_name(c).ok_or_else(|| format!("no compartment {c}"));
    match v {
        Value::Int(n) => Ok(*n),
        Value::SymbolAddr(c, s) => {
            let c = comp(c)?;
            c.symbol(s).map(|s| s.addr).ok_or_else(|| format!("no symbol {s} in {}", c.name))
        }
        Value::SlotAddr(c, s) => {
            let c = comp(c)?;
            let sym = c.symbol(s).ok_or_else(|| format!("no symbol {s} in {}", c.name))?;
            Ok(c.captable.slot_addr(sym.slot))
        }
    }
}

fn resolve_location(sys: &System, at: &Location) -> Result<(u32, u32), String> {
    let c = sys.linked.by_name(&at.comp).ok_or_else(|| format!("no compartment {}", at.comp))?;
    let s = c.symbol(&at.symbol).ok_or_else(|| format!("no symbol {} in {}", at.symbol, c.name))?;
    if (at.word + 1) * 4 > s.size {
        return Err(format!("word {} is outside {}:{} ({} bytes)", at.word, c.name, s.name, s.size));
    }
    Ok((s.addr + at.word * 4, s.size))
}

fn symbol_bytes(sys: &System, at: &Location) -> Result<Vec<u8>, String> {
    let c = sys.linked.by_name(&at.comp).ok_or_else(|| format!("no compartment {}", at.comp))?;
    let s = c.symbol(&at.symbol).ok_or_else(|| format!("no symbol {} in {}", at.symbol, c.name))?;
    Ok(sys.linked.machine.mem.read_bytes(s.addr, s.size).to_vec())
}

fn evaluate(sys: &System, e: &Expect, earlier: &BTreeMap<String, System>) -> Result<(bool, String), String> {
    let comp = |c: &str| sys.linked.by_name(c).ok_or_else(|| format!("no compartment {c}"));
    Ok(match e {
        Expect::Task { name, state } => {
            let t = sys.task_by_name(name).ok_or_else(|| format!("no task {name}"))?;
            (t.state == *state, format!("state {:?}", t.state))
        }
        Expect::Faults(n) => (sys.fault_log.len() == *n, format!("{} faults", sys.fault_log.len())),
        Expect::Fault { seq, kind, comp: c, strategy, outcome } => {
            let Some(f) = sys.fault_log.entries().get(*seq) else {
                return Ok((false, format!("only {} faults", sys.fault_log.len())));
            };
            let ok = f.kind == *kind
                && f.compartment == *c
                && strategy.as_ref().is_none_or(|s| *s == f.strategy)
                && outcome.as_ref().is_none_or(|o| o == outcome_name(&f.outcome));
            let detail = format!(
                "{} in {} strategy={} outcome={}",
                f.kind,
                f.compartment.as_deref().unwrap_or("-"),
                f.strategy,
                outcome_name(&f.outcome)
            );
            (ok, detail)
        }
        Expect::Word { at, op, value } => {
            let (addr, _) = resolve_location(sys, at)?;
            let got = sys.linked.machine.mem.read_word_raw(addr);
            let want = resolve_value(sys, value)?;
            (op.holds(got, want), format!("got {got:#x}"))
        }
        Expect::Pristine(c) | Expect::Corrupted(c) => {
            let c = comp(c)?;
            let now = c.mutable_digest(&sys.linked.machine);
            let same = now == c.snapshot_digest();
            let want_same = matches!(e, Expect::Pristine(_));
            (same == want_same, format!("digest {}", &now[..16]))
        }
        Expect::Killed(c, want) => {
            let c = comp(c)?;
            (c.killed == *want, format!("killed={}", c.killed))
        }
        Expect::Same { at, variant } => {
            let other = earlier.get(variant).ok_or_else(|| format!("variant {variant} did not run"))?;
            let a = symbol_bytes(sys, at)?;
            let b = symbol_bytes(other, at)?;
            (a == b, format!("{} bytes", a.len()))
        }
    })
}

fn run_variant(dir: &Path, v: &Variant, earlier: &BTreeMap<String, System>) -> Result<VariantResult, HarnessError> {
    let policy = read_policy(&dir.join(&v.policy))?;
    let mut sys = boot_in(&policy, dir, v.insecure)?;
    for (at, value) in &v.pokes {
        let (addr, _) = resolve_location(&sys, at).map_err(HarnessError::Validation)?;
        let value = resolve_value(&sys, value).map_err(HarnessError::Validation)?;
        sys.linked.machine.mem.write_word_raw(addr, value);
    }
    let report = sys.schedule(v.max_steps);
    let mut checks = Vec::new();
    for c in &v.checks {
        let (ok, detail) = match evaluate(&sys, &c.expect, earlier) {
            Ok(r) => r,
            Err(e) => (false, e),
        };
        checks.push(CheckResult { line: c.line, text: c.text.clone(), ok, detail });
    }
    Ok(VariantResult { name: v.name.clone(), report, system: sys, checks })
}

pub fn run(scenario: &Scenario) -> Result<ScenarioResult, HarnessError> {
    let mut earlier: BTreeMap<String, System> = BTreeMap::new();
    let mut variants = Vec::new();
    for v in &scenario.variants {
        let r = run_variant(&scenario.dir, v, &earlier)?;
        earlier.insert(r.name.clone(), r.system.clone());
        variants.push(r);
    }
    Ok(ScenarioResult { name: scenario.name.clone(), variants })
}

/// Load, run and check a scenario directory.
pub fn inject(dir: &Path) -> Result<ScenarioResult, HarnessError> {
    run(&Scenario::load(dir)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_script() {
        let text = "\
            # comment\n\
            variant clean policy.txt\n\
            poke a:x+1 0x10\n\
            run\n\
            expect_word a:x+1 == 16\n\
            variant bad policy.txt insecure max_steps=50\n\
            poke a:p @b:secret\n\
            run\n\
            expect_fault 0 BoundsViolation b strategy=kill outcome=returned_error\n\
            expect_same a:x clean\n\
            expect_task a.main dead\n";
        let s = Scenario::parse("t", Path::new("."), text).unwrap();
        assert_eq!(s.variants.len(), 2);
        assert!(s.variants[1].insecure);
        assert_eq!(s.variants[1].max_steps, 50);
        assert_eq!(s.variants[0].pokes[0].0.word, 1);
        assert_eq!(s.variants[1].pokes[0].1, Value::SlotAddr("b".into(), "secret".into()));
        assert_eq!(s.variants[1].checks.len(), 3);
    }

    #[test]
    fn rejects_malformed_scripts() {
        for text in [
            "run\n",
            "variant a p.txt\nexpect_faults 0\n",
            "variant a p.txt\n",
            "variant a p.txt\nrun\npoke a:x 1\n",
            "variant a p.txt\nrun\nexpect_same a:x b\n",
            "variant a p.txt\nrun\nexpect_word a:x ~ 1\n",
            "variant a p.txt colour\nrun\n",
            "variant a p.txt\nrun\nvariant a p.txt\nrun\n",
        ] {
            let e = Scenario::parse("t", Path::new("."), text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text:?}");
        }
    }

    #[test]
    fn values() {
        assert_eq!(parse_int("-1"), Some(u32::MAX));
        assert_eq!(parse_int("0xfffffff2"), Some(0xFFFF_FFF2));
        assert_eq!(parse_value("&a:b", 1).unwrap(), Value::SymbolAddr("a".into(), "b".into()));
    }
}
