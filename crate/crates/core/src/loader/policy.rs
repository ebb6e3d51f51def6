//! Boot-time security policy.
//!
//! ```text
//! compartment <name> <path>[,<path>...] strategy=<return_error|custom|kill|micro_reboot>
//!             [bound_stack=<bool>] [scrub_stack=<bool>]
//! allow <caller> -> <callee> : <symbol|*>
//! boot_order <name> ...
//! task <compartment> <entry> [stack=<bytes>]
//! queue <name> capacity=<n> item_size=<bytes> users=<name>[,<name>...]
//! ```
//!
//! A compartment listing several module paths is a library: the modules share
//! one captable.

use std::collections::HashSet;

use thiserror::Error;

use crate::faulthandling::StrategyKind;

pub const DEFAULT_STACK_SIZE: u32 = 2048;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompartmentDecl {
    pub name: String,
    pub modules: Vec<String>,
    pub strategy: StrategyKind,
    pub bound_stack: bool,
    pub scrub_stack: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SymbolPattern {
    Any,
    Exact(String),
}

impl SymbolPattern {
    pub fn matches(&self, symbol: &str) -> bool {
        match self {
            SymbolPattern::Any => true,
            SymbolPattern::Exact(s) => s == symbol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllowRule {
    pub caller: String,
    pub callee: String,
    pub symbol: SymbolPattern,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDecl {
    pub compartment: String,
    pub entry: String,
    pub stack_size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueDecl {
    pub name: String,
    pub capacity: u32,
    pub item_size: u32,
    pub users: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SecurityPolicy {
    /// In declaration order.
    pub compartments: Vec<CompartmentDecl>,
    pub allow: Vec<AllowRule>,
    pub boot_order: Option<Vec<String>>,
    pub tasks: Vec<TaskDecl>,
    pub queues: Vec<QueueDecl>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("policy line {line}: {message}")]
pub struct PolicyError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> PolicyError {
    PolicyError { line, message: message.into() }
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, PolicyError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(line, format!("{key} must be true or false, got {v:?}"))),
    }
}

fn parse_u32(line: usize, key: &str, v: &str) -> Result<u32, PolicyError> {
    v.parse().map_err(|_| err(line, format!("{key} must be a number, got {v:?}")))
}

fn key_values<'a>(line: usize, words: &[&'a str]) -> Result<Vec<(&'a str, &'a str)>, PolicyError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for w in words {
        let (k, v) = w.split_once('=').ok_or_else(|| err(line, format!("expected key=value, got {w:?}")))?;
        if !seen.insert(k) {
            return Err(err(line, format!("duplicate key {k}")));
        }
        out.push((k, v));
    }
    Ok(out)
}

fn is_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl SecurityPolicy {
    pub fn parse(text: &str) -> Result<SecurityPolicy, PolicyError> {
        let mut p = SecurityPolicy::default();
        let mut rule_lines = Vec::new();
        let mut task_lines = Vec::new();
        let mut queue_lines = Vec::new();
        let mut boot_line = 0;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let words: Vec<&str> = body.split_whitespace().collect();
            match words[0] {
                "compartment" => {
                    if words.len() < 3 {
                        return Err(err(line, "compartment <name> <path> strategy=..."));
                    }
                    let name = words[1];
                    if !is_name(name) {
                        return Err(err(line, format!("bad compartment name {name:?}")));
                    }
                    if p.compartments.iter().any(|c| c.name == name) {
                        return Err(err(line, format!("duplicate compartment {name}")));
                    }
                    let modules: Vec<String> = words[2].split(',').map(str::to_string).collect();
                    if modules.iter().any(|m| m.is_empty()) {
                        return Err(err(line, "empty module path"));
                    }
                    let mut decl = CompartmentDecl {
                        name: name.to_string(),
                        modules,
                        strategy: StrategyKind::ReturnError,
                        bound_stack: true,
                        scrub_stack: false,
                    };
                    let mut have_strategy = false;
                    for (k, v) in key_values(line, &words[3..])? {
                        match k {
                            "strategy" => {
                                decl.strategy = StrategyKind::parse(v)
                                    .ok_or_else(|| err(line, format!("unknown strategy {v:?}")))?;
                                have_strategy = true;
                            }
                            "bound_stack" => decl.bound_stack = parse_bool(line, k, v)?,
                            "scrub_stack" => decl.scrub_stack = parse_bool(line, k, v)?,
                            _ => return Err(err(line, format!("unknown key {k}"))),
                        }
                    }
                    if !have_strategy {
                        return Err(err(line, "missing strategy="));
                    }
                    p.compartments.push(decl);
                }
                "allow" => {
                    // allow a -> b : sym  (spacing around -> and : is optional)
                    let rest = body["allow".len()..].trim();
                    let (caller, rest) =
                        rest.split_once("->").ok_or_else(|| err(line, "allow <caller> -> <callee> : <symbol|*>"))?;
                    let (callee, sym) =
                        rest.split_once(':').ok_or_else(|| err(line, "allow <caller> -> <callee> : <symbol|*>"))?;
                    let (caller, callee, sym) = (caller.trim(), callee.trim(), sym.trim());
                    if !is_name(caller) || !is_name(callee) || sym.is_empty() || sym.contains(char::is_whitespace) {
                        return Err(err(line, "allow <caller> -> <callee> : <symbol|*>"));
                    }
                    let symbol = if sym == "*" { SymbolPattern::Any } else { SymbolPattern::Exact(sym.to_string()) };
                    p.allow.push(AllowRule { caller: caller.to_string(), callee: callee.to_string(), symbol });
                    rule_lines.push(line);
                }
                "boot_order" => {
                    if p.boot_order.is_some() {
                        return Err(err(line, "boot_order given twice"));
                    }
                    p.boot_order = Some(words[1..].iter().map(|s| s.to_string()).collect());
                    boot_line = line;
                }
                "task" => {
                    if words.len() < 3 {
                        return Err(err(line, "task <compartment> <entry> [stack=N]"));
                    }
                    let mut t = TaskDecl {
                        compartment: words[1].to_string(),
                        entry: words[2].to_string(),
                        stack_size: DEFAULT_STACK_SIZE,
                    };
                    for (k, v) in key_values(line, &words[3..])? {
                        match k {
                            "stack" => t.stack_size = parse_u32(line, k, v)?,
                            _ => return Err(err(line, format!("unknown key {k}"))),
                        }
                    }
                    p.tasks.push(t);
                    task_lines.push(line);
                }
                "queue" => {
                    if words.len() < 2 || !is_name(words[1]) {
                        return Err(err(line, "queue <name> capacity=N item_size=N users=a,b"));
                    }
                    if p.queues.iter().any(|q| q.name == words[1]) {
                        return Err(err(line, format!("duplicate queue {}", words[1])));
                    }
                    let (mut capacity, mut item_size, mut users) = (None, None, None);
                    for (k, v) in key_values(line, &words[2..])? {
                        match k {
                            "capacity" => capacity = Some(parse_u32(line, k, v)?),
                            "item_size" => item_size = Some(parse_u32(line, k, v)?),
                            "users" => users = Some(v.split(',').map(str::to_string).collect::<Vec<_>>()),
                            _ => return Err(err(line, format!("unknown key {k}"))),
                        }
                    }
                    let q = QueueDecl {
                        name: words[1].to_string(),
                        capacity: capacity.filter(|c| *c > 0).ok_or_else(|| err(line, "capacity must be positive"))?,
                        item_size: item_size
                            .filter(|s| *s > 0)
                            .ok_or_else(|| err(line, "item_size must be positive"))?,
                        users: users.ok_or_else(|| err(line, "missing users="))?,
                    };
                    p.queues.push(q);
                    queue_lines.push(line);
                }
                other => return Err(err(line, format!("unknown directive {other:?}"))),
            }
        }

        let known = |n: &str| p.compartments.iter().any(|c| c.name == n);
        for (r, line) in p.allow.iter().zip(&rule_lines) {
            for n in [&r.caller, &r.callee] {
                if !known(n) {
                    return Err(err(*line, format!("unknown compartment {n}")));
                }
            }
        }
        for (t, line) in p.tasks.iter().zip(&task_lines) {
            if !known(&t.compartment) {
                return Err(err(*line, format!("unknown compartment {}", t.compartment)));
            }
        }
        for (q, line) in p.queues.iter().zip(&queue_lines) {
            for u in &q.users {
                if !known(u) {
                    return Err(err(*line, format!("unknown compartment {u}")));
                }
            }
        }
        if let Some(order) = &p.boot_order {
            let mut seen = HashSet::new();
            for n in order {
                if !known(n) {
                    return Err(err(boot_line, format!("unknown compartment {n}")));
                }
                if !seen.insert(n.as_str()) {
                    return Err(err(boot_line, format!("{n} listed twice")));
                }
            }
            if seen.len() != p.compartments.len() {
                return Err(err(boot_line, "boot_order must list every compartment"));
            }
        }
        Ok(p)
    }

    /// Compartment declarations in boot order.
    pub fn boot_list(&self) -> Vec<&CompartmentDecl> {
        match &self.boot_order {
            None => self.compartments.iter().collect(),
            Some(order) => order.iter().map(|n| self.compartments.iter().find(|c| &c.name == n).unwrap()).collect(),
        }
    }

    pub fn compartment(&self, name: &str) -> Option<&CompartmentDecl> {
        self.compartments.iter().find(|c| c.name == name)
    }

    pub fn allows(&self, caller: &str, callee: &str, symbol: &str) -> bool {
        self.allow.iter().any(|r| r.caller == caller && r.callee == callee && r.symbol.matches(symbol))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_grammar() {
        let p = SecurityPolicy::parse(
            "# demo\n\
             compartment a a.s strategy=kill bound_stack=false\n\
             compartment lib x.s,y.s strategy=custom scrub_stack=true\n\
             allow a -> lib : get\n\
             allow lib->a:*\n\
             boot_order lib a\n\
             task a main stack=4096\n\
             queue q capacity=2 item_size=1 users=a,lib\n",
        )
        .unwrap();
        assert_eq!(p.compartments.len(), 2);
        assert_eq!(p.compartments[1].modules, vec!["x.s", "y.s"]);
        assert!(!p.compartments[0].bound_stack);
        assert!(p.allows("a", "lib", "get"));
        assert!(!p.allows("a", "lib", "put"));
        assert!(p.allows("lib", "a", "anything"));
        assert_eq!(p.boot_list()[0].name, "lib");
        assert_eq!(p.tasks[0].stack_size, 4096);
        assert_eq!(p.queues[0].users, vec!["a", "lib"]);
    }

    #[test]
    fn empty_policy() {
        let p = SecurityPolicy::parse("").unwrap();
        assert!(p.boot_list().is_empty());
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            "compartment a a.s\n",
            "compartment a a.s strategy=sometimes\n",
            "compartment a a.s strategy=kill colour=red\n",
            "compartment a a.s strategy=kill\nallow a -> b : *\n",
            "compartment a a.s strategy=kill\ncompartment a b.s strategy=kill\n",
            "compartment a a.s strategy=kill\ncompartment b b.s strategy=kill\nboot_order a\n",
            "frobnicate\n",
        ];
        for c in cases {
            let e = SecurityPolicy::parse(c).unwrap_err();
            assert!(e.line >= 1, "{c}");
        }
        assert_eq!(SecurityPolicy::parse("\n\nbogus\n").unwrap_err().line, 3);
    }
}
