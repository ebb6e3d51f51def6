use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use linkcap::bench::{run_suite, Suite};
use linkcap::resolve::{boot_file, read_policy};
use linkcap::scenario::{fault_log_lines, inject};
use linkcap::{graph, HarnessError};
use linkcap_core::loader::{boot, BootOptions};
use linkcap_core::modformat::{assemble, encode};
use linkcap_core::runtime::{ScheduleOutcome, TaskState};

#[derive(Parser)]
#[command(name = "linkcap", version, about = "Linkage-based compartments on a capability machine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphFormat {
    Dot,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble a source file into a module image.
    Asm {
        src: PathBuf,
        #[arg(short = 'o')]
        out: PathBuf,
    },
    /// Load and link a policy; print compartments, imports and diagnostics.
    Link { policy: PathBuf },
    /// Boot a policy and run its tasks.
    Run {
        policy: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        max_steps: u64,
        #[arg(long)]
        insecure: bool,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Run the shipped microbenchmarks: switch, ipc, fncall or all.
    Bench {
        suite: String,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Run a fault-injection scenario directory and check its expectations.
    Inject { scenario: PathBuf },
    /// Print the compartment graph.
    Graph {
        policy: PathBuf,
        #[arg(short = 'o', value_enum, default_value = "dot")]
        format: GraphFormat,
    },
}

fn cmd_asm(src: PathBuf, out: PathBuf) -> Result<String, HarnessError> {
    let text = fs::read_to_string(&src).map_err(|e| HarnessError::Usage(format!("{}: {e}", src.display())))?;
    let name = src.file_stem().and_then(|s| s.to_str()).unwrap_or("module");
    let image = assemble(name, &text).map_err(|e| HarnessError::Validation(format!("{}: {e}", src.display())))?;
    let bytes = encode(&image).map_err(|e| HarnessError::Validation(e.to_string()))?;
    fs::write(&out, &bytes).map_err(|e| HarnessError::Usage(format!("{}: {e}", out.display())))?;
    Ok(format!("{}: {} bytes, {} symbols\n", out.display(), bytes.len(), image.symbols.len()))
}

fn link_policy(policy: &Path) -> Result<linkcap_core::loader::LinkedSystem, HarnessError> {
    let p = read_policy(policy)?;
    let dir = policy.parent().map(PathBuf::from).unwrap_or_default();
    let mut resolve = |path: &str| linkcap::resolve::load_module(&dir.join(path));
    boot(&p, &mut resolve, BootOptions::default()).map_err(|e| HarnessError::Validation(e.to_string()))
}

fn cmd_run(policy: PathBuf, max_steps: u64, insecure: bool, format: Format) -> Result<String, HarnessError> {
    let mut sys = boot_file(&policy, insecure)?;
    let report = sys.schedule(max_steps);
    let faults = fault_log_lines("run", &sys);
    let out = match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
            s.push('\n');
            for f in &faults {
                s.push_str(f);
                s.push('\n');
            }
            s
        }
        Format::Text => {
            let mut s = String::new();
            let _ = writeln!(
                s,
                "outcome: {:?} steps={} instructions={} trampoline={} trap={} switches={}",
                report.outcome,
                report.steps,
                report.counters.instructions,
                report.counters.trampoline_instructions,
                report.counters.trap_instructions,
                report.context_switches
            );
            for t in &report.tasks {
                let _ = writeln!(s, "task {} {:?} instructions={}", t.name, t.state, t.counters.instructions);
            }
            for f in &faults {
                let _ = writeln!(s, "fault {f}");
            }
            s
        }
    };
    let dead = report.tasks.iter().any(|t| t.state == TaskState::Dead);
    if dead || report.outcome == ScheduleOutcome::Deadlock {
        print!("{out}");
        let why = if dead { "a task died of an unrecovered fault" } else { "deadlock" };
        return Err(HarnessError::Fault(why.to_string()));
    }
    Ok(out)
}

fn execute(cli: Cli) -> Result<String, HarnessError> {
    match cli.command {
        Command::Asm { src, out } => cmd_asm(src, out),
        Command::Link { policy } => Ok(graph::to_text(&link_policy(&policy)?)),
        Command::Run { policy, max_steps, insecure, format } => cmd_run(policy, max_steps, insecure, format),
        Command::Bench { suite, format } => {
            let suite = Suite::parse(&suite)
                .ok_or_else(|| HarnessError::Usage(format!("unknown suite {suite:?}: switch, ipc, fncall or all")))?;
            let report = run_suite(suite)?;
            Ok(match format {
                Format::Text => report.to_text(),
                Format::Json => report.to_json(),
            })
        }
        Command::Inject { scenario } => {
            let result = inject(&scenario)?;
            let text = result.render();
            if result.failures() > 0 {
                print!("{text}");
                return Err(HarnessError::Mismatch(format!(
                    "{} of {} checks failed",
                    result.failures(),
                    result.checks()
                )));
            }
            Ok(text)
        }
        Command::Graph { policy, format } => {
            let sys = link_policy(&policy)?;
            Ok(match format {
                GraphFormat::Dot => graph::to_dot(&sys),
                GraphFormat::Text => graph::to_text(&sys),
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match execute(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
