//! Turning policy files and module paths into a booted system.

use std::fs;
use std::path::{Path, PathBuf};

use linkcap_core::loader::{BootOptions, SecurityPolicy};
use linkcap_core::modformat::{assemble, decode, ModuleImage};
use linkcap_core::runtime::System;

use crate::HarnessError;

/// Load one module: `.s`/`.asm` sources are assembled, `.cpo` images decoded.
pub fn load_module(path: &Path) -> Result<ModuleImage, String> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("module").to_string();
    match path.extension().and_then(|e| e.to_str()) {
        Some("s") | Some("asm") => {
            let src = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            assemble(&name, &src).map_err(|e| format!("{}: {e}", path.display()))
        }
        Some("cpo") => {
            let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
            decode(&bytes).map_err(|e| format!("{}: {e}", path.display()))
        }
        _ => Err(format!("{}: expected a .s, .asm or .cpo module", path.display())),
    }
}

pub fn read_policy(path: &Path) -> Result<SecurityPolicy, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
    SecurityPolicy::parse(&text).map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))
}

fn base_dir(policy_path: &Path) -> PathBuf {
    policy_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Boot `policy`, resolving module paths relative to `dir`.
pub fn boot_in(policy: &SecurityPolicy, dir: &Path, insecure: bool) -> Result<System, HarnessError> {
    let mut resolve = |p: &str| load_module(&dir.join(p));
    let options = BootOptions { insecure, ..BootOptions::default() };
    System::boot(policy, &mut resolve, options).map_err(|e| HarnessError::Validation(e.to_string()))
}

pub fn boot_file(policy_path: &Path, insecure: bool) -> Result<System, HarnessError> {
    let policy = read_policy(policy_path)?;
    boot_in(&policy, &base_dir(policy_path), insecure)
}

/// Boot from in-memory sources keyed by the paths the policy names.
pub fn boot_sources(policy: &SecurityPolicy, sources: &[(&str, &str)], insecure: bool) -> Result<System, HarnessError> {
    let mut resolve = |p: &str| {
        let (_, src) = sources.iter().find(|(name, _)| *name == p).ok_or_else(|| format!("{p}: no such module"))?;
        assemble(p.trim_end_matches(".s"), src).map_err(|e| format!("{p}: {e}"))
    };
    let options = BootOptions { insecure, ..BootOptions::default() };
    System::boot(policy, &mut resolve, options).map_err(|e| HarnessError::Validation(e.to_string()))
}
