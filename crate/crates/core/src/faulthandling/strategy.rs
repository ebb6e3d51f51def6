use std::fmt;

use serde::Serialize;

/// Handler symbol looked up in every compartment at boot.
pub const HANDLER_SYMBOL: &str = "CompartOS_FaultHandler";

/// Strategy as written in the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    ReturnError,
    Custom,
    Kill,
    MicroReboot,
}

impl StrategyKind {
    pub fn parse(s: &str) -> Option<StrategyKind> {
        Some(match s {
            "return_error" => StrategyKind::ReturnError,
            "custom" => StrategyKind::Custom,
            "kill" => StrategyKind::Kill,
            "micro_reboot" => StrategyKind::MicroReboot,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::ReturnError => "return_error",
            StrategyKind::Custom => "custom",
            StrategyKind::Kill => "kill",
            StrategyKind::MicroReboot => "micro_reboot",
        }
    }
}

/// Strategy in force for a compartment after handler registration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultStrategy {
    ReturnError,
    CustomHandler(String),
    Kill,
    MicroReboot,
}

impl FaultStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            FaultStrategy::ReturnError => "return_error",
            FaultStrategy::CustomHandler(_) => "custom",
            FaultStrategy::Kill => "kill",
            FaultStrategy::MicroReboot => "micro_reboot",
        }
    }
}

impl fmt::Display for FaultStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
