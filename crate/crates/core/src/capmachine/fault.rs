use std::fmt;

use serde::Serialize;

use super::capability::CapError;

/// Architectural fault classes. Every trap carries exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum FaultKind {
    TagViolation,
    BoundsViolation,
    PermViolation,
    SealViolation,
    IllegalInstruction,
}

impl FaultKind {
    pub const ALL: [FaultKind; 5] = [
        FaultKind::TagViolation,
        FaultKind::BoundsViolation,
        FaultKind::PermViolation,
        FaultKind::SealViolation,
        FaultKind::IllegalInstruction,
    ];

    /// Small integer code, handed to fault handlers in `x0` and used by `trapif`.
    pub fn code(self) -> u32 {
        match self {
            FaultKind::TagViolation => 1,
            FaultKind::BoundsViolation => 2,
            FaultKind::PermViolation => 3,
            FaultKind::SealViolation => 4,
            FaultKind::IllegalInstruction => 5,
        }
    }

    pub fn from_code(code: u32) -> Option<FaultKind> {
        FaultKind::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::TagViolation => "TagViolation",
            FaultKind::BoundsViolation => "BoundsViolation",
            FaultKind::PermViolation => "PermViolation",
            FaultKind::SealViolation => "SealViolation",
            FaultKind::IllegalInstruction => "IllegalInstruction",
        }
    }

    pub fn parse(s: &str) -> Option<FaultKind> {
        FaultKind::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<CapError> for FaultKind {
    fn from(e: CapError) -> Self {
        match e {
            CapError::TagViolation => FaultKind::TagViolation,
            CapError::SealViolation => FaultKind::SealViolation,
            CapError::PermViolation => FaultKind::PermViolation,
            CapError::MonotonicityViolation => FaultKind::BoundsViolation,
        }
    }
}

/// A violation detected by a checked operation, before it is bound to a pc.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: FaultKind,
    pub detail: String,
}

impl Violation {
    pub fn new(kind: FaultKind, detail: impl Into<String>) -> Self {
        Violation { kind, detail: detail.into() }
    }
}

impl From<CapError> for Violation {
    fn from(e: CapError) -> Self {
        Violation::new(e.into(), e.to_string())
    }
}

/// Architectural description of one trap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FaultRecord {
    pub kind: FaultKind,
    pub comp_id: Option<u32>,
    pub pc: u32,
    pub detail: String,
}
