//! The tagged-capability machine: capability algebra, tagged memory, the toy
//! ISA and its interpreter.

pub mod capability;
pub mod fault;
pub mod isa;
pub mod machine;
pub mod memory;

pub use capability::{CapError, Capability, Perms, Seal, CAP_SIZE};
pub use fault::{FaultKind, FaultRecord, Violation};
pub use isa::{encode_all, CReg, Instr, RegImm, XReg, CLC_OPCODE, INSTR_SIZE, NO_REG};
pub use machine::{
    CompartmentContext, CostCounters, EntryFrame, Machine, MachineError, RegisterFile, RunOutcome, RunResult, Service,
    StepOutcome, NO_COMPARTMENT,
};
pub use memory::{Enforcement, TaggedMemory};
