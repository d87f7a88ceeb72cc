// SPDX-License-Identifier: Apache-2.0

//! Crate-wide error type.
//!
//! Hardware-visible failures (illegal register accesses, translation faults,
//! memory-check violations) are *not* errors: they are modeled outcomes carried
//! by [`crate::hw::TrapEvent`] and [`crate::mmu::FaultKind`]. `Error` covers
//! the cases where the simulation itself cannot proceed: malformed
//! configuration, assembly failures, exhausted resources, broken invariants.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed configuration: scenario files, cost models, register
    /// programming with out-of-range indices or unaligned addresses.
    #[error("configuration error: {0}")]
    Config(String),

    /// Guest assembly failed; `line` is 1-based within the source text.
    #[error("assembly error at line {line}: {msg}")]
    Assembly { line: usize, msg: String },

    /// A control-plane call was rejected (double enable, VMID exhaustion,
    /// PMC slot exhaustion, no contiguous physical memory, ...).
    #[error("control plane rejected the request: {0}")]
    ControlPlane(String),

    /// Restoring a register snapshot would place one VMID on cores owned by
    /// two different processes.
    #[error("snapshot restore rejected: VMID {vmid} is live on core {core} for another process")]
    VmidConflict { vmid: u64, core: usize },

    /// A stage-2 mapping request tried to change a live translation without
    /// unmapping it first.
    #[error("remap of live guest page {gpa:#x}: mapped to {old:#x}, requested {new:#x}")]
    RemapLive { gpa: u64, old: u64, new: u64 },

    /// The hypervisor hit a state it cannot recover from (unknown exit code,
    /// failed self-injection). The owning process aborts; other VMs continue.
    #[error("hypervisor panic in VM {vmid}: {msg}")]
    HypervisorPanic { vmid: u64, msg: String },

    /// The priced trace contains an event whose segment is missing from the
    /// cost model: the model is incomplete for this scenario.
    #[error("cost model has no entry for segment `{0}`")]
    UnknownSegment(String),

    /// The simulation exceeded its step budget without reaching an end state.
    #[error("simulation did not terminate within {0} steps")]
    StepBudgetExceeded(u64),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("TOML parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for [`Error::Config`] with formatted text.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Shorthand for [`Error::ControlPlane`] with formatted text.
    pub fn control_plane(msg: impl Into<String>) -> Self {
        Error::ControlPlane(msg.into())
    }
}
