// SPDX-License-Identifier: Apache-2.0

//! Deterministic simulator of a hardware extension for *delegated
//! virtualization*: per-core registers and instructions that let an ordinary
//! user-space process field its own VM exits, send inter-processor interrupts
//! between its vCPUs, and stay confined by in-hardware physical-memory checks
//! — plus a complete user-level hypervisor built on that interface, and a
//! calibrated cycle-cost model that prices each exit path for both this
//! architecture and a conventional kernel-mediated one.
//!
//! The crate is organized bottom-up:
//!
//! * [`mem`] — sparse simulated physical memory.
//! * [`mmu`] — two-stage radix translation and the physical memory check.
//! * [`hw`] — per-core privilege modes, the delegated-virtualization
//!   register file, trap routing, and the user-level IPI instructions.
//! * [`cp`] — the host-kernel control plane: enablement, memory grants,
//!   scheduling ticks, and the audit log.
//! * [`guest`] — the miniature guest instruction set and its assembler.
//! * [`hv`] — the user-level hypervisor: vCPU threads, exit handlers,
//!   virtual-interrupt injection.
//! * [`pvio`] — paravirtual I/O: shared rings, a polling network backend,
//!   a block device, and a console.
//! * [`sim`] — the machine: deterministic interleaved execution and the
//!   event trace.
//! * [`scenario`] — ready-to-run benchmark configurations.
//! * [`bench`] — the cycle-cost model and report generation.

#[cfg(doctest)]
pub mod book;

pub mod bench;
pub mod cp;
pub mod error;
pub mod guest;
pub mod hv;
pub mod hw;
pub mod mem;
pub mod mmu;
pub mod pvio;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
