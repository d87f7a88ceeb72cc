// SPDX-License-Identifier: Apache-2.0

//! Doc-tests for the guide in `book/`.
//!
//! mdbook renders the chapters but cannot run their code. Including each
//! chapter as a doc comment makes `cargo test --doc` compile and execute
//! every Rust snippet against the real crate, so the guide and the library
//! cannot drift apart. One module per chapter keeps failure output
//! attributable to its source file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/ch01-hardware-interface.md")]
pub mod ch01_hardware_interface {}

#[doc = include_str!("../../../book/src/ch02-memory.md")]
pub mod ch02_memory {}

#[doc = include_str!("../../../book/src/ch03-control-plane-and-hypervisor.md")]
pub mod ch03_control_plane_and_hypervisor {}

#[doc = include_str!("../../../book/src/ch04-guests-devices-scenarios.md")]
pub mod ch04_guests_devices_scenarios {}

#[doc = include_str!("../../../book/src/ch05-counting-cycles.md")]
pub mod ch05_counting_cycles {}
