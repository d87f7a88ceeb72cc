// SPDX-License-Identifier: Apache-2.0

//! Scenario files: declarative TOML descriptions of a machine, its VMs, and
//! their guest workloads. Five benchmark scenarios ship built in; user files
//! with the same schema load from disk. A scenario plus a seed (and an
//! optional iteration override) produces a ready-to-run [`Machine`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::guest::assemble;
use crate::hv::{DeviceKind, VmConfig};
use crate::pvio::default_schedule;
use crate::sim::{Machine, MachineConfig, VmSpec, DEFAULT_RAM_BASE};

const MIB: u64 = 1 << 20;

/// Names of the built-in scenarios, in presentation order.
pub const BUILTIN_NAMES: [&str; 5] = ["hypercall", "s2pf", "mmio", "vipi", "io-notify"];

/// Embedded scenario assets, addressed by file name. The same files ship in
/// the source tree under `assets/scenarios/` as copyable examples.
const ASSETS: &[(&str, &str)] = &[
    ("hypercall.toml", include_str!("../assets/scenarios/hypercall.toml")),
    ("hypercall.gasm", include_str!("../assets/scenarios/hypercall.gasm")),
    ("s2pf.toml", include_str!("../assets/scenarios/s2pf.toml")),
    ("s2pf.gasm", include_str!("../assets/scenarios/s2pf.gasm")),
    ("mmio.toml", include_str!("../assets/scenarios/mmio.toml")),
    ("mmio.gasm", include_str!("../assets/scenarios/mmio.gasm")),
    ("vipi.toml", include_str!("../assets/scenarios/vipi.toml")),
    ("vipi-initiator.gasm", include_str!("../assets/scenarios/vipi-initiator.gasm")),
    ("vipi-partner.gasm", include_str!("../assets/scenarios/vipi-partner.gasm")),
    ("io-notify.toml", include_str!("../assets/scenarios/io-notify.toml")),
    ("io-notify.gasm", include_str!("../assets/scenarios/io-notify.gasm")),
];

fn asset(name: &str) -> Option<&'static str> {
    ASSETS.iter().find(|(n, _)| *n == name).map(|(_, src)| *src)
}

/// Trace event names an `op_event` may name: one of these counts the
/// operations inside the benchmark window.
const COUNTABLE_EVENTS: [&str; 7] = [
    "hypercall_handled",
    "s2pf_handled",
    "mmio_handled",
    "vipi_sent",
    "io_notify_sent",
    "virq_guest_handled",
    "backend_rx_batch",
];

// ---------------------------------------------------------------------------
// Raw file schema
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    format: u32,
    name: String,
    description: String,
    iterations: u64,
    /// Trace event that counts one operation inside the benchmark window.
    op_event: String,
    machine: RawMachine,
    #[serde(rename = "vm")]
    vms: Vec<RawVm>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMachine {
    cores: usize,
    ram_mib: u64,
    timer_period: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVm {
    pid: u64,
    memory_mib: u64,
    /// Boot-time host memory grant; defaults to `memory_mib` so a benchmark
    /// VM never needs a mid-run extension.
    initial_grant_mib: Option<u64>,
    #[serde(default)]
    devices: Vec<String>,
    core_pins: Vec<usize>,
    io_core: Option<usize>,
    /// One guest program per vCPU, by file name (resolved against the
    /// scenario file's directory, or the built-in set).
    programs: Vec<String>,
    net: Option<RawNet>,
    blk_sectors: Option<u64>,
}

/// Inbound packet schedule: `count` packets (default: the iteration count),
/// `gap` cycles apart, `len` bytes each, anchored at the begin marker.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNet {
    gap: u64,
    len: u64,
    count: Option<u64>,
}

// ---------------------------------------------------------------------------
// Loaded scenario
// ---------------------------------------------------------------------------

/// A parsed scenario with every guest program source resolved in memory.
#[derive(Debug)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    /// Default operation count; `machine_config` can override it.
    pub iterations: u64,
    /// Trace event that counts one operation inside the benchmark window.
    pub op_event: String,
    raw: RawScenario,
    /// Program sources, outer index = VM, inner = vCPU.
    sources: Vec<Vec<String>>,
}

impl Scenario {
    /// Loads a built-in scenario by name.
    pub fn builtin(name: &str) -> Result<Scenario> {
        if !BUILTIN_NAMES.contains(&name) {
            return Err(Error::config(format!(
                "no built-in scenario `{name}` (available: {})",
                BUILTIN_NAMES.join(", ")
            )));
        }
        let toml_src = asset(&format!("{name}.toml")).expect("every builtin has a file");
        Scenario::parse(toml_src, |file| {
            asset(file).map(str::to_string).ok_or_else(|| {
                Error::config(format!("built-in scenario references unknown file `{file}`"))
            })
        })
    }

    /// Loads a scenario file from disk; program references resolve relative
    /// to the file's directory.
    pub fn load(path: &Path) -> Result<Scenario> {
        let toml_src = std::fs::read_to_string(path)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        Scenario::parse(&toml_src, |file| Ok(std::fs::read_to_string(dir.join(file))?))
    }

    /// Resolves a command-line scenario argument: a built-in name first,
    /// anything else as a file path.
    pub fn resolve(spec: &str) -> Result<Scenario> {
        if BUILTIN_NAMES.contains(&spec) {
            Scenario::builtin(spec)
        } else {
            Scenario::load(Path::new(spec))
        }
    }

    /// Name/description pairs of the built-in set.
    pub fn list_builtin() -> Vec<(String, String)> {
        BUILTIN_NAMES
            .iter()
            .map(|n| {
                let s = Scenario::builtin(n).expect("builtins parse");
                (s.name, s.description)
            })
            .collect()
    }

    fn parse(
        toml_src: &str,
        mut resolve_file: impl FnMut(&str) -> Result<String>,
    ) -> Result<Scenario> {
        let raw: RawScenario = toml::from_str(toml_src)?;
        if raw.format != 1 {
            return Err(Error::config(format!(
                "scenario format {} not supported (this build reads format 1)",
                raw.format
            )));
        }
        if raw.iterations == 0 {
            return Err(Error::config("a scenario needs at least one iteration"));
        }
        if !COUNTABLE_EVENTS.contains(&raw.op_event.as_str()) {
            return Err(Error::config(format!(
                "op_event `{}` is not a countable trace event (one of: {})",
                raw.op_event,
                COUNTABLE_EVENTS.join(", ")
            )));
        }
        let mut sources = Vec::new();
        for vm in &raw.vms {
            if vm.programs.is_empty() {
                return Err(Error::config(format!("VM pid {} has no programs", vm.pid)));
            }
            let mut vm_sources = Vec::new();
            for file in &vm.programs {
                vm_sources.push(resolve_file(file)?);
            }
            sources.push(vm_sources);
        }
        Ok(Scenario {
            name: raw.name.clone(),
            description: raw.description.clone(),
            iterations: raw.iterations,
            op_event: raw.op_event.clone(),
            raw,
            sources,
        })
    }

    /// Builds the machine configuration for one run. Guest programs see the
    /// iteration count as `$ITER` (and `$HALF_ITER` for paired workloads).
    pub fn machine_config(&self, seed: u64, iterations: Option<u64>) -> Result<MachineConfig> {
        let iters = iterations.unwrap_or(self.iterations);
        if iters == 0 {
            return Err(Error::config("iteration count must be positive"));
        }
        let mut env = BTreeMap::new();
        env.insert("ITER".to_string(), iters);
        env.insert("HALF_ITER".to_string(), iters / 2);

        let mut cfg = MachineConfig::new(self.raw.machine.cores, self.raw.machine.ram_mib * MIB);
        cfg.ram_base = DEFAULT_RAM_BASE;
        cfg.seed = seed;
        cfg.timer_period = self.raw.machine.timer_period;
        for (vm, vm_sources) in self.raw.vms.iter().zip(&self.sources) {
            let mut programs = Vec::new();
            for src in vm_sources {
                programs.push(assemble(src, &env)?);
            }
            let devices = vm
                .devices
                .iter()
                .map(|d| parse_device(d))
                .collect::<Result<Vec<DeviceKind>>>()?;
            let config = VmConfig::new(programs.len(), vm.memory_mib * MIB, devices);
            let mut spec = VmSpec::new(vm.pid, config, programs, vm.core_pins.clone());
            spec.io_core = vm.io_core;
            spec.initial_grant = vm.initial_grant_mib.unwrap_or(vm.memory_mib) * MIB;
            if let Some(net) = &vm.net {
                spec.net_schedule = default_schedule(net.count.unwrap_or(iters), net.gap, net.len);
            }
            if let Some(sectors) = vm.blk_sectors {
                spec.blk_sectors = sectors;
            }
            cfg.vms.push(spec);
        }
        Ok(cfg)
    }

    /// Convenience: build and boot the machine in one step.
    pub fn build_machine(&self, seed: u64, iterations: Option<u64>) -> Result<Machine> {
        Machine::new(self.machine_config(seed, iterations)?)
    }
}

fn parse_device(name: &str) -> Result<DeviceKind> {
    match name {
        "console" => Ok(DeviceKind::Console),
        "net" => Ok(DeviceKind::Net),
        "blk" => Ok(DeviceKind::Blk),
        other => Err(Error::config(format!(
            "unknown device `{other}` (known: console, net, blk)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::EventKind;

    #[test]
    fn every_builtin_parses_and_builds() {
        for name in BUILTIN_NAMES {
            let s = Scenario::builtin(name).expect(name);
            assert_eq!(s.name, name, "scenario name matches its registry key");
            assert!(!s.description.is_empty());
            assert!(s.iterations > 0);
            let cfg = s.machine_config(1, Some(4)).expect(name);
            assert!(!cfg.vms.is_empty());
        }
    }

    #[test]
    fn unknown_builtin_is_rejected_with_the_available_list() {
        let err = Scenario::builtin("warp-drive").unwrap_err().to_string();
        assert!(err.contains("hypercall"), "error lists the options: {err}");
    }

    #[test]
    fn builtin_runs_produce_the_declared_op_count() {
        // Iteration override flows through $ITER into the guest loops and
        // back out as the op_event count inside the marker window.
        for name in BUILTIN_NAMES {
            let s = Scenario::builtin(name).unwrap();
            let iters = 6u64;
            let mut m = s.build_machine(7, Some(iters)).unwrap();
            m.run().unwrap();
            let ev = &m.trace.events;
            let begin = ev
                .iter()
                .position(|e| e.kind == EventKind::BenchBegin)
                .unwrap_or_else(|| panic!("{name}: no begin marker"));
            let end = ev
                .iter()
                .position(|e| e.kind == EventKind::BenchEnd)
                .unwrap_or_else(|| panic!("{name}: no end marker"));
            let ops = ev[begin + 1..end]
                .iter()
                .filter(|e| e.kind.name() == s.op_event)
                .count() as u64;
            assert_eq!(ops, iters, "{name}: window op count");
            assert!(
                m.trace.hs_events_after_boot().is_empty(),
                "{name}: kernel event after boot"
            );
        }
    }

    #[test]
    fn scenario_file_loads_with_relative_program_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("tiny.gasm"),
            "HYPERCALL 3\nLOOP $ITER\nHYPERCALL 0\nEND\nHYPERCALL 4\nHALT\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("tiny.toml"),
            r#"
format = 1
name = "tiny"
description = "two-line smoke scenario"
iterations = 3
op_event = "hypercall_handled"

[machine]
cores = 1
ram_mib = 256

[[vm]]
pid = 9
memory_mib = 16
core_pins = [0]
programs = ["tiny.gasm"]
"#,
        )
        .unwrap();
        let s = Scenario::load(&dir.path().join("tiny.toml")).unwrap();
        assert_eq!(s.name, "tiny");
        let mut m = s.build_machine(0, None).unwrap();
        m.run().unwrap();
        assert_eq!(m.trace.count_named("hypercall_handled"), 3);
    }

    #[test]
    fn schema_violations_are_rejected() {
        let bad_format = "format = 2\nname = \"x\"\ndescription = \"y\"\niterations = 1\nop_event = \"vipi_sent\"\n[machine]\ncores = 1\nram_mib = 1\n[[vm]]\npid = 1\nmemory_mib = 1\ncore_pins = [0]\nprograms = [\"a\"]\n";
        assert!(Scenario::parse(bad_format, |_| Ok(String::new())).is_err());

        let bad_op = bad_format.replace("format = 2", "format = 1").replace(
            "op_event = \"vipi_sent\"",
            "op_event = \"vm_exit\"",
        );
        assert!(Scenario::parse(&bad_op, |_| Ok(String::new())).is_err());
    }

    #[test]
    fn resolve_prefers_builtin_names_then_paths() {
        assert!(Scenario::resolve("mmio").is_ok());
        assert!(Scenario::resolve("/nonexistent/path.toml").is_err());
    }
}
