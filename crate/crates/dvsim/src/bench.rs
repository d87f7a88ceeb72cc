// SPDX-License-Identifier: Apache-2.0

//! Cycle-cost benchmarking over simulation traces.
//!
//! A run produces a trace; this module prices the trace's benchmark window
//! under two architectures and renders the comparison:
//!
//! * `duv` — delegated user-level virtualization: exits route directly to
//!   the user-level hypervisor on dedicated hardware paths.
//! * `kvm` — the kernel-mediated baseline: every exit enters the host kernel
//!   first, and user-level handling costs a kernel↔user round trip.
//!
//! Which cost segments each trace event crosses is fixed per architecture in
//! [`route`]; the per-segment cycle prices come from a [`CostModel`] file.
//! Pricing is entirely off-line: it never feeds back into execution, so one
//! deterministic run yields both architectures' figures from the same event
//! multiset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::Scenario;
use crate::sim::{EventKind, Trace, TraceEvent};

/// Report/CSV schema version, bumped on any breaking layout change.
pub const REPORT_FORMAT: u32 = 1;

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

/// Where a segment's cycles are spent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Hardware,
    Kernel,
    User,
    Guest,
}

impl Class {
    pub fn name(self) -> &'static str {
        match self {
            Class::Hardware => "hardware",
            Class::Kernel => "kernel",
            Class::User => "user",
            Class::Guest => "guest",
        }
    }
}

/// One named, priced stretch of an exit path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Segment {
    pub cycles: f64,
    pub class: Class,
    #[serde(default)]
    pub doc: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    format: u32,
    name: String,
    description: String,
    inherits: Option<String>,
    segments: BTreeMap<String, Segment>,
}

/// A complete segment price table.
#[derive(Debug, Clone)]
pub struct CostModel {
    pub name: String,
    pub description: String,
    pub segments: BTreeMap<String, Segment>,
}

/// Built-in model names.
pub const BUILTIN_MODELS: [&str; 2] = ["default", "arm-mmio"];

fn builtin_model_src(name: &str) -> Option<&'static str> {
    match name {
        "default" => Some(include_str!("../assets/models/default.toml")),
        "arm-mmio" => Some(include_str!("../assets/models/arm-mmio.toml")),
        _ => None,
    }
}

/// Every segment name the architecture routing can reference; a model must
/// price all of them.
const REQUIRED_SEGMENTS: [&str; 22] = [
    "v_to_hu_exit",
    "hu_to_v_entry",
    "v_to_hs_exit",
    "hs_to_v_entry",
    "hs_hu_transfer",
    "uk_switch",
    "kvm_alloc",
    "duv_alloc",
    "s2pf_map_kvm",
    "s2pf_map_duv",
    "s2pf_other_kvm",
    "mmio_emul",
    "mmio_dispatch_kvm",
    "vipi_insert_kvm",
    "vipi_insert_uipi",
    "eventfd_notify",
    "uipi_notify",
    "virq_handle_kvm",
    "virq_handle_duv",
    "io_backend_rx",
    "hypercall_handle_kvm",
    "hypercall_handle_duv",
];

impl CostModel {
    /// Loads a built-in model by name.
    pub fn builtin(name: &str) -> Result<CostModel> {
        let src = builtin_model_src(name).ok_or_else(|| {
            Error::config(format!(
                "no built-in cost model `{name}` (available: {})",
                BUILTIN_MODELS.join(", ")
            ))
        })?;
        CostModel::from_toml(src)
    }

    /// Loads a model file from disk.
    pub fn load(path: &Path) -> Result<CostModel> {
        CostModel::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Resolves a command-line argument: built-in name first, else a path.
    pub fn resolve(spec: &str) -> Result<CostModel> {
        if BUILTIN_MODELS.contains(&spec) {
            CostModel::builtin(spec)
        } else {
            CostModel::load(Path::new(spec))
        }
    }

    /// Parses a model, resolving at most one level of `inherits` against the
    /// built-in set, and checks completeness.
    pub fn from_toml(src: &str) -> Result<CostModel> {
        let raw: RawModel = toml::from_str(src)?;
        if raw.format != 1 {
            return Err(Error::config(format!(
                "cost-model format {} not supported (this build reads format 1)",
                raw.format
            )));
        }
        let mut segments = match &raw.inherits {
            Some(parent) => {
                let parent_src = builtin_model_src(parent).ok_or_else(|| {
                    Error::config(format!(
                        "cost model inherits unknown base `{parent}` (available: {})",
                        BUILTIN_MODELS.join(", ")
                    ))
                })?;
                CostModel::from_toml(parent_src)?.segments
            }
            None => BTreeMap::new(),
        };
        segments.extend(raw.segments);
        let model =
            CostModel { name: raw.name, description: raw.description, segments };
        for required in REQUIRED_SEGMENTS {
            if !model.segments.contains_key(required) {
                return Err(Error::UnknownSegment(required.to_string()));
            }
        }
        Ok(model)
    }

    fn segment(&self, name: &str) -> Result<&Segment> {
        self.segments.get(name).ok_or_else(|| Error::UnknownSegment(name.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Architecture routing
// ---------------------------------------------------------------------------

/// The two priced architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Delegated user-level virtualization.
    Duv,
    /// Kernel-mediated baseline.
    Kvm,
}

impl Arch {
    pub const ALL: [Arch; 2] = [Arch::Duv, Arch::Kvm];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Duv => "duv",
            Arch::Kvm => "kvm",
        }
    }
}

/// Segments one trace event crosses under one architecture, in path order.
/// Events not listed are free (markers, acknowledgments of bare IPIs, boot
/// bookkeeping); kernel-context events never occur inside a valid window.
pub fn route(kind: EventKind, arch: Arch) -> &'static [&'static str] {
    match (arch, kind) {
        (Arch::Duv, EventKind::VmExit { .. }) => &["v_to_hu_exit"],
        (Arch::Duv, EventKind::VmEntry) => &["hu_to_v_entry"],
        (Arch::Duv, EventKind::HypercallHandled) => &["hypercall_handle_duv"],
        (Arch::Duv, EventKind::S2pfHandled) => &["duv_alloc", "s2pf_map_duv"],
        (Arch::Duv, EventKind::MmioHandled) => &["mmio_emul"],
        (Arch::Duv, EventKind::VipiSent) => &["vipi_insert_uipi"],
        (Arch::Duv, EventKind::IoNotifySent) => &["uipi_notify"],
        (Arch::Duv, EventKind::VirqGuestHandled) => &["virq_handle_duv"],
        (Arch::Duv, EventKind::BackendRxBatch) => &["io_backend_rx"],

        (Arch::Kvm, EventKind::VmExit { .. }) => &["v_to_hs_exit"],
        (Arch::Kvm, EventKind::VmEntry) => &["hs_to_v_entry"],
        (Arch::Kvm, EventKind::HypercallHandled) => &["hypercall_handle_kvm"],
        (Arch::Kvm, EventKind::S2pfHandled) => {
            &["kvm_alloc", "s2pf_map_kvm", "s2pf_other_kvm"]
        }
        // Forwarded to the user-level device model and back: two transfers
        // around dispatch + emulation.
        (Arch::Kvm, EventKind::MmioHandled) => {
            &["hs_hu_transfer", "mmio_dispatch_kvm", "mmio_emul", "hs_hu_transfer"]
        }
        (Arch::Kvm, EventKind::VipiSent) => &["vipi_insert_kvm"],
        (Arch::Kvm, EventKind::IoNotifySent) => &["uk_switch", "eventfd_notify"],
        (Arch::Kvm, EventKind::VirqGuestHandled) => &["virq_handle_kvm"],
        (Arch::Kvm, EventKind::BackendRxBatch) => &["io_backend_rx"],

        _ => &[],
    }
}

// ---------------------------------------------------------------------------
// Window extraction
// ---------------------------------------------------------------------------

/// The measured slice of a trace: everything strictly between the benchmark
/// markers, minus the marker vCPU's first entry after the begin marker and
/// its last exit before the end marker (the two boundary transitions that
/// belong to the markers themselves, not to any operation). What remains is
/// exactly `ops` copies of the per-operation event multiset, independent of
/// interleaving.
pub fn benchmark_window(trace: &Trace) -> Result<Vec<TraceEvent>> {
    let begins: Vec<usize> = trace
        .events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == EventKind::BenchBegin)
        .map(|(i, _)| i)
        .collect();
    let ends: Vec<usize> = trace
        .events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == EventKind::BenchEnd)
        .map(|(i, _)| i)
        .collect();
    let (&begin, &end) = match (begins.as_slice(), ends.as_slice()) {
        ([b], [e]) if b < e => (b, e),
        ([], _) | (_, []) => {
            return Err(Error::config("trace has no benchmark window markers"))
        }
        _ => return Err(Error::config("trace has malformed benchmark window markers")),
    };
    let marker_vcpu = trace.events[begin].vcpuid;
    let window = &trace.events[begin + 1..end];
    let first_entry = window
        .iter()
        .position(|e| e.vcpuid == marker_vcpu && e.kind == EventKind::VmEntry);
    let last_exit = window
        .iter()
        .rposition(|e| e.vcpuid == marker_vcpu && matches!(e.kind, EventKind::VmExit { .. }));
    Ok(window
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != first_entry && Some(*i) != last_exit)
        .map(|(_, e)| *e)
        .collect())
}

// ---------------------------------------------------------------------------
// Pricing
// ---------------------------------------------------------------------------

/// One segment's accumulated contribution under one architecture.
#[derive(Debug, Clone, Serialize)]
pub struct SegmentRow {
    pub name: String,
    pub class: Class,
    /// How many times the window crossed this segment.
    pub count: u64,
    pub cycles: f64,
    pub cycles_per_op: f64,
    /// Share of the architecture's total, in percent.
    pub share_pct: f64,
}

/// Cycles aggregated by execution class.
#[derive(Debug, Clone, Serialize)]
pub struct ClassRow {
    pub class: Class,
    pub cycles: f64,
    pub cycles_per_op: f64,
    pub share_pct: f64,
}

/// One architecture's priced view of the window.
#[derive(Debug, Clone, Serialize)]
pub struct ArchReport {
    pub arch: Arch,
    pub total_cycles: f64,
    pub cycles_per_op: f64,
    /// VM exits per operation (identical across architectures by
    /// construction — the trace is shared).
    pub exits_per_op: f64,
    pub segments: Vec<SegmentRow>,
    pub classes: Vec<ClassRow>,
}

/// The full two-architecture comparison for one run.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub format: u32,
    pub scenario: String,
    pub model: String,
    pub seed: u64,
    /// Operations measured inside the window (count of the scenario's
    /// `op_event`).
    pub ops: u64,
    pub archs: Vec<ArchReport>,
    /// `(kvm − duv) / kvm`, in percent of the kernel-mediated cost.
    pub improvement_pct: f64,
    pub saving_per_op: f64,
}

/// Prices one extracted window under one architecture.
pub fn price_window(
    window: &[TraceEvent],
    model: &CostModel,
    arch: Arch,
    ops: u64,
) -> Result<ArchReport> {
    let mut counts: BTreeMap<&'static str, u64> = BTreeMap::new();
    let mut exits = 0u64;
    for ev in window {
        if matches!(ev.kind, EventKind::VmExit { .. }) {
            exits += 1;
        }
        for seg in route(ev.kind, arch) {
            *counts.entry(seg).or_insert(0) += 1;
        }
    }
    let mut segments = Vec::new();
    let mut total = 0.0;
    for (name, count) in &counts {
        let seg = model.segment(name)?;
        let cycles = seg.cycles * *count as f64;
        total += cycles;
        segments.push(SegmentRow {
            name: name.to_string(),
            class: seg.class,
            count: *count,
            cycles,
            cycles_per_op: 0.0,
            share_pct: 0.0,
        });
    }
    let ops_f = ops.max(1) as f64;
    let mut class_acc: BTreeMap<Class, f64> = BTreeMap::new();
    for row in &mut segments {
        row.cycles_per_op = row.cycles / ops_f;
        row.share_pct = if total > 0.0 { 100.0 * row.cycles / total } else { 0.0 };
        *class_acc.entry(row.class).or_insert(0.0) += row.cycles;
    }
    segments.sort_by(|a, b| {
        b.cycles.partial_cmp(&a.cycles).expect("finite").then(a.name.cmp(&b.name))
    });
    let classes = class_acc
        .into_iter()
        .map(|(class, cycles)| ClassRow {
            class,
            cycles,
            cycles_per_op: cycles / ops_f,
            share_pct: if total > 0.0 { 100.0 * cycles / total } else { 0.0 },
        })
        .collect();
    Ok(ArchReport {
        arch,
        total_cycles: total,
        cycles_per_op: total / ops_f,
        exits_per_op: exits as f64 / ops_f,
        segments,
        classes,
    })
}

/// Prices a finished run's trace into the two-architecture report.
pub fn price_trace(
    trace: &Trace,
    op_event: &str,
    model: &CostModel,
    scenario_name: &str,
    seed: u64,
) -> Result<BenchReport> {
    let window = benchmark_window(trace)?;
    let ops = window.iter().filter(|e| e.kind.name() == op_event).count() as u64;
    if ops == 0 {
        return Err(Error::config(format!(
            "benchmark window contains no `{op_event}` operations"
        )));
    }
    let archs: Vec<ArchReport> = Arch::ALL
        .iter()
        .map(|&a| price_window(&window, model, a, ops))
        .collect::<Result<_>>()?;
    let duv = archs[0].cycles_per_op;
    let kvm = archs[1].cycles_per_op;
    Ok(BenchReport {
        format: REPORT_FORMAT,
        scenario: scenario_name.to_string(),
        model: model.name.clone(),
        seed,
        ops,
        archs,
        improvement_pct: if kvm > 0.0 { 100.0 * (kvm - duv) / kvm } else { 0.0 },
        saving_per_op: kvm - duv,
    })
}

/// End-to-end: build the scenario's machine, run it, price the trace.
pub fn run_scenario(
    scenario: &Scenario,
    model: &CostModel,
    seed: u64,
    iterations: Option<u64>,
) -> Result<BenchReport> {
    let mut machine = scenario.build_machine(seed, iterations)?;
    machine.run()?;
    price_trace(&machine.trace, &scenario.op_event, model, &scenario.name, seed)
}

// ---------------------------------------------------------------------------
// Renderers
// ---------------------------------------------------------------------------

impl BenchReport {
    /// Machine-readable JSON (stable field order via the struct layout).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat CSV: `format,section,arch,name,count,cycles,cycles_per_op,share_pct`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("format,section,arch,name,count,cycles,cycles_per_op,share_pct\n");
        let f = self.format;
        for a in &self.archs {
            let _ = writeln!(
                out,
                "{f},summary,{},total,{},{},{},100.00",
                a.arch.name(),
                self.ops,
                fmt_cycles(a.total_cycles),
                fmt_cycles(a.cycles_per_op),
            );
            for s in &a.segments {
                let _ = writeln!(
                    out,
                    "{f},segment,{},{},{},{},{},{:.2}",
                    a.arch.name(),
                    s.name,
                    s.count,
                    fmt_cycles(s.cycles),
                    fmt_cycles(s.cycles_per_op),
                    s.share_pct,
                );
            }
            for c in &a.classes {
                let _ = writeln!(
                    out,
                    "{f},class,{},{},,{},{},{:.2}",
                    a.arch.name(),
                    c.class.name(),
                    fmt_cycles(c.cycles),
                    fmt_cycles(c.cycles_per_op),
                    c.share_pct,
                );
            }
        }
        let _ = writeln!(
            out,
            "{f},comparison,,improvement_pct,,,,{:.2}",
            self.improvement_pct
        );
        let _ = writeln!(
            out,
            "{f},comparison,,saving_per_op,,{},{},",
            fmt_cycles(self.saving_per_op),
            fmt_cycles(self.saving_per_op),
        );
        out
    }

    /// Human-readable text table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario: {}   model: {}   seed: {}", self.scenario, self.model, self.seed);
        let _ = writeln!(out, "operations measured: {}", self.ops);
        for a in &self.archs {
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "[{}]  {} cycles/op  ({} exits/op)",
                a.arch.name(),
                fmt_cycles(a.cycles_per_op),
                fmt_cycles(a.exits_per_op),
            );
            let _ = writeln!(out, "  {:<22} {:>10} {:>14} {:>12} {:>8}", "segment", "count", "cycles/op", "class", "share");
            for s in &a.segments {
                let _ = writeln!(
                    out,
                    "  {:<22} {:>10} {:>14} {:>12} {:>7.2}%",
                    s.name,
                    s.count,
                    fmt_cycles(s.cycles_per_op),
                    s.class.name(),
                    s.share_pct,
                );
            }
            for c in &a.classes {
                let _ = writeln!(
                    out,
                    "  {:<22} {:>10} {:>14} {:>12} {:>7.2}%",
                    format!("({} total)", c.class.name()),
                    "",
                    fmt_cycles(c.cycles_per_op),
                    "",
                    c.share_pct,
                );
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "delegated saves {} cycles/op over the kernel-mediated path ({:.2}% better)",
            fmt_cycles(self.saving_per_op),
            self.improvement_pct,
        );
        out
    }
}

/// Cycle figures print without trailing `.0` noise but keep real fractions.
fn fmt_cycles(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}
