// SPDX-License-Identifier: Apache-2.0

//! Whole-machine simulation: cores, physical memory, the kernel control
//! plane, one user-level hypervisor per VM, and the paravirtual device
//! backends, advanced one bounded step at a time.
//!
//! Concurrency is modeled by interleaving: every vCPU (and every VM's I/O
//! thread) is a [`SimThread`], and each iteration of [`Machine::run`] picks
//! one schedulable thread — seeded-RNG choice, so any interleaving is
//! reachable but every run with the same seed is bit-identical — and executes
//! exactly one unit of its work (one guest instruction, one exit handler, one
//! backend poll). Every architecturally visible transition is appended to a
//! [`Trace`]; cost attribution happens later, off the trace, and never feeds
//! back into execution.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cp::ControlPlane;
use crate::error::{Error, Result};
use crate::guest::{Instr, LoopFrame, Program, S1Mode};
use crate::hv::{
    classify_hypercall, DeviceKind, HcAction, Hypervisor, InjectKind, S2pfOutcome, VmConfig,
    BLK_IRQ, FIRST_DEVICE_IRQ, IO_THREAD_VCPUID, IPI_IRQ, NET_IRQ, WINDOW_SIZE,
};
use crate::hw::{
    csr_access, exec_huret, route_trap, CoreState, Destination, DvReg, ExitReason, PrivilegeMode,
    RegAccess, DELEGATABLE_MASK,
};
use crate::mem::{PhysMemory, Provenance, PAGE_OFFSET_MASK, PAGE_SIZE};
use crate::mmu::{s1_map, translate, translate_gpa, Access, FaultKind, Perms, S1MapError, S1Table};
use crate::pvio::{
    ring_layout, BlkBackend, ConsoleDevice, NetBackend, PacketSpec, PostError, VirtQueue,
    REG_DOORBELL,
};

/// Host physical address where simulated RAM starts.
pub const DEFAULT_RAM_BASE: u64 = 0x8000_0000;

/// Default per-process VMID ceiling (the hardware field is wider; a small
/// limit keeps exhaustion testable).
pub const DEFAULT_VMID_LIMIT: u64 = 255;

/// Default ceiling on simulation steps before the run is declared hung.
pub const DEFAULT_STEP_LIMIT: u64 = 200_000_000;

/// Size of the single memory extension a hypervisor requests when its boot
/// grant runs dry. A second exhaustion is treated as a guest memory leak and
/// panics the hypervisor.
pub const EXTENSION_BYTES: u64 = 512 << 20;

/// `vcpuid` recorded on trace events that happen in kernel context rather
/// than under any vCPU.
pub const HS_CONTEXT_VCPUID: u64 = u64::MAX;

/// An I/O thread whose next scheduled packet has been due for longer than
/// this is picked unconditionally on the next step. Random interleaving then
/// cannot starve the backend long enough to fuse two scheduled packets into
/// one batch, which keeps batch counts reproducible across seeds.
const IO_OVERDUE_FORCE: u64 = 40;

/// A runnable thread that has been passed over this many consecutive picks
/// is scheduled next (longest wait wins, then lowest index). Every
/// simulation step costs one pick regardless of how much real work it
/// models, so without a fairness bound the random scheduler can stretch a
/// ~100-cycle guest entry across an entire wake→ack→send round of a sibling
/// — an interleaving real hardware cannot produce, and one that lets an IPI
/// piggyback on an in-flight entry and absorb a wait-exit/wake-entry pair
/// out of the priced event multiset. A sibling's shortest path from waking
/// to its own injection step is 4 picks (entry, acknowledge, send-trap,
/// handler); forcing at 3 guarantees the pending entry completes first.
const SCHED_STARVATION_BOUND: u64 = 3;

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

/// Every architecturally visible transition the machine can log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// The guest left V mode. `info` carries the reason-specific word
    /// (faulting GPA, hypercall number, sender VCPUID, ...).
    VmExit { reason: ExitReason },
    /// HURET brought a vCPU (back) into V mode; `info` holds the interrupt
    /// bits delivered at this entry.
    VmEntry,
    /// The exit handler mapped a guest page (`info` = faulting GPA).
    S2pfHandled,
    /// The exit handler emulated one device-window access (`info` = GPA).
    MmioHandled,
    /// The exit handler completed a hypercall (`info` = call number).
    HypercallHandled,
    /// Unknown or malformed hypercall; the guest got `u64::MAX` back.
    HypercallRejected,
    /// A virtual IPI was injected into a sibling vCPU (`info` = target).
    VipiSent,
    /// An I/O thread notified a vCPU of ring activity (`info` = irq).
    IoNotifySent,
    /// The guest acknowledged a device interrupt and ran its driver's
    /// completion work (`info` = irq).
    VirqGuestHandled,
    /// The guest acknowledged a bare (non-device) interrupt (`info` = irq).
    VirqAcked,
    /// A backend poll landed `info` packets into guest buffers as one batch.
    BackendRxBatch,
    /// Benchmark window markers: all vCPUs reached quiescence around the
    /// marker hypercall.
    BenchBegin,
    BenchEnd,
    /// A vCPU powered itself off.
    GuestHalted,
    /// A vCPU hit a fatal guest-side error (`info` = instruction index).
    GuestAborted,
    /// The hypervisor panicked and the kernel destroyed the process
    /// (`info` = VMID).
    VmKilled,
    /// All VMs finished boot; everything after this is steady state.
    BootComplete,
    /// The kernel served a setup call — enable or memory grant
    /// (`info` = granted bytes, 0 for enable).
    HsIoctl,
    /// Kernel timer tick on core `info` (only when a timer is configured).
    HsTimerTick,
    /// The kernel destroyed a process for a memory-check violation
    /// (`info` = offending HPA).
    HsPmcKill,
}

impl EventKind {
    /// Stable snake_case name; segment tables and report rows key on this.
    pub fn name(self) -> &'static str {
        match self {
            EventKind::VmExit { .. } => "vm_exit",
            EventKind::VmEntry => "vm_entry",
            EventKind::S2pfHandled => "s2pf_handled",
            EventKind::MmioHandled => "mmio_handled",
            EventKind::HypercallHandled => "hypercall_handled",
            EventKind::HypercallRejected => "hypercall_rejected",
            EventKind::VipiSent => "vipi_sent",
            EventKind::IoNotifySent => "io_notify_sent",
            EventKind::VirqGuestHandled => "virq_guest_handled",
            EventKind::VirqAcked => "virq_acked",
            EventKind::BackendRxBatch => "backend_rx_batch",
            EventKind::BenchBegin => "bench_begin",
            EventKind::BenchEnd => "bench_end",
            EventKind::GuestHalted => "guest_halted",
            EventKind::GuestAborted => "guest_aborted",
            EventKind::VmKilled => "vm_killed",
            EventKind::BootComplete => "boot_complete",
            EventKind::HsIoctl => "hs_ioctl",
            EventKind::HsTimerTick => "hs_timer_tick",
            EventKind::HsPmcKill => "hs_pmc_kill",
        }
    }

    /// True when the event required the host kernel — the events that must
    /// be absent from a delegated VM's steady state.
    pub fn is_hs(self) -> bool {
        match self {
            EventKind::HsIoctl
            | EventKind::HsTimerTick
            | EventKind::HsPmcKill
            | EventKind::VmKilled => true,
            EventKind::VmExit { reason } => !reason.is_delegatable(),
            _ => false,
        }
    }
}

/// One trace record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub cycle: u64,
    pub core: usize,
    pub vcpuid: u64,
    pub kind: EventKind,
    pub info: u64,
}

/// Append-only event log of one run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

/// One VM exit with its resolution, derived from the trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExitRecord {
    pub cycle: u64,
    pub core: usize,
    pub vcpuid: u64,
    pub reason: ExitReason,
    pub info: u64,
    /// What resolved the exit: `s2pf_map`, `mmio_emulate`, `hypercall`,
    /// `hypercall_reject`, `vipi_send`, `uipi_drain`, `wfi_park`,
    /// `bench_marker`, `halt`, `abort`, `kernel_timer`, `kernel_kill`, or
    /// `none`.
    pub handler: &'static str,
    /// Cycles from the exit to the same vCPU's next entry (0 when the vCPU
    /// never re-entered).
    pub duration_cycles: u64,
}

impl Trace {
    pub fn count_named(&self, name: &str) -> usize {
        self.events.iter().filter(|e| e.kind.name() == name).count()
    }

    /// Events after the `BootComplete` marker that needed the host kernel.
    pub fn hs_events_after_boot(&self) -> Vec<TraceEvent> {
        let boot = self
            .events
            .iter()
            .position(|e| e.kind == EventKind::BootComplete)
            .map(|i| i + 1)
            .unwrap_or(0);
        self.events[boot..].iter().copied().filter(|e| e.kind.is_hs()).collect()
    }

    /// Pairs every VM exit with the handler work and re-entry that resolved
    /// it. The scan walks forward over same-vCPU events: handler events
    /// refine the label, the next entry (or a terminal event) closes it.
    pub fn exit_records(&self) -> Vec<ExitRecord> {
        let mut out = Vec::new();
        for (i, ev) in self.events.iter().enumerate() {
            let EventKind::VmExit { reason } = ev.kind else { continue };
            let mut handler = match reason {
                ExitReason::Uipi => "uipi_drain",
                ExitReason::SensitiveWfi => "wfi_park",
                ExitReason::Timer => "kernel_timer",
                ExitReason::PmcFault => "kernel_kill",
                _ => "none",
            };
            let mut duration = 0;
            for later in &self.events[i + 1..] {
                if later.vcpuid != ev.vcpuid {
                    continue;
                }
                match later.kind {
                    EventKind::VmEntry => {
                        duration = later.cycle - ev.cycle;
                        break;
                    }
                    EventKind::S2pfHandled => handler = "s2pf_map",
                    EventKind::MmioHandled => handler = "mmio_emulate",
                    EventKind::HypercallHandled => handler = "hypercall",
                    EventKind::HypercallRejected => handler = "hypercall_reject",
                    EventKind::VipiSent => handler = "vipi_send",
                    EventKind::BenchBegin | EventKind::BenchEnd => handler = "bench_marker",
                    EventKind::GuestHalted => {
                        handler = "halt";
                        duration = later.cycle - ev.cycle;
                        break;
                    }
                    EventKind::GuestAborted => {
                        handler = "abort";
                        duration = later.cycle - ev.cycle;
                        break;
                    }
                    EventKind::VmKilled | EventKind::HsPmcKill => {
                        handler = "kernel_kill";
                        duration = later.cycle - ev.cycle;
                        break;
                    }
                    _ => {}
                }
            }
            out.push(ExitRecord {
                cycle: ev.cycle,
                core: ev.core,
                vcpuid: ev.vcpuid,
                reason,
                info: ev.info,
                handler,
                duration_cycles: duration,
            });
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// One VM to boot: its hypervisor process, guest programs, and placement.
#[derive(Debug, Clone)]
pub struct VmSpec {
    pub pid: u64,
    pub config: VmConfig,
    pub programs: Vec<Program>,
    /// Physical core of each vCPU (same indexing as `programs`).
    pub core_pins: Vec<usize>,
    /// Core the hypervisor's I/O thread runs on; `None` for VMs without
    /// backends.
    pub io_core: Option<usize>,
    /// Bytes of the boot-time memory grant.
    pub initial_grant: u64,
    /// Inbound packet schedule for the network backend (anchored at the
    /// benchmark-begin marker).
    pub net_schedule: Vec<PacketSpec>,
    /// Capacity of the block device's backing image, in 512-byte sectors.
    pub blk_sectors: u64,
}

impl VmSpec {
    pub fn new(pid: u64, config: VmConfig, programs: Vec<Program>, core_pins: Vec<usize>) -> Self {
        VmSpec {
            pid,
            config,
            programs,
            core_pins,
            io_core: None,
            initial_grant: 64 << 20,
            net_schedule: Vec::new(),
            blk_sectors: 64,
        }
    }
}

/// The whole machine to simulate.
#[derive(Debug, Clone)]
pub struct MachineConfig {
    pub num_cores: usize,
    pub ram_base: u64,
    pub ram_size: u64,
    pub vmid_limit: u64,
    pub seed: u64,
    /// Kernel preemption-timer period; `None` disables the timer entirely
    /// (required for core sharing, forbidden on delegated data paths).
    pub timer_period: Option<u64>,
    pub step_limit: u64,
    pub vms: Vec<VmSpec>,
}

impl MachineConfig {
    pub fn new(num_cores: usize, ram_size: u64) -> MachineConfig {
        MachineConfig {
            num_cores,
            ram_base: DEFAULT_RAM_BASE,
            ram_size,
            vmid_limit: DEFAULT_VMID_LIMIT,
            seed: 0,
            timer_period: None,
            step_limit: DEFAULT_STEP_LIMIT,
            vms: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_cores == 0 {
            return Err(Error::config("a machine needs at least one core"));
        }
        if self.vms.is_empty() {
            return Err(Error::config("a machine needs at least one VM"));
        }
        let mut cores_used: BTreeMap<usize, u64> = BTreeMap::new();
        for spec in &self.vms {
            if spec.core_pins.len() != spec.config.vcpu_count {
                return Err(Error::config(format!(
                    "VM pid {} pins {} cores for {} vCPUs",
                    spec.pid,
                    spec.core_pins.len(),
                    spec.config.vcpu_count
                )));
            }
            let mut own: Vec<usize> = spec.core_pins.clone();
            own.extend(spec.io_core);
            for &c in &own {
                if c >= self.num_cores {
                    return Err(Error::config(format!(
                        "VM pid {} pinned to core {c}, machine has {}",
                        spec.pid, self.num_cores
                    )));
                }
            }
            let mut sorted = own.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != own.len() {
                return Err(Error::config(format!(
                    "VM pid {} pins two of its threads to one core",
                    spec.pid
                )));
            }
            for c in own {
                if let Some(other) = cores_used.insert(c, spec.pid) {
                    if self.timer_period.is_none() {
                        return Err(Error::config(format!(
                            "pids {other} and {} share core {c} but no preemption \
                             timer is configured",
                            spec.pid
                        )));
                    }
                }
            }
            let rings: usize = spec.programs.iter().map(|p| p.rx_rings.len()).sum();
            if rings > 1 {
                return Err(Error::config(format!(
                    "VM pid {} declares {rings} receive rings; the backend serves one",
                    spec.pid
                )));
            }
            if rings == 0 && !spec.net_schedule.is_empty() {
                return Err(Error::config(format!(
                    "VM pid {} has inbound packets but no receive ring",
                    spec.pid
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Threads and devices
// ---------------------------------------------------------------------------

/// Where a vCPU thread stands in the exit/entry cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// About to HURET into the guest (fresh boot, handler done, or wake).
    Entering,
    /// Executing guest instructions in V mode.
    InGuest,
    /// A VM exit fired; the HU handler runs on the next step.
    ExitPending,
    /// Parked on WFI with nothing pending; only an injection wakes it.
    Parked,
    /// An injection woke a parked vCPU; next step drains and enters.
    WakePending,
    /// Stopped on a benchmark marker until the machine is quiescent.
    BarrierParked { end: bool },
    /// Powered off, aborted, or killed.
    Halted,
}

/// One unit of boot-stub work. The stub runs as guest code before the
/// program's first instruction: it builds stage-1 tables, initializes and
/// fills the receive ring, and touches every ring page (structures and
/// buffers) so the backend never takes a stage-2 fault mid-benchmark. Each op
/// is idempotent: if it faults partway, the whole op re-runs after the
/// handler resolves the fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StubOp {
    S1Init,
    S1MapEntry { gva: u64, gpa: u64, perms: Perms },
    RingInit,
    RingPost(u16),
    PreTouch { gpa: u64 },
}

#[derive(Debug)]
struct SimThread {
    vm: usize,
    /// `Some(i)` for vCPU `i`, `None` for the VM's I/O thread.
    vcpu: Option<usize>,
    core: usize,
    phase: Phase,
    stub_ops: Vec<StubOp>,
    stub_cursor: usize,
}

/// Host-side device state of one VM.
#[derive(Debug, Default)]
pub struct VmDevices {
    pub console: Option<ConsoleDevice>,
    pub net: Option<NetBackend>,
    pub blk: Option<BlkBackend>,
    /// Buffer length the guest driver reposts receive buffers at.
    pub net_buf_len: u64,
}

// ---------------------------------------------------------------------------
// Machine
// ---------------------------------------------------------------------------

/// Outcome of one guest memory access attempt, computed under the borrow of
/// the core/hypervisor pair and acted on afterwards.
enum MemOutcome {
    Done,
    Retry,
    Raise { reason: ExitReason, info: u64 },
    PmcKill { hpa: u64 },
    Abort(&'static str),
}

pub struct Machine {
    pub mem: PhysMemory,
    pub cores: Vec<CoreState>,
    pub cp: ControlPlane,
    pub hvs: Vec<Hypervisor>,
    pub devices: Vec<VmDevices>,
    pub trace: Trace,
    pub cycle: u64,
    rng: ChaCha8Rng,
    threads: Vec<SimThread>,
    thread_of_vcpu: Vec<Vec<usize>>,
    timer_period: Option<u64>,
    next_timer: Vec<u64>,
    step_limit: u64,
    steps: u64,
    /// One memory extension per VM; a second exhaustion is fatal.
    extension_done: Vec<bool>,
    /// Doorbell flag the block backend drains on its next step.
    blk_kicked: Vec<bool>,
}

impl Machine {
    /// Builds the machine and boots every VM: processes registered, the
    /// extension enabled, memory granted, hypervisors initialized, guest
    /// boot stubs queued. Ends by logging `BootComplete`.
    pub fn new(cfg: MachineConfig) -> Result<Machine> {
        cfg.validate()?;
        let mut m = Machine {
            mem: PhysMemory::new(),
            cores: (0..cfg.num_cores).map(CoreState::new).collect(),
            cp: ControlPlane::new(cfg.ram_base, cfg.ram_size, cfg.num_cores, cfg.vmid_limit),
            hvs: Vec::new(),
            devices: Vec::new(),
            trace: Trace::default(),
            cycle: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            threads: Vec::new(),
            thread_of_vcpu: Vec::new(),
            timer_period: cfg.timer_period,
            next_timer: vec![cfg.timer_period.unwrap_or(u64::MAX); cfg.num_cores],
            step_limit: cfg.step_limit,
            steps: 0,
            extension_done: vec![false; cfg.vms.len()],
            blk_kicked: vec![false; cfg.vms.len()],
        };
        for spec in cfg.vms {
            m.boot_vm(spec)?;
        }
        let core0 = 0;
        m.emit(core0, HS_CONTEXT_VCPUID, EventKind::BootComplete, 0);
        Ok(m)
    }

    fn boot_vm(&mut self, spec: VmSpec) -> Result<()> {
        let vm = self.hvs.len();
        let mut proc_cores = spec.core_pins.clone();
        proc_cores.extend(spec.io_core);
        self.cp.register_process(spec.pid, &proc_cores)?;
        let vmid =
            self.cp.ioctl_enable_dv(&mut self.cores, spec.pid, DELEGATABLE_MASK, self.cycle)?;
        self.emit(proc_cores[0], HS_CONTEXT_VCPUID, EventKind::HsIoctl, 0);

        // Core sharing: the kernel staged this process's state on occupied
        // cores. Rotate each such core until this process is resident, so
        // boot-time register writes land in the right context.
        for &c in &proc_cores {
            let mut spins = 0;
            while self.cp.resident_pid(c) != Some(spec.pid) {
                self.cp.on_timer(&mut self.cores, c, self.cycle)?;
                self.cores[c].mode = PrivilegeMode::Hu;
                spins += 1;
                assert!(spins <= self.cp.processes.len(), "rotation never reached pid");
            }
        }

        let grant =
            self.cp.ioctl_alloc_region(&mut self.cores, spec.pid, spec.initial_grant, self.cycle)?;
        self.emit(proc_cores[0], HS_CONTEXT_VCPUID, EventKind::HsIoctl, grant.size);

        let mut hv =
            Hypervisor::new(spec.pid, spec.config, spec.programs, spec.core_pins.clone())?;
        hv.vm_boot(&mut self.cores, &mut self.mem, vmid, grant)?;

        if let Some(ioc) = spec.io_core {
            let core = &mut self.cores[ioc];
            core.mode = PrivilegeMode::Hu;
            csr_access(core, DvReg::HuVcpuid, RegAccess::Write(IO_THREAD_VCPUID))
                .map_err(|_| Error::config("I/O thread VCPUID write rejected"))?;
        }

        // Devices: host-side backend state, one ring per VM at a fixed GPA.
        let mut devices = VmDevices::default();
        if hv.config.devices.contains(&DeviceKind::Console) {
            devices.console = Some(ConsoleDevice::default());
        }
        let ring_decl = hv
            .programs
            .iter()
            .enumerate()
            .find_map(|(i, p)| p.rx_rings.first().map(|d| (i, d.clone())));
        if let Some((owner_vcpu, decl)) = &ring_decl {
            if !decl.device.starts_with("net") {
                return Err(Error::config(format!(
                    "receive ring bound to unknown device `{}`",
                    decl.device
                )));
            }
            if !hv.config.devices.contains(&DeviceKind::Net) {
                return Err(Error::config("receive ring declared but the VM has no net device"));
            }
            let queue = VirtQueue::new(hv.ring_gpa(0), decl.queue_size as u16, *owner_vcpu);
            devices.net = Some(NetBackend::new(queue, NET_IRQ, spec.net_schedule.clone()));
            devices.net_buf_len = decl.buf_len;
        }
        if hv.config.devices.contains(&DeviceKind::Blk) {
            let queue = VirtQueue::new(hv.ring_gpa(1), 64, 0);
            devices.blk = Some(BlkBackend::new(queue, BLK_IRQ, spec.blk_sectors));
        }

        // Threads: one per vCPU plus the optional I/O thread.
        let mut thread_ids = Vec::new();
        for vcpu in 0..hv.config.vcpu_count {
            let stub_ops = build_stub_ops(&hv, vcpu, &ring_decl);
            hv.vcpus[vcpu].stub_pending = !stub_ops.is_empty();
            thread_ids.push(self.threads.len());
            self.threads.push(SimThread {
                vm,
                vcpu: Some(vcpu),
                core: spec.core_pins[vcpu],
                phase: Phase::Entering,
                stub_ops,
                stub_cursor: 0,
            });
        }
        if let Some(ioc) = spec.io_core {
            self.threads.push(SimThread {
                vm,
                vcpu: None,
                core: ioc,
                phase: Phase::InGuest,
                stub_ops: Vec::new(),
                stub_cursor: 0,
            });
        }
        self.thread_of_vcpu.push(thread_ids);
        self.hvs.push(hv);
        self.devices.push(devices);
        Ok(())
    }

    // -- scheduling ---------------------------------------------------------

    fn vm_alive(&self, vm: usize) -> bool {
        self.cp.processes.get(&self.hvs[vm].pid).map(|p| p.alive).unwrap_or(false)
    }

    fn net_due(&self, vm: usize) -> Option<u64> {
        let net = self.devices[vm].net.as_ref()?;
        if !net.anchored() {
            return None;
        }
        net.next_due()
    }

    fn schedulable(&self, ti: usize) -> bool {
        let t = &self.threads[ti];
        if !self.vm_alive(t.vm) {
            return false;
        }
        if self.cp.resident_pid(t.core) != Some(self.hvs[t.vm].pid) {
            return false;
        }
        match t.vcpu {
            Some(_) => matches!(
                t.phase,
                Phase::Entering | Phase::InGuest | Phase::ExitPending | Phase::WakePending
            ),
            None => {
                t.phase != Phase::Halted
                    && (self.blk_kicked[t.vm]
                        || self.net_due(t.vm).map(|d| d <= self.cycle).unwrap_or(false))
            }
        }
    }

    /// An I/O thread whose next packet has waited past the fairness bound.
    fn forced_io(&self, runnable: &[usize]) -> Option<usize> {
        runnable.iter().copied().find(|&ti| {
            let t = &self.threads[ti];
            t.vcpu.is_none()
                && self.net_due(t.vm).map(|d| d + IO_OVERDUE_FORCE < self.cycle).unwrap_or(false)
        })
    }

    /// Earliest future cycle at which a currently idle I/O thread has work.
    fn next_io_wake(&self) -> Option<u64> {
        self.threads
            .iter()
            .filter(|t| {
                t.vcpu.is_none()
                    && t.phase != Phase::Halted
                    && self.vm_alive(t.vm)
                    && self.cp.resident_pid(t.core) == Some(self.hvs[t.vm].pid)
            })
            .filter_map(|t| self.net_due(t.vm))
            .filter(|&d| d > self.cycle)
            .min()
    }

    /// Earliest future timer tick that could hand a core to a thread that is
    /// waiting only for residency.
    fn next_timer_wake(&self) -> Option<u64> {
        self.timer_period?;
        self.threads
            .iter()
            .filter(|t| {
                if !self.vm_alive(t.vm)
                    || self.cp.resident_pid(t.core) == Some(self.hvs[t.vm].pid)
                {
                    return false;
                }
                match t.vcpu {
                    Some(_) => matches!(
                        t.phase,
                        Phase::Entering | Phase::InGuest | Phase::ExitPending | Phase::WakePending
                    ),
                    None => t.phase != Phase::Halted,
                }
            })
            .map(|t| self.next_timer[t.core])
            .min()
    }

    /// Runs until nothing can make progress. Ends normally on global
    /// quiescence (all vCPUs halted or parked forever); errs only on a step
    /// budget blowout or a machine-level invariant failure.
    pub fn run(&mut self) -> Result<()> {
        let mut wait = vec![0u64; self.threads.len()];
        loop {
            self.fire_due_timers()?;
            let runnable: Vec<usize> =
                (0..self.threads.len()).filter(|&ti| self.schedulable(ti)).collect();
            if runnable.is_empty() {
                if self.release_barrier() {
                    continue;
                }
                let wake = [self.next_io_wake(), self.next_timer_wake()]
                    .into_iter()
                    .flatten()
                    .min();
                match wake {
                    Some(w) if w > self.cycle => {
                        self.cycle = w;
                        continue;
                    }
                    _ => break,
                }
            }
            let ti = self
                .forced_io(&runnable)
                .or_else(|| {
                    runnable
                        .iter()
                        .copied()
                        .filter(|&t| wait[t] >= SCHED_STARVATION_BOUND)
                        .max_by_key(|&t| (wait[t], usize::MAX - t))
                })
                .unwrap_or_else(|| runnable[self.rng.gen_range(0..runnable.len())]);
            for (t, w) in wait.iter_mut().enumerate() {
                *w = if t != ti && runnable.contains(&t) { *w + 1 } else { 0 };
            }
            self.steps += 1;
            if self.steps > self.step_limit {
                return Err(Error::StepBudgetExceeded(self.step_limit));
            }
            self.cycle += 1;
            self.step_thread(ti)?;
        }
        Ok(())
    }

    /// Benchmark-marker barrier: when every thread is quiescent, waiters on
    /// a marker resume together and the marker event hits the trace. The
    /// begin marker also anchors the packet schedule, so inbound traffic is
    /// positioned relative to the measured window.
    fn release_barrier(&mut self) -> bool {
        let mut released = false;
        for ti in 0..self.threads.len() {
            let t = &self.threads[ti];
            if !self.vm_alive(t.vm) {
                continue;
            }
            let Phase::BarrierParked { end } = t.phase else { continue };
            let (vm, core, vcpu) = (t.vm, t.core, t.vcpu.expect("only vCPUs reach markers"));
            let kind = if end { EventKind::BenchEnd } else { EventKind::BenchBegin };
            self.emit(core, vcpu as u64, kind, 0);
            if !end {
                if let Some(net) = self.devices[vm].net.as_mut() {
                    net.anchor(self.cycle);
                }
            }
            self.threads[ti].phase = Phase::Entering;
            released = true;
        }
        released
    }

    /// Kernel preemption timer: saves the resident process's extension state
    /// and installs the next tenant's. A guest caught in V mode is kicked
    /// out through a (non-delegatable) timer exit first.
    fn fire_due_timers(&mut self) -> Result<()> {
        let Some(period) = self.timer_period else { return Ok(()) };
        for c in 0..self.cores.len() {
            while self.next_timer[c] <= self.cycle {
                self.next_timer[c] += period;
                let Some(pid) = self.cp.resident_pid(c) else { continue };
                if self.cores[c].mode == PrivilegeMode::V {
                    let vm = self
                        .hvs
                        .iter()
                        .position(|h| h.pid == pid)
                        .expect("resident pid is a VM");
                    let vcpu = self.hvs[vm]
                        .core_of_vcpu
                        .iter()
                        .position(|&cc| cc == c)
                        .expect("a core in V mode hosts a vCPU");
                    route_trap(&mut self.cores[c], ExitReason::Timer, 0);
                    // The kernel saves the interrupted guest PC where the
                    // process's own entry path will pick it up.
                    let pc = self.cores[c].pc;
                    csr_access(&mut self.cores[c], DvReg::HuVpc, RegAccess::Write(pc))
                        .expect("kernel context may write any extension register");
                    self.emit(c, vcpu as u64, EventKind::VmExit { reason: ExitReason::Timer }, 0);
                    let ti = self.thread_of_vcpu[vm][vcpu];
                    self.threads[ti].phase = Phase::Entering;
                }
                self.emit(c, HS_CONTEXT_VCPUID, EventKind::HsTimerTick, c as u64);
                self.cp.on_timer(&mut self.cores, c, self.cycle)?;
                self.cores[c].mode = if self.cp.resident_pid(c).is_some() {
                    PrivilegeMode::Hu
                } else {
                    PrivilegeMode::Hs
                };
            }
        }
        Ok(())
    }

    fn step_thread(&mut self, ti: usize) -> Result<()> {
        let t = &self.threads[ti];
        let vm = t.vm;
        let result = match t.vcpu {
            Some(vcpu) => match t.phase {
                Phase::Entering | Phase::WakePending => self.enter_guest(ti, vm, vcpu),
                Phase::InGuest => self.guest_step(ti, vm, vcpu),
                Phase::ExitPending => self.handle_exit(ti, vm, vcpu),
                Phase::Parked | Phase::BarrierParked { .. } | Phase::Halted => Ok(()),
            },
            None => self.io_step(ti, vm),
        };
        match result {
            // A hypervisor panic destroys its own process; the machine and
            // every other VM keep running.
            Err(Error::HypervisorPanic { msg, .. }) => self.kill_vm(vm, &msg),
            other => other,
        }
    }

    fn emit(&mut self, core: usize, vcpuid: u64, kind: EventKind, info: u64) {
        self.trace.events.push(TraceEvent { cycle: self.cycle, core, vcpuid, kind, info });
    }

    // -- guest entry --------------------------------------------------------

    fn enter_guest(&mut self, ti: usize, vm: usize, vcpu: usize) -> Result<()> {
        let core_idx = self.threads[ti].core;
        let (delivered, uipi) = {
            let hv = &mut self.hvs[vm];
            let core = &mut self.cores[core_idx];
            hv.drain_state_area(core, vcpu)?;
            match exec_huret(core) {
                Ok(out) => (out.delivered_vitr, out.uipi_exit),
                Err(trap) => {
                    return Err(Error::HypervisorPanic {
                        vmid: hv.vmid,
                        msg: format!("guest entry rejected: {trap:?}"),
                    })
                }
            }
        };
        self.hvs[vm].vcpus[vcpu].guest_pending |= delivered;
        self.emit(core_idx, vcpu as u64, EventKind::VmEntry, delivered);
        if let Some(trap) = uipi {
            // A latched user-level IPI fires the moment the guest re-enters.
            self.emit(core_idx, vcpu as u64, EventKind::VmExit { reason: trap.reason }, trap.info);
            self.hvs[vm].vcpus[vcpu].pc = self.cores[core_idx].regs.hu_vpc;
            self.threads[ti].phase = Phase::ExitPending;
        } else {
            self.hvs[vm].vcpus[vcpu].pc = self.cores[core_idx].pc;
            self.threads[ti].phase = Phase::InGuest;
        }
        Ok(())
    }

    // -- guest execution ----------------------------------------------------

    fn guest_step(&mut self, ti: usize, vm: usize, vcpu: usize) -> Result<()> {
        if self.hvs[vm].vcpus[vcpu].stub_pending {
            return self.stub_step(ti, vm, vcpu);
        }
        let core_idx = self.threads[ti].core;
        let pc = self.cores[core_idx].pc as usize;
        let Some(&instr) = self.hvs[vm].programs[vcpu].instrs.get(pc) else {
            return self.abort_vcpu(ti, vm, vcpu, "program counter ran past the last instruction");
        };
        let idx = self.hvs[vm].vcpus[vcpu]
            .loop_stack
            .last()
            .map(|f| f.completed)
            .unwrap_or(0);
        match instr {
            Instr::Nop => {
                self.cores[core_idx].pc += 1;
                Ok(())
            }
            Instr::LoopStart { count, end_idx } => {
                if count == 0 {
                    self.cores[core_idx].pc = end_idx as u64 + 1;
                } else {
                    self.hvs[vm].vcpus[vcpu].loop_stack.push(LoopFrame {
                        start_idx: pc,
                        count,
                        completed: 0,
                    });
                    self.cores[core_idx].pc += 1;
                }
                Ok(())
            }
            Instr::LoopEnd { start_idx } => {
                let v = &mut self.hvs[vm].vcpus[vcpu];
                let Some(frame) = v.loop_stack.last_mut() else {
                    return self.abort_vcpu(ti, vm, vcpu, "loop end without a live loop");
                };
                frame.completed += 1;
                if frame.completed < frame.count {
                    self.cores[core_idx].pc = start_idx as u64 + 1;
                } else {
                    v.loop_stack.pop();
                    self.cores[core_idx].pc += 1;
                }
                Ok(())
            }
            Instr::Halt => self.raise(ti, vm, vcpu, ExitReason::Hypercall, crate::hv::HC_HALT),
            Instr::Hypercall { nr, arg } => {
                self.hvs[vm].vcpus[vcpu].regs[0] = arg;
                self.raise(ti, vm, vcpu, ExitReason::Hypercall, nr)
            }
            Instr::Wfi => {
                if self.hvs[vm].vcpus[vcpu].guest_pending != 0 {
                    self.cores[core_idx].pc += 1;
                    Ok(())
                } else {
                    self.raise(ti, vm, vcpu, ExitReason::SensitiveWfi, 0)
                }
            }
            Instr::IrqAck => self.guest_ack(ti, vm, vcpu),
            Instr::Load { addr, reg } => {
                self.guest_mem_access(ti, vm, vcpu, addr.eval(idx), reg, false)
            }
            Instr::Store { addr, reg } => {
                self.guest_mem_access(ti, vm, vcpu, addr.eval(idx), reg, true)
            }
            Instr::MmioLoad { addr, reg } => {
                self.guest_mmio_access(ti, vm, vcpu, addr.eval(idx), reg, false)
            }
            Instr::MmioStore { addr, reg } => {
                self.guest_mmio_access(ti, vm, vcpu, addr.eval(idx), reg, true)
            }
        }
    }

    /// Acknowledge the highest pending virtual interrupt. Device interrupts
    /// run the guest driver's completion work (reap + repost) right here, in
    /// guest context; bare IPIs just clear the bit.
    fn guest_ack(&mut self, ti: usize, vm: usize, vcpu: usize) -> Result<()> {
        let core_idx = self.threads[ti].core;
        let pending = self.hvs[vm].vcpus[vcpu].guest_pending;
        if pending == 0 {
            self.cores[core_idx].pc += 1;
            return Ok(());
        }
        let irq = 63 - pending.leading_zeros() as u64;
        {
            let v = &mut self.hvs[vm].vcpus[vcpu];
            v.guest_pending &= !(1 << irq);
            v.record_ack(irq, self.cycle);
        }
        if irq >= FIRST_DEVICE_IRQ {
            self.emit(core_idx, vcpu as u64, EventKind::VirqGuestHandled, irq);
            if irq == NET_IRQ {
                if let Err(msg) = self.net_reap_and_repost(vm, core_idx) {
                    return self.abort_vcpu(ti, vm, vcpu, msg);
                }
            }
        } else {
            self.emit(core_idx, vcpu as u64, EventKind::VirqAcked, irq);
        }
        self.cores[core_idx].pc += 1;
        Ok(())
    }

    /// Guest net driver: consume every new completion and hand the buffer
    /// straight back to the device. Ring pages are pre-touched by the boot
    /// stub, so faults here mean the VM's own setup was broken.
    fn net_reap_and_repost(&mut self, vm: usize, core_idx: usize) -> std::result::Result<(), &'static str> {
        let hv = &self.hvs[vm];
        let Some(s2) = hv.s2.as_ref() else { return Err("driver ran before boot") };
        let buf_len = self.devices[vm].net_buf_len;
        let Some(net) = self.devices[vm].net.as_mut() else { return Ok(()) };
        let core = &mut self.cores[core_idx];
        let entries = net
            .queue
            .guest_consume_used(&mut self.mem, &mut core.pmc, s2)
            .map_err(|_| "net driver faulted reaping the used ring")?;
        for e in entries {
            match net.queue.guest_post(&mut self.mem, &mut core.pmc, s2, e.gpa, buf_len, false) {
                Ok(()) => {}
                Err(PostError::RingFull) => return Err("net driver overfilled its own ring"),
                Err(PostError::Fault(_)) => return Err("net driver faulted reposting a buffer"),
            }
        }
        Ok(())
    }

    fn guest_mem_access(
        &mut self,
        ti: usize,
        vm: usize,
        vcpu: usize,
        gva: u64,
        reg: u8,
        is_store: bool,
    ) -> Result<()> {
        let core_idx = self.threads[ti].core;
        let outcome = {
            let hv = &mut self.hvs[vm];
            let core = &mut self.cores[core_idx];
            let s2 = hv.s2.as_ref().expect("guest runs only after boot");
            let v = &mut hv.vcpus[vcpu];
            let access = if is_store { Access::Write } else { Access::Read };
            match translate(&mut self.mem, &mut core.pmc, v.s1.as_ref(), s2, gva, access, 1) {
                Ok(hpa) => {
                    if is_store {
                        let byte = v.regs[reg as usize] as u8;
                        self.mem.write(hpa, &[byte], Provenance::VDerived);
                    } else {
                        let mut byte = [0u8; 1];
                        self.mem.read(hpa, &mut byte, Provenance::VDerived);
                        v.regs[reg as usize] = byte[0] as u64;
                    }
                    core.pc += 1;
                    MemOutcome::Done
                }
                Err(FaultKind::S1PageFault { gva }) => {
                    // The guest's own fault handler: demand-identity paging.
                    match self.hvs[vm].programs[vcpu].s1_mode {
                        S1Mode::Off => MemOutcome::Abort("stage-1 fault with paging off"),
                        S1Mode::Identity | S1Mode::Explicit(_) => {
                            let page = gva & !PAGE_OFFSET_MASK;
                            guest_s1_map(
                                &mut self.mem,
                                &mut self.cores[core_idx],
                                &mut self.hvs[vm],
                                vcpu,
                                page,
                                page,
                                Perms::RWX,
                            )
                        }
                    }
                }
                Err(FaultKind::S2PageFault { gpa }) => {
                    let reason =
                        if is_store { ExitReason::S2pfStore } else { ExitReason::S2pfLoad };
                    MemOutcome::Raise { reason, info: gpa }
                }
                Err(FaultKind::PmcViolation { hpa }) => MemOutcome::PmcKill { hpa },
            }
        };
        self.apply_mem_outcome(ti, vm, vcpu, outcome)
    }

    /// Device-window access: stage-1 is bypassed, the operand is the GPA
    /// itself, and the access is eight bytes wide. A mapped-RAM hit is a
    /// plain memory access; a miss raises the fault the window emulation
    /// path feeds on.
    fn guest_mmio_access(
        &mut self,
        ti: usize,
        vm: usize,
        vcpu: usize,
        gpa: u64,
        reg: u8,
        is_store: bool,
    ) -> Result<()> {
        let core_idx = self.threads[ti].core;
        let outcome = {
            let hv = &mut self.hvs[vm];
            let core = &mut self.cores[core_idx];
            let s2 = hv.s2.as_ref().expect("guest runs only after boot");
            let v = &mut hv.vcpus[vcpu];
            let access = if is_store { Access::Write } else { Access::Read };
            match translate_gpa(&mut self.mem, &mut core.pmc, s2, gpa, access, 8) {
                Ok(hpa) => {
                    if is_store {
                        self.mem.write_u64(hpa, v.regs[reg as usize], Provenance::VDerived);
                    } else {
                        v.regs[reg as usize] = self.mem.read_u64(hpa, Provenance::VDerived);
                    }
                    core.pc += 1;
                    MemOutcome::Done
                }
                Err(FaultKind::S2PageFault { gpa }) => {
                    let reason =
                        if is_store { ExitReason::S2pfStore } else { ExitReason::S2pfLoad };
                    MemOutcome::Raise { reason, info: gpa }
                }
                Err(FaultKind::PmcViolation { hpa }) => MemOutcome::PmcKill { hpa },
                Err(FaultKind::S1PageFault { .. }) => {
                    unreachable!("guest-physical translation has no stage-1")
                }
            }
        };
        self.apply_mem_outcome(ti, vm, vcpu, outcome)
    }

    fn apply_mem_outcome(
        &mut self,
        ti: usize,
        vm: usize,
        vcpu: usize,
        outcome: MemOutcome,
    ) -> Result<()> {
        match outcome {
            MemOutcome::Done | MemOutcome::Retry => Ok(()),
            MemOutcome::Raise { reason, info } => self.raise(ti, vm, vcpu, reason, info),
            MemOutcome::PmcKill { hpa } => self.pmc_kill(ti, vm, Some(vcpu), hpa),
            MemOutcome::Abort(msg) => self.abort_vcpu(ti, vm, vcpu, msg),
        }
    }

    /// Takes a VM exit on the vCPU's core: the hardware routes it, the trace
    /// logs it, and the thread moves to the handler phase.
    fn raise(&mut self, ti: usize, vm: usize, vcpu: usize, reason: ExitReason, info: u64) -> Result<()> {
        let core_idx = self.threads[ti].core;
        let trap = route_trap(&mut self.cores[core_idx], reason, info);
        self.emit(core_idx, vcpu as u64, EventKind::VmExit { reason }, info);
        match trap.destination {
            Destination::HuHandler => {
                self.hvs[vm].vcpus[vcpu].pc = self.cores[core_idx].regs.hu_vpc;
                self.threads[ti].phase = Phase::ExitPending;
                Ok(())
            }
            // Post-boot, every delegatable exit stays in user level; an
            // escalation means the VM's delegation setup is gone.
            Destination::HsHandler | Destination::GuestHandler => {
                self.kill_vm(vm, &format!("{} exit escaped to the kernel", reason.name()))
            }
        }
    }

    // -- exit handling ------------------------------------------------------

    fn handle_exit(&mut self, ti: usize, vm: usize, vcpu: usize) -> Result<()> {
        let core_idx = self.threads[ti].core;
        let code = self.cores[core_idx].regs.hu_er;
        let info = self.cores[core_idx].regs.hu_einfo;
        let Some(reason) = ExitReason::from_code(code) else {
            return Err(Error::HypervisorPanic {
                vmid: self.hvs[vm].vmid,
                msg: format!("unknown exit code {code}"),
            });
        };
        match reason {
            ExitReason::S2pfLoad | ExitReason::S2pfStore | ExitReason::S2pfFetch => {
                self.handle_s2pf_exit(ti, vm, vcpu, info, reason)
            }
            ExitReason::Hypercall => self.handle_hypercall_exit(ti, vm, vcpu, info),
            ExitReason::SensitiveWfi => {
                // Step past the WFI, then park — unless an interrupt raced in
                // after the exit, in which case entry is immediate.
                let core = &mut self.cores[core_idx];
                let vpc = core.regs.hu_vpc;
                csr_access(core, DvReg::HuVpc, RegAccess::Write(vpc + 1))
                    .expect("exit handler runs in HU");
                if self.hvs[vm].vcpus[vcpu].state_area.is_empty() {
                    self.hvs[vm].vcpus[vcpu].runnable = false;
                    self.threads[ti].phase = Phase::Parked;
                } else {
                    self.threads[ti].phase = Phase::Entering;
                }
                Ok(())
            }
            ExitReason::Uipi => {
                // The sender already posted the payload; the pre-entry drain
                // delivers it. Resume where the guest was interrupted.
                self.threads[ti].phase = Phase::Entering;
                Ok(())
            }
            ExitReason::Timer | ExitReason::PmcFault | ExitReason::IllegalHuAccess => {
                Err(Error::HypervisorPanic {
                    vmid: self.hvs[vm].vmid,
                    msg: format!("kernel-owned trap `{}` reached user level", reason.name()),
                })
            }
        }
    }

    fn handle_s2pf_exit(
        &mut self,
        ti: usize,
        vm: usize,
        vcpu: usize,
        gpa: u64,
        reason: ExitReason,
    ) -> Result<()> {
        let core_idx = self.threads[ti].core;
        // At most two attempts: a `NeedGrant` in between buys one extension.
        for _ in 0..2 {
            let outcome = self.hvs[vm].handle_s2pf(&mut self.mem, gpa).map_err(|e| {
                Error::HypervisorPanic { vmid: self.hvs[vm].vmid, msg: e.to_string() }
            })?;
            match outcome {
                S2pfOutcome::Mapped { .. } => {
                    // Faulting instruction retries: the entry PC is untouched.
                    self.emit(core_idx, vcpu as u64, EventKind::S2pfHandled, gpa);
                    self.threads[ti].phase = Phase::Entering;
                    return Ok(());
                }
                S2pfOutcome::Mmio { device, offset } => {
                    return self.emulate_mmio(ti, vm, vcpu, device, offset, gpa, reason);
                }
                S2pfOutcome::NeedGrant => {
                    if self.extension_done[vm] {
                        return Err(Error::HypervisorPanic {
                            vmid: self.hvs[vm].vmid,
                            msg: "guest exhausted its memory after one extension".into(),
                        });
                    }
                    self.extension_done[vm] = true;
                    let pid = self.hvs[vm].pid;
                    let grant = self
                        .cp
                        .ioctl_alloc_region(&mut self.cores, pid, EXTENSION_BYTES, self.cycle)
                        .map_err(|e| Error::HypervisorPanic {
                            vmid: self.hvs[vm].vmid,
                            msg: format!("memory extension denied: {e}"),
                        })?;
                    self.emit(core_idx, HS_CONTEXT_VCPUID, EventKind::HsIoctl, grant.size);
                    self.hvs[vm].alloc.push_grant(grant);
                }
                S2pfOutcome::BadAddress => {
                    return self.abort_vcpu(
                        ti,
                        vm,
                        vcpu,
                        "access to an address that is neither RAM nor a device window",
                    );
                }
            }
        }
        unreachable!("extension path retries at most once")
    }

    /// Window emulation: decode the faulting instruction, perform the device
    /// register access, step the guest past it.
    fn emulate_mmio(
        &mut self,
        ti: usize,
        vm: usize,
        vcpu: usize,
        device: DeviceKind,
        offset: u64,
        gpa: u64,
        reason: ExitReason,
    ) -> Result<()> {
        let core_idx = self.threads[ti].core;
        if offset + 8 > WINDOW_SIZE {
            return self.abort_vcpu(ti, vm, vcpu, "device access straddles the window end");
        }
        let pc = self.cores[core_idx].regs.hu_vpc as usize;
        let instr = self.hvs[vm].programs[vcpu].instrs.get(pc).copied();
        match (instr, reason) {
            (Some(Instr::MmioLoad { reg, .. }), ExitReason::S2pfLoad) => {
                let value = match device {
                    DeviceKind::Console => self.devices[vm]
                        .console
                        .as_mut()
                        .map(|c| c.mmio_read(offset))
                        .unwrap_or(0),
                    DeviceKind::Net | DeviceKind::Blk => 0,
                };
                self.hvs[vm].vcpus[vcpu].regs[reg as usize] = value;
            }
            (Some(Instr::MmioStore { reg, .. }), ExitReason::S2pfStore) => {
                let value = self.hvs[vm].vcpus[vcpu].regs[reg as usize];
                match device {
                    DeviceKind::Console => {
                        if let Some(c) = self.devices[vm].console.as_mut() {
                            c.mmio_write(offset, value);
                        }
                    }
                    DeviceKind::Blk => {
                        if offset == REG_DOORBELL {
                            if let Some(b) = self.devices[vm].blk.as_mut() {
                                b.kick();
                            }
                            self.blk_kicked[vm] = true;
                        }
                    }
                    // The receive path is poll-driven; a net doorbell is a
                    // legal no-op.
                    DeviceKind::Net => {}
                }
            }
            _ => {
                return self.abort_vcpu(
                    ti,
                    vm,
                    vcpu,
                    "device window touched by a non-device instruction",
                )
            }
        }
        let core = &mut self.cores[core_idx];
        let vpc = core.regs.hu_vpc;
        csr_access(core, DvReg::HuVpc, RegAccess::Write(vpc + 1))
            .expect("exit handler runs in HU");
        self.emit(core_idx, vcpu as u64, EventKind::MmioHandled, gpa);
        self.threads[ti].phase = Phase::Entering;
        Ok(())
    }

    fn handle_hypercall_exit(&mut self, ti: usize, vm: usize, vcpu: usize, nr: u64) -> Result<()> {
        let core_idx = self.threads[ti].core;
        let arg = self.hvs[vm].vcpus[vcpu].regs[0];
        match classify_hypercall(nr, arg) {
            HcAction::Null => {
                self.hvs[vm].vcpus[vcpu].regs[0] = 0;
                self.finish_handler(ti, core_idx, vcpu, EventKind::HypercallHandled, nr)
            }
            HcAction::Vipi { target_vcpuid } => {
                let Some(target) = self.hvs[vm].vcpu_by_id(target_vcpuid) else {
                    self.hvs[vm].vcpus[vcpu].regs[0] = u64::MAX;
                    return self.finish_handler(
                        ti,
                        core_idx,
                        vcpu,
                        EventKind::HypercallRejected,
                        nr,
                    );
                };
                let kind = self.hvs[vm].inject_virq(
                    &mut self.cores,
                    core_idx,
                    target,
                    IPI_IRQ,
                    vcpu as u64,
                    self.cycle,
                )?;
                self.apply_inject(vm, target, vcpu as u64, kind);
                self.hvs[vm].vcpus[vcpu].regs[0] = 0;
                // The insertion is the whole priced cost of this exit; there
                // is no separate generic-hypercall charge on the send path.
                self.finish_handler(ti, core_idx, vcpu, EventKind::VipiSent, target_vcpuid)
            }
            HcAction::Halt => {
                self.emit(core_idx, vcpu as u64, EventKind::GuestHalted, 0);
                self.hvs[vm].vcpus[vcpu].halted = true;
                self.threads[ti].phase = Phase::Halted;
                Ok(())
            }
            HcAction::BenchBegin | HcAction::BenchEnd => {
                let end = matches!(classify_hypercall(nr, arg), HcAction::BenchEnd);
                let core = &mut self.cores[core_idx];
                let vpc = core.regs.hu_vpc;
                csr_access(core, DvReg::HuVpc, RegAccess::Write(vpc + 1))
                    .expect("exit handler runs in HU");
                self.hvs[vm].vcpus[vcpu].regs[0] = 0;
                self.threads[ti].phase = Phase::BarrierParked { end };
                Ok(())
            }
            HcAction::Unknown { nr } => {
                self.hvs[vm].vcpus[vcpu].regs[0] = u64::MAX;
                self.finish_handler(ti, core_idx, vcpu, EventKind::HypercallRejected, nr)
            }
        }
    }

    /// Common handler epilogue: step the entry PC past the trapping
    /// instruction, log the handler's work, queue the re-entry.
    fn finish_handler(
        &mut self,
        ti: usize,
        core_idx: usize,
        vcpu: usize,
        kind: EventKind,
        info: u64,
    ) -> Result<()> {
        let core = &mut self.cores[core_idx];
        let vpc = core.regs.hu_vpc;
        csr_access(core, DvReg::HuVpc, RegAccess::Write(vpc + 1))
            .expect("exit handler runs in HU");
        self.emit(core_idx, vcpu as u64, kind, info);
        self.threads[ti].phase = Phase::Entering;
        Ok(())
    }

    /// Maps an injection outcome onto the target's thread phase, and logs
    /// the forced exit when the target was caught in V mode.
    fn apply_inject(&mut self, vm: usize, target: usize, sender_vcpuid: u64, kind: InjectKind) {
        let tti = self.thread_of_vcpu[vm][target];
        match kind {
            InjectKind::Posted => {
                if self.threads[tti].phase == Phase::Parked {
                    self.threads[tti].phase = Phase::WakePending;
                }
            }
            InjectKind::Uipi => {
                let tcore = self.threads[tti].core;
                self.emit(
                    tcore,
                    target as u64,
                    EventKind::VmExit { reason: ExitReason::Uipi },
                    sender_vcpuid,
                );
                self.hvs[vm].vcpus[target].pc = self.cores[tcore].regs.hu_vpc;
                self.threads[tti].phase = Phase::ExitPending;
            }
            InjectKind::StateArea => {}
        }
    }

    // -- boot stub ----------------------------------------------------------

    /// One idempotent stub op per step. Faults raise the corresponding exit
    /// and leave the cursor in place; the op re-runs after the handler.
    fn stub_step(&mut self, ti: usize, vm: usize, vcpu: usize) -> Result<()> {
        let cursor = self.threads[ti].stub_cursor;
        let Some(&op) = self.threads[ti].stub_ops.get(cursor) else {
            self.hvs[vm].vcpus[vcpu].stub_pending = false;
            return Ok(());
        };
        let core_idx = self.threads[ti].core;
        let outcome = {
            let hv = &mut self.hvs[vm];
            let core = &mut self.cores[core_idx];
            match op {
                StubOp::S1Init => {
                    let root = crate::hv::S1_NODE_GPA_BASE;
                    let zeros = [0u8; PAGE_SIZE as usize];
                    let s2 = hv.s2.as_ref().expect("stub runs after boot");
                    match crate::pvio::guest_write(&mut self.mem, &mut core.pmc, s2, root, &zeros)
                    {
                        Ok(()) => {
                            let v = &mut hv.vcpus[vcpu];
                            v.s1 = Some(S1Table::new(root));
                            v.s1_node_next = root + PAGE_SIZE;
                            MemOutcome::Done
                        }
                        Err(f) => stub_fault(f),
                    }
                }
                StubOp::S1MapEntry { gva, gpa, perms } => {
                    match guest_s1_map(&mut self.mem, core, hv, vcpu, gva, gpa, perms) {
                        // The mapping is installed; the stub op is done.
                        MemOutcome::Retry => MemOutcome::Done,
                        other => other,
                    }
                }
                StubOp::RingInit => {
                    let s2 = hv.s2.as_ref().expect("stub runs after boot");
                    let net = self.devices[vm].net.as_mut().expect("ring decl built a backend");
                    match net.queue.guest_init(&mut self.mem, &mut core.pmc, s2) {
                        Ok(()) => MemOutcome::Done,
                        Err(f) => stub_fault(f),
                    }
                }
                StubOp::RingPost(i) => {
                    let s2 = hv.s2.as_ref().expect("stub runs after boot");
                    let buf_len = self.devices[vm].net_buf_len;
                    let net = self.devices[vm].net.as_mut().expect("ring decl built a backend");
                    let layout = ring_layout(net.queue.size, buf_len);
                    let gpa = hv.ring_gpa(0) + layout.bufs_base + i as u64 * buf_len;
                    match net.queue.guest_post(&mut self.mem, &mut core.pmc, s2, gpa, buf_len, false)
                    {
                        Ok(()) => MemOutcome::Done,
                        Err(PostError::RingFull) => {
                            MemOutcome::Abort("boot stub overfilled the receive ring")
                        }
                        Err(PostError::Fault(f)) => stub_fault(f),
                    }
                }
                StubOp::PreTouch { gpa } => {
                    // The mapping comes from servicing the fault; a successful
                    // translation means the page is resident and there is
                    // nothing to write (a store here would clobber ring state).
                    let s2 = hv.s2.as_ref().expect("stub runs after boot");
                    match translate_gpa(&mut self.mem, &mut core.pmc, s2, gpa, Access::Write, 1) {
                        Ok(_) => MemOutcome::Done,
                        Err(f) => stub_fault(f),
                    }
                }
            }
        };
        match outcome {
            MemOutcome::Done => {
                self.threads[ti].stub_cursor += 1;
                if self.threads[ti].stub_cursor == self.threads[ti].stub_ops.len() {
                    self.hvs[vm].vcpus[vcpu].stub_pending = false;
                }
                Ok(())
            }
            other => self.apply_mem_outcome(ti, vm, vcpu, other),
        }
    }

    // -- I/O thread ---------------------------------------------------------

    fn io_step(&mut self, ti: usize, vm: usize) -> Result<()> {
        let core_idx = self.threads[ti].core;
        if self.blk_kicked[vm] {
            self.blk_kicked[vm] = false;
            let drained = {
                let hv = &self.hvs[vm];
                let s2 = hv.s2.as_ref().expect("kick after boot");
                let core = &mut self.cores[core_idx];
                let blk = self.devices[vm].blk.as_mut().expect("kick without a block device");
                blk.drain(&mut self.mem, &mut core.pmc, s2)
            };
            match drained {
                Ok(0) => return Ok(()),
                Ok(_) => {
                    let target = self.devices[vm].blk.as_ref().unwrap().queue.target_vcpu;
                    return self.notify_guest(ti, vm, target, BLK_IRQ);
                }
                Err(fault) => return self.io_fault(ti, vm, fault),
            }
        }
        let landed = {
            let hv = &self.hvs[vm];
            let s2 = hv.s2.as_ref().expect("poll after boot");
            let core = &mut self.cores[core_idx];
            let Some(net) = self.devices[vm].net.as_mut() else { return Ok(()) };
            net.poll(&mut self.mem, &mut core.pmc, s2, self.cycle)
        };
        match landed {
            Ok(0) => Ok(()),
            Ok(n) => {
                self.emit(core_idx, IO_THREAD_VCPUID, EventKind::BackendRxBatch, n as u64);
                let target = self.devices[vm].net.as_ref().unwrap().queue.target_vcpu;
                self.notify_guest(ti, vm, target, NET_IRQ)
            }
            Err(fault) => self.io_fault(ti, vm, fault),
        }
    }

    /// Post-batch notification: inject the device interrupt into the vCPU
    /// that owns the queue. One notification per batch, whatever its size.
    fn notify_guest(&mut self, ti: usize, vm: usize, target: usize, irq: u64) -> Result<()> {
        let core_idx = self.threads[ti].core;
        let kind = self.hvs[vm].inject_virq(
            &mut self.cores,
            core_idx,
            target,
            irq,
            IO_THREAD_VCPUID,
            self.cycle,
        )?;
        self.apply_inject(vm, target, IO_THREAD_VCPUID, kind);
        self.emit(core_idx, IO_THREAD_VCPUID, EventKind::IoNotifySent, irq);
        Ok(())
    }

    /// Backend fault while touching guest memory. Stage-2 misses are the
    /// hypervisor's own pages to map (no VM exit — the backend *is* the
    /// hypervisor process); memory-check violations kill the process.
    fn io_fault(&mut self, ti: usize, vm: usize, fault: FaultKind) -> Result<()> {
        let core_idx = self.threads[ti].core;
        match fault {
            FaultKind::S2PageFault { gpa } => {
                let outcome = self.hvs[vm].handle_s2pf(&mut self.mem, gpa).map_err(|e| {
                    Error::HypervisorPanic { vmid: self.hvs[vm].vmid, msg: e.to_string() }
                })?;
                match outcome {
                    S2pfOutcome::Mapped { .. } => {
                        self.emit(core_idx, IO_THREAD_VCPUID, EventKind::S2pfHandled, gpa);
                        Ok(())
                    }
                    _ => Err(Error::HypervisorPanic {
                        vmid: self.hvs[vm].vmid,
                        msg: format!("backend touched unmappable guest address {gpa:#x}"),
                    }),
                }
            }
            FaultKind::PmcViolation { hpa } => self.pmc_kill(ti, vm, None, hpa),
            FaultKind::S1PageFault { .. } => {
                unreachable!("backend accesses are guest-physical")
            }
        }
    }

    // -- destruction --------------------------------------------------------

    fn abort_vcpu(&mut self, ti: usize, vm: usize, vcpu: usize, msg: &str) -> Result<()> {
        let core_idx = self.threads[ti].core;
        let pc = if self.cores[core_idx].mode == PrivilegeMode::V {
            self.cores[core_idx].pc
        } else {
            self.cores[core_idx].regs.hu_vpc
        };
        self.emit(core_idx, vcpu as u64, EventKind::GuestAborted, pc);
        let v = &mut self.hvs[vm].vcpus[vcpu];
        v.aborted = Some(msg.to_string());
        self.cores[core_idx].mode = PrivilegeMode::Hu;
        self.threads[ti].phase = Phase::Halted;
        Ok(())
    }

    /// Memory-check violation: the hardware traps to the kernel, which
    /// destroys the whole process. `vcpu` is `Some` when the access came
    /// from guest code (the trap is a non-delegatable VM exit first).
    fn pmc_kill(&mut self, ti: usize, vm: usize, vcpu: Option<usize>, hpa: u64) -> Result<()> {
        let core_idx = self.threads[ti].core;
        if let Some(vcpu) = vcpu {
            route_trap(&mut self.cores[core_idx], ExitReason::PmcFault, hpa);
            self.emit(
                core_idx,
                vcpu as u64,
                EventKind::VmExit { reason: ExitReason::PmcFault },
                hpa,
            );
        }
        self.emit(core_idx, HS_CONTEXT_VCPUID, EventKind::HsPmcKill, hpa);
        self.cp.on_pmc_fault(&mut self.cores, core_idx, hpa, self.cycle);
        for t in &mut self.threads {
            if t.vm == vm {
                t.phase = Phase::Halted;
            }
        }
        Ok(())
    }

    /// Hypervisor-panic policy: the kernel destroys the panicking process;
    /// everything else keeps running.
    fn kill_vm(&mut self, vm: usize, msg: &str) -> Result<()> {
        let pid = self.hvs[vm].pid;
        let vmid = self.hvs[vm].vmid;
        let core = self.threads.iter().find(|t| t.vm == vm).map(|t| t.core).unwrap_or(0);
        self.emit(core, HS_CONTEXT_VCPUID, EventKind::VmKilled, vmid);
        let _ = msg; // recorded by the control plane's audit entry
        self.cp.kill_process(&mut self.cores, pid, self.cycle)?;
        for t in &mut self.threads {
            if t.vm == vm {
                t.phase = Phase::Halted;
            }
        }
        Ok(())
    }
}

fn stub_fault(fault: FaultKind) -> MemOutcome {
    match fault {
        // Stub writes raise store-flavored exits; the handler maps and the
        // op re-runs.
        FaultKind::S2PageFault { gpa } => {
            MemOutcome::Raise { reason: ExitReason::S2pfStore, info: gpa }
        }
        FaultKind::PmcViolation { hpa } => MemOutcome::PmcKill { hpa },
        FaultKind::S1PageFault { .. } => {
            unreachable!("stub accesses are guest-physical")
        }
    }
}

/// Installs one stage-1 mapping from inside the guest.
///
/// The table walk allocates up to two fresh node pages; a stage-2 fault in
/// the middle of the walk would retry the walk with a *different* fresh
/// allocation and drain the pool. So the candidate pool pages are backed
/// first — the only faults this function raises come from that pre-touch,
/// after which the walk itself runs fault-free and the allocation cursor
/// advances exactly once per node actually installed.
fn guest_s1_map(
    mem: &mut PhysMemory,
    core: &mut CoreState,
    hv: &mut Hypervisor,
    vcpu: usize,
    gva: u64,
    gpa: u64,
    perms: Perms,
) -> MemOutcome {
    let s2 = hv.s2.as_ref().expect("guest runs only after boot");
    let v = &mut hv.vcpus[vcpu];
    let Some(s1) = v.s1.as_mut() else {
        return MemOutcome::Abort("stage-1 fault before the paging stub ran");
    };
    for candidate in [v.s1_node_next, v.s1_node_next + PAGE_SIZE] {
        if candidate + PAGE_SIZE > crate::hv::RING_GPA_BASE {
            break;
        }
        match translate_gpa(mem, &mut core.pmc, s2, candidate, Access::Write, 1) {
            Ok(hpa) => mem.write(hpa, &[0], Provenance::VDerived),
            Err(FaultKind::S2PageFault { gpa }) => {
                return MemOutcome::Raise { reason: ExitReason::S2pfStore, info: gpa }
            }
            Err(FaultKind::PmcViolation { hpa }) => return MemOutcome::PmcKill { hpa },
            Err(FaultKind::S1PageFault { .. }) => {
                unreachable!("pool pre-touch is guest-physical")
            }
        }
    }
    let next = &mut v.s1_node_next;
    let mut alloc = || {
        if *next + PAGE_SIZE > crate::hv::RING_GPA_BASE {
            return None;
        }
        let p = *next;
        *next += PAGE_SIZE;
        Some(p)
    };
    match s1_map(mem, &mut core.pmc, s2, s1, gva, gpa, perms, &mut alloc) {
        Ok(()) => MemOutcome::Retry,
        Err(S1MapError::Fault(FaultKind::S2PageFault { gpa })) => {
            MemOutcome::Raise { reason: ExitReason::S2pfStore, info: gpa }
        }
        Err(S1MapError::Fault(FaultKind::PmcViolation { hpa })) => MemOutcome::PmcKill { hpa },
        Err(S1MapError::Fault(FaultKind::S1PageFault { .. })) => {
            MemOutcome::Abort("stage-1 walk faulted while mapping")
        }
        Err(S1MapError::OutOfPages) => MemOutcome::Abort("stage-1 node pool exhausted"),
        Err(S1MapError::Config) => MemOutcome::Abort("malformed stage-1 mapping"),
    }
}

/// The boot-time work a vCPU's stub performs, in order: stage-1 setup, ring
/// setup, buffer pre-touch.
fn build_stub_ops(
    hv: &Hypervisor,
    vcpu: usize,
    ring_decl: &Option<(usize, crate::guest::RxRingDecl)>,
) -> Vec<StubOp> {
    let mut ops = Vec::new();
    match &hv.programs[vcpu].s1_mode {
        S1Mode::Off => {}
        S1Mode::Identity => ops.push(StubOp::S1Init),
        S1Mode::Explicit(maps) => {
            ops.push(StubOp::S1Init);
            for &(gva, gpa, perms) in maps {
                ops.push(StubOp::S1MapEntry { gva, gpa, perms });
            }
        }
    }
    if let Some((owner, decl)) = ring_decl {
        if *owner == vcpu {
            ops.push(StubOp::RingInit);
            for i in 0..decl.queue_size as u16 {
                ops.push(StubOp::RingPost(i));
            }
            let layout = ring_layout(decl.queue_size as u16, decl.buf_len);
            // Touch the structure pages too: the tail of the used-length
            // array is first written by the backend at completion time, and
            // mapping it here keeps host-side faults out of the steady state.
            let base = hv.ring_gpa(0);
            let mut gpa = base;
            while gpa < base + layout.total_bytes {
                ops.push(StubOp::PreTouch { gpa });
                gpa += PAGE_SIZE;
            }
        }
    }
    ops
}
