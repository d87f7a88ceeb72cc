// SPDX-License-Identifier: Apache-2.0

//! The user-level hypervisor.
//!
//! One ordinary process per VM: it obtains pinned memory from the kernel once,
//! then serves every VM exit itself in HU mode — demand-mapping guest pages
//! with a bump allocator, emulating device registers, and injecting virtual
//! interrupts either by writing a vCPU's state area (when the target is not
//! executing guest code) or by sending a hardware user-level IPI (when it
//! is). After boot, the kernel's only appearances are the scheduling tick and
//! a possible mid-run memory grant.
//!
//! The exit dispatch loop itself lives in the simulator ([`crate::sim`]),
//! which owns the cores and memory; this module holds the hypervisor's own
//! state and the per-exit operations the loop calls.

use std::collections::BTreeMap;

use crate::cp::RegionGrant;
use crate::error::{Error, Result};
use crate::guest::{LoopFrame, Program, NUM_REGS};
use crate::hw::{
    csr_access, exec_husuipi, CoreState, DvReg, HusuipiOutcome, PrivilegeMode, RegAccess,
};
use crate::mem::{PhysMemory, Provenance, PAGE_OFFSET_MASK, PAGE_SIZE};
use crate::mmu::{s2_map, Perms, S1Table, S2Table};

/// Guest-physical pool the in-guest paging stub draws stage-1 node pages
/// from (grows upward, must stay below [`RING_GPA_BASE`]).
pub const S1_NODE_GPA_BASE: u64 = 0x40_0000;

// Hypercall numbers the guests use.
/// No-op hypercall; returns 0.
pub const HC_NULL: u64 = 0;
/// Send a virtual IPI; argument is the target VCPUID.
pub const HC_VIPI: u64 = 1;
/// Stop this vCPU.
pub const HC_HALT: u64 = 2;
/// Open the measured window (see the bench module).
pub const HC_BENCH_BEGIN: u64 = 3;
/// Close the measured window.
pub const HC_BENCH_END: u64 = 4;

// Virtual interrupt numbers. 0..8 are the IPI class (acknowledged without a
// device handler); 8.. are device interrupts.
pub const IPI_IRQ: u64 = 1;
pub const CONSOLE_IRQ: u64 = 8;
pub const NET_IRQ: u64 = 9;
pub const BLK_IRQ: u64 = 10;
/// First device-class interrupt number.
pub const FIRST_DEVICE_IRQ: u64 = 8;

/// HU exit-handler entry token written to `hu_ehb`. Any nonzero value works
/// (the simulator dispatches handlers structurally); this one is recognizable
/// in dumps.
pub const EHB_TOKEN: u64 = 0x1000_0000_0000;

/// `hu_vcpuid` of the hypervisor's I/O (backend) thread, which never enters
/// the guest; distinct from every real VCPUID.
pub const IO_THREAD_VCPUID: u64 = 0xFFFF_FFFF;

/// Byte size of one device MMIO window.
pub const WINDOW_SIZE: u64 = 0x1000;

/// Guest-physical base for shared I/O rings (one stride per declared ring).
pub const RING_GPA_BASE: u64 = 0x50_0000;
pub const RING_GPA_STRIDE: u64 = 0x10_0000;

/// Paravirtual devices a VM can be configured with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DeviceKind {
    Console,
    Net,
    Blk,
}

impl DeviceKind {
    pub fn name(self) -> &'static str {
        match self {
            DeviceKind::Console => "console",
            DeviceKind::Net => "net",
            DeviceKind::Blk => "blk",
        }
    }

    pub fn irq(self) -> u64 {
        match self {
            DeviceKind::Console => CONSOLE_IRQ,
            DeviceKind::Net => NET_IRQ,
            DeviceKind::Blk => BLK_IRQ,
        }
    }
}

/// Default device window placement: a high-GPA aperture well clear of RAM.
pub fn default_mmio_layout(devices: &[DeviceKind]) -> BTreeMap<DeviceKind, u64> {
    devices
        .iter()
        .map(|&d| {
            let slot = match d {
                DeviceKind::Console => 0,
                DeviceKind::Net => 1,
                DeviceKind::Blk => 2,
            };
            (d, 0x20_0000_0000 + slot * WINDOW_SIZE)
        })
        .collect()
}

/// Static configuration of one VM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmConfig {
    pub vcpu_count: usize,
    pub memory_bytes: u64,
    pub devices: Vec<DeviceKind>,
    /// Device → window base GPA (each window is [`WINDOW_SIZE`] bytes).
    pub mmio_layout: BTreeMap<DeviceKind, u64>,
}

impl VmConfig {
    pub fn new(vcpu_count: usize, memory_bytes: u64, devices: Vec<DeviceKind>) -> VmConfig {
        let mmio_layout = default_mmio_layout(&devices);
        VmConfig { vcpu_count, memory_bytes, devices, mmio_layout }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vcpu_count == 0 {
            return Err(Error::config("a VM needs at least one vCPU"));
        }
        if self.memory_bytes == 0 || self.memory_bytes & PAGE_OFFSET_MASK != 0 {
            return Err(Error::config("memory size must be a nonzero page multiple"));
        }
        let mut windows: Vec<(u64, DeviceKind)> = Vec::new();
        for &d in &self.devices {
            let base = *self
                .mmio_layout
                .get(&d)
                .ok_or_else(|| Error::config(format!("device {} has no MMIO window", d.name())))?;
            if base < self.memory_bytes {
                return Err(Error::config(format!(
                    "device {} window {base:#x} overlaps guest RAM",
                    d.name()
                )));
            }
            windows.push((base, d));
        }
        windows.sort_unstable();
        for pair in windows.windows(2) {
            let ((a, da), (b, db)) = (pair[0], pair[1]);
            if a + WINDOW_SIZE > b {
                return Err(Error::config(format!(
                    "MMIO windows of {} and {} overlap",
                    da.name(),
                    db.name()
                )));
            }
        }
        Ok(())
    }
}

/// Pending virtual interrupts staged for a vCPU, with per-interrupt sender
/// tags. This is the "state area" the injection protocol writes before it
/// considers kicking the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateArea {
    pub pending: u64,
    pub sender: [u64; 64],
}

impl Default for StateArea {
    fn default() -> Self {
        StateArea { pending: 0, sender: [0; 64] }
    }
}

impl StateArea {
    pub fn post(&mut self, irq: u64, sender: u64) {
        debug_assert!(irq < 64);
        self.pending |= 1 << irq;
        self.sender[irq as usize] = sender;
    }

    pub fn is_empty(&self) -> bool {
        self.pending == 0
    }

    /// Takes every staged bit (delivery into `hu_vitr`).
    pub fn drain(&mut self) -> u64 {
        std::mem::take(&mut self.pending)
    }
}

/// Architectural and bookkeeping state of one virtual CPU.
#[derive(Debug, Clone)]
pub struct VcpuState {
    pub vcpuid: u64,
    pub regs: [u64; NUM_REGS],
    /// Flat instruction index into this vCPU's program.
    pub pc: u64,
    pub loop_stack: Vec<LoopFrame>,
    /// False while parked on WFI waiting for an interrupt.
    pub runnable: bool,
    pub halted: bool,
    /// Set on a fatal guest error (bad MMIO, straddling access, OOM).
    pub aborted: Option<String>,
    pub state_area: StateArea,
    /// Interrupts delivered into the guest (via `hu_vitr` at entry) and not
    /// yet acknowledged.
    pub guest_pending: u64,
    /// The boot stub still has setup work (stage-1 tables, rings, warmup).
    pub stub_pending: bool,
    /// Guest-built stage-1 table, if this vCPU's program asked for paging.
    pub s1: Option<S1Table>,
    /// Next guest-physical page the in-guest paging stub will use for a
    /// stage-1 table node.
    pub s1_node_next: u64,
    /// Injection cycle per irq, for ack-latency accounting.
    pub inject_cycle: [u64; 64],
    pub acks: u64,
    pub ack_latency_sum: u64,
}

impl VcpuState {
    pub fn new(vcpuid: u64) -> VcpuState {
        VcpuState {
            vcpuid,
            regs: [0; NUM_REGS],
            pc: 0,
            loop_stack: Vec::new(),
            runnable: true,
            halted: false,
            aborted: None,
            state_area: StateArea::default(),
            guest_pending: 0,
            stub_pending: true,
            s1: None,
            s1_node_next: 0,
            inject_cycle: [0; 64],
            acks: 0,
            ack_latency_sum: 0,
        }
    }

    pub fn record_ack(&mut self, irq: u64, cycle: u64) {
        self.acks += 1;
        self.ack_latency_sum += cycle.saturating_sub(self.inject_cycle[irq as usize]);
    }
}

/// Bump allocator over the process's pinned grants: hands each physical page
/// out at most once, in grant order.
#[derive(Debug, Clone, Default)]
pub struct GpaAllocator {
    grants: Vec<RegionGrant>,
    /// Bytes consumed across the concatenation of all grants.
    offset: u64,
}

impl GpaAllocator {
    pub fn push_grant(&mut self, grant: RegionGrant) {
        self.grants.push(grant);
    }

    pub fn capacity(&self) -> u64 {
        self.grants.iter().map(|g| g.size).sum()
    }

    pub fn consumed(&self) -> u64 {
        self.offset
    }

    pub fn alloc_page(&mut self) -> Option<u64> {
        let mut remaining = self.offset;
        for g in &self.grants {
            if remaining < g.size {
                self.offset += PAGE_SIZE;
                return Some(g.hpa_base + remaining);
            }
            remaining -= g.size;
        }
        None
    }
}

/// How a stage-2 fault was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum S2pfOutcome {
    /// A fresh page was (or already had been) mapped; restart the access.
    Mapped { gpa_page: u64, hpa: u64 },
    /// The GPA is a device window: redirect to MMIO emulation.
    Mmio { device: DeviceKind, offset: u64 },
    /// The allocator is empty; the caller should obtain another grant and
    /// retry.
    NeedGrant,
    /// The GPA is neither RAM nor a registered window.
    BadAddress,
}

/// How an injection reached its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectKind {
    /// Target was parked on WFI: state area written, vCPU woken.
    Posted,
    /// Target was executing guest code: state area written, then a hardware
    /// user-level IPI forced a UIPI exit on its core.
    Uipi,
    /// Target was in the hypervisor (or not resident): state area written;
    /// the pre-entry drain will deliver it.
    StateArea,
}

/// What a hypercall asks the dispatcher to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HcAction {
    Null,
    Vipi { target_vcpuid: u64 },
    Halt,
    BenchBegin,
    BenchEnd,
    Unknown { nr: u64 },
}

pub fn classify_hypercall(nr: u64, arg: u64) -> HcAction {
    match nr {
        HC_NULL => HcAction::Null,
        HC_VIPI => HcAction::Vipi { target_vcpuid: arg },
        HC_HALT => HcAction::Halt,
        HC_BENCH_BEGIN => HcAction::BenchBegin,
        HC_BENCH_END => HcAction::BenchEnd,
        _ => HcAction::Unknown { nr },
    }
}

/// One VM's hypervisor process.
#[derive(Debug)]
pub struct Hypervisor {
    pub pid: u64,
    pub vmid: u64,
    pub config: VmConfig,
    /// One program per vCPU.
    pub programs: Vec<Program>,
    pub vcpus: Vec<VcpuState>,
    /// Core each vCPU's vthread is pinned to.
    pub core_of_vcpu: Vec<usize>,
    pub alloc: GpaAllocator,
    pub s2: Option<S2Table>,
    booted: bool,
}

impl Hypervisor {
    pub fn new(
        pid: u64,
        config: VmConfig,
        programs: Vec<Program>,
        core_of_vcpu: Vec<usize>,
    ) -> Result<Hypervisor> {
        config.validate()?;
        if programs.len() != config.vcpu_count || core_of_vcpu.len() != config.vcpu_count {
            return Err(Error::config(format!(
                "vcpu_count {} needs as many programs and core pins",
                config.vcpu_count
            )));
        }
        let vcpus = (0..config.vcpu_count as u64).map(VcpuState::new).collect();
        Ok(Hypervisor {
            pid,
            vmid: 0,
            config,
            programs,
            vcpus,
            core_of_vcpu,
            alloc: GpaAllocator::default(),
            s2: None,
            booted: false,
        })
    }

    pub fn booted(&self) -> bool {
        self.booted
    }

    /// Boots the VM: requires the extension already enabled on this process's
    /// cores and at least one grant. Registers the exit handler and the
    /// VCPUIDs, builds the stage-2 root, and copies the programs' data blobs
    /// into guest RAM. The caller enters vCPU 0 afterwards via HURET.
    pub fn vm_boot(
        &mut self,
        cores: &mut [CoreState],
        mem: &mut PhysMemory,
        vmid: u64,
        first_grant: RegionGrant,
    ) -> Result<()> {
        if self.booted {
            return Err(Error::config("vm_boot called twice"));
        }
        for (vcpu_idx, &core_idx) in self.core_of_vcpu.iter().enumerate() {
            let core = &mut cores[core_idx];
            if core.regs.h_enable == 0 {
                return Err(Error::config(format!(
                    "boot before ioctl_enable_dv: core {core_idx} has the extension off"
                )));
            }
            // The process runs in HU from the kernel's return onward; program
            // the exit handler and vCPU identity through the HU-mode path.
            core.mode = PrivilegeMode::Hu;
            csr_access(core, DvReg::HuEhb, RegAccess::Write(EHB_TOKEN))
                .map_err(|_| Error::config("hu_ehb write rejected"))?;
            csr_access(
                core,
                DvReg::HuVcpuid,
                RegAccess::Write(self.vcpus[vcpu_idx].vcpuid),
            )
            .map_err(|_| Error::config("hu_vcpuid write rejected"))?;
        }
        self.vmid = vmid;
        self.alloc.push_grant(first_grant);
        let root = self
            .alloc
            .alloc_page()
            .ok_or_else(|| Error::config("boot without a usable memory grant"))?;
        mem.zero_page(root);
        self.s2 = Some(S2Table::new(root));

        // Data blobs: demand-map their pages now (host-side writes through the
        // process's own mapping of the grant).
        let blobs: Vec<(u64, Vec<u8>)> =
            self.programs.iter().flat_map(|p| p.data.iter().cloned()).collect();
        for (gpa, bytes) in blobs {
            if gpa + bytes.len() as u64 > self.config.memory_bytes {
                return Err(Error::config(format!(
                    "data blob at {gpa:#x}+{} exceeds guest memory",
                    bytes.len()
                )));
            }
            for (i, b) in bytes.iter().enumerate() {
                let gpa = gpa + i as u64;
                let hpa = self.ensure_backed(mem, gpa & !PAGE_OFFSET_MASK)?;
                mem.write(hpa + (gpa & PAGE_OFFSET_MASK), &[*b], Provenance::Host);
            }
        }
        self.booted = true;
        Ok(())
    }

    /// Maps (or finds) backing for one RAM page, host-side. Boot-time only;
    /// runtime faults go through [`Hypervisor::handle_s2pf`].
    fn ensure_backed(&mut self, mem: &mut PhysMemory, gpa_page: u64) -> Result<u64> {
        let s2 = self.s2.as_mut().expect("booting");
        if let Some(&(hpa_pn, _)) = s2.entries.get(&(gpa_page / PAGE_SIZE)) {
            return Ok(hpa_pn * PAGE_SIZE);
        }
        let hpa = self
            .alloc
            .alloc_page()
            .ok_or_else(|| Error::config("grant exhausted during boot"))?;
        let alloc = &mut self.alloc;
        s2_map(mem, s2, gpa_page, hpa, Perms::RWX, &mut || alloc.alloc_page())?;
        Ok(hpa)
    }

    /// Window lookup: which device, and at what offset, does `gpa` hit?
    pub fn window_of(&self, gpa: u64) -> Option<(DeviceKind, u64)> {
        for (&dev, &base) in &self.config.mmio_layout {
            if gpa >= base && gpa < base + WINDOW_SIZE {
                return Some((dev, gpa - base));
            }
        }
        None
    }

    /// Stage-2 fault handler: MMIO windows redirect to emulation; RAM gets the
    /// next free page from the bump allocator (idempotent if the page raced in
    /// already); anything else is a bad address.
    pub fn handle_s2pf(&mut self, mem: &mut PhysMemory, gpa: u64) -> Result<S2pfOutcome> {
        if let Some((device, offset)) = self.window_of(gpa) {
            return Ok(S2pfOutcome::Mmio { device, offset });
        }
        if gpa >= self.config.memory_bytes {
            return Ok(S2pfOutcome::BadAddress);
        }
        let gpa_page = gpa & !PAGE_OFFSET_MASK;
        let s2 = self.s2.as_mut().expect("handle_s2pf before boot");
        if let Some(&(hpa_pn, _)) = s2.entries.get(&(gpa_page / PAGE_SIZE)) {
            return Ok(S2pfOutcome::Mapped { gpa_page, hpa: hpa_pn * PAGE_SIZE });
        }
        let Some(hpa) = self.alloc.alloc_page() else {
            return Ok(S2pfOutcome::NeedGrant);
        };
        let alloc = &mut self.alloc;
        s2_map(mem, s2, gpa_page, hpa, Perms::RWX, &mut || alloc.alloc_page())?;
        Ok(S2pfOutcome::Mapped { gpa_page, hpa })
    }

    /// Injects virtual interrupt `irq` into a vCPU, following the two-case
    /// protocol: the state area is written *first*, unconditionally; then the
    /// target is kicked according to where it is right now.
    ///
    /// * parked on WFI → wake it (`Posted`); it drains the area on resume;
    /// * observed executing guest code on its core → hardware user-level IPI
    ///   (`Uipi`), forcing a UIPI exit whose handler drains the area;
    /// * otherwise (in the hypervisor mid-exit, or preempted) → nothing more
    ///   (`StateArea`); the mandatory drain before the next guest entry
    ///   delivers it. This re-check closes the race where an IPI would land
    ///   while the target is outside guest code.
    pub fn inject_virq(
        &mut self,
        cores: &mut [CoreState],
        sender_core: usize,
        target_vcpu: usize,
        irq: u64,
        sender_vcpuid: u64,
        cycle: u64,
    ) -> Result<InjectKind> {
        let target_vcpuid = self.vcpus[target_vcpu].vcpuid;
        self.vcpus[target_vcpu].state_area.post(irq, sender_vcpuid);
        self.vcpus[target_vcpu].inject_cycle[irq as usize] = cycle;

        if !self.vcpus[target_vcpu].runnable {
            self.vcpus[target_vcpu].runnable = true;
            return Ok(InjectKind::Posted);
        }
        let target_core = &cores[self.core_of_vcpu[target_vcpu]];
        let resident_here = target_core.mode == PrivilegeMode::V
            && target_core.regs.h_enable != 0
            && target_core.regs.h_vmid == self.vmid
            && target_core.regs.hu_vcpuid == target_vcpuid;
        if resident_here {
            match exec_husuipi(cores, sender_core, target_vcpuid) {
                HusuipiOutcome::Delivered { .. } | HusuipiOutcome::Latched { .. } => {
                    Ok(InjectKind::Uipi)
                }
                HusuipiOutcome::Fault(trap) => Err(Error::HypervisorPanic {
                    vmid: self.vmid,
                    msg: format!("user-level IPI to own vCPU {target_vcpuid} faulted: {trap:?}"),
                }),
            }
        } else {
            Ok(InjectKind::StateArea)
        }
    }

    /// Moves every staged interrupt of `vcpu_idx` into its core's `hu_vitr`.
    /// Ran by the exit handler immediately before each HURET, making delivery
    /// immune to where the interrupt raced in.
    pub fn drain_state_area(&mut self, core: &mut CoreState, vcpu_idx: usize) -> Result<u64> {
        let bits = self.vcpus[vcpu_idx].state_area.drain();
        if bits != 0 {
            let old = csr_access(core, DvReg::HuVitr, RegAccess::Read)
                .map_err(|_| Error::config("hu_vitr read rejected"))?;
            csr_access(core, DvReg::HuVitr, RegAccess::Write(old | bits))
                .map_err(|_| Error::config("hu_vitr write rejected"))?;
        }
        Ok(bits)
    }

    /// vCPU index for a VCPUID, if it names one.
    pub fn vcpu_by_id(&self, vcpuid: u64) -> Option<usize> {
        self.vcpus.iter().position(|v| v.vcpuid == vcpuid)
    }

    /// Ring placement for the `i`-th declared receive ring.
    pub fn ring_gpa(&self, ring_idx: usize) -> u64 {
        RING_GPA_BASE + ring_idx as u64 * RING_GPA_STRIDE
    }
}
