// SPDX-License-Identifier: Apache-2.0

//! Per-core delegated-virtualization hardware state.
//!
//! Each simulated core carries a privilege mode, the delegated-virtualization
//! register file, a physical-memory-check bank, and a pending user-level IPI
//! latch. Three privilege levels exist:
//!
//! * `HS` — the host kernel. Sees every register.
//! * `HU` — host user space, where the user-level hypervisor runs. Sees the
//!   `hu_`-prefixed registers, but only while the kernel has switched the
//!   extension on for this core (`h_enable`).
//! * `V`  — guest execution. Sees no extension register at all; traps out of
//!   it are VM exits.
//!
//! Exits whose reason is *delegatable* can be routed straight to the HU-mode
//! handler registered in `hu_ehb`, skipping the kernel; which ones actually
//! are is controlled by the HS-owned `h_deleg` bitmask. Timer interrupts are
//! never delegatable — their `h_deleg` bit is hardwired zero — so the kernel
//! always regains control on its scheduling tick.

use crate::error::{Error, Result};
use crate::mmu::{PmcBank, PmcRegion, NUM_PMC_REGIONS};

/// Privilege level a core executes in. Exactly one at any simulation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrivilegeMode {
    /// Host kernel.
    Hs,
    /// Host user (hypervisor).
    Hu,
    /// Guest.
    V,
}

impl PrivilegeMode {
    pub fn name(self) -> &'static str {
        match self {
            PrivilegeMode::Hs => "HS",
            PrivilegeMode::Hu => "HU",
            PrivilegeMode::V => "V",
        }
    }
}

/// Why a trap fired. Encodings are the declaration order, starting at 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExitReason {
    S2pfLoad,
    S2pfStore,
    S2pfFetch,
    SensitiveWfi,
    Hypercall,
    Uipi,
    Timer,
    PmcFault,
    IllegalHuAccess,
}

impl ExitReason {
    pub const ALL: [ExitReason; 9] = [
        ExitReason::S2pfLoad,
        ExitReason::S2pfStore,
        ExitReason::S2pfFetch,
        ExitReason::SensitiveWfi,
        ExitReason::Hypercall,
        ExitReason::Uipi,
        ExitReason::Timer,
        ExitReason::PmcFault,
        ExitReason::IllegalHuAccess,
    ];

    pub fn code(self) -> u64 {
        Self::ALL.iter().position(|&r| r == self).unwrap() as u64
    }

    pub fn from_code(code: u64) -> Option<ExitReason> {
        Self::ALL.get(code as usize).copied()
    }

    /// Stage-2 faults, sensitive-instruction (WFI) traps, hypercalls and
    /// user-level IPIs may be routed to the HU handler. Timer, memory-check
    /// and illegal-access traps always land in the kernel.
    pub fn is_delegatable(self) -> bool {
        !matches!(self, ExitReason::Timer | ExitReason::PmcFault | ExitReason::IllegalHuAccess)
    }

    pub fn name(self) -> &'static str {
        match self {
            ExitReason::S2pfLoad => "S2PF_LOAD",
            ExitReason::S2pfStore => "S2PF_STORE",
            ExitReason::S2pfFetch => "S2PF_FETCH",
            ExitReason::SensitiveWfi => "SENSITIVE_WFI",
            ExitReason::Hypercall => "HYPERCALL",
            ExitReason::Uipi => "UIPI",
            ExitReason::Timer => "TIMER",
            ExitReason::PmcFault => "PMC_FAULT",
            ExitReason::IllegalHuAccess => "ILLEGAL_HU_ACCESS",
        }
    }
}

/// Delegation mask bit for one reason.
pub fn deleg_bit(reason: ExitReason) -> u64 {
    1 << reason.code()
}

/// Mask of every reason that *can* be delegated.
pub const DELEGATABLE_MASK: u64 = (1 << 0) | (1 << 1) | (1 << 2) | (1 << 3) | (1 << 4) | (1 << 5);

/// The extension's register names.
///
/// `hu_`-prefixed registers are reachable from HU (and HS); `h_`-prefixed
/// ones are HS-only. None are reachable from V.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DvReg {
    /// Exit-reason code of the last trap routed to HU.
    HuEr,
    /// Exit auxiliary word (faulting GPA, hypercall number, sender VCPUID).
    HuEinfo,
    /// Pending virtual-interrupt bits staged for injection at the next
    /// guest entry. Cleared by HURET after delivery.
    HuVitr,
    /// Guest program counter to resume at.
    HuVpc,
    /// HU-mode exit-handler entry address; zero means "no handler".
    HuEhb,
    /// VCPUID bound to this core (user-level IPI addressing).
    HuVcpuid,
    /// Extension on/off for this core.
    HEnable,
    /// Delegation bitmask over [`ExitReason`] codes.
    HDeleg,
    /// VMID bound to this core.
    HVmid,
}

impl DvReg {
    pub const ALL: [DvReg; 9] = [
        DvReg::HuEr,
        DvReg::HuEinfo,
        DvReg::HuVitr,
        DvReg::HuVpc,
        DvReg::HuEhb,
        DvReg::HuVcpuid,
        DvReg::HEnable,
        DvReg::HDeleg,
        DvReg::HVmid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DvReg::HuEr => "hu_er",
            DvReg::HuEinfo => "hu_einfo",
            DvReg::HuVitr => "hu_vitr",
            DvReg::HuVpc => "hu_vpc",
            DvReg::HuEhb => "hu_ehb",
            DvReg::HuVcpuid => "hu_vcpuid",
            DvReg::HEnable => "h_enable",
            DvReg::HDeleg => "h_deleg",
            DvReg::HVmid => "h_vmid",
        }
    }

    /// `h_`-prefixed registers may only be touched by the kernel.
    pub fn is_hs_only(self) -> bool {
        matches!(self, DvReg::HEnable | DvReg::HDeleg | DvReg::HVmid)
    }
}

/// The per-core register file. All fields are 64-bit words; nothing is
/// shared between cores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DvRegisterFile {
    pub hu_er: u64,
    pub hu_einfo: u64,
    pub hu_vitr: u64,
    pub hu_vpc: u64,
    pub hu_ehb: u64,
    pub hu_vcpuid: u64,
    pub h_enable: u64,
    pub h_deleg: u64,
    pub h_vmid: u64,
}

impl DvRegisterFile {
    pub fn read(&self, reg: DvReg) -> u64 {
        match reg {
            DvReg::HuEr => self.hu_er,
            DvReg::HuEinfo => self.hu_einfo,
            DvReg::HuVitr => self.hu_vitr,
            DvReg::HuVpc => self.hu_vpc,
            DvReg::HuEhb => self.hu_ehb,
            DvReg::HuVcpuid => self.hu_vcpuid,
            DvReg::HEnable => self.h_enable,
            DvReg::HDeleg => self.h_deleg,
            DvReg::HVmid => self.h_vmid,
        }
    }

    /// Raw register write. The timer bit of `h_deleg` is hardwired zero: it
    /// is masked on every write path, including snapshot restores.
    pub fn write(&mut self, reg: DvReg, value: u64) {
        match reg {
            DvReg::HuEr => self.hu_er = value,
            DvReg::HuEinfo => self.hu_einfo = value,
            DvReg::HuVitr => self.hu_vitr = value,
            DvReg::HuVpc => self.hu_vpc = value,
            DvReg::HuEhb => self.hu_ehb = value,
            DvReg::HuVcpuid => self.hu_vcpuid = value,
            DvReg::HEnable => self.h_enable = value,
            DvReg::HDeleg => self.h_deleg = value & !deleg_bit(ExitReason::Timer),
            DvReg::HVmid => self.h_vmid = value,
        }
    }
}

/// Full simulated state of one core.
#[derive(Debug, Clone)]
pub struct CoreState {
    pub id: usize,
    pub mode: PrivilegeMode,
    /// Program counter of whatever is executing; for a resident guest this is
    /// the flat instruction index of its program.
    pub pc: u64,
    pub regs: DvRegisterFile,
    pub pmc: PmcBank,
    /// A user-level IPI that arrived while the bound vCPU was not in V mode;
    /// it fires as a VM exit at the next guest entry. Holds the sender's
    /// VCPUID.
    pub pending_uipi: Option<u64>,
}

impl CoreState {
    pub fn new(id: usize) -> Self {
        CoreState {
            id,
            mode: PrivilegeMode::Hs,
            pc: 0,
            regs: DvRegisterFile::default(),
            pmc: PmcBank::new(),
            pending_uipi: None,
        }
    }
}

/// Where a trap is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Destination {
    /// Delegated: the HU-mode handler registered in `hu_ehb`.
    HuHandler,
    /// The host kernel.
    HsHandler,
    /// The guest's own fault handler (stage-1 faults only; never produced by
    /// [`route_trap`], which models exits *out of* the guest).
    GuestHandler,
}

/// One routed trap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrapEvent {
    pub core: usize,
    pub reason: ExitReason,
    pub info: u64,
    pub destination: Destination,
}

/// Register access request for [`csr_access`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegAccess {
    Read,
    Write(u64),
}

/// Performs one register access from the core's current mode.
///
/// Returns the current (read) or previous (write) value on success. Illegal
/// accesses — `h_` registers from below HS, any extension register from V,
/// or `hu_` registers while the extension is off — take an
/// `ILLEGAL_HU_ACCESS` trap to the kernel, transitioning the core.
pub fn csr_access(
    core: &mut CoreState,
    reg: DvReg,
    access: RegAccess,
) -> std::result::Result<u64, TrapEvent> {
    let legal = match core.mode {
        PrivilegeMode::Hs => true,
        PrivilegeMode::Hu => !reg.is_hs_only() && core.regs.h_enable != 0,
        PrivilegeMode::V => false,
    };
    if !legal {
        return Err(route_trap(core, ExitReason::IllegalHuAccess, reg as u64));
    }
    let old = core.regs.read(reg);
    if let RegAccess::Write(value) = access {
        core.regs.write(reg, value);
    }
    Ok(old)
}

/// Routes a trap raised on `core`, applying the mode transition and, for
/// delegated traps, the `hu_er`/`hu_einfo`/`hu_vpc` hand-off.
///
/// Routing rules:
/// * Traps raised outside V mode go to the kernel. A trap taken while
///   already in HU does not overwrite `hu_er`/`hu_einfo` — nested HU traps
///   are forbidden and escalate.
/// * A VM exit goes to the HU handler iff its reason is delegatable, the
///   extension is on, the reason's `h_deleg` bit is set, *and* a handler is
///   registered (`hu_ehb` nonzero — a delegated trap with no handler
///   escalates rather than jumping to address zero).
pub fn route_trap(core: &mut CoreState, reason: ExitReason, info: u64) -> TrapEvent {
    let delegated = core.mode == PrivilegeMode::V
        && reason.is_delegatable()
        && core.regs.h_enable != 0
        && core.regs.h_deleg & deleg_bit(reason) != 0
        && core.regs.hu_ehb != 0;
    if delegated {
        core.regs.hu_er = reason.code();
        core.regs.hu_einfo = info;
        core.regs.hu_vpc = core.pc;
        core.mode = PrivilegeMode::Hu;
        core.pc = core.regs.hu_ehb;
        TrapEvent { core: core.id, reason, info, destination: Destination::HuHandler }
    } else {
        core.mode = PrivilegeMode::Hs;
        TrapEvent { core: core.id, reason, info, destination: Destination::HsHandler }
    }
}

/// Effects of a guest entry via HURET.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HuretOutcome {
    /// Virtual-interrupt bits that became pending in the guest (the `hu_vitr`
    /// contents, which the instruction clears).
    pub delivered_vitr: u64,
    /// A user-level IPI latched while the vCPU was away fires as a VM exit
    /// at this entry, before the guest executes anything.
    pub uipi_exit: Option<TrapEvent>,
}

/// Enters the guest: mode ← V, program counter ← `hu_vpc`, staged virtual
/// interrupts delivered. Legal from HU (with the extension on) and from HS;
/// from V it is an illegal instruction.
pub fn exec_huret(core: &mut CoreState) -> std::result::Result<HuretOutcome, TrapEvent> {
    let legal = match core.mode {
        PrivilegeMode::Hs | PrivilegeMode::Hu => core.regs.h_enable != 0,
        PrivilegeMode::V => false,
    };
    if !legal {
        return Err(route_trap(core, ExitReason::IllegalHuAccess, 0));
    }
    core.mode = PrivilegeMode::V;
    core.pc = core.regs.hu_vpc;
    let delivered = core.regs.hu_vitr;
    core.regs.hu_vitr = 0;
    let uipi_exit =
        core.pending_uipi.take().map(|sender| route_trap(core, ExitReason::Uipi, sender));
    Ok(HuretOutcome { delivered_vitr: delivered, uipi_exit })
}

/// Result of a user-level IPI send.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HusuipiOutcome {
    /// Target core was in V mode: a UIPI VM exit fired on it immediately.
    Delivered { target: usize, trap: TrapEvent },
    /// Target core matched but was not in V mode: the IPI is latched and
    /// fires at its next guest entry.
    Latched { target: usize },
    /// No core matched (unknown VCPUID, VMID mismatch, or illegal sender
    /// context): the *sender* faults into the kernel.
    Fault(TrapEvent),
}

/// Sends a user-level IPI to the vCPU `target_vcpuid` of the sender's own VM.
///
/// The hardware scans for a core whose `h_vmid` equals the sender's and whose
/// `hu_vcpuid` equals the operand. Addressing is confined by construction:
/// a core bound to another VM can never match, and a miss faults the sender,
/// so a malicious or buggy operand cannot touch anyone else's guest.
pub fn exec_husuipi(
    cores: &mut [CoreState],
    sender: usize,
    target_vcpuid: u64,
) -> HusuipiOutcome {
    let (sender_mode, sender_enabled, sender_vmid, sender_vcpuid) = {
        let s = &cores[sender];
        (s.mode, s.regs.h_enable != 0, s.regs.h_vmid, s.regs.hu_vcpuid)
    };
    if sender_mode == PrivilegeMode::V || !sender_enabled || sender_vmid == 0 {
        return HusuipiOutcome::Fault(route_trap(
            &mut cores[sender],
            ExitReason::IllegalHuAccess,
            target_vcpuid,
        ));
    }
    let target = cores.iter().position(|c| {
        c.regs.h_enable != 0 && c.regs.h_vmid == sender_vmid && c.regs.hu_vcpuid == target_vcpuid
    });
    match target {
        None => HusuipiOutcome::Fault(route_trap(
            &mut cores[sender],
            ExitReason::IllegalHuAccess,
            target_vcpuid,
        )),
        Some(t) if cores[t].mode == PrivilegeMode::V => {
            let trap = route_trap(&mut cores[t], ExitReason::Uipi, sender_vcpuid);
            HusuipiOutcome::Delivered { target: t, trap }
        }
        Some(t) => {
            cores[t].pending_uipi = Some(sender_vcpuid);
            HusuipiOutcome::Latched { target: t }
        }
    }
}

/// Everything the kernel must save and restore when it context-switches a
/// core between processes: the register file, the memory-check bank, and the
/// pending-IPI latch (a latched IPI must follow its vCPU, not leak to the
/// next tenant of the core).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DvSnapshot {
    pub regs: DvRegisterFile,
    pub pmc: [PmcRegion; NUM_PMC_REGIONS],
    pub pending_uipi: Option<u64>,
}

/// Captures the core's extension state. Only the kernel context-switches, so
/// callers are in HS by construction.
pub fn save_dv(core: &CoreState) -> DvSnapshot {
    DvSnapshot {
        regs: core.regs,
        pmc: *core.pmc.slots(),
        pending_uipi: core.pending_uipi,
    }
}

/// Installs a snapshot on `target`.
///
/// Rejected if the snapshot's VMID is concurrently live on another core for a
/// *different* process: VMIDs are unique per process, and two processes must
/// never share one. Multiple cores of one process legitimately share a VMID
/// (multi-vCPU VMs), so `core_owners` maps each core to the PID it currently
/// serves (`None` for idle cores).
pub fn restore_dv(
    cores: &mut [CoreState],
    target: usize,
    snap: &DvSnapshot,
    owner_pid: u64,
    core_owners: &[Option<u64>],
) -> Result<()> {
    if snap.regs.h_vmid != 0 {
        for (i, c) in cores.iter().enumerate() {
            if i != target
                && c.regs.h_vmid == snap.regs.h_vmid
                && c.regs.h_enable != 0
                && core_owners[i] != Some(owner_pid)
            {
                return Err(Error::VmidConflict { vmid: snap.regs.h_vmid, core: i });
            }
        }
    }
    let core = &mut cores[target];
    for reg in DvReg::ALL {
        core.regs.write(reg, snap.regs.read(reg));
    }
    for (i, region) in snap.pmc.iter().enumerate() {
        // Restores come from the kernel.
        crate::mmu::pmc_program(&mut core.pmc, PrivilegeMode::Hs, i, *region)
            .expect("snapshot regions were valid when saved");
    }
    core.pending_uipi = snap.pending_uipi;
    Ok(())
}

/// One row of the register access-control table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessRow {
    pub register: &'static str,
    pub mode: &'static str,
    pub read: bool,
    pub write: bool,
    /// Whether legality additionally requires `h_enable` to be on.
    pub requires_enable: bool,
}

/// Generates the access-control table by probing [`csr_access`] on scratch
/// cores, so the exported documentation can never drift from the behavior.
pub fn access_table() -> Vec<AccessRow> {
    let mut rows = Vec::new();
    for reg in DvReg::ALL {
        for mode in [PrivilegeMode::Hs, PrivilegeMode::Hu, PrivilegeMode::V] {
            let probe = |enabled: bool, access: RegAccess| -> bool {
                let mut core = CoreState::new(0);
                core.regs.h_enable = enabled as u64;
                core.mode = mode;
                csr_access(&mut core, reg, access).is_ok()
            };
            let read_on = probe(true, RegAccess::Read);
            let write_on = probe(true, RegAccess::Write(1));
            let read_off = probe(false, RegAccess::Read);
            rows.push(AccessRow {
                register: reg.name(),
                mode: mode.name(),
                read: read_on,
                write: write_on,
                requires_enable: read_on && !read_off,
            });
        }
    }
    rows
}

/// Renders the access table as CSV (`register,mode,read,write,requires_enable`).
pub fn access_table_csv() -> String {
    let mut out = String::from("register,mode,read,write,requires_enable\n");
    for row in access_table() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.register, row.mode, row.read, row.write, row.requires_enable
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enabled_core(mode: PrivilegeMode) -> CoreState {
        let mut core = CoreState::new(0);
        core.regs.h_enable = 1;
        core.regs.h_deleg = DELEGATABLE_MASK;
        core.regs.hu_ehb = 0xE4B0;
        core.mode = mode;
        core
    }

    #[test]
    fn hu_register_access_gated_on_enable() {
        let mut core = CoreState::new(0);
        core.mode = PrivilegeMode::Hs;
        csr_access(&mut core, DvReg::HEnable, RegAccess::Write(1)).unwrap();
        core.mode = PrivilegeMode::Hu;
        assert!(csr_access(&mut core, DvReg::HuEr, RegAccess::Read).is_ok());

        let mut off = CoreState::new(1);
        off.mode = PrivilegeMode::Hu;
        let trap = csr_access(&mut off, DvReg::HuEr, RegAccess::Read).unwrap_err();
        assert_eq!(trap.reason, ExitReason::IllegalHuAccess);
        assert_eq!(trap.destination, Destination::HsHandler);
        assert_eq!(off.mode, PrivilegeMode::Hs);
    }

    #[test]
    fn hs_only_registers_trap_from_hu_even_when_enabled() {
        let mut core = enabled_core(PrivilegeMode::Hu);
        let trap = csr_access(&mut core, DvReg::HDeleg, RegAccess::Write(0)).unwrap_err();
        assert_eq!(trap.reason, ExitReason::IllegalHuAccess);
    }

    #[test]
    fn timer_deleg_bit_is_write_ignored() {
        let mut core = enabled_core(PrivilegeMode::Hs);
        csr_access(&mut core, DvReg::HDeleg, RegAccess::Write(u64::MAX)).unwrap();
        let mask = csr_access(&mut core, DvReg::HDeleg, RegAccess::Read).unwrap();
        assert_eq!(mask & deleg_bit(ExitReason::Timer), 0);
        assert_eq!(mask & deleg_bit(ExitReason::Hypercall), deleg_bit(ExitReason::Hypercall));
    }

    #[test]
    fn delegated_exit_fills_hu_registers_and_jumps_to_handler() {
        let mut core = enabled_core(PrivilegeMode::V);
        core.pc = 0x42;
        let trap = route_trap(&mut core, ExitReason::S2pfLoad, 0x4000);
        assert_eq!(trap.destination, Destination::HuHandler);
        assert_eq!(core.mode, PrivilegeMode::Hu);
        assert_eq!(core.regs.hu_er, ExitReason::S2pfLoad.code());
        assert_eq!(core.regs.hu_einfo, 0x4000);
        assert_eq!(core.regs.hu_vpc, 0x42);
        assert_eq!(core.pc, 0xE4B0);
    }

    #[test]
    fn timer_routes_to_kernel_regardless_of_mask() {
        let mut core = enabled_core(PrivilegeMode::V);
        core.regs.write(DvReg::HDeleg, u64::MAX); // timer bit masked anyway
        let trap = route_trap(&mut core, ExitReason::Timer, 0);
        assert_eq!(trap.destination, Destination::HsHandler);
        assert_eq!(core.mode, PrivilegeMode::Hs);
    }

    #[test]
    fn undelegated_or_handlerless_exits_fall_to_kernel() {
        let mut core = enabled_core(PrivilegeMode::V);
        core.regs.h_deleg = 0;
        assert_eq!(
            route_trap(&mut core, ExitReason::S2pfLoad, 0).destination,
            Destination::HsHandler
        );

        let mut no_handler = enabled_core(PrivilegeMode::V);
        no_handler.regs.hu_ehb = 0;
        assert_eq!(
            route_trap(&mut no_handler, ExitReason::Hypercall, 0).destination,
            Destination::HsHandler
        );
    }

    #[test]
    fn nested_hu_trap_escalates_without_clobbering_exit_registers() {
        let mut core = enabled_core(PrivilegeMode::V);
        route_trap(&mut core, ExitReason::Hypercall, 7);
        assert_eq!(core.mode, PrivilegeMode::Hu);
        let trap = route_trap(&mut core, ExitReason::S2pfLoad, 0x9999);
        assert_eq!(trap.destination, Destination::HsHandler);
        assert_eq!(core.regs.hu_er, ExitReason::Hypercall.code());
        assert_eq!(core.regs.hu_einfo, 7);
    }

    #[test]
    fn huret_restores_saved_pc_and_delivers_staged_interrupts() {
        let mut core = enabled_core(PrivilegeMode::V);
        core.pc = 0x1234;
        route_trap(&mut core, ExitReason::SensitiveWfi, 0);
        core.regs.hu_vitr = 0b1010;
        let out = exec_huret(&mut core).unwrap();
        assert_eq!(core.mode, PrivilegeMode::V);
        assert_eq!(core.pc, 0x1234);
        assert_eq!(out.delivered_vitr, 0b1010);
        assert_eq!(core.regs.hu_vitr, 0);
        assert!(out.uipi_exit.is_none());
    }

    #[test]
    fn huret_from_v_is_illegal() {
        let mut core = enabled_core(PrivilegeMode::V);
        let trap = exec_huret(&mut core).unwrap_err();
        assert_eq!(trap.reason, ExitReason::IllegalHuAccess);
        assert_eq!(core.mode, PrivilegeMode::Hs);
    }

    fn vm_core(id: usize, vmid: u64, vcpuid: u64, mode: PrivilegeMode) -> CoreState {
        let mut c = CoreState::new(id);
        c.regs.h_enable = 1;
        c.regs.h_deleg = DELEGATABLE_MASK;
        c.regs.hu_ehb = 0xE4B0;
        c.regs.h_vmid = vmid;
        c.regs.hu_vcpuid = vcpuid;
        c.mode = mode;
        c
    }

    #[test]
    fn uipi_to_resident_target_fires_exit_with_sender_id() {
        let mut cores =
            vec![vm_core(0, 7, 0, PrivilegeMode::Hu), vm_core(1, 7, 1, PrivilegeMode::V)];
        match exec_husuipi(&mut cores, 0, 1) {
            HusuipiOutcome::Delivered { target, trap } => {
                assert_eq!(target, 1);
                assert_eq!(trap.reason, ExitReason::Uipi);
                assert_eq!(trap.info, 0, "info carries the sender VCPUID");
                assert_eq!(cores[1].regs.hu_einfo, 0);
                assert_eq!(cores[1].mode, PrivilegeMode::Hu);
            }
            other => panic!("expected delivery, got {other:?}"),
        }
    }

    #[test]
    fn uipi_to_absent_target_latches_and_fires_at_next_entry() {
        let mut cores =
            vec![vm_core(0, 7, 0, PrivilegeMode::Hu), vm_core(1, 7, 1, PrivilegeMode::Hu)];
        match exec_husuipi(&mut cores, 0, 1) {
            HusuipiOutcome::Latched { target } => assert_eq!(target, 1),
            other => panic!("expected latch, got {other:?}"),
        }
        cores[1].regs.hu_vpc = 0x88;
        let out = exec_huret(&mut cores[1]).unwrap();
        let exit = out.uipi_exit.expect("latched IPI fires at entry");
        assert_eq!(exit.reason, ExitReason::Uipi);
        assert_eq!(cores[1].mode, PrivilegeMode::Hu, "exit taken before any guest step");
        assert_eq!(cores[1].regs.hu_vpc, 0x88, "entry pc re-captured for the handler");
    }

    #[test]
    fn uipi_vmid_mismatch_faults_the_sender() {
        let mut cores =
            vec![vm_core(0, 7, 0, PrivilegeMode::Hu), vm_core(1, 8, 1, PrivilegeMode::V)];
        match exec_husuipi(&mut cores, 0, 1) {
            HusuipiOutcome::Fault(trap) => {
                assert_eq!(trap.core, 0);
                assert_eq!(trap.reason, ExitReason::IllegalHuAccess);
                assert_eq!(cores[0].mode, PrivilegeMode::Hs);
                assert_eq!(cores[1].mode, PrivilegeMode::V, "victim untouched");
            }
            other => panic!("expected sender fault, got {other:?}"),
        }
    }

    #[test]
    fn save_restore_roundtrip_is_identity() {
        let mut cores = vec![vm_core(0, 7, 3, PrivilegeMode::Hs), CoreState::new(1)];
        cores[0].regs.hu_vitr = 0b100;
        cores[0].pending_uipi = Some(2);
        let snap = save_dv(&cores[0]);
        let owners = [Some(10), None];
        let mut scratch = cores.clone();
        scratch[0] = CoreState::new(0);
        scratch[0].mode = PrivilegeMode::Hs;
        restore_dv(&mut scratch, 0, &snap, 10, &owners).unwrap();
        assert_eq!(save_dv(&scratch[0]), snap);
    }

    #[test]
    fn restore_rejects_vmid_held_by_another_process() {
        let mut cores = vec![vm_core(0, 7, 0, PrivilegeMode::V), CoreState::new(1)];
        cores[1].mode = PrivilegeMode::Hs;
        let snap = DvSnapshot {
            regs: {
                let mut r = DvRegisterFile::default();
                r.h_enable = 1;
                r.h_vmid = 7;
                r
            },
            pmc: [PmcRegion::default(); NUM_PMC_REGIONS],
            pending_uipi: None,
        };
        // Same VMID owned by a different process on core 0: rejected.
        let err = restore_dv(&mut cores, 1, &snap, 99, &[Some(10), None]).unwrap_err();
        assert!(matches!(err, Error::VmidConflict { vmid: 7, core: 0 }));
        // Same process (multi-vCPU VM): accepted.
        restore_dv(&mut cores, 1, &snap, 10, &[Some(10), None]).unwrap();
    }

    #[test]
    fn access_table_matches_expected_shape() {
        let rows = access_table();
        assert_eq!(rows.len(), DvReg::ALL.len() * 3);
        let find = |reg: &str, mode: &str| {
            *rows.iter().find(|r| r.register == reg && r.mode == mode).unwrap()
        };
        assert!(find("h_deleg", "HS").write);
        assert!(!find("h_deleg", "HU").read);
        assert!(find("hu_er", "HU").read && find("hu_er", "HU").requires_enable);
        assert!(!find("hu_er", "V").read);
        assert!(find("hu_er", "HS").read && !find("hu_er", "HS").requires_enable);
    }
}
