// SPDX-License-Identifier: Apache-2.0

//! Host-kernel control plane.
//!
//! The kernel's only involvement in delegated virtualization is here:
//! switching the extension on for a process, granting it pinned contiguous
//! physical memory (and programming the memory-check bank to match), killing
//! it if it ever trips the check, and context-switching the extension state
//! on its scheduling tick. Everything else — fault handling, device
//! emulation, interrupt injection — happens in user space without the code
//! in this module running at all, and the audit log proves it: every
//! control-plane action leaves one cycle-stamped record, so a benchmark can
//! assert the kernel stayed out of the hot path.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::hw::{deleg_bit, restore_dv, save_dv, CoreState, DvRegisterFile, DvSnapshot, ExitReason};
use crate::mem::PAGE_OFFSET_MASK;
use crate::mmu::{pmc_program, Perms, PmcBank, PmcRegion, NUM_PMC_REGIONS};
#[cfg(test)]
use crate::mem::PAGE_SIZE;

/// Fixed offset between a grant's host-virtual and host-physical base: the
/// simulated kernel maps every grant at `hpa | HVA_OFFSET` in the process.
pub const HVA_OFFSET: u64 = 0x7f00_0000_0000;

pub fn hpa_to_hva(hpa: u64) -> u64 {
    hpa | HVA_OFFSET
}

pub fn hva_to_hpa(hva: u64) -> u64 {
    hva & !HVA_OFFSET
}

/// One pinned, contiguous physical-memory grant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionGrant {
    pub hva_base: u64,
    pub hpa_base: u64,
    pub size: u64,
    /// Always true: granted memory is never swapped or migrated, so the HPAs
    /// a process installs in its stage-2 table stay valid.
    pub pinned: bool,
}

/// Kernel-side record of one process using the extension.
#[derive(Debug, Clone)]
pub struct ProcessRecord {
    pub pid: u64,
    pub dv_enabled: bool,
    pub vmid: u64,
    pub grants: Vec<RegionGrant>,
    pub alive: bool,
    pub deleg_mask: u64,
}

/// One audit-log entry. The control plane appends exactly one per operation;
/// a quiet log over an interval proves the kernel never intervened there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditRecord {
    pub cycle: u64,
    pub kind: AuditKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditKind {
    EnableDv { pid: u64, vmid: u64 },
    AllocRegion { pid: u64, hpa_base: u64, size: u64 },
    PmcKill { pid: u64, vmid: u64, core: usize, hpa: u64 },
    /// Voluntary destruction (hypervisor panic / abort policy).
    ProcessKill { pid: u64, vmid: u64 },
    TimerTick { core: usize, from_pid: Option<u64>, to_pid: Option<u64> },
}

/// The control plane itself: process table, physical-memory allocator,
/// per-core run queues, and the audit log.
#[derive(Debug)]
pub struct ControlPlane {
    ram_base: u64,
    ram_size: u64,
    vmid_limit: u64,
    pub processes: BTreeMap<u64, ProcessRecord>,
    /// Cores each process's threads are pinned to.
    cores_of: BTreeMap<u64, Vec<usize>>,
    /// Round-robin queue per core; the front entry is the resident process.
    run_queue: Vec<Vec<u64>>,
    /// Process whose extension state is installed on each core.
    resident: Vec<Option<u64>>,
    /// Extension state of processes that are assigned to a core but not
    /// resident on it.
    saved: BTreeMap<(u64, usize), DvSnapshot>,
    pub audit: Vec<AuditRecord>,
}

impl ControlPlane {
    /// `ram_base..ram_base+ram_size` is the host extent grants are carved
    /// from; `vmid_limit` is the largest VMID the hardware supports (VMID 0
    /// stays reserved for "no VM").
    pub fn new(ram_base: u64, ram_size: u64, num_cores: usize, vmid_limit: u64) -> ControlPlane {
        assert_eq!(ram_base & PAGE_OFFSET_MASK, 0);
        assert_eq!(ram_size & PAGE_OFFSET_MASK, 0);
        ControlPlane {
            ram_base,
            ram_size,
            vmid_limit,
            processes: BTreeMap::new(),
            cores_of: BTreeMap::new(),
            run_queue: vec![Vec::new(); num_cores],
            resident: vec![None; num_cores],
            saved: BTreeMap::new(),
            audit: Vec::new(),
        }
    }

    /// Registers a process and pins it to `cores`. Not yet enabled.
    pub fn register_process(&mut self, pid: u64, cores: &[usize]) -> Result<()> {
        if self.processes.contains_key(&pid) {
            return Err(Error::control_plane(format!("pid {pid} already registered")));
        }
        self.processes.insert(
            pid,
            ProcessRecord { pid, dv_enabled: false, vmid: 0, grants: Vec::new(), alive: true, deleg_mask: 0 },
        );
        for &c in cores {
            self.run_queue[c].push(pid);
        }
        self.cores_of.insert(pid, cores.to_vec());
        Ok(())
    }

    pub fn resident_pid(&self, core: usize) -> Option<u64> {
        self.resident[core]
    }

    pub fn vmid_of(&self, pid: u64) -> Option<u64> {
        self.processes.get(&pid).filter(|p| p.dv_enabled && p.alive).map(|p| p.vmid)
    }

    fn owners(&self) -> Vec<Option<u64>> {
        self.resident.clone()
    }

    fn alloc_vmid(&self) -> Option<u64> {
        let used: BTreeSet<u64> = self
            .processes
            .values()
            .filter(|p| p.alive && p.dv_enabled)
            .map(|p| p.vmid)
            .collect();
        (1..=self.vmid_limit).find(|v| !used.contains(v))
    }

    /// The `ioctl` that turns the extension on: allocates a fresh VMID and
    /// programs (or stages, for cores another process currently occupies)
    /// `h_enable`, `h_deleg` and `h_vmid` on every core of the process.
    pub fn ioctl_enable_dv(
        &mut self,
        cores: &mut [CoreState],
        pid: u64,
        deleg_mask: u64,
        cycle: u64,
    ) -> Result<u64> {
        let proc = self
            .processes
            .get(&pid)
            .ok_or_else(|| Error::control_plane(format!("enable: unknown pid {pid}")))?;
        if !proc.alive {
            return Err(Error::control_plane(format!("enable: pid {pid} is dead")));
        }
        if proc.dv_enabled {
            return Err(Error::control_plane(format!("enable: pid {pid} already enabled")));
        }
        let vmid = self
            .alloc_vmid()
            .ok_or_else(|| Error::control_plane("enable: VMID space exhausted"))?;

        let mut regs = DvRegisterFile::default();
        regs.h_enable = 1;
        regs.write(crate::hw::DvReg::HDeleg, deleg_mask); // timer bit masked by the register
        regs.h_vmid = vmid;
        let snap = DvSnapshot { regs, pmc: [PmcRegion::default(); NUM_PMC_REGIONS], pending_uipi: None };

        let assigned = self.cores_of.get(&pid).cloned().unwrap_or_default();
        for &c in &assigned {
            if self.resident[c].is_none() {
                let owners = self.owners();
                restore_dv(cores, c, &snap, pid, &owners)?;
                self.resident[c] = Some(pid);
            } else {
                self.saved.insert((pid, c), snap.clone());
            }
        }
        let proc = self.processes.get_mut(&pid).unwrap();
        proc.dv_enabled = true;
        proc.vmid = vmid;
        proc.deleg_mask = deleg_mask & !deleg_bit(ExitReason::Timer);
        self.audit.push(AuditRecord { cycle, kind: AuditKind::EnableDv { pid, vmid } });
        self.assert_grants_disjoint();
        Ok(vmid)
    }

    /// First-fit over the host extent, skipping every alive grant.
    fn first_fit(&self, size: u64) -> Option<u64> {
        let mut spans: Vec<(u64, u64)> = self
            .processes
            .values()
            .filter(|p| p.alive)
            .flat_map(|p| p.grants.iter().map(|g| (g.hpa_base, g.size)))
            .collect();
        spans.sort_unstable();
        let mut cursor = self.ram_base;
        for (base, len) in spans {
            if cursor + size <= base {
                return Some(cursor);
            }
            cursor = cursor.max(base + len);
        }
        if cursor + size <= self.ram_base + self.ram_size {
            Some(cursor)
        } else {
            None
        }
    }

    /// The `ioctl` that grants pinned contiguous physical memory. The new
    /// range is disjoint from every live grant, mapped into the process at
    /// [`hpa_to_hva`], and programmed into a fresh memory-check slot (V bit
    /// set) on each of the process's cores, so the guest may use it
    /// immediately — including mid-run when an earlier grant runs out.
    pub fn ioctl_alloc_region(
        &mut self,
        cores: &mut [CoreState],
        pid: u64,
        size: u64,
        cycle: u64,
    ) -> Result<RegionGrant> {
        let proc = self
            .processes
            .get(&pid)
            .ok_or_else(|| Error::control_plane(format!("alloc: unknown pid {pid}")))?;
        if !proc.alive || !proc.dv_enabled {
            return Err(Error::control_plane(format!("alloc: pid {pid} not an enabled process")));
        }
        if size == 0 || size & PAGE_OFFSET_MASK != 0 {
            return Err(Error::control_plane(format!("alloc: size {size:#x} not a page multiple")));
        }
        let slot = proc.grants.len();
        if slot >= NUM_PMC_REGIONS {
            return Err(Error::control_plane(format!(
                "alloc: pid {pid} exhausted all {NUM_PMC_REGIONS} memory-check slots"
            )));
        }
        let hpa_base = self
            .first_fit(size)
            .ok_or_else(|| Error::control_plane("alloc: no contiguous host memory left"))?;
        let grant = RegionGrant { hva_base: hpa_to_hva(hpa_base), hpa_base, size, pinned: true };
        let region =
            PmcRegion { base: hpa_base, size, perms: Perms::RWX, v_bit: true, valid: true };

        for &c in self.cores_of.get(&pid).map(|v| v.as_slice()).unwrap_or(&[]) {
            if self.resident[c] == Some(pid) {
                pmc_program(&mut cores[c].pmc, crate::hw::PrivilegeMode::Hs, slot, region)
                    .map_err(|e| Error::control_plane(e.to_string()))?;
            } else if let Some(snap) = self.saved.get_mut(&(pid, c)) {
                snap.pmc[slot] = region;
            }
        }
        self.processes.get_mut(&pid).unwrap().grants.push(grant);
        self.audit
            .push(AuditRecord { cycle, kind: AuditKind::AllocRegion { pid, hpa_base, size } });
        self.assert_grants_disjoint();
        Ok(grant)
    }

    /// Memory-check fault policy: destroy the offender. The process is marked
    /// dead on *all* its cores (a multi-vCPU VM dies whole), its extension
    /// state is scrubbed, its grants return to the allocator, and every other
    /// process is untouched.
    pub fn on_pmc_fault(
        &mut self,
        cores: &mut [CoreState],
        core_idx: usize,
        hpa: u64,
        cycle: u64,
    ) -> u64 {
        let pid = self.resident[core_idx]
            .expect("memory-check faults are guest-derived and only occur under a resident process");
        let vmid = {
            let proc = self.processes.get_mut(&pid).unwrap();
            assert!(proc.dv_enabled, "guest-derived access without the extension on");
            proc.alive = false;
            proc.vmid
        };
        self.scrub(cores, pid);
        self.audit.push(AuditRecord { cycle, kind: AuditKind::PmcKill { pid, vmid, core: core_idx, hpa } });
        self.assert_grants_disjoint();
        pid
    }

    /// Destroys `pid` outright — the hypervisor-panic policy. Same scrubbing
    /// and reclamation as a memory-check kill, minus the fault context; every
    /// other process is untouched.
    pub fn kill_process(&mut self, cores: &mut [CoreState], pid: u64, cycle: u64) -> Result<()> {
        let vmid = {
            let proc = self
                .processes
                .get_mut(&pid)
                .ok_or_else(|| Error::control_plane(format!("kill of unknown pid {pid}")))?;
            proc.alive = false;
            proc.vmid
        };
        self.scrub(cores, pid);
        self.audit.push(AuditRecord { cycle, kind: AuditKind::ProcessKill { pid, vmid } });
        self.assert_grants_disjoint();
        Ok(())
    }

    /// Clears a dead process off its cores and out of the scheduler. Its
    /// grants stay on the record but no longer count as occupied (the
    /// first-fit allocator skips dead owners).
    fn scrub(&mut self, cores: &mut [CoreState], pid: u64) {
        for &c in self.cores_of.get(&pid).map(|v| v.as_slice()).unwrap_or(&[]) {
            if self.resident[c] == Some(pid) {
                cores[c].regs = DvRegisterFile::default();
                cores[c].pmc = PmcBank::new();
                cores[c].pending_uipi = None;
                self.resident[c] = None;
            }
            self.saved.remove(&(pid, c));
        }
        for q in &mut self.run_queue {
            q.retain(|&p| p != pid);
        }
    }

    /// Scheduling tick: saves the resident process's extension state, rotates
    /// the core's run queue, restores the next process's state bit-exactly,
    /// and reports who runs now.
    pub fn on_timer(
        &mut self,
        cores: &mut [CoreState],
        core_idx: usize,
        cycle: u64,
    ) -> Result<Option<u64>> {
        let from = self.resident[core_idx];
        if self.run_queue[core_idx].is_empty() {
            self.audit.push(AuditRecord {
                cycle,
                kind: AuditKind::TimerTick { core: core_idx, from_pid: from, to_pid: from },
            });
            return Ok(from);
        }
        if let Some(cur) = from {
            self.saved.insert((cur, core_idx), save_dv(&cores[core_idx]));
        }
        if self.run_queue[core_idx].len() > 1 {
            self.run_queue[core_idx].rotate_left(1);
        }
        let next = self.run_queue[core_idx][0];
        let snap = self
            .saved
            .remove(&(next, core_idx))
            .expect("every queued process has saved or resident state");
        // Clear residency before the conflict check so the outgoing tenant's
        // registers (still physically present) are attributed to nobody.
        self.resident[core_idx] = None;
        let owners = self.owners();
        restore_dv(cores, core_idx, &snap, next, &owners)?;
        self.resident[core_idx] = Some(next);
        self.audit.push(AuditRecord {
            cycle,
            kind: AuditKind::TimerTick { core: core_idx, from_pid: from, to_pid: Some(next) },
        });
        Ok(Some(next))
    }

    /// Panics if any two alive grants overlap; ran after every operation.
    pub fn assert_grants_disjoint(&self) {
        let mut spans: Vec<(u64, u64, u64)> = self
            .processes
            .values()
            .filter(|p| p.alive)
            .flat_map(|p| p.grants.iter().map(move |g| (g.hpa_base, g.size, p.pid)))
            .collect();
        spans.sort_unstable();
        for w in spans.windows(2) {
            let (a_base, a_size, a_pid) = w[0];
            let (b_base, _, b_pid) = w[1];
            assert!(
                a_base + a_size <= b_base,
                "grants overlap: pid {a_pid} [{a_base:#x}+{a_size:#x}) vs pid {b_pid} at {b_base:#x}"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hw::{DvReg, PrivilegeMode, DELEGATABLE_MASK};

    fn setup(num_cores: usize) -> (ControlPlane, Vec<CoreState>) {
        let cp = ControlPlane::new(0x8000_0000, 0x4000_0000, num_cores, 255);
        let cores = (0..num_cores).map(CoreState::new).collect();
        (cp, cores)
    }

    #[test]
    fn first_enable_gets_vmid_one_and_masked_deleg() {
        let (mut cp, mut cores) = setup(1);
        cp.register_process(100, &[0]).unwrap();
        let vmid = cp.ioctl_enable_dv(&mut cores, 100, u64::MAX, 0).unwrap();
        assert_eq!(vmid, 1);
        assert_eq!(cores[0].regs.h_enable, 1);
        assert_eq!(cores[0].regs.h_vmid, 1);
        assert_eq!(cores[0].regs.h_deleg & deleg_bit(ExitReason::Timer), 0);
        assert_eq!(cores[0].regs.h_deleg, u64::MAX & !deleg_bit(ExitReason::Timer));
    }

    #[test]
    fn double_enable_rejected_two_processes_get_distinct_vmids() {
        let (mut cp, mut cores) = setup(2);
        cp.register_process(100, &[0]).unwrap();
        cp.register_process(200, &[1]).unwrap();
        let a = cp.ioctl_enable_dv(&mut cores, 100, DELEGATABLE_MASK, 0).unwrap();
        assert!(cp.ioctl_enable_dv(&mut cores, 100, DELEGATABLE_MASK, 1).is_err());
        let b = cp.ioctl_enable_dv(&mut cores, 200, DELEGATABLE_MASK, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn vmid_space_exhaustion_is_an_error() {
        let mut cp = ControlPlane::new(0x8000_0000, 0x100_0000, 4, 2);
        let mut cores: Vec<CoreState> = (0..4).map(CoreState::new).collect();
        for (pid, core) in [(1u64, 0usize), (2, 1), (3, 2)] {
            cp.register_process(pid, &[core]).unwrap();
        }
        cp.ioctl_enable_dv(&mut cores, 1, DELEGATABLE_MASK, 0).unwrap();
        cp.ioctl_enable_dv(&mut cores, 2, DELEGATABLE_MASK, 0).unwrap();
        assert!(cp.ioctl_enable_dv(&mut cores, 3, DELEGATABLE_MASK, 0).is_err());
    }

    #[test]
    fn grants_are_disjoint_first_fit_and_programmed_into_check_slots() {
        let (mut cp, mut cores) = setup(1);
        cp.register_process(100, &[0]).unwrap();
        cp.ioctl_enable_dv(&mut cores, 100, DELEGATABLE_MASK, 0).unwrap();
        let g1 = cp.ioctl_alloc_region(&mut cores, 100, 0x20_0000, 1).unwrap();
        let g2 = cp.ioctl_alloc_region(&mut cores, 100, 0x10_0000, 2).unwrap();
        assert_eq!(g1.hpa_base, 0x8000_0000);
        assert_eq!(g2.hpa_base, 0x8020_0000);
        assert_eq!(g1.hva_base, g1.hpa_base | HVA_OFFSET);
        assert!(g1.pinned && g2.pinned);
        let slot0 = cores[0].pmc.slot(0).unwrap();
        assert!(slot0.valid && slot0.v_bit && slot0.base == g1.hpa_base && slot0.size == g1.size);
        assert!(cores[0].pmc.slot(1).unwrap().valid);
        assert!(!cores[0].pmc.slot(2).unwrap().valid);
    }

    #[test]
    fn sixty_fifth_allocation_exhausts_check_slots() {
        let (mut cp, mut cores) = setup(1);
        cp.register_process(100, &[0]).unwrap();
        cp.ioctl_enable_dv(&mut cores, 100, DELEGATABLE_MASK, 0).unwrap();
        for _ in 0..NUM_PMC_REGIONS {
            cp.ioctl_alloc_region(&mut cores, 100, PAGE_SIZE, 0).unwrap();
        }
        let err = cp.ioctl_alloc_region(&mut cores, 100, PAGE_SIZE, 0).unwrap_err();
        assert!(err.to_string().contains("slots"), "{err}");
    }

    #[test]
    fn pmc_fault_kills_whole_process_and_reclaims_memory() {
        let (mut cp, mut cores) = setup(3);
        cp.register_process(100, &[0, 1]).unwrap();
        cp.register_process(200, &[2]).unwrap();
        cp.ioctl_enable_dv(&mut cores, 100, DELEGATABLE_MASK, 0).unwrap();
        cp.ioctl_enable_dv(&mut cores, 200, DELEGATABLE_MASK, 0).unwrap();
        let g = cp.ioctl_alloc_region(&mut cores, 100, 0x10_0000, 1).unwrap();
        let victim_grant = cp.ioctl_alloc_region(&mut cores, 200, 0x10_0000, 1).unwrap();

        let killed = cp.on_pmc_fault(&mut cores, 1, 0xdead_0000, 5);
        assert_eq!(killed, 100);
        // Both cores of the offender are scrubbed...
        for c in [0, 1] {
            assert_eq!(cores[c].regs.h_enable, 0);
            assert_eq!(cores[c].regs.h_vmid, 0);
            assert!(cores[c].pmc.free_slot() == Some(0));
            assert_eq!(cp.resident_pid(c), None);
        }
        // ...the victim is untouched...
        assert_eq!(cores[2].regs.h_enable, 1);
        assert_eq!(cp.resident_pid(2), Some(200));
        assert!(cp.processes[&200].alive);
        assert_eq!(cp.processes[&200].grants[0], victim_grant);
        // ...and the dead grants return to the allocator.
        cp.register_process(300, &[0]).unwrap();
        cp.ioctl_enable_dv(&mut cores, 300, DELEGATABLE_MASK, 6).unwrap();
        let reused = cp.ioctl_alloc_region(&mut cores, 300, 0x10_0000, 7).unwrap();
        assert_eq!(reused.hpa_base, g.hpa_base);
    }

    #[test]
    fn timer_round_robin_alternates_and_preserves_state() {
        let (mut cp, mut cores) = setup(1);
        cp.register_process(100, &[0]).unwrap();
        cp.register_process(200, &[0]).unwrap();
        let vmid_a = cp.ioctl_enable_dv(&mut cores, 100, DELEGATABLE_MASK, 0).unwrap();
        let vmid_b = cp.ioctl_enable_dv(&mut cores, 200, DELEGATABLE_MASK, 0).unwrap();
        assert_eq!(cp.resident_pid(0), Some(100));

        // Dirty A's live state so the roundtrip is observable.
        cores[0].regs.write(DvReg::HuVitr, 0b110);
        cores[0].regs.write(DvReg::HuVpc, 0x77);
        cores[0].pending_uipi = Some(1);
        let a_state = save_dv(&cores[0]);

        let mut seen = Vec::new();
        for tick in 0..4 {
            let next = cp.on_timer(&mut cores, 0, 10 * (tick + 1)).unwrap().unwrap();
            seen.push(next);
            let expect_vmid = if next == 100 { vmid_a } else { vmid_b };
            assert_eq!(cores[0].regs.h_vmid, expect_vmid);
        }
        assert_eq!(seen, vec![200, 100, 200, 100]);
        // After the last tick A is resident again, bit-exactly.
        assert_eq!(save_dv(&cores[0]), a_state);
        assert_eq!(cores[0].mode, PrivilegeMode::Hs);
    }

    #[test]
    fn timer_on_single_process_core_redispatches_same_pid() {
        let (mut cp, mut cores) = setup(1);
        cp.register_process(100, &[0]).unwrap();
        cp.ioctl_enable_dv(&mut cores, 100, DELEGATABLE_MASK, 0).unwrap();
        let before = save_dv(&cores[0]);
        assert_eq!(cp.on_timer(&mut cores, 0, 10).unwrap(), Some(100));
        assert_eq!(save_dv(&cores[0]), before);
    }

    #[test]
    fn audit_log_records_every_operation_with_cycle_stamps() {
        let (mut cp, mut cores) = setup(1);
        cp.register_process(100, &[0]).unwrap();
        cp.ioctl_enable_dv(&mut cores, 100, DELEGATABLE_MASK, 3).unwrap();
        cp.ioctl_alloc_region(&mut cores, 100, PAGE_SIZE, 4).unwrap();
        cp.on_timer(&mut cores, 0, 5).unwrap();
        cp.on_pmc_fault(&mut cores, 0, 0x123, 6);
        let kinds: Vec<u64> = cp.audit.iter().map(|r| r.cycle).collect();
        assert_eq!(kinds, vec![3, 4, 5, 6]);
        assert!(matches!(cp.audit[0].kind, AuditKind::EnableDv { pid: 100, vmid: 1 }));
        assert!(matches!(cp.audit[3].kind, AuditKind::PmcKill { pid: 100, hpa: 0x123, .. }));
    }
}
