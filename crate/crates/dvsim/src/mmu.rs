// SPDX-License-Identifier: Apache-2.0

//! Two-stage address translation with physical-memory checking.
//!
//! Guest virtual addresses go through a guest-owned stage-1 table (GVA→GPA),
//! then the hypervisor-owned stage-2 table (GPA→HPA). Both stages are 3-level
//! radix trees over a 39-bit input space with 4 KiB pages. Stage-1 node pages
//! live at GPAs and are themselves fetched through stage-2 translation;
//! stage-2 node pages live at HPAs and, like every HPA that stage-2
//! translation produces, must pass the per-core physical memory check (PMC)
//! before use.
//!
//! The PMC is a bank of up to [`NUM_PMC_REGIONS`] base+size range registers.
//! Regions whose V bit is set constrain only *guest-derived* accesses
//! (`v_derived = true`): anything whose address came out of stage-2
//! translation, including node-page fetches and I/O backend copies into guest
//! buffers. Host accesses through kernel or hypervisor mappings are never
//! checked.
//!
//! Nothing in this module takes a lock or caches translations: each walk reads
//! the live table bytes from [`PhysMemory`], so there is no TLB and no
//! shootdown protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hw::PrivilegeMode;
use crate::mem::{PhysMemory, Provenance, PAGE_OFFSET_MASK, PAGE_SIZE};

/// Number of physical-memory-check range registers per core.
pub const NUM_PMC_REGIONS: usize = 64;

/// Width of the translated input address space in bits (3 × 9 index bits
/// plus the 12-bit page offset).
pub const ADDR_SPACE_BITS: u32 = 39;

/// Highest address + 1 that either stage can translate.
pub const ADDR_SPACE_SIZE: u64 = 1 << ADDR_SPACE_BITS;

// Page-table entry encoding (both stages).
const PTE_VALID: u64 = 1 << 0;
const PTE_R: u64 = 1 << 1;
const PTE_W: u64 = 1 << 2;
const PTE_X: u64 = 1 << 3;
const PTE_U: u64 = 1 << 4;
const PTE_PPN_SHIFT: u64 = 10;

/// Kind of memory access being translated or checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    Write,
    Execute,
}

/// Page permissions: read/write/execute plus the stage-1 user bit.
///
/// The user bit round-trips through table entries but is not enforced; the
/// simulated guests run at a single privilege level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct Perms(u8);

impl Perms {
    pub const NONE: Perms = Perms(0);
    pub const R: Perms = Perms(1);
    pub const W: Perms = Perms(2);
    pub const X: Perms = Perms(4);
    pub const U: Perms = Perms(8);
    pub const RW: Perms = Perms(1 | 2);
    pub const RX: Perms = Perms(1 | 4);
    pub const RWX: Perms = Perms(1 | 2 | 4);

    pub fn union(self, other: Perms) -> Perms {
        Perms(self.0 | other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 & 0x7 == 0
    }

    pub fn allows(self, access: Access) -> bool {
        match access {
            Access::Read => self.0 & 1 != 0,
            Access::Write => self.0 & 2 != 0,
            Access::Execute => self.0 & 4 != 0,
        }
    }

    fn to_pte_bits(self) -> u64 {
        let mut bits = 0;
        if self.0 & 1 != 0 {
            bits |= PTE_R;
        }
        if self.0 & 2 != 0 {
            bits |= PTE_W;
        }
        if self.0 & 4 != 0 {
            bits |= PTE_X;
        }
        if self.0 & 8 != 0 {
            bits |= PTE_U;
        }
        bits
    }

    fn from_pte_bits(pte: u64) -> Perms {
        let mut p = 0;
        if pte & PTE_R != 0 {
            p |= 1;
        }
        if pte & PTE_W != 0 {
            p |= 2;
        }
        if pte & PTE_X != 0 {
            p |= 4;
        }
        if pte & PTE_U != 0 {
            p |= 8;
        }
        Perms(p)
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (bit, c) in [(1, 'r'), (2, 'w'), (4, 'x'), (8, 'u')] {
            if self.0 & bit != 0 {
                write!(f, "{c}")?;
            }
        }
        if self.0 & 0xf == 0 {
            write!(f, "-")?;
        }
        Ok(())
    }
}

impl FromStr for Perms {
    type Err = Error;

    fn from_str(s: &str) -> Result<Perms> {
        let mut p = Perms::NONE;
        for c in s.chars() {
            p = match c {
                'r' => p.union(Perms::R),
                'w' => p.union(Perms::W),
                'x' => p.union(Perms::X),
                'u' => p.union(Perms::U),
                '-' => p,
                _ => return Err(Error::config(format!("bad permission char `{c}` in `{s}`"))),
            };
        }
        Ok(p)
    }
}

/// Why a translation did not produce an HPA.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    /// Stage-1 miss or permission failure: delivered to the guest's own
    /// fault handler, never a VM exit.
    S1PageFault { gva: u64 },
    /// Stage-2 miss or permission failure: a delegatable VM exit carrying the
    /// faulting GPA.
    S2PageFault { gpa: u64 },
    /// The resulting HPA (leaf or table node) failed the physical memory
    /// check: always escalates to the host kernel.
    PmcViolation { hpa: u64 },
}

/// One physical-memory-check range register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PmcRegion {
    /// Page-aligned base HPA.
    pub base: u64,
    /// Region length in bytes; a page multiple, nonzero when valid.
    pub size: u64,
    pub perms: Perms,
    /// When set the region constrains only guest-derived accesses; regions
    /// with the bit clear are host-side and ignored for v-derived checks.
    pub v_bit: bool,
    pub valid: bool,
}

/// Rejections from [`pmc_program`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmcProgramError {
    /// Caller was not in HS mode; hardware raises an illegal-access trap.
    IllegalAccess,
    /// Slot index ≥ [`NUM_PMC_REGIONS`].
    BadIndex(usize),
    /// Base or size not page-aligned, or size zero.
    Unaligned,
}

impl fmt::Display for PmcProgramError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PmcProgramError::IllegalAccess => write!(f, "PMC registers are HS-mode only"),
            PmcProgramError::BadIndex(i) => {
                write!(f, "PMC slot {i} out of range (max {NUM_PMC_REGIONS})")
            }
            PmcProgramError::Unaligned => write!(f, "PMC region base/size must be page-aligned"),
        }
    }
}

/// The per-core bank of range registers.
#[derive(Debug, Clone)]
pub struct PmcBank {
    slots: [PmcRegion; NUM_PMC_REGIONS],
    /// When `Some`, every v-derived check appends `(hpa, len)` here; the
    /// coverage suite uses this to prove every guest-derived byte was checked.
    pub check_log: Option<Vec<(u64, u64)>>,
}

impl Default for PmcBank {
    fn default() -> Self {
        PmcBank { slots: [PmcRegion::default(); NUM_PMC_REGIONS], check_log: None }
    }
}

impl PmcBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn slot(&self, index: usize) -> Option<&PmcRegion> {
        self.slots.get(index)
    }

    pub fn slots(&self) -> &[PmcRegion; NUM_PMC_REGIONS] {
        &self.slots
    }

    /// Index of the first invalid slot, if any.
    pub fn free_slot(&self) -> Option<usize> {
        self.slots.iter().position(|r| !r.valid)
    }

    /// Invalidates every slot whose region lies inside `[base, base+size)`.
    pub fn clear_range(&mut self, base: u64, size: u64) {
        for slot in self.slots.iter_mut() {
            if slot.valid && slot.base >= base && slot.base + slot.size <= base + size {
                *slot = PmcRegion::default();
            }
        }
    }
}

/// Installs a range register. Only the host kernel (HS mode) may program the
/// bank; later checks observe the new slot immediately.
pub fn pmc_program(
    bank: &mut PmcBank,
    caller: PrivilegeMode,
    index: usize,
    region: PmcRegion,
) -> std::result::Result<(), PmcProgramError> {
    if caller != PrivilegeMode::Hs {
        return Err(PmcProgramError::IllegalAccess);
    }
    if index >= NUM_PMC_REGIONS {
        return Err(PmcProgramError::BadIndex(index));
    }
    if region.valid
        && (region.base & PAGE_OFFSET_MASK != 0
            || region.size == 0
            || region.size & PAGE_OFFSET_MASK != 0)
    {
        return Err(PmcProgramError::Unaligned);
    }
    bank.slots[index] = region;
    Ok(())
}

/// Checks one physical access against the bank.
///
/// Host accesses (`v_derived = false`) always pass: the kernel and the
/// hypervisor's own mappings are unrestricted. Guest-derived accesses pass
/// only if the whole `[hpa, hpa+len)` range lies inside a single valid region
/// with the V bit set and permissions covering `access`.
pub fn pmc_check(
    bank: &mut PmcBank,
    hpa: u64,
    len: u64,
    v_derived: bool,
    access: Access,
) -> std::result::Result<(), FaultKind> {
    debug_assert!(len > 0);
    if !v_derived {
        return Ok(());
    }
    if let Some(log) = &mut bank.check_log {
        log.push((hpa, len));
    }
    let covered = bank.slots.iter().any(|r| {
        r.valid
            && r.v_bit
            && r.perms.allows(access)
            && hpa >= r.base
            && len <= r.size
            && hpa - r.base <= r.size - len
    });
    if covered {
        Ok(())
    } else {
        Err(FaultKind::PmcViolation { hpa })
    }
}

/// Hypervisor-owned GPA→HPA table.
///
/// The radix nodes are real bytes in [`PhysMemory`]; `entries` mirrors the
/// installed leaves for dumps and test oracles, and `node_pages` records every
/// HPA page holding a table node (those fetches are PMC-checked too).
#[derive(Debug, Clone)]
pub struct S2Table {
    pub root: u64,
    pub entries: BTreeMap<u64, (u64, Perms)>,
    pub node_pages: BTreeSet<u64>,
}

impl S2Table {
    /// Creates a table rooted at `root_hpa`, which must be a zeroed page the
    /// caller allocated from its granted memory.
    pub fn new(root_hpa: u64) -> Self {
        debug_assert_eq!(root_hpa & PAGE_OFFSET_MASK, 0);
        let mut node_pages = BTreeSet::new();
        node_pages.insert(root_hpa);
        S2Table { root: root_hpa, entries: BTreeMap::new(), node_pages }
    }
}

/// Guest-owned GVA→GPA table. Node pages live at GPAs; fetching them goes
/// through stage-2 translation like any other guest access.
#[derive(Debug, Clone)]
pub struct S1Table {
    pub root_gpa: u64,
    pub entries: BTreeMap<u64, (u64, Perms)>,
}

impl S1Table {
    pub fn new(root_gpa: u64) -> Self {
        debug_assert_eq!(root_gpa & PAGE_OFFSET_MASK, 0);
        S1Table { root_gpa, entries: BTreeMap::new() }
    }
}

fn level_index(addr: u64, level: u32) -> u64 {
    (addr >> (12 + 9 * level)) & 0x1ff
}

fn pte_ppn(pte: u64) -> u64 {
    pte >> PTE_PPN_SHIFT
}

fn leaf_pte(hpa: u64, perms: Perms) -> u64 {
    ((hpa / PAGE_SIZE) << PTE_PPN_SHIFT) | perms.to_pte_bits() | PTE_VALID
}

fn node_pte(hpa: u64) -> u64 {
    ((hpa / PAGE_SIZE) << PTE_PPN_SHIFT) | PTE_VALID
}

fn is_leaf(pte: u64) -> bool {
    pte & (PTE_R | PTE_W | PTE_X) != 0
}

/// Installs `gpa → hpa` with `perms` in the stage-2 table.
///
/// The hypervisor edits its table through its own host mapping, so the walk
/// here is host-provenance and unchecked — deliberately: an illegal `hpa` is
/// accepted now and only caught by the PMC when guest traffic reaches it.
/// Missing intermediate nodes are allocated via `alloc_node`, which must
/// return zeroed, page-aligned HPAs from the hypervisor's granted memory.
pub fn s2_map(
    mem: &mut PhysMemory,
    s2: &mut S2Table,
    gpa: u64,
    hpa: u64,
    perms: Perms,
    alloc_node: &mut dyn FnMut() -> Option<u64>,
) -> Result<()> {
    if gpa & PAGE_OFFSET_MASK != 0 || hpa & PAGE_OFFSET_MASK != 0 {
        return Err(Error::config(format!("s2_map: unaligned gpa {gpa:#x} or hpa {hpa:#x}")));
    }
    if gpa >= ADDR_SPACE_SIZE {
        return Err(Error::config(format!("s2_map: gpa {gpa:#x} beyond {ADDR_SPACE_BITS}-bit space")));
    }
    if perms.is_empty() {
        return Err(Error::config("s2_map: empty permissions".to_string()));
    }
    let mut node = s2.root;
    for level in (1..=2u32).rev() {
        let pte_addr = node + level_index(gpa, level) * 8;
        let pte = mem.read_u64(pte_addr, Provenance::Host);
        if pte & PTE_VALID == 0 {
            let fresh = alloc_node()
                .ok_or_else(|| Error::control_plane("out of granted pages for stage-2 nodes"))?;
            mem.zero_page(fresh);
            mem.write_u64(pte_addr, node_pte(fresh), Provenance::Host);
            s2.node_pages.insert(fresh);
            node = fresh;
        } else {
            node = pte_ppn(pte) * PAGE_SIZE;
        }
    }
    let pte_addr = node + level_index(gpa, 0) * 8;
    let pte = mem.read_u64(pte_addr, Provenance::Host);
    if pte & PTE_VALID != 0 {
        let old = pte_ppn(pte) * PAGE_SIZE;
        if old != hpa {
            return Err(Error::RemapLive { gpa, old, new: hpa });
        }
        if Perms::from_pte_bits(pte) != perms {
            return Err(Error::config(format!(
                "s2_map: {gpa:#x} already mapped with different permissions; unmap first"
            )));
        }
        return Ok(()); // idempotent
    }
    mem.write_u64(pte_addr, leaf_pte(hpa, perms), Provenance::Host);
    s2.entries.insert(gpa / PAGE_SIZE, (hpa / PAGE_SIZE, perms));
    Ok(())
}

/// Removes a leaf mapping. Node pages are not reclaimed.
pub fn s2_unmap(mem: &mut PhysMemory, s2: &mut S2Table, gpa: u64) -> Result<()> {
    if gpa & PAGE_OFFSET_MASK != 0 {
        return Err(Error::config(format!("s2_unmap: unaligned gpa {gpa:#x}")));
    }
    let mut node = s2.root;
    for level in (1..=2u32).rev() {
        let pte = mem.read_u64(node + level_index(gpa, level) * 8, Provenance::Host);
        if pte & PTE_VALID == 0 {
            return Err(Error::config(format!("s2_unmap: {gpa:#x} not mapped")));
        }
        node = pte_ppn(pte) * PAGE_SIZE;
    }
    let pte_addr = node + level_index(gpa, 0) * 8;
    let pte = mem.read_u64(pte_addr, Provenance::Host);
    if pte & PTE_VALID == 0 {
        return Err(Error::config(format!("s2_unmap: {gpa:#x} not mapped")));
    }
    mem.write_u64(pte_addr, 0, Provenance::Host);
    s2.entries.remove(&(gpa / PAGE_SIZE));
    Ok(())
}

/// Translates a GPA to an HPA through the stage-2 table, checking every node
/// fetch and the final access against the PMC bank with `v_derived = true`.
///
/// `len` is the byte width of the access the caller is about to perform; it
/// participates in the final containment check.
pub fn translate_gpa(
    mem: &mut PhysMemory,
    bank: &mut PmcBank,
    s2: &S2Table,
    gpa: u64,
    access: Access,
    len: u64,
) -> std::result::Result<u64, FaultKind> {
    if gpa >= ADDR_SPACE_SIZE {
        return Err(FaultKind::S2PageFault { gpa });
    }
    let mut node = s2.root;
    for level in (0..=2u32).rev() {
        let pte_addr = node + level_index(gpa, level) * 8;
        pmc_check(bank, pte_addr, 8, true, Access::Read)?;
        let pte = mem.read_u64(pte_addr, Provenance::VDerived);
        if pte & PTE_VALID == 0 {
            return Err(FaultKind::S2PageFault { gpa });
        }
        if level == 0 {
            if !Perms::from_pte_bits(pte).allows(access) {
                return Err(FaultKind::S2PageFault { gpa });
            }
            let hpa = pte_ppn(pte) * PAGE_SIZE + (gpa & PAGE_OFFSET_MASK);
            pmc_check(bank, hpa, len.max(1), true, access)?;
            return Ok(hpa);
        }
        if is_leaf(pte) {
            // Huge pages are not modeled; a leaf above level 0 is malformed.
            return Err(FaultKind::S2PageFault { gpa });
        }
        node = pte_ppn(pte) * PAGE_SIZE;
    }
    unreachable!("loop always returns at level 0");
}

/// Full two-stage translation of a guest virtual address.
///
/// With `s1 = None` the guest runs with stage-1 off and `gva` is the GPA.
/// With a table, every stage-1 node fetch is itself a guest access: its GPA
/// goes through [`translate_gpa`] (so stage-1 walk memory is stage-2
/// translated *and* PMC-checked) before the node bytes are read.
pub fn translate(
    mem: &mut PhysMemory,
    bank: &mut PmcBank,
    s1: Option<&S1Table>,
    s2: &S2Table,
    gva: u64,
    access: Access,
    len: u64,
) -> std::result::Result<u64, FaultKind> {
    let gpa = match s1 {
        None => gva,
        Some(t) => {
            if gva >= ADDR_SPACE_SIZE {
                return Err(FaultKind::S1PageFault { gva });
            }
            let mut node_gpa = t.root_gpa;
            let mut out = None;
            for level in (0..=2u32).rev() {
                let pte_gpa = node_gpa + level_index(gva, level) * 8;
                let pte_hpa = translate_gpa(mem, bank, s2, pte_gpa, Access::Read, 8)?;
                let pte = mem.read_u64(pte_hpa, Provenance::VDerived);
                if pte & PTE_VALID == 0 {
                    return Err(FaultKind::S1PageFault { gva });
                }
                if level == 0 {
                    if !Perms::from_pte_bits(pte).allows(access) {
                        return Err(FaultKind::S1PageFault { gva });
                    }
                    out = Some(pte_ppn(pte) * PAGE_SIZE + (gva & PAGE_OFFSET_MASK));
                    break;
                }
                if is_leaf(pte) {
                    return Err(FaultKind::S1PageFault { gva });
                }
                node_gpa = pte_ppn(pte) * PAGE_SIZE;
            }
            out.expect("stage-1 loop ends at level 0")
        }
    };
    translate_gpa(mem, bank, s2, gpa, access, len)
}

/// Writes one stage-1 leaf entry *as the guest*: every byte touched goes
/// through stage-2 translation and may fault there. Missing stage-1 nodes are
/// allocated from `alloc_gpa` (a guest-physical page pool owned by the
/// in-guest paging stub) and become visible only once their parent entry is
/// written, so a fault mid-operation leaves a table the retry can finish.
pub fn s1_map(
    mem: &mut PhysMemory,
    bank: &mut PmcBank,
    s2: &S2Table,
    s1: &mut S1Table,
    gva: u64,
    gpa: u64,
    perms: Perms,
    alloc_gpa: &mut dyn FnMut() -> Option<u64>,
) -> std::result::Result<(), S1MapError> {
    if gva & PAGE_OFFSET_MASK != 0 || gpa & PAGE_OFFSET_MASK != 0 || gva >= ADDR_SPACE_SIZE {
        return Err(S1MapError::Config);
    }
    let mut node_gpa = s1.root_gpa;
    for level in (1..=2u32).rev() {
        let pte_gpa = node_gpa + level_index(gva, level) * 8;
        let pte_hpa =
            translate_gpa(mem, bank, s2, pte_gpa, Access::Read, 8).map_err(S1MapError::Fault)?;
        let pte = mem.read_u64(pte_hpa, Provenance::VDerived);
        if pte & PTE_VALID == 0 {
            let fresh = alloc_gpa().ok_or(S1MapError::OutOfPages)?;
            // Zero the fresh node through the guest path (it may fault).
            let zero = [0u8; 64];
            for off in (0..PAGE_SIZE).step_by(64) {
                let hpa = translate_gpa(mem, bank, s2, fresh + off, Access::Write, 64)
                    .map_err(S1MapError::Fault)?;
                mem.write(hpa, &zero, Provenance::VDerived);
            }
            let pte_hpa = translate_gpa(mem, bank, s2, pte_gpa, Access::Write, 8)
                .map_err(S1MapError::Fault)?;
            mem.write_u64(pte_hpa, node_pte(fresh), Provenance::VDerived);
            node_gpa = fresh;
        } else {
            node_gpa = pte_ppn(pte) * PAGE_SIZE;
        }
    }
    let pte_gpa = node_gpa + level_index(gva, 0) * 8;
    let pte_hpa =
        translate_gpa(mem, bank, s2, pte_gpa, Access::Write, 8).map_err(S1MapError::Fault)?;
    mem.write_u64(pte_hpa, leaf_pte(gpa, perms), Provenance::VDerived);
    s1.entries.insert(gva / PAGE_SIZE, (gpa / PAGE_SIZE, perms));
    Ok(())
}

/// Failure modes of [`s1_map`]; `Fault` must be raised as the corresponding
/// VM exit / guest fault and the operation retried once resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum S1MapError {
    Fault(FaultKind),
    OutOfPages,
    Config,
}

/// Renders the stage-2 leaves, one line per mapping: `gpa->hpa perms`.
/// Stable, sorted output for golden-file tests.
pub fn dump_s2(s2: &S2Table) -> String {
    let mut out = String::new();
    for (gpa_pn, (hpa_pn, perms)) in &s2.entries {
        out.push_str(&format!(
            "{:#011x}->{:#011x} {}\n",
            gpa_pn * PAGE_SIZE,
            hpa_pn * PAGE_SIZE,
            perms
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn host_bank() -> PmcBank {
        // One all-covering v-region so walks succeed unless a test narrows it.
        let mut bank = PmcBank::new();
        pmc_program(
            &mut bank,
            PrivilegeMode::Hs,
            0,
            PmcRegion { base: 0, size: 1 << 40, perms: Perms::RWX, v_bit: true, valid: true },
        )
        .unwrap();
        bank
    }

    struct Pool {
        next: u64,
    }
    impl Pool {
        fn new(base: u64) -> Self {
            Pool { next: base }
        }
        fn alloc(&mut self) -> Option<u64> {
            let p = self.next;
            self.next += PAGE_SIZE;
            Some(p)
        }
    }

    #[test]
    fn map_then_translate_roundtrip() {
        let mut mem = PhysMemory::new();
        let mut bank = host_bank();
        let mut pool = Pool::new(0x8000_0000);
        let root = pool.alloc().unwrap();
        let mut s2 = S2Table::new(root);
        s2_map(&mut mem, &mut s2, 0x1000, 0x8010_1000, Perms::RW, &mut || pool.alloc()).unwrap();
        let hpa = translate_gpa(&mut mem, &mut bank, &s2, 0x1234, Access::Read, 1).unwrap();
        assert_eq!(hpa, 0x8010_1234);
        // Write access allowed, execute rejected.
        assert!(translate_gpa(&mut mem, &mut bank, &s2, 0x1000, Access::Write, 8).is_ok());
        assert_eq!(
            translate_gpa(&mut mem, &mut bank, &s2, 0x1000, Access::Execute, 1),
            Err(FaultKind::S2PageFault { gpa: 0x1000 })
        );
    }

    #[test]
    fn unmapped_gpa_faults_with_address() {
        let mut mem = PhysMemory::new();
        let mut bank = host_bank();
        let mut pool = Pool::new(0x8000_0000);
        let s2 = S2Table::new(pool.alloc().unwrap());
        assert_eq!(
            translate_gpa(&mut mem, &mut bank, &s2, 0x4000, Access::Read, 1),
            Err(FaultKind::S2PageFault { gpa: 0x4000 })
        );
    }

    #[test]
    fn remap_requires_unmap_first() {
        let mut mem = PhysMemory::new();
        let mut pool = Pool::new(0x8000_0000);
        let root = pool.alloc().unwrap();
        let mut s2 = S2Table::new(root);
        let mut alloc = || pool.alloc();
        s2_map(&mut mem, &mut s2, 0x1000, 0x9000_0000, Perms::RW, &mut alloc).unwrap();
        // Same mapping again: idempotent.
        s2_map(&mut mem, &mut s2, 0x1000, 0x9000_0000, Perms::RW, &mut alloc).unwrap();
        // Different HPA: rejected while live.
        assert!(matches!(
            s2_map(&mut mem, &mut s2, 0x1000, 0xa000_0000, Perms::RW, &mut alloc),
            Err(Error::RemapLive { .. })
        ));
        s2_unmap(&mut mem, &mut s2, 0x1000).unwrap();
        s2_map(&mut mem, &mut s2, 0x1000, 0xa000_0000, Perms::RW, &mut alloc).unwrap();
    }

    #[test]
    fn pmc_boundary_one_byte_past_region_violates() {
        let mut bank = PmcBank::new();
        pmc_program(
            &mut bank,
            PrivilegeMode::Hs,
            0,
            PmcRegion {
                base: 0x8000_0000,
                size: PAGE_SIZE,
                perms: Perms::RW,
                v_bit: true,
                valid: true,
            },
        )
        .unwrap();
        assert!(pmc_check(&mut bank, 0x8000_0000, PAGE_SIZE, true, Access::Read).is_ok());
        assert!(pmc_check(&mut bank, 0x8000_0fff, 1, true, Access::Read).is_ok());
        assert_eq!(
            pmc_check(&mut bank, 0x8000_1000, 1, true, Access::Read),
            Err(FaultKind::PmcViolation { hpa: 0x8000_1000 })
        );
        assert_eq!(
            pmc_check(&mut bank, 0x8000_0fff, 2, true, Access::Read),
            Err(FaultKind::PmcViolation { hpa: 0x8000_0fff })
        );
        // Host accesses ignore the bank entirely.
        assert!(pmc_check(&mut bank, 0xdead_0000, 8, false, Access::Write).is_ok());
    }

    #[test]
    fn pmc_program_rejections() {
        let mut bank = PmcBank::new();
        let region =
            PmcRegion { base: 0, size: PAGE_SIZE, perms: Perms::RW, v_bit: true, valid: true };
        assert_eq!(
            pmc_program(&mut bank, PrivilegeMode::Hu, 0, region),
            Err(PmcProgramError::IllegalAccess)
        );
        assert_eq!(
            pmc_program(&mut bank, PrivilegeMode::Hs, NUM_PMC_REGIONS, region),
            Err(PmcProgramError::BadIndex(NUM_PMC_REGIONS))
        );
        let bad = PmcRegion { base: 123, ..region };
        assert_eq!(
            pmc_program(&mut bank, PrivilegeMode::Hs, 0, bad),
            Err(PmcProgramError::Unaligned)
        );
    }

    #[test]
    fn node_page_outside_v_regions_violates_even_if_leaf_inside() {
        let mut mem = PhysMemory::new();
        // Build the table with nodes at 0x8000_0000.. and the leaf HPA at
        // 0x9000_0000, then grant only the leaf range.
        let mut pool = Pool::new(0x8000_0000);
        let root = pool.alloc().unwrap();
        let mut s2 = S2Table::new(root);
        s2_map(&mut mem, &mut s2, 0x2000, 0x9000_0000, Perms::RW, &mut || pool.alloc()).unwrap();
        let mut bank = PmcBank::new();
        pmc_program(
            &mut bank,
            PrivilegeMode::Hs,
            0,
            PmcRegion {
                base: 0x9000_0000,
                size: PAGE_SIZE,
                perms: Perms::RWX,
                v_bit: true,
                valid: true,
            },
        )
        .unwrap();
        // The very first node fetch (the root) is outside the granted range.
        assert_eq!(
            translate_gpa(&mut mem, &mut bank, &s2, 0x2000, Access::Read, 1),
            Err(FaultKind::PmcViolation { hpa: root + level_index(0x2000, 2) * 8 })
        );
    }

    #[test]
    fn two_stage_translation_with_s1_table() {
        let mut mem = PhysMemory::new();
        let mut bank = host_bank();
        let mut hpool = Pool::new(0x8000_0000);
        let root = hpool.alloc().unwrap();
        let mut s2 = S2Table::new(root);
        let mut alloc_h = || hpool.alloc();

        // Guest RAM: identity-map GPAs 0x0..0x40000 so stage-1 tables fit.
        for pn in 0..64 {
            s2_map(
                &mut mem,
                &mut s2,
                pn * PAGE_SIZE,
                0x9000_0000 + pn * PAGE_SIZE,
                Perms::RWX,
                &mut alloc_h,
            )
            .unwrap();
        }

        // Stage-1: GVA 0x7000_0000 -> GPA 0x5000, table nodes from GPA pool.
        let mut gpool = Pool::new(0x10_000);
        let s1_root = gpool.alloc().unwrap();
        let mut s1 = S1Table::new(s1_root);
        s1_map(
            &mut mem,
            &mut bank,
            &s2,
            &mut s1,
            0x7000_0000,
            0x5000,
            Perms::RW,
            &mut || gpool.alloc(),
        )
        .unwrap();

        let hpa =
            translate(&mut mem, &mut bank, Some(&s1), &s2, 0x7000_0042, Access::Read, 1).unwrap();
        assert_eq!(hpa, 0x9000_5042);

        // Unmapped GVA → stage-1 fault (to the guest, not a VM exit).
        assert_eq!(
            translate(&mut mem, &mut bank, Some(&s1), &s2, 0x7100_0000, Access::Read, 1),
            Err(FaultKind::S1PageFault { gva: 0x7100_0000 })
        );
    }

    #[test]
    fn dump_is_sorted_and_stable() {
        let mut mem = PhysMemory::new();
        let mut pool = Pool::new(0x8000_0000);
        let root = pool.alloc().unwrap();
        let mut s2 = S2Table::new(root);
        let mut alloc = || pool.alloc();
        s2_map(&mut mem, &mut s2, 0x3000, 0x9000_3000, Perms::RX, &mut alloc).unwrap();
        s2_map(&mut mem, &mut s2, 0x1000, 0x9000_1000, Perms::RW, &mut alloc).unwrap();
        assert_eq!(
            dump_s2(&s2),
            "0x000001000->0x090001000 rw\n0x000003000->0x090003000 rx\n"
        );
    }

    #[test]
    fn v_bit_clear_region_does_not_cover_guest_traffic() {
        let mut bank = PmcBank::new();
        pmc_program(
            &mut bank,
            PrivilegeMode::Hs,
            0,
            PmcRegion {
                base: 0x8000_0000,
                size: PAGE_SIZE,
                perms: Perms::RWX,
                v_bit: false,
                valid: true,
            },
        )
        .unwrap();
        assert_eq!(
            pmc_check(&mut bank, 0x8000_0000, 8, true, Access::Read),
            Err(FaultKind::PmcViolation { hpa: 0x8000_0000 })
        );
        // ...but toggling v_bit never affects host accesses.
        assert!(pmc_check(&mut bank, 0x8000_0000, 8, false, Access::Read).is_ok());
    }
}
