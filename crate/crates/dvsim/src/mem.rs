// SPDX-License-Identifier: Apache-2.0

//! Sparse simulated physical memory.
//!
//! Pages materialize zero-filled on first touch, so a multi-gigabyte host RAM
//! extent costs only what the simulation actually writes. Every access carries
//! a [`Provenance`] tag telling whether it flowed through guest (stage-2)
//! translation; the confinement test suites flip on [`PhysMemory::record_v`]
//! to capture exactly which host-physical bytes guest-derived traffic reached.

use std::collections::HashMap;

/// Simulated page size in bytes. Stage-1 and stage-2 tables, the physical
/// memory checker, and the grant allocator all speak in these units.
pub const PAGE_SIZE: u64 = 4096;

/// Mask selecting the offset-within-page bits of an address.
pub const PAGE_OFFSET_MASK: u64 = PAGE_SIZE - 1;

/// Rounds `len` up to a whole number of pages.
pub fn pages_for(len: u64) -> u64 {
    len.div_ceil(PAGE_SIZE)
}

/// Who is touching physical memory.
///
/// `VDerived` marks traffic whose address came out of stage-2 translation
/// (guest loads/stores, stage-1 and stage-2 table-node fetches, backend copies
/// into guest buffers). `Host` marks kernel and hypervisor accesses through
/// their own mappings, which the physical memory checker never restricts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Host,
    VDerived,
}

/// One recorded guest-derived access, kept by the confinement instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VAccess {
    pub hpa: u64,
    pub len: u64,
    pub write: bool,
}

/// Byte-addressed sparse physical memory.
#[derive(Debug, Default)]
pub struct PhysMemory {
    pages: HashMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
    /// When `Some`, every `Provenance::VDerived` access is appended here.
    record_v: Option<Vec<VAccess>>,
}

impl PhysMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts recording guest-derived accesses (used by the confinement and
    /// coverage suites). Any previously recorded accesses are discarded.
    pub fn record_v(&mut self, on: bool) {
        self.record_v = if on { Some(Vec::new()) } else { None };
    }

    /// Recorded guest-derived accesses, if recording is on.
    pub fn v_accesses(&self) -> &[VAccess] {
        self.record_v.as_deref().unwrap_or(&[])
    }

    /// Number of pages that have been materialized.
    pub fn resident_pages(&self) -> usize {
        self.pages.len()
    }

    fn note(&mut self, hpa: u64, len: u64, write: bool, prov: Provenance) {
        if prov == Provenance::VDerived {
            if let Some(log) = &mut self.record_v {
                log.push(VAccess { hpa, len, write });
            }
        }
    }

    fn page(&mut self, pn: u64) -> &mut [u8; PAGE_SIZE as usize] {
        self.pages
            .entry(pn)
            .or_insert_with(|| Box::new([0u8; PAGE_SIZE as usize]))
    }

    /// Reads `buf.len()` bytes starting at `hpa`. Accesses may span pages.
    pub fn read(&mut self, hpa: u64, buf: &mut [u8], prov: Provenance) {
        self.note(hpa, buf.len() as u64, false, prov);
        let mut addr = hpa;
        let mut done = 0;
        while done < buf.len() {
            let pn = addr / PAGE_SIZE;
            let off = (addr & PAGE_OFFSET_MASK) as usize;
            let n = usize::min(buf.len() - done, PAGE_SIZE as usize - off);
            match self.pages.get(&pn) {
                Some(p) => buf[done..done + n].copy_from_slice(&p[off..off + n]),
                None => buf[done..done + n].fill(0),
            }
            addr += n as u64;
            done += n;
        }
    }

    /// Writes `buf` starting at `hpa`. Accesses may span pages.
    pub fn write(&mut self, hpa: u64, buf: &[u8], prov: Provenance) {
        self.note(hpa, buf.len() as u64, true, prov);
        let mut addr = hpa;
        let mut done = 0;
        while done < buf.len() {
            let pn = addr / PAGE_SIZE;
            let off = (addr & PAGE_OFFSET_MASK) as usize;
            let n = usize::min(buf.len() - done, PAGE_SIZE as usize - off);
            self.page(pn)[off..off + n].copy_from_slice(&buf[done..done + n]);
            addr += n as u64;
            done += n;
        }
    }

    pub fn read_u64(&mut self, hpa: u64, prov: Provenance) -> u64 {
        let mut b = [0u8; 8];
        self.read(hpa, &mut b, prov);
        u64::from_le_bytes(b)
    }

    pub fn write_u64(&mut self, hpa: u64, value: u64, prov: Provenance) {
        self.write(hpa, &value.to_le_bytes(), prov);
    }

    /// Zeroes one whole page (used when handing freshly allocated pages to a
    /// page-table walker that must not see stale bits).
    pub fn zero_page(&mut self, hpa: u64) {
        debug_assert_eq!(hpa & PAGE_OFFSET_MASK, 0);
        self.pages.remove(&(hpa / PAGE_SIZE));
    }
}
