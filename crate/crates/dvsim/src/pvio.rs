// SPDX-License-Identifier: Apache-2.0

//! Para-virtualized I/O: split-ring queues shared between guest drivers and
//! user-level backend threads.
//!
//! The authoritative ring state (indices, descriptor table, per-slot used
//! lengths) lives in *guest memory*. Backends reach it the same way they
//! reach packet buffers: by guest-physical address through the stage-2
//! walk with guest-derived provenance, so every backend byte is subject to
//! physical-memory checking and shows up in the check log. A backend can
//! therefore never touch memory its VM was not granted.
//!
//! Ring layout at `ring_gpa`, for a queue of `size` descriptors:
//!
//! | offset            | contents                                     |
//! |-------------------|----------------------------------------------|
//! | `+0`              | avail index (guest→backend, mod 2^16)        |
//! | `+8`              | used index (backend→guest, mod 2^16)         |
//! | `+16`             | descriptor table: `size` × 16 bytes          |
//! | `+16 + size*16`   | used lengths: `size` × 8 bytes               |
//!
//! A descriptor is `{gpa: u64, len_word: u64}`; bit 63 of the length word is
//! the direction (set = the device *reads* the buffer, clear = the device
//! writes it). Completion order equals ring order, so a used ring would be
//! redundant: the used index plus the per-slot length array carries the same
//! information.

use std::collections::VecDeque;

use crate::mem::{PhysMemory, Provenance, PAGE_OFFSET_MASK, PAGE_SIZE};
use crate::mmu::{translate_gpa, Access, FaultKind, PmcBank, S2Table};

/// Descriptor length-word bit: the device reads this buffer (guest→device).
pub const DESC_DEVICE_READS: u64 = 1 << 63;

/// Device register offsets inside an MMIO window.
pub const REG_STATUS: u64 = 0;
pub const REG_DATA: u64 = 8;
pub const REG_DOORBELL: u64 = 16;

/// Block sector size in bytes.
pub const SECTOR_SIZE: u64 = 512;

/// How many undeliverable packets a net backend holds before dropping.
pub const HELD_PACKETS_CAP: usize = 64;

/// Deterministic payload byte `off` of the packet with payload seed `seed`.
pub fn packet_byte(seed: u64, off: u64) -> u8 {
    seed.wrapping_mul(131).wrapping_add(off.wrapping_mul(17)).wrapping_add(7) as u8
}

/// Deterministic content byte `off` of block sector `sector` (test data).
pub fn sector_byte(sector: u64, off: u64) -> u8 {
    sector.wrapping_mul(97).wrapping_add(off).wrapping_add(3) as u8
}

/// Copies `bytes` into guest memory at `gpa`, page chunk by page chunk,
/// through the stage-2 walk with guest-derived provenance.
pub fn guest_write(
    mem: &mut PhysMemory,
    bank: &mut PmcBank,
    s2: &S2Table,
    gpa: u64,
    bytes: &[u8],
) -> Result<(), FaultKind> {
    let mut off = 0usize;
    while off < bytes.len() {
        let chunk_gpa = gpa + off as u64;
        let room = (PAGE_SIZE - (chunk_gpa & PAGE_OFFSET_MASK)) as usize;
        let n = room.min(bytes.len() - off);
        let hpa = translate_gpa(mem, bank, s2, chunk_gpa, Access::Write, n as u64)?;
        mem.write(hpa, &bytes[off..off + n], Provenance::VDerived);
        off += n;
    }
    Ok(())
}

/// Reads `buf.len()` bytes of guest memory at `gpa`; see [`guest_write`].
pub fn guest_read(
    mem: &mut PhysMemory,
    bank: &mut PmcBank,
    s2: &S2Table,
    gpa: u64,
    buf: &mut [u8],
) -> Result<(), FaultKind> {
    let mut off = 0usize;
    while off < buf.len() {
        let chunk_gpa = gpa + off as u64;
        let room = (PAGE_SIZE - (chunk_gpa & PAGE_OFFSET_MASK)) as usize;
        let n = room.min(buf.len() - off);
        let hpa = translate_gpa(mem, bank, s2, chunk_gpa, Access::Read, n as u64)?;
        mem.read(hpa, &mut buf[off..off + n], Provenance::VDerived);
        off += n;
    }
    Ok(())
}

fn guest_read_u64(
    mem: &mut PhysMemory,
    bank: &mut PmcBank,
    s2: &S2Table,
    gpa: u64,
) -> Result<u64, FaultKind> {
    let mut buf = [0u8; 8];
    guest_read(mem, bank, s2, gpa, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn guest_write_u64(
    mem: &mut PhysMemory,
    bank: &mut PmcBank,
    s2: &S2Table,
    gpa: u64,
    value: u64,
) -> Result<(), FaultKind> {
    guest_write(mem, bank, s2, gpa, &value.to_le_bytes())
}

/// In-memory footprint of a ring and the buffer area conventionally packed
/// behind it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingLayout {
    pub desc_base: u64,
    pub used_len_base: u64,
    /// First buffer GPA offset (page-aligned, past the ring structures).
    pub bufs_base: u64,
    /// Total bytes including `size` buffers of `buf_len` each.
    pub total_bytes: u64,
}

/// Layout offsets (relative to the ring base GPA) for `size` descriptors and
/// same-count buffers of `buf_len` bytes.
pub fn ring_layout(size: u16, buf_len: u64) -> RingLayout {
    let desc_base = 16;
    let used_len_base = desc_base + size as u64 * 16;
    let structs_end = used_len_base + size as u64 * 8;
    let bufs_base = (structs_end + PAGE_SIZE - 1) & !PAGE_OFFSET_MASK;
    RingLayout { desc_base, used_len_base, bufs_base, total_bytes: bufs_base + size as u64 * buf_len }
}

/// Rejections from the guest-side post operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostError {
    /// `avail - used == size`: every slot is outstanding.
    RingFull,
    Fault(FaultKind),
}

/// One split-ring queue. Both sides' cursors live here for the simulation;
/// the indices and descriptors themselves are in guest memory.
#[derive(Debug, Clone)]
pub struct VirtQueue {
    pub ring_gpa: u64,
    /// Number of descriptors; a power of two.
    pub size: u16,
    /// Backend cursor: first avail entry not yet taken.
    last_seen_avail: u16,
    /// Guest cursor: first used entry not yet reaped.
    last_seen_used: u16,
    /// vCPU that receives this queue's interrupts.
    pub target_vcpu: usize,
}

impl VirtQueue {
    pub fn new(ring_gpa: u64, size: u16, target_vcpu: usize) -> VirtQueue {
        assert!(size.is_power_of_two(), "ring size must be a power of two");
        VirtQueue { ring_gpa, size, last_seen_avail: 0, last_seen_used: 0, target_vcpu }
    }

    pub fn avail(
        &self,
        mem: &mut PhysMemory,
        bank: &mut PmcBank,
        s2: &S2Table,
    ) -> Result<u16, FaultKind> {
        Ok(guest_read_u64(mem, bank, s2, self.ring_gpa)? as u16)
    }

    pub fn used(
        &self,
        mem: &mut PhysMemory,
        bank: &mut PmcBank,
        s2: &S2Table,
    ) -> Result<u16, FaultKind> {
        Ok(guest_read_u64(mem, bank, s2, self.ring_gpa + 8)? as u16)
    }

    fn desc_gpa(&self, slot: u16) -> u64 {
        self.ring_gpa + 16 + (slot % self.size) as u64 * 16
    }

    fn used_len_gpa(&self, slot: u16) -> u64 {
        self.ring_gpa + 16 + self.size as u64 * 16 + (slot % self.size) as u64 * 8
    }

    /// Guest driver: writes the index words to zero. Run once before use.
    pub fn guest_init(
        &mut self,
        mem: &mut PhysMemory,
        bank: &mut PmcBank,
        s2: &S2Table,
    ) -> Result<(), FaultKind> {
        guest_write_u64(mem, bank, s2, self.ring_gpa, 0)?;
        guest_write_u64(mem, bank, s2, self.ring_gpa + 8, 0)?;
        self.last_seen_avail = 0;
        self.last_seen_used = 0;
        Ok(())
    }

    /// Guest driver: posts one buffer, advancing the avail index.
    pub fn guest_post(
        &self,
        mem: &mut PhysMemory,
        bank: &mut PmcBank,
        s2: &S2Table,
        gpa: u64,
        len: u64,
        device_reads: bool,
    ) -> Result<(), PostError> {
        let avail = self.avail(mem, bank, s2).map_err(PostError::Fault)?;
        let used = self.used(mem, bank, s2).map_err(PostError::Fault)?;
        if avail.wrapping_sub(used) >= self.size {
            return Err(PostError::RingFull);
        }
        let dir = if device_reads { DESC_DEVICE_READS } else { 0 };
        guest_write_u64(mem, bank, s2, self.desc_gpa(avail), gpa).map_err(PostError::Fault)?;
        guest_write_u64(mem, bank, s2, self.desc_gpa(avail) + 8, len | dir)
            .map_err(PostError::Fault)?;
        guest_write_u64(mem, bank, s2, self.ring_gpa, avail.wrapping_add(1) as u64)
            .map_err(PostError::Fault)
    }

    /// Backend: the next posted-but-untaken descriptor, without consuming it.
    pub fn backend_peek(
        &self,
        mem: &mut PhysMemory,
        bank: &mut PmcBank,
        s2: &S2Table,
    ) -> Result<Option<Descriptor>, FaultKind> {
        let avail = self.avail(mem, bank, s2)?;
        if self.last_seen_avail == avail {
            return Ok(None);
        }
        let slot = self.last_seen_avail;
        let gpa = guest_read_u64(mem, bank, s2, self.desc_gpa(slot))?;
        let len_word = guest_read_u64(mem, bank, s2, self.desc_gpa(slot) + 8)?;
        Ok(Some(Descriptor {
            slot,
            gpa,
            len: len_word & !DESC_DEVICE_READS,
            device_reads: len_word & DESC_DEVICE_READS != 0,
        }))
    }

    /// Backend: commits the peeked descriptor as taken.
    pub fn backend_advance(&mut self) {
        self.last_seen_avail = self.last_seen_avail.wrapping_add(1);
    }

    /// Backend: completes a taken descriptor, publishing `len` bytes and
    /// advancing the used index. Completion follows ring order.
    pub fn backend_complete(
        &self,
        mem: &mut PhysMemory,
        bank: &mut PmcBank,
        s2: &S2Table,
        slot: u16,
        len: u64,
    ) -> Result<(), FaultKind> {
        let used = self.used(mem, bank, s2)?;
        debug_assert_eq!(used, slot, "completion out of ring order");
        let avail = self.avail(mem, bank, s2)?;
        debug_assert_ne!(used, avail, "used would overtake avail");
        guest_write_u64(mem, bank, s2, self.used_len_gpa(slot), len)?;
        guest_write_u64(mem, bank, s2, self.ring_gpa + 8, used.wrapping_add(1) as u64)
    }

    /// Guest driver: reaps completions it has not seen yet.
    pub fn guest_consume_used(
        &mut self,
        mem: &mut PhysMemory,
        bank: &mut PmcBank,
        s2: &S2Table,
    ) -> Result<Vec<UsedEntry>, FaultKind> {
        let used = self.used(mem, bank, s2)?;
        let mut out = Vec::new();
        while self.last_seen_used != used {
            let slot = self.last_seen_used;
            let gpa = guest_read_u64(mem, bank, s2, self.desc_gpa(slot))?;
            let len = guest_read_u64(mem, bank, s2, self.used_len_gpa(slot))?;
            out.push(UsedEntry { slot, gpa, len });
            self.last_seen_used = self.last_seen_used.wrapping_add(1);
        }
        Ok(out)
    }
}

/// A posted buffer as the backend sees it. `slot` is the free-running
/// position in post order; storage wraps modulo the ring size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Descriptor {
    pub slot: u16,
    pub gpa: u64,
    pub len: u64,
    pub device_reads: bool,
}

/// A completion as the guest reaps it. `slot` matches the `Descriptor` it
/// answers: a free-running position, not a storage index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UsedEntry {
    pub slot: u16,
    pub gpa: u64,
    pub len: u64,
}

/// One scheduled inbound packet. `at` is relative to the schedule anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketSpec {
    pub at: u64,
    pub len: u64,
    /// Seeds the payload formula ([`packet_byte`]).
    pub seed: u64,
}

/// `count` packets of `len` bytes, one every `gap` cycles starting `gap`
/// after the anchor, seeded by arrival order.
pub fn default_schedule(count: u64, gap: u64, len: u64) -> Vec<PacketSpec> {
    (0..count).map(|i| PacketSpec { at: (i + 1) * gap, len, seed: i }).collect()
}

/// Polling network backend: copies scheduled "wire" packets into guest-posted
/// receive buffers and asks for one guest notification per non-empty batch.
#[derive(Debug)]
pub struct NetBackend {
    pub queue: VirtQueue,
    pub irq: u64,
    schedule: Vec<PacketSpec>,
    cursor: usize,
    anchor: Option<u64>,
    held: VecDeque<PacketSpec>,
    pub held_cap: usize,
    pub delivered: u64,
    pub dropped_overflow: u64,
    pub dropped_oversize: u64,
}

impl NetBackend {
    pub fn new(queue: VirtQueue, irq: u64, schedule: Vec<PacketSpec>) -> NetBackend {
        NetBackend {
            queue,
            irq,
            schedule,
            cursor: 0,
            anchor: None,
            held: VecDeque::new(),
            held_cap: HELD_PACKETS_CAP,
            delivered: 0,
            dropped_overflow: 0,
            dropped_oversize: 0,
        }
    }

    /// Anchors the schedule: packet `i` arrives at `cycle + schedule[i].at`.
    /// The first call wins; later calls are ignored.
    pub fn anchor(&mut self, cycle: u64) {
        self.anchor.get_or_insert(cycle);
    }

    pub fn anchored(&self) -> bool {
        self.anchor.is_some()
    }

    /// All packets either delivered or dropped?
    pub fn exhausted(&self) -> bool {
        self.cursor == self.schedule.len() && self.held.is_empty()
    }

    /// Absolute cycle when the backend next has work, if any: immediately if
    /// packets are held, else the next scheduled arrival.
    pub fn next_due(&self) -> Option<u64> {
        if !self.held.is_empty() {
            return self.anchor;
        }
        let anchor = self.anchor?;
        self.schedule.get(self.cursor).map(|p| anchor + p.at)
    }

    /// One poll pass at `now`: pulls every due packet from the wire, copies
    /// as many as descriptors allow into guest buffers, completes them, and
    /// reports how many landed. The caller sends a single guest notification
    /// for any nonzero return — one notify per batch, however large.
    pub fn poll(
        &mut self,
        mem: &mut PhysMemory,
        bank: &mut PmcBank,
        s2: &S2Table,
        now: u64,
    ) -> Result<usize, FaultKind> {
        if let Some(anchor) = self.anchor {
            while let Some(p) = self.schedule.get(self.cursor) {
                if anchor + p.at > now {
                    break;
                }
                if self.held.len() == self.held_cap {
                    self.dropped_overflow += 1;
                } else {
                    self.held.push_back(*p);
                }
                self.cursor += 1;
            }
        }
        let mut landed = 0usize;
        while let Some(pkt) = self.held.front().copied() {
            let Some(desc) = self.queue.backend_peek(mem, bank, s2)? else {
                break;
            };
            debug_assert!(!desc.device_reads, "receive descriptors are device-write");
            if pkt.len > desc.len {
                self.dropped_oversize += 1;
                self.held.pop_front();
                continue;
            }
            let payload: Vec<u8> = (0..pkt.len).map(|off| packet_byte(pkt.seed, off)).collect();
            // Every write below may stage-2 fault; the caller resolves the
            // fault and retries the whole poll. Advance the ring cursor only
            // once the completion has fully landed, so a retried poll re-runs
            // the same (idempotent) delivery instead of skipping a slot.
            guest_write(mem, bank, s2, desc.gpa, &payload)?;
            self.queue.backend_complete(mem, bank, s2, desc.slot, pkt.len)?;
            self.queue.backend_advance();
            self.held.pop_front();
            self.delivered += 1;
            landed += 1;
        }
        Ok(landed)
    }
}

/// Block backend over a flat in-memory image of 512-byte sectors. Requests
/// are consumed in ring order; the sector cursor advances one sector per 512
/// payload bytes, so a drained queue reads/writes sequential sectors.
#[derive(Debug)]
pub struct BlkBackend {
    pub queue: VirtQueue,
    pub irq: u64,
    pub image: Vec<u8>,
    pub next_sector: u64,
    pub kicks: u64,
    pub out_of_range: u64,
}

impl BlkBackend {
    pub fn new(queue: VirtQueue, irq: u64, sectors: u64) -> BlkBackend {
        BlkBackend {
            queue,
            irq,
            image: vec![0; (sectors * SECTOR_SIZE) as usize],
            next_sector: 0,
            kicks: 0,
            out_of_range: 0,
        }
    }

    /// Doorbell from the guest (spurious kicks are fine).
    pub fn kick(&mut self) {
        self.kicks += 1;
    }

    /// Drains every posted request. Device-read descriptors store guest bytes
    /// into the image (disk write); device-write descriptors fill the guest
    /// buffer from the image (disk read). Returns how many were consumed.
    pub fn drain(
        &mut self,
        mem: &mut PhysMemory,
        bank: &mut PmcBank,
        s2: &S2Table,
    ) -> Result<usize, FaultKind> {
        let mut consumed = 0usize;
        while let Some(desc) = self.queue.backend_peek(mem, bank, s2)? {
            // Any guest access below may stage-2 fault, after which the caller
            // retries the whole drain. Nothing is allowed to move (cursor,
            // sector position, counters) until the completion has landed, so a
            // retried iteration repeats the same idempotent transfer.
            let sectors = desc.len / SECTOR_SIZE;
            let byte_base = self.next_sector * SECTOR_SIZE;
            let in_range = desc.len % SECTOR_SIZE == 0
                && byte_base + desc.len <= self.image.len() as u64;
            if !in_range {
                self.queue.backend_complete(mem, bank, s2, desc.slot, 0)?;
                self.queue.backend_advance();
                self.out_of_range += 1;
                consumed += 1;
                continue;
            }
            let range = byte_base as usize..(byte_base + desc.len) as usize;
            if desc.device_reads {
                let mut buf = vec![0u8; desc.len as usize];
                guest_read(mem, bank, s2, desc.gpa, &mut buf)?;
                self.image[range].copy_from_slice(&buf);
            } else {
                let buf = self.image[range].to_vec();
                guest_write(mem, bank, s2, desc.gpa, &buf)?;
            }
            self.queue.backend_complete(mem, bank, s2, desc.slot, desc.len)?;
            self.queue.backend_advance();
            self.next_sector += sectors;
            consumed += 1;
        }
        Ok(consumed)
    }
}

/// Console device: a status register that always reads ready, and a data
/// register that appends written bytes to a host-side buffer.
#[derive(Debug, Default)]
pub struct ConsoleDevice {
    pub output: Vec<u8>,
    pub reads: u64,
    pub writes: u64,
}

impl ConsoleDevice {
    pub fn mmio_read(&mut self, offset: u64) -> u64 {
        self.reads += 1;
        match offset {
            REG_STATUS => 1,
            _ => 0,
        }
    }

    pub fn mmio_write(&mut self, offset: u64, value: u64) {
        self.writes += 1;
        if offset == REG_DATA {
            self.output.push(value as u8);
        }
    }
}
