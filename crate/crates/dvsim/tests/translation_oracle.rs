// SPDX-License-Identifier: Apache-2.0

//! Differential tests: the radix page-table walker and the overflow-free
//! memory-check formulation must agree with independent brute-force oracles
//! (flat lookup maps, wide-integer interval arithmetic) on both translated
//! addresses and fault classification.

mod common;

use common::{ref_pmc_allows, ref_translate, RefFault, TranslationFixture};
use dvsim::hw::PrivilegeMode;
use dvsim::mmu::{pmc_check, pmc_program, translate, Access, FaultKind, Perms, PmcBank, PmcRegion};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fault_matches(real: FaultKind, want: RefFault) -> bool {
    match (real, want) {
        (FaultKind::S1PageFault { gva: a }, RefFault::S1 { gva: b }) => a == b,
        (FaultKind::S2PageFault { gpa: a }, RefFault::S2 { gpa: b }) => a == b,
        (FaultKind::PmcViolation { hpa: a }, RefFault::Pmc { hpa: b }) => a == b,
        _ => false,
    }
}

fn run_differential(seed: u64, with_s1: bool, queries: usize) -> [usize; 4] {
    let mut fx = TranslationFixture::build(seed, 256, with_s1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1FF);
    // [ok, s1, s2, pmc] outcome counts, to prove the generator reaches all.
    let mut seen = [0usize; 4];
    for _ in 0..queries {
        let (addr, access, len) = fx.random_query(&mut rng);
        let real =
            translate(&mut fx.mem, &mut fx.bank, fx.s1.as_ref(), &fx.s2, addr, access, len);
        let want =
            ref_translate(fx.flat_s1.as_ref(), &fx.flat_s2, &fx.regions, addr, access, len);
        match (real, want) {
            (Ok(a), Ok(b)) => {
                assert_eq!(a, b, "hpa mismatch for addr {addr:#x} {access:?} len {len}");
                seen[0] += 1;
            }
            (Err(e), Err(w)) => {
                assert!(
                    fault_matches(e, w),
                    "fault mismatch for addr {addr:#x} {access:?} len {len}: \
                     walker says {e:?}, oracle says {w:?}"
                );
                seen[match w {
                    RefFault::S1 { .. } => 1,
                    RefFault::S2 { .. } => 2,
                    RefFault::Pmc { .. } => 3,
                }] += 1;
            }
            (real, want) => panic!(
                "disposition mismatch for addr {addr:#x} {access:?} len {len}: \
                 walker says {real:?}, oracle says {want:?}"
            ),
        }
    }
    seen
}

#[test]
fn walker_agrees_with_flat_oracle_stage2_only() {
    for seed in 0..4 {
        let seen = run_differential(seed, false, 2500);
        assert!(seen[0] > 0 && seen[2] > 0 && seen[3] > 0, "degenerate coverage: {seen:?}");
    }
}

#[test]
fn walker_agrees_with_flat_oracle_two_stage() {
    for seed in 10..14 {
        let seen = run_differential(seed, true, 2500);
        assert!(
            seen[0] > 0 && seen[1] > 0 && seen[2] > 0 && seen[3] > 0,
            "degenerate coverage: {seen:?}"
        );
    }
}

fn perms_from_bits(bits: u8) -> Perms {
    let mut p = Perms::NONE;
    if bits & 1 != 0 {
        p = p.union(Perms::R);
    }
    if bits & 2 != 0 {
        p = p.union(Perms::W);
    }
    if bits & 4 != 0 {
        p = p.union(Perms::X);
    }
    p
}

fn region_strategy() -> impl Strategy<Value = PmcRegion> {
    (0u64..1 << 50, 1u64..1 << 16, 0u8..8, any::<bool>(), any::<bool>()).prop_map(
        |(base_pn, size_pn, pbits, v_bit, valid)| PmcRegion {
            base: base_pn * 4096,
            size: size_pn * 4096,
            perms: perms_from_bits(pbits),
            v_bit,
            valid,
        },
    )
}

proptest! {
    /// The production check (subtraction-based to dodge wraparound) and the
    /// u128 interval oracle agree everywhere: random probes plus probes
    /// pinned to every region boundary ±(0|1|len).
    #[test]
    fn memory_check_matches_interval_oracle(
        regions in proptest::collection::vec(region_strategy(), 0..5),
        raw_hpa in any::<u64>(),
        len in 1u64..=4096,
        access_idx in 0usize..3,
    ) {
        let access = [Access::Read, Access::Write, Access::Execute][access_idx];
        let mut bank = PmcBank::new();
        for (i, r) in regions.iter().enumerate() {
            pmc_program(&mut bank, PrivilegeMode::Hs, i, *r).unwrap();
        }
        let mut probes = vec![raw_hpa, raw_hpa.wrapping_add(len), u64::MAX - len, u64::MAX];
        for r in &regions {
            let end = r.base.wrapping_add(r.size);
            for p in [
                r.base,
                r.base.wrapping_sub(1),
                r.base.wrapping_sub(len),
                end,
                end.wrapping_sub(1),
                end.wrapping_sub(len),
                end.wrapping_sub(len).wrapping_add(1),
            ] {
                probes.push(p);
            }
        }
        for hpa in probes {
            let real = pmc_check(&mut bank, hpa, len, true, access).is_ok();
            let want = ref_pmc_allows(&regions, hpa, len, access);
            prop_assert_eq!(real, want, "hpa {:#x} len {}", hpa, len);
            // Host-side accesses are never constrained.
            prop_assert!(pmc_check(&mut bank, hpa, len, false, access).is_ok());
        }
    }
}
